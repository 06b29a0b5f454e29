import json

import numpy as np
import pytest

from feature_fixtures import one_slice_object, uniform_spine
from spinetrack import cli, io
from spinetrack.model import TrackingConfig

SMALL = ["--n-tracks", "5", "--depth", "12", "--width", "192", "--height", "192"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    assert run("synth", "--seed", 7, "--timepoints", 4, "--drift", 0, "--time-shift", 3, *SMALL, "-o", out / "ds") == 0
    return out / "ds"


def stacks(ds, n=4):
    return [a for t in range(n) for a in ("--stack", ds / "stacks" / f"t{t}")]


def test_synth_is_deterministic(tmp_path, dataset):
    assert run("synth", "--seed", 7, "--timepoints", 4, "--drift", 0, "--time-shift", 3, *SMALL, "-o", tmp_path / "b") == 0
    for name in ("gt_detections.json", "embeddings.json", "synth.json", "stacks/t3/z0005.pgm", "stacks/t0/manifest.json"):
        assert (dataset / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_pipeline_end_to_end(tmp_path, dataset, capsys):
    gt = dataset / "gt_detections.json"
    objs = tmp_path / "objs.json"
    assert run("depth-track", "--detections", gt, *stacks(dataset), "--lambda-sp", 1, "--lambda-app", 0,
               "--threshold", 0.5, "-o", objs) == 0
    assert "objects" in capsys.readouterr().err
    tracks = tmp_path / "tracks.json"
    assert run("time-track", "--objects", objs, *stacks(dataset), "-o", tracks) == 0
    loaded = io.load_tracks(tracks)
    assert max(len(t.assignments) for t in loaded) == 4

    report = tmp_path / "r.json"
    assert run("eval", "--mode", "depth", "--gt", gt, "--pred", objs, "-o", report) == 0
    assert "HOTA" in capsys.readouterr().out
    assert io.load_report(report).hota > 90
    assert run("eval", "--mode", "time", "--gt", gt, "--pred", tracks, "--objects", objs, "-o", report) == 0
    assert io.load_report(report).hota > 80

    feats = tmp_path / "f.csv"
    assert run("features", "--objects", objs, *stacks(dataset), "--tracks", tracks, "-o", feats) == 0
    assert len(io.load_features(feats)) == len(io.load_objects(objs))


def test_subcommands_byte_identical_on_rerun(tmp_path, dataset):
    gt = dataset / "gt_detections.json"
    for k in (1, 2):
        assert run("depth-track", "--detections", gt, *stacks(dataset), "-o", tmp_path / f"o{k}.json") == 0
        assert run("time-track", "--objects", tmp_path / "o1.json", *stacks(dataset), "-o", tmp_path / f"t{k}.json") == 0
        assert run("align", "--stack", dataset / "stacks/t1", "--reference", dataset / "stacks/t0",
                   "--field-out", tmp_path / f"f{k}.json", "-o", tmp_path / f"a{k}.json") == 0
        assert run("eval", "--mode", "depth", "--gt", gt, "--pred", tmp_path / "o1.json", "-o", tmp_path / f"r{k}.json") == 0
        assert run("features", "--objects", tmp_path / "o1.json", *stacks(dataset), "-o", tmp_path / f"c{k}.csv") == 0
    for stem, ext in (("o", "json"), ("t", "json"), ("f", "json"), ("a", "json"), ("r", "json"), ("c", "csv")):
        assert (tmp_path / f"{stem}1.{ext}").read_bytes() == (tmp_path / f"{stem}2.{ext}").read_bytes(), stem


def test_thread_cap_does_not_change_output(tmp_path, dataset, monkeypatch):
    gt = dataset / "gt_detections.json"
    monkeypatch.setenv("SPINETRACK_THREADS", "1")
    assert run("depth-track", "--detections", gt, *stacks(dataset), "-o", tmp_path / "a.json") == 0
    monkeypatch.setenv("SPINETRACK_THREADS", "4")
    assert run("depth-track", "--detections", gt, *stacks(dataset), "-o", tmp_path / "b.json") == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    monkeypatch.setenv("SPINETRACK_THREADS", "zero")
    assert run("depth-track", "--detections", gt, *stacks(dataset), "-o", tmp_path / "c.json") == 2


def test_align_reports_z_offset_and_field(tmp_path, dataset):
    assert run("align", "--stack", dataset / "stacks/t1", "--reference", dataset / "stacks/t0",
               "--field-out", tmp_path / "f.json", "-o", tmp_path / "a.json") == 0
    offsets, stack_id, z = io.read_alignment(tmp_path / "a.json")
    assert set(offsets.offsets) == {(0, 0)} and z.shift == 0
    meta = json.loads((dataset / "synth.json").read_text())
    true_shift = np.subtract(meta["xy_shifts"][1], meta["xy_shifts"][0])
    field = io.load_field(tmp_path / "f.json")
    assert np.abs(np.median(field.vectors.reshape(-1, 2), axis=0) - true_shift).max() <= 1
    assert run("align", "--stack", dataset / "stacks/t1", "--field-out", tmp_path / "g.json", "-o", tmp_path / "b.json") == 2


def test_usage_errors(tmp_path, dataset, capsys):
    gt = dataset / "gt_detections.json"
    assert run("depth-track", "--detections", gt, "--stack", tmp_path / "nope", "-o", tmp_path / "x.json") == 2
    assert "not found" in capsys.readouterr().err
    assert run("depth-track", "--detections", gt, "--variant", "sp+app", *stacks(dataset, 1), "-o", tmp_path / "x.json") == 2
    assert "embeddings required" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        run("depth-track", "--detections", gt, "--bogus", "-o", tmp_path / "x.json")
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        run("frobnicate")
    assert exc.value.code == 2


def test_processing_error_exit_code(tmp_path, dataset):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps([{"id": "a", "stack_id": "s", "timepoint": 0, "z": 0, "bbox": [5, 5, 5, 9]}]))
    assert run("depth-track", "--detections", bad, "--no-align", "-o", tmp_path / "x.json") == 1
    # detections of all timepoints but a stack for only one of them
    gt = dataset / "gt_detections.json"
    assert run("depth-track", "--detections", gt, *stacks(dataset, 1), "-o", tmp_path / "x.json") == 1


def test_help_documents_every_flag(capsys):
    parser = cli.build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    for name, p in sub.choices.items():
        text = p.format_help()
        for action in p._actions:
            for opt in action.option_strings:
                assert opt in text, (name, opt)
            if action.option_strings and action.dest != "help":
                assert action.help, (name, action.dest)
    assert set(sub.choices) == {"align", "depth-track", "time-track", "features", "eval", "synth"}


def test_config_precedence(tmp_path):
    conf = tmp_path / "c.toml"
    conf.write_text("[tracking]\nmatch_threshold_depth = 0.3\ngap_bridge = 1\n[depth_track]\nlambda_sp = 2.0\n")
    parser = cli.build_parser()
    args = parser.parse_args(["depth-track", "--detections", "d", "-o", "o", "--config", str(conf), "--threshold", "0.4"])
    cfg = cli._tracking_config(args, "depth_track", {}, {"threshold": "match_threshold_depth", "lambda_sp": "lambda_sp"})
    assert (cfg.match_threshold_depth, cfg.gap_bridge, cfg.lambda_sp, cfg.lambda_app) == (0.4, 1, 2.0, 0.0)
    assert TrackingConfig().match_threshold_depth == 0.5
    conf.write_text("[tracking]\nnot_a_key = 1\n")
    with pytest.raises(cli.UsageError):
        cli._tracking_config(args, "depth_track", {}, {})


def test_time_track_single_timepoint(tmp_path, dataset):
    objs = tmp_path / "o.json"
    assert run("depth-track", "--detections", dataset / "gt_detections.json", *stacks(dataset), "-o", objs) == 0
    first = [o for o in io.load_objects(objs) if o.timepoint == 0]
    io.save_objects(tmp_path / "o0.json", first)
    assert run("time-track", "--objects", tmp_path / "o0.json", "-o", tmp_path / "t.json") == 0
    tracks = io.load_tracks(tmp_path / "t.json")
    assert len(tracks) == len(first) and all(len(t.assignments) == 1 for t in tracks)


def test_time_track_gap_is_an_error(tmp_path, dataset):
    objs = tmp_path / "o.json"
    assert run("depth-track", "--detections", dataset / "gt_detections.json", *stacks(dataset), "-o", objs) == 0
    io.save_objects(tmp_path / "gap.json", [o for o in io.load_objects(objs) if o.timepoint != 1])
    assert run("time-track", "--objects", tmp_path / "gap.json", "-o", tmp_path / "t.json") == 1


def test_field_flag_skips_estimation(tmp_path, dataset, monkeypatch):
    objs = tmp_path / "o.json"
    assert run("depth-track", "--detections", dataset / "gt_detections.json", *stacks(dataset), "-o", objs) == 0
    fields = []
    for t in range(3):
        path = tmp_path / f"f{t}.json"
        assert run("align", "--stack", dataset / f"stacks/t{t + 1}", "--reference", dataset / f"stacks/t{t}",
                   "--field-out", path, "-o", tmp_path / "a.json") == 0
        fields += ["--field", path]

    def boom(*a, **k):
        raise AssertionError("estimation should be skipped")

    monkeypatch.setattr(cli, "estimate_deformation", boom)
    assert run("time-track", "--objects", objs, *fields, "-o", tmp_path / "t.json") == 0
    assert run("time-track", "--objects", objs, "--field", fields[1], "-o", tmp_path / "t.json") == 2


def test_eval_detection_protocol(tmp_path, capsys):
    gt = [("g0", (0, 0, 10, 10)), ("g1", (30, 0, 40, 10)), ("g2", (60, 0, 70, 10))]
    pred = [("p0", (3, 0, 13, 10)), ("p1", (33.5, 0, 43.5, 10))]  # IoM 0.70 and 0.65
    rec = lambda i, b: {"id": i, "stack_id": "s", "timepoint": 0, "z": 0, "bbox": list(b), "confidence": 1.0}
    (tmp_path / "g.json").write_text(json.dumps([rec(*g) for g in gt]))
    (tmp_path / "p.json").write_text(json.dumps([rec(*p) for p in pred]))
    assert run("eval", "--mode", "detection", "--gt", tmp_path / "g.json", "--pred", tmp_path / "p.json",
               "--sim", "iom", "--threshold", 0.7) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["precision"] == 0.5 and doc["recall"] == pytest.approx(1 / 3) and doc["fn"] == 2


def test_features_csv_matches_closed_form(tmp_path):
    img, box, expected = uniform_spine(600.0)
    obj, stack = one_slice_object(img, box)
    io.save_stack(stack, tmp_path / "s")
    io.save_objects(tmp_path / "o.json", [obj])
    assert run("features", "--objects", tmp_path / "o.json", "--stack", tmp_path / "s", "-o", tmp_path / "f.csv") == 0
    (feat,) = io.load_features(tmp_path / "f.csv")
    assert feat.size_au == pytest.approx(expected, rel=0.02)
