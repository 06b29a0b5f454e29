import json
import math

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from conftest import det, stack_of
from spinetrack import io
from spinetrack.features import SpineFeatures
from spinetrack.model import BBox, EvalReport, TimeTrack, build_object
from spinetrack.volume import DeformationField, SliceOffsets, ZOffset

tmp_settings = settings(suppress_health_check=[HealthCheck.function_scoped_fixture], max_examples=30)


def test_pgm_known_bytes(tmp_path):
    img = np.array([[0, 1, 256], [4660, 65535, 2]], dtype=np.uint16)
    io.write_pgm(tmp_path / "a.pgm", img)
    expected = b"P5\n3 2\n65535\n" + bytes([0, 0, 0, 1, 1, 0, 0x12, 0x34, 0xFF, 0xFF, 0, 2])
    assert (tmp_path / "a.pgm").read_bytes() == expected
    np.testing.assert_array_equal(io.read_pgm(tmp_path / "a.pgm"), img)


def test_pgm_header_comments_and_8bit(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n\x07\xff")
    np.testing.assert_array_equal(io.read_pgm(tmp_path / "c.pgm"), [[7, 255]])
    (tmp_path / "p2.pgm").write_bytes(b"P2\n1 1\n255\n7\n")
    with pytest.raises(io.FormatError):
        io.read_pgm(tmp_path / "p2.pgm")


def test_stack_round_trip_and_errors(tmp_path):
    pixels = np.arange(48, dtype=np.uint16).reshape(3, 4, 4) * 1000
    stack = stack_of(pixels, "fov", 2)
    io.save_stack(stack, tmp_path / "s")
    loaded = io.load_stack(tmp_path / "s")
    assert loaded == stack and loaded.depth == 3

    (tmp_path / "s" / "z0002.pgm").unlink()
    with pytest.raises(io.FormatError, match="missing slice"):
        io.load_stack(tmp_path / "s")

    io.save_stack(stack, tmp_path / "t")
    io.write_pgm(tmp_path / "t" / "z0001.pgm", np.zeros((5, 4), np.uint16))
    with pytest.raises(io.FormatError, match="differ"):
        io.load_stack(tmp_path / "t")


def test_detection_records(tmp_path):
    path = tmp_path / "d.json"
    rec = {"id": "a", "stack_id": "s", "timepoint": 0, "z": 1, "bbox": [1, 2, 3, 4], "confidence": 0.9}
    path.write_text(json.dumps([rec]))
    (d,) = io.load_detections(path)
    assert d.bbox == BBox(1, 2, 3, 4) and d.gt_object_id is None
    path.write_text(json.dumps([{**rec, "gt_object_id": "g7"}]))
    assert io.load_detections(path)[0].gt_object_id == "g7"
    path.write_text(json.dumps([{**rec, "bbox": [5, 5, 5, 9]}]))
    with pytest.raises(io.FormatError):
        io.load_detections(path)
    path.write_text(json.dumps([{"id": "a"}]))
    with pytest.raises(io.FormatError):
        io.load_detections(path)


def test_empty_tracks_is_empty_array(tmp_path):
    io.save_tracks(tmp_path / "t.json", [])
    assert json.loads((tmp_path / "t.json").read_text()) == []


def round_trip_bytes(tmp_path, save, load, data, name="f"):
    a, b = tmp_path / f"{name}1", tmp_path / f"{name}2"
    save(a, data)
    loaded = load(a)
    save(b, loaded)
    assert a.read_bytes() == b.read_bytes()
    return loaded


floats = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)
boxes = st.builds(lambda x, y, w, h: BBox(x, y, x + w, y + h), floats, floats,
                  st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))


@tmp_settings
@given(st.lists(boxes, min_size=1, max_size=5), st.booleans())
def test_objects_round_trip(tmp_path, bxs, with_emb):
    members = [det(f"d{z}", z, b.as_tuple()) for z, b in enumerate(bxs)]
    emb = {m.id: (1.0 + z, 0.5) for z, m in enumerate(members)} if with_emb else None
    objs = [build_object("o1", members, emb)]
    assert round_trip_bytes(tmp_path, io.save_objects, io.load_objects, objs) == objs


@tmp_settings
@given(st.lists(boxes, max_size=5))
def test_detections_round_trip(tmp_path, bxs):
    dets = [det(f"d{k}", k, b.as_tuple(), obj=f"g{k}" if k % 2 else None) for k, b in enumerate(bxs)]
    assert round_trip_bytes(tmp_path, io.save_detections, io.load_detections, dets) == dets


def test_tracks_round_trip(tmp_path):
    tracks = [TimeTrack("trk00000", {0: "a", 1: "b"}), TimeTrack("trk00001", {2: "c"})]
    assert round_trip_bytes(tmp_path, io.save_tracks, io.load_tracks, tracks) == tracks


def test_embeddings_round_trip(tmp_path):
    emb = {"a": [0.1, 0.2, 1 / 3], "b": [1e-300, -2.5, 7.0]}
    loaded = round_trip_bytes(tmp_path, io.save_embeddings, lambda p: io.load_embeddings(p, normalize=False), emb)
    assert {k: list(v) for k, v in loaded.items()} == emb
    (tmp_path / "bad.json").write_text(json.dumps({"format_version": 1, "dim": 2, "embeddings": {"a": [1, 2, 3]}}))
    with pytest.raises(ValueError):
        io.load_embeddings(tmp_path / "bad.json")


def test_field_round_trip(tmp_path, rng):
    field = DeformationField(16, (40, 50), rng.normal(size=(4, 5, 2)))
    loaded = round_trip_bytes(tmp_path, io.save_field, io.load_field, field)
    np.testing.assert_array_equal(loaded.vectors, field.vectors)
    assert (loaded.spacing, loaded.image_shape) == (16, (40, 50))


def test_alignment_round_trip(tmp_path):
    offsets = SliceOffsets(((0, 0), (3, -1), (4, -2)), (False, False, True))
    path = tmp_path / "a.json"
    io.save_alignment(path, offsets, "fov", ZOffset(2, 0.93, False))
    loaded, stack_id, z = io.read_alignment(path)
    assert loaded == offsets and stack_id == "fov" and z == ZOffset(2, 0.93, False)
    io.save_alignment(tmp_path / "b.json", loaded, stack_id, z)
    assert path.read_bytes() == (tmp_path / "b.json").read_bytes()
    io.save_alignment(path, offsets, "fov", ZOffset(0, math.nan, True))
    assert math.isnan(io.read_alignment(path)[2].score)


def test_features_round_trip(tmp_path):
    feats = [
        SpineFeatures("o1", 0, 12.345678901234567, 0.75, 3, "trk1", ()),
        SpineFeatures("o2", 1, 0.1, None, 0, None, ("flag a", "flag b")),
    ]
    assert round_trip_bytes(tmp_path, io.save_features, io.load_features, feats) == feats


def test_report_round_trip(tmp_path):
    report = EvalReport(mode="depth", mota=83.33333333333334, hota=70.71, idf1=50.0, assa=50.0, deta=100.0,
                        precision=1.0, recall=2 / 3, f1=0.8, detections=4, tracks=2, id_switches=1,
                        fn=0, fp=0, flags=["x"])
    assert round_trip_bytes(tmp_path, io.save_report, io.load_report, report) == report
    assert "AssA" in io.format_report(report)


def test_unsupported_version(tmp_path):
    (tmp_path / "f.json").write_text(json.dumps({"format_version": 99}))
    with pytest.raises(io.FormatError):
        io.load_field(tmp_path / "f.json")
