"""Command-line pipeline: ``spinetrack <subcommand> ...``.

Data goes to files (or standard output), logs to standard error. Exit codes
are 0 on success, 1 when processing fails and 2 for usage errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__, io, metrics, synth
from .depth_link import link_depth, link_depth_iom_baseline
from .features import extract_features
from .model import TrackingConfig, ValidationError
from .time_link import link_time
from .volume import align_slices, estimate_deformation, estimate_z_offset, mip

log = logging.getLogger("spinetrack")

_TRACKING_FIELDS = {f.name for f in dataclasses.fields(TrackingConfig)}


class UsageError(Exception):
    """Bad invocation; reported with exit code 2."""


def _threads() -> int:
    raw = os.environ.get("SPINETRACK_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"SPINETRACK_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("SPINETRACK_THREADS must be at least 1")
    return n


def _map(fn, items):
    """Ordered parallel map capped by SPINETRACK_THREADS."""
    items = list(items)
    n = min(_threads(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def _existing(path: str | None, what: str) -> Path | None:
    if path is None:
        return None
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {path}")
    return p


def _load_config(path: Path | None, section: str) -> dict:
    """Tracking settings from ``[tracking]`` overlaid with ``[section]``."""
    if path is None:
        return {}
    with open(path, "rb") as fh:
        try:
            doc = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise UsageError(f"{path}: invalid TOML ({exc})") from None
    merged = {**doc.get("tracking", {}), **doc.get(section, {})}
    unknown = sorted(set(merged) - _TRACKING_FIELDS)
    if unknown:
        raise UsageError(f"{path}: unknown config keys {', '.join(unknown)}")
    return merged


def _tracking_config(args, section: str, base: dict, flag_map: dict) -> TrackingConfig:
    """Build a config with precedence flags > config file > ``base`` defaults."""
    params = dict(base)
    params.update(_load_config(_existing(args.config, "config file"), section))
    for attr, field in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None:
            params[field] = value
    try:
        return TrackingConfig(**params)
    except (TypeError, ValidationError) as exc:
        raise UsageError(f"invalid tracking settings: {exc}") from None


def _load_stacks(paths) -> dict:
    stacks = _map(io.load_stack, [_existing(p, "stack") for p in paths])
    out = {}
    for s in stacks:
        key = (s.stack_id, s.timepoint)
        if key in out:
            raise UsageError(f"two stacks for {s.stack_id} at timepoint {s.timepoint}")
        out[key] = s
    return out


def _write_or_print(path, text: str):
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)


# subcommands

def cmd_align(args) -> int:
    stack = io.load_stack(_existing(args.stack, "stack"))
    offsets = align_slices(stack, max_shift=args.max_shift)
    z_offset = None
    if args.reference:
        ref = io.load_stack(_existing(args.reference, "reference stack"))
        z_offset = estimate_z_offset(ref, stack, max_shift=args.max_z_shift)
        log.info("z offset relative to %s: %+d slices", args.reference, z_offset.shift)
        if args.field_out:
            field = estimate_deformation(mip(ref), mip(stack), grid_spacing=args.grid_spacing)
            io.save_field(args.field_out, field)
            log.info("wrote deformation field to %s", args.field_out)
    elif args.field_out:
        raise UsageError("--field-out needs --reference")
    io.save_alignment(args.out, offsets, stack.stack_id, z_offset)
    if any(offsets.flags):
        log.warning("%d slice steps had no reliable alignment", sum(offsets.flags))
    log.info("aligned %d slices of %s", stack.depth, stack.stack_id)
    return 0


def cmd_depth_track(args) -> int:
    if args.variant == "sp+app" and not args.embeddings:
        raise UsageError("--variant sp+app: embeddings required (--embeddings)")
    base = dataclasses.asdict(TrackingConfig.sp_app() if args.variant == "sp+app" else TrackingConfig())
    cfg = _tracking_config(args, "depth_track", base, {
        "lambda_sp": "lambda_sp",
        "lambda_app": "lambda_app",
        "threshold": "match_threshold_depth",
        "gap_bridge": "gap_bridge",
        "candidate_radius": "candidate_radius",
    })
    if cfg.lambda_app > 0 and not args.embeddings and args.method == "synapflow":
        raise UsageError("lambda_app > 0: embeddings required (--embeddings)")
    detections = io.load_detections(_existing(args.detections, "detections file"))
    stacks = _load_stacks(args.stack or [])
    alignment = io.load_alignment(_existing(args.alignment, "alignment file")) if args.alignment else None
    embeddings = None
    if args.embeddings:
        embeddings = io.load_embeddings(_existing(args.embeddings, "embeddings file"), normalize=cfg.normalize_embeddings)

    groups = defaultdict(list)
    for d in detections:
        groups[(d.stack_id, d.timepoint)].append(d)
    keys = sorted(groups)
    if alignment is not None and len(keys) > 1:
        raise UsageError("--alignment applies to a single stack; detections cover several")

    def offsets_for(key):
        if args.method == "iom" or args.no_align:
            return None
        if alignment is not None:
            return alignment
        if key not in stacks:
            raise ValidationError(f"no stack given for {key[0]} at timepoint {key[1]} (use --stack or --no-align)")
        return align_slices(stacks[key])

    def run(key):
        if args.method == "iom":
            return link_depth_iom_baseline(groups[key], threshold=args.iom_threshold)
        return link_depth(groups[key], offsets_for(key), cfg, embeddings)

    objects = [o for objs in _map(run, keys) for o in objs]
    io.save_objects(args.out, objects)
    print(f"{len(objects)} objects from {len(detections)} detections", file=sys.stderr)
    return 0


def cmd_time_track(args) -> int:
    cfg = _tracking_config(args, "time_track", dataclasses.asdict(TrackingConfig.time_defaults()), {
        "lambda_sp": "lambda_sp",
        "lambda_app": "lambda_app",
        "lambda_depth": "lambda_depth",
        "threshold": "match_threshold_time",
    })
    objects = [o for path in args.objects for o in io.load_objects(_existing(path, "objects file"))]
    fovs = sorted({o.stack_id for o in objects})
    if len(fovs) > 1:
        raise UsageError(f"objects span several fields of view ({', '.join(fovs)}); run one at a time")
    by_t = defaultdict(list)
    for o in objects:
        by_t[o.timepoint].append(o)
    timepoints = sorted(by_t)
    if timepoints and timepoints != list(range(timepoints[0], timepoints[0] + len(timepoints))):
        raise ValidationError(f"timepoint gap in inputs: {timepoints}")
    first = timepoints[0] if timepoints else 0
    n_pairs = max(len(timepoints) - 1, 0)

    stacks = {t: s for (_, t), s in _load_stacks(args.stack or []).items()}
    fields = [io.load_field(_existing(p, "field file")) for p in args.field or []]
    if fields and len(fields) != n_pairs:
        raise UsageError(f"--field given {len(fields)} times; {n_pairs} consecutive timepoint pairs need one each")

    def pair_inputs(k):
        t = first + k
        a, b = stacks.get(t), stacks.get(t + 1)
        field = fields[k] if fields else None
        if field is None and a is not None and b is not None:
            field = estimate_deformation(mip(a), mip(b), grid_spacing=args.grid_spacing)
        if field is None:
            log.warning("no field for timepoints %d->%d: using the identity", t, t + 1)
        z = estimate_z_offset(a, b, max_shift=args.max_z_shift) if a is not None and b is not None else 0
        return field, z

    pairs = _map(pair_inputs, range(n_pairs))
    # link_time numbers timepoints from zero; shift there and back
    shifted = {t - first: [dataclasses.replace(o, timepoint=t - first) for o in by_t[t]] for t in timepoints}
    tracks = link_time(shifted, [p[0] for p in pairs], [p[1] for p in pairs], cfg)
    if first:
        tracks = [dataclasses.replace(trk, assignments={t + first: oid for t, oid in trk.assignments.items()})
                  for trk in tracks]
    io.save_tracks(args.out, tracks)
    print(f"{len(tracks)} tracks over {len(timepoints)} timepoints", file=sys.stderr)
    return 0


def cmd_features(args) -> int:
    cfg = _tracking_config(args, "features", {}, {"dilation_radius": "dilation_radius"})
    objects = [o for path in args.objects for o in io.load_objects(_existing(path, "objects file"))]
    stacks = _load_stacks(args.stack)
    tracks = io.load_tracks(_existing(args.tracks, "tracks file")) if args.tracks else []
    keys = sorted({(o.stack_id, o.timepoint) for o in objects})
    missing = [k for k in keys if k not in stacks]
    if missing:
        raise ValidationError(f"no stack for {', '.join(f'{s} t={t}' for s, t in missing)}")
    rows = _map(lambda k: extract_features(objects, stacks[k], cfg, tracks), keys)
    features = [f for chunk in rows for f in chunk]
    _write_or_print(args.out, io.features_csv(features))
    log.info("features for %d objects", len(features))
    return 0


def cmd_eval(args) -> int:
    gt = io.load_detections(_existing(args.gt, "ground-truth file"))
    if args.mode == "detection":
        pred = io.load_detections(_existing(args.pred, "prediction file"))
        report = metrics.evaluate_detections(gt, pred, args.sim or "iom", 0.7 if args.threshold is None else args.threshold)
    elif args.mode == "depth":
        pred = io.load_objects(_existing(args.pred, "prediction file"))
        report = metrics.evaluate_tracking(
            metrics.gt_depth_points(gt), metrics.pred_depth_points(pred),
            0.5 if args.threshold is None else args.threshold, args.sim or "iou", mode="depth",
        )
    else:
        if not args.objects:
            raise UsageError("--mode time needs --objects with the tracked objects")
        tracks = io.load_tracks(_existing(args.pred, "prediction file"))
        objects = [o for path in args.objects for o in io.load_objects(_existing(path, "objects file"))]
        report = metrics.evaluate_tracking(
            metrics.gt_time_points(gt), metrics.pred_time_points(tracks, objects),
            0.5 if args.threshold is None else args.threshold, args.sim or "iou", mode="time",
        )
    text = io._dump(io.report_to_doc(report))
    if args.out:
        _write_or_print(args.out, text)
        print(io.format_report(report), end="")
    else:
        sys.stdout.write(text)
    for flag in report.flags:
        log.warning(flag)
    return 0


def cmd_synth(args) -> int:
    params = {
        "seed": args.seed,
        "n_tracks": args.n_tracks,
        "depth": args.depth,
        "width": args.width,
        "height": args.height,
        "timepoints": args.timepoints,
        "drift": args.drift,
        "missing_rate": args.missing_rate,
        "noise": args.noise,
        "time_shift": args.time_shift,
        "z_shift": args.z_shift,
        "turnover": args.turnover,
    }
    try:
        ds = synth.generate(**{k: v for k, v in params.items() if v is not None})
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    out = synth.write_dataset(ds, args.out)
    log.info("wrote %d detections over %d timepoints to %s", len(ds.detections), len(ds.stacks), out)
    return 0


# argument parsing

def _prob(text: str) -> float:
    value = float(text)
    if not 0 <= value <= 1:
        raise argparse.ArgumentTypeError(f"{text} is not in [0, 1]")
    return value


def _nonneg(text: str) -> float:
    value = float(text)
    if not value >= 0:
        raise argparse.ArgumentTypeError(f"{text} is negative")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spinetrack", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    p = sub.add_parser("align", help="slice alignment, z offset and deformation field for one stack")
    p.add_argument("--stack", required=True, help="stack directory")
    p.add_argument("--reference", help="stack of the previous timepoint; enables z offset estimation")
    p.add_argument("--field-out", help="write the deformation field from --reference to --stack here")
    p.add_argument("--max-shift", type=int, default=20, help="slice alignment search radius, px (default 20)")
    p.add_argument("--max-z-shift", type=int, default=10, help="z offset search range, slices (default 10)")
    p.add_argument("--grid-spacing", type=int, default=32, help="deformation grid spacing, px (default 32)")
    p.add_argument("-o", "--out", required=True, help="alignment JSON to write")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("depth-track", help="link 2D detections across depth into 3D objects")
    p.add_argument("--detections", required=True, help="detections JSON")
    p.add_argument("--stack", action="append", help="stack directory (repeat for several stacks)")
    p.add_argument("--alignment", help="precomputed alignment JSON for a single stack")
    p.add_argument("--no-align", action="store_true", help="link on raw box coordinates")
    p.add_argument("--embeddings", help="embeddings JSON")
    p.add_argument("--variant", choices=["sp", "sp+app"], default="sp",
                   help="sp: spatial cost only; sp+app: equal spatial and appearance weights (default sp)")
    p.add_argument("--method", choices=["synapflow", "iom"], default="synapflow",
                   help="synapflow: gated Hungarian linking; iom: greedy IoM-threshold baseline")
    p.add_argument("--iom-threshold", type=_prob, default=0.5, help="IoM baseline link threshold (default 0.5)")
    p.add_argument("--lambda-sp", type=_nonneg, help="spatial cost weight")
    p.add_argument("--lambda-app", type=_nonneg, help="appearance cost weight")
    p.add_argument("--threshold", type=float, help="gating threshold on the link cost (default 0.5)")
    p.add_argument("--gap-bridge", type=int, help="slices a spine may skip and still be linked (default 0)")
    p.add_argument("--candidate-radius", type=_nonneg, help="max aligned centre distance of candidates, px (default 50)")
    p.add_argument("--config", help="TOML config; [tracking] and [depth_track] tables")
    p.add_argument("-o", "--out", required=True, help="objects JSON to write")
    p.set_defaults(func=cmd_depth_track)

    p = sub.add_parser("time-track", help="link 3D objects across timepoints into tracks")
    p.add_argument("--objects", action="append", required=True, help="objects JSON (repeat per timepoint)")
    p.add_argument("--stack", action="append", help="stack directory per timepoint, for fields and z offsets")
    p.add_argument("--field", action="append",
                   help="precomputed field JSON per consecutive pair, in order; skips estimation")
    p.add_argument("--lambda-sp", type=_nonneg, help="spatial cost weight (default 0.4)")
    p.add_argument("--lambda-depth", type=_nonneg, help="depth-consistency cost weight (default 0.4)")
    p.add_argument("--lambda-app", type=_nonneg, help="appearance cost weight (default 0.2)")
    p.add_argument("--threshold", type=float, help="gating threshold on the link cost (default 0.5)")
    p.add_argument("--grid-spacing", type=int, default=32, help="deformation grid spacing, px (default 32)")
    p.add_argument("--max-z-shift", type=int, default=10, help="z offset search range, slices (default 10)")
    p.add_argument("--config", help="TOML config; [tracking] and [time_track] tables")
    p.add_argument("-o", "--out", required=True, help="tracks JSON to write")
    p.set_defaults(func=cmd_time_track)

    p = sub.add_parser("features", help="spine size and spine-to-dendrite distance")
    p.add_argument("--objects", action="append", required=True, help="objects JSON (repeatable)")
    p.add_argument("--stack", action="append", required=True, help="stack directory (repeatable)")
    p.add_argument("--tracks", help="tracks JSON, to attach track ids")
    p.add_argument("--dilation-radius", type=int, help="disk radius per dilation step, px (default 2)")
    p.add_argument("--config", help="TOML config; [tracking] and [features] tables")
    p.add_argument("-o", "--out", help="features CSV to write (default standard output)")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("eval", help="score predictions against ground-truth detections")
    p.add_argument("--mode", choices=["detection", "depth", "time"], required=True,
                   help="detection: per-slice P/R/F1; depth: 3D objects; time: tracks across timepoints")
    p.add_argument("--gt", required=True, help="ground-truth detections JSON")
    p.add_argument("--pred", required=True, help="detections (detection), objects (depth) or tracks (time) JSON")
    p.add_argument("--objects", action="append", help="objects JSON behind the tracks (time mode)")
    p.add_argument("--sim", choices=["iou", "iom", "giou"],
                   help="box similarity (default iom for detection, iou otherwise)")
    p.add_argument("--threshold", type=float, help="match threshold (default 0.7 for detection, 0.5 otherwise)")
    p.add_argument("-o", "--out", help="report JSON to write; a table then goes to standard output")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate a synthetic dataset with ground truth")
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--n-tracks", type=int, help="spines per timepoint (default 20)")
    p.add_argument("--depth", type=int, help="slices per stack (default 30)")
    p.add_argument("--width", type=int, help="slice width, px (default 512)")
    p.add_argument("--height", type=int, help="slice height, px (default 512)")
    p.add_argument("--timepoints", type=int, help="imaging sessions (default 1)")
    p.add_argument("--drift", type=_nonneg, help="max stack drift per slice, px (default 5)")
    p.add_argument("--missing-rate", type=_prob, help="fraction of dropped detections (default 0.01)")
    p.add_argument("--noise", type=_nonneg, help="Gaussian noise sigma (default 20)")
    p.add_argument("--time-shift", type=int, help="max lateral shift between sessions, px (default 0)")
    p.add_argument("--z-shift", type=int, help="max z shift between sessions, slices (default 0)")
    p.add_argument("--turnover", type=_prob, help="per-session spine loss and gain rate (default 0)")
    p.add_argument("-o", "--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="spinetrack: %(levelname)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"spinetrack {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, RuntimeError) as exc:
        # ValidationError, FormatError and EvaluationError are ValueErrors
        print(f"spinetrack {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
