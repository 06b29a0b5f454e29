"""File formats for stacks, detections, embeddings, objects, tracks and results.

Every writer is deterministic (sorted keys, fixed layout) so identical data
always produces byte-identical files. Schemas are described in
``docs/formats.md``.
"""

from __future__ import annotations

import csv
import dataclasses
import io as _io
import json
import re
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .appearance import EmbeddingStore
from .features import SpineFeatures
from .model import BBox, Detection2D, EvalReport, ImageStack, SpineObject3D, TimeTrack, ValidationError
from .volume import DeformationField, SliceOffsets, ZOffset, grid_shape

FORMAT_VERSION = 1
FEATURE_COLUMNS = ["object_id", "track_id", "timepoint", "size_au", "spine_to_dendrite_um", "representative_z", "flags"]


class FormatError(ValueError):
    """A file does not follow its declared format."""


def _dump(data) -> str:
    return json.dumps(data, sort_keys=True, indent=2, allow_nan=False) + "\n"


def _write_text(path, text: str):
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc


def _check_version(doc: dict, path):
    version = doc.get("format_version", FORMAT_VERSION)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format_version {version}")


# PGM slices

_PGM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def write_pgm(path, image: np.ndarray):
    """Write a 2D uint16 array as binary PGM (P5, maxval 65535, big-endian)."""
    image = np.asarray(image)
    if image.ndim != 2 or image.dtype != np.uint16:
        raise ValueError("PGM slices must be 2D uint16 arrays")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n65535\n" % (w, h))
        fh.write(image.astype(">u2").tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    for _ in range(4):
        m = _PGM_TOKEN.match(data, pos)
        if m is None:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(m.group(1))
        pos = m.end()
    magic, width, height, maxval = tokens
    if magic != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {magic!r})")
    try:
        w, h, maxval = int(width), int(height), int(maxval)
    except ValueError:
        raise FormatError(f"{path}: malformed PGM header") from None
    if not 0 < maxval <= 65535:
        raise FormatError(f"{path}: invalid maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    expected = w * h * dtype.itemsize
    raster = data[pos:pos + expected]
    if len(raster) != expected:
        raise FormatError(f"{path}: expected {expected} raster bytes, found {len(raster)}")
    return np.frombuffer(raster, dtype=dtype).reshape(h, w).astype(np.uint16)


def slice_name(z: int) -> str:
    return f"z{z:04d}.pgm"


def save_stack(stack: ImageStack, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "stack_id": stack.stack_id,
        "timepoint": stack.timepoint,
        "width": stack.width,
        "height": stack.height,
        "depth": stack.depth,
        "voxel_size_um": list(stack.voxel_size_um),
    }
    _write_text(directory / "manifest.json", _dump(manifest))
    for z in range(stack.depth):
        write_pgm(directory / slice_name(z), stack.pixels[z])


def load_stack(directory) -> ImageStack:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"{directory}: no manifest.json")
    manifest = _read_json(manifest_path)
    _check_version(manifest, manifest_path)
    try:
        width, height, depth = int(manifest["width"]), int(manifest["height"]), int(manifest["depth"])
        stack_id, timepoint = str(manifest["stack_id"]), int(manifest["timepoint"])
        voxel = tuple(float(v) for v in manifest["voxel_size_um"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{manifest_path}: bad manifest ({exc})") from exc
    slices = []
    for z in range(depth):
        path = directory / slice_name(z)
        if not path.is_file():
            raise FormatError(f"{directory}: missing slice {slice_name(z)}")
        img = read_pgm(path)
        if img.shape != (height, width):
            raise FormatError(f"{path}: dimensions {img.shape[1]}x{img.shape[0]} differ from manifest {width}x{height}")
        slices.append(img)
    return ImageStack(stack_id, timepoint, np.stack(slices), voxel)


# detections

def _bbox_from(value, where: str) -> BBox:
    if not isinstance(value, (list, tuple)) or len(value) != 4:
        raise FormatError(f"{where}: bbox must be [x1, y1, x2, y2]")
    try:
        return BBox(*(float(v) for v in value))
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{where}: invalid bbox {value} ({exc})") from exc


def detection_to_record(d: Detection2D) -> dict:
    rec = {
        "id": d.id,
        "stack_id": d.stack_id,
        "timepoint": d.timepoint,
        "z": d.z,
        "bbox": list(d.bbox.as_tuple()),
        "confidence": d.confidence,
    }
    if d.gt_object_id is not None:
        rec["gt_object_id"] = d.gt_object_id
    if d.gt_track_id is not None:
        rec["gt_track_id"] = d.gt_track_id
    return rec


def detection_from_record(rec: dict, where: str = "record") -> Detection2D:
    if not isinstance(rec, dict):
        raise FormatError(f"{where}: detection must be an object")
    try:
        return Detection2D(
            id=str(rec["id"]),
            stack_id=str(rec["stack_id"]),
            timepoint=int(rec["timepoint"]),
            z=int(rec["z"]),
            bbox=_bbox_from(rec["bbox"], where),
            confidence=float(rec.get("confidence", 1.0)),
            gt_object_id=None if rec.get("gt_object_id") is None else str(rec["gt_object_id"]),
            gt_track_id=None if rec.get("gt_track_id") is None else str(rec["gt_track_id"]),
        )
    except KeyError as exc:
        raise FormatError(f"{where}: missing field {exc}") from exc
    except ValidationError as exc:
        raise FormatError(f"{where}: {exc}") from exc


def save_detections(path, detections: Iterable[Detection2D]):
    _write_text(path, _dump([detection_to_record(d) for d in detections]))


def load_detections(path) -> list[Detection2D]:
    doc = _read_json(path)
    if not isinstance(doc, list):
        raise FormatError(f"{path}: detections file must hold a JSON array")
    return [detection_from_record(rec, f"{path}[{k}]") for k, rec in enumerate(doc)]


# embeddings

def save_embeddings(path, embeddings):
    vectors = {k: [float(v) for v in np.asarray(embeddings[k]).ravel()] for k in embeddings}
    dim = len(next(iter(vectors.values()))) if vectors else 0
    _write_text(path, _dump({"format_version": FORMAT_VERSION, "dim": dim, "embeddings": vectors}))


def load_embeddings(path, normalize: bool = True) -> EmbeddingStore:
    doc = _read_json(path)
    if not isinstance(doc, dict) or "embeddings" not in doc or "dim" not in doc:
        raise FormatError(f"{path}: embeddings file needs 'dim' and 'embeddings'")
    _check_version(doc, path)
    dim = int(doc["dim"])
    for key, vec in doc["embeddings"].items():
        if not isinstance(vec, list) or len(vec) != dim:
            raise FormatError(f"{path}: embedding {key!r} does not have dimension {dim}")
    return EmbeddingStore(doc["embeddings"], normalize=normalize, dim=dim)


# objects and tracks

def object_to_record(o: SpineObject3D) -> dict:
    return {
        "object_id": o.object_id,
        "stack_id": o.stack_id,
        "timepoint": o.timepoint,
        "members": [[z, d] for z, d in o.members],
        "boxes": [list(b.as_tuple()) for b in o.boxes],
        "depth_set": sorted(o.depth_set),
        "median_box": list(o.median_box.as_tuple()),
        "mean_embedding": None if o.mean_embedding is None else list(o.mean_embedding),
    }


def object_from_record(rec: dict, where: str = "record") -> SpineObject3D:
    try:
        obj = SpineObject3D(
            object_id=str(rec["object_id"]),
            stack_id=str(rec["stack_id"]),
            timepoint=int(rec["timepoint"]),
            members=tuple((int(z), str(d)) for z, d in rec["members"]),
            boxes=tuple(_bbox_from(b, where) for b in rec["boxes"]),
            median_box=_bbox_from(rec["median_box"], where),
            mean_embedding=None if rec.get("mean_embedding") is None else tuple(float(v) for v in rec["mean_embedding"]),
        )
    except KeyError as exc:
        raise FormatError(f"{where}: missing field {exc}") from exc
    except (ValidationError, TypeError, ValueError) as exc:
        raise FormatError(f"{where}: {exc}") from exc
    if "depth_set" in rec and sorted(int(z) for z in rec["depth_set"]) != sorted(obj.depth_set):
        raise FormatError(f"{where}: depth_set disagrees with members")
    return obj


def save_objects(path, objects: Iterable[SpineObject3D]):
    _write_text(path, _dump([object_to_record(o) for o in objects]))


def load_objects(path) -> list[SpineObject3D]:
    doc = _read_json(path)
    if not isinstance(doc, list):
        raise FormatError(f"{path}: objects file must hold a JSON array")
    return [object_from_record(rec, f"{path}[{k}]") for k, rec in enumerate(doc)]


def save_tracks(path, tracks: Iterable[TimeTrack]):
    records = [
        {"track_id": t.track_id, "assignments": {str(k): v for k, v in sorted(t.assignments.items())}}
        for t in tracks
    ]
    _write_text(path, _dump(records))


def load_tracks(path) -> list[TimeTrack]:
    doc = _read_json(path)
    if not isinstance(doc, list):
        raise FormatError(f"{path}: tracks file must hold a JSON array")
    tracks = []
    for k, rec in enumerate(doc):
        try:
            tracks.append(TimeTrack(str(rec["track_id"]), {int(t): str(o) for t, o in rec["assignments"].items()}))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}[{k}]: {exc}") from exc
    return tracks


# registration results

def field_to_doc(f: DeformationField) -> dict:
    gy, gx = f.vectors.shape[:2]
    return {
        "format_version": FORMAT_VERSION,
        "grid_spacing": f.spacing,
        "grid_shape": [gy, gx],
        "image_shape": list(f.image_shape),
        "vectors": [[float(dx), float(dy)] for dx, dy in f.vectors.reshape(-1, 2)],
    }


def save_field(path, f: DeformationField):
    _write_text(path, _dump(field_to_doc(f)))


def load_field(path) -> DeformationField:
    doc = _read_json(path)
    _check_version(doc, path)
    try:
        spacing = int(doc["grid_spacing"])
        gy, gx = (int(v) for v in doc["grid_shape"])
        image_shape = tuple(int(v) for v in doc["image_shape"])
        vectors = np.array(doc["vectors"], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: bad deformation field ({exc})") from exc
    if (gy, gx) != grid_shape(image_shape, spacing) or vectors.shape != (gy * gx, 2):
        raise FormatError(f"{path}: grid shape does not match image shape and spacing")
    try:
        return DeformationField(spacing, image_shape, vectors.reshape(gy, gx, 2))
    except ValidationError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def save_alignment(path, offsets: SliceOffsets, stack_id: str = "", z_offset: ZOffset | None = None):
    doc = {
        "format_version": FORMAT_VERSION,
        "stack_id": stack_id,
        "offsets": [list(o) for o in offsets.offsets],
        "flags": list(offsets.flags),
    }
    if z_offset is not None:
        score = z_offset.score if np.isfinite(z_offset.score) else None
        doc["z_offset"] = {"shift": z_offset.shift, "score": score, "flagged": z_offset.flagged}
    _write_text(path, _dump(doc))


def read_alignment(path) -> tuple[SliceOffsets, str, ZOffset | None]:
    """Slice offsets, stack id and optional z offset of an alignment file."""
    doc = _read_json(path)
    _check_version(doc, path)
    try:
        offsets = SliceOffsets(tuple(tuple(o) for o in doc["offsets"]), tuple(bool(f) for f in doc["flags"]))
        z_offset = None
        if "z_offset" in doc:
            z = doc["z_offset"]
            score = float("nan") if z["score"] is None else float(z["score"])
            z_offset = ZOffset(int(z["shift"]), score, bool(z["flagged"]))
        return offsets, str(doc.get("stack_id", "")), z_offset
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: bad alignment file ({exc})") from exc


def load_alignment(path) -> SliceOffsets:
    return read_alignment(path)[0]


# features and reports

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def features_csv(features: Sequence[SpineFeatures]) -> str:
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(FEATURE_COLUMNS)
    for f in features:
        writer.writerow([
            f.object_id,
            _fmt(f.track_id),
            f.timepoint,
            _fmt(float(f.size_au)),
            _fmt(None if f.spine_to_dendrite_um is None else float(f.spine_to_dendrite_um)),
            f.representative_z,
            ";".join(f.flags),
        ])
    return buf.getvalue()


def save_features(path, features: Sequence[SpineFeatures]):
    _write_text(path, features_csv(features))


def load_features(path) -> list[SpineFeatures]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != FEATURE_COLUMNS:
            raise FormatError(f"{path}: unexpected columns {reader.fieldnames}")
        out = []
        for row in reader:
            out.append(SpineFeatures(
                object_id=row["object_id"],
                timepoint=int(row["timepoint"]),
                size_au=float(row["size_au"]),
                spine_to_dendrite_um=float(row["spine_to_dendrite_um"]) if row["spine_to_dendrite_um"] else None,
                representative_z=int(row["representative_z"]),
                track_id=row["track_id"] or None,
                flags=tuple(row["flags"].split(";")) if row["flags"] else (),
            ))
    return out


def report_to_doc(report: EvalReport) -> dict:
    doc = dataclasses.asdict(report)
    doc["format_version"] = FORMAT_VERSION
    return doc


def save_report(path, report: EvalReport):
    _write_text(path, _dump(report_to_doc(report)))


def load_report(path) -> EvalReport:
    doc = _read_json(path)
    _check_version(doc, path)
    doc.pop("format_version", None)
    return EvalReport(**doc)


def format_report(report: EvalReport) -> str:
    """Human-readable table of a report."""
    rows = [("mode", report.mode)]
    for name, label in (("mota", "MOTA"), ("hota", "HOTA"), ("idf1", "IDF1"), ("assa", "AssA"), ("deta", "DetA")):
        value = getattr(report, name)
        if value is not None:
            rows.append((label, f"{value:.2f}"))
    rows += [
        ("precision", f"{report.precision:.4f}"),
        ("recall", f"{report.recall:.4f}"),
        ("F1", f"{report.f1:.4f}"),
        ("detections", str(report.detections)),
        ("tracks", str(report.tracks)),
        ("id switches", str(report.id_switches)),
        ("FN", str(report.fn)),
        ("FP", str(report.fp)),
    ]
    width = max(len(k) for k, _ in rows)
    lines = [f"{k:<{width}}  {v}" for k, v in rows]
    lines += [f"flag: {flag}" for flag in report.flags]
    return "\n".join(lines) + "\n"
