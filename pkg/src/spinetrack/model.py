"""Domain types shared across the tracking pipeline.

All types are immutable after construction. Validation happens in
``__post_init__`` so an invalid object can never exist.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

#: Nominal two-photon voxel size (x, y, z) in micrometres.
DEFAULT_VOXEL_SIZE_UM = (0.1075, 0.1075, 0.5)


class ValidationError(ValueError):
    """Raised when a domain object violates one of its invariants."""


@dataclass(frozen=True, order=True)
class BBox:
    """Axis-aligned box in continuous pixel coordinates, origin top-left."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValidationError(f"non-finite box coordinates {coords}")
        if not self.x1 < self.x2:
            raise ValidationError(f"box has x1 >= x2: {coords}")
        if not self.y1 < self.y2:
            raise ValidationError(f"box has y1 >= y2: {coords}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def translated(self, dx: float, dy: float) -> "BBox":
        return BBox(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)

    def pixel_slices(self, shape: tuple[int, int] | None = None) -> tuple[slice, slice]:
        """Row/column slices of the pixels the box covers, clipped to ``shape``."""
        r0, r1 = math.floor(self.y1), math.ceil(self.y2)
        c0, c1 = math.floor(self.x1), math.ceil(self.x2)
        if shape is not None:
            r0, r1 = max(r0, 0), min(r1, shape[0])
            c0, c1 = max(c0, 0), min(c1, shape[1])
        return slice(r0, r1), slice(c0, c1)


@dataclass(frozen=True)
class Detection2D:
    """One bounding box on one z-slice of one stack at one timepoint."""

    id: str
    stack_id: str
    timepoint: int
    z: int
    bbox: BBox
    confidence: float = 1.0
    gt_object_id: str | None = None
    gt_track_id: str | None = None

    def __post_init__(self):
        if self.timepoint < 0:
            raise ValidationError(f"{self.id}: negative timepoint")
        if self.z < 0:
            raise ValidationError(f"{self.id}: negative z")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValidationError(f"{self.id}: confidence {self.confidence} outside [0, 1]")


def median_box(boxes: Sequence[BBox]) -> BBox:
    """Coordinate-wise median; an even count averages the two middle values."""
    if not boxes:
        raise ValidationError("median of an empty box list")
    coords = np.array([b.as_tuple() for b in boxes], dtype=float)
    return BBox(*(float(v) for v in np.median(coords, axis=0)))


@dataclass(frozen=True)
class SpineObject3D:
    """Depth-linked 2D detections sharing one 3D identity at one timepoint.

    ``members`` holds ``(z, detection_id)`` pairs sorted by z and ``boxes`` the
    matching member boxes in the same order.
    """

    object_id: str
    stack_id: str
    timepoint: int
    members: tuple[tuple[int, str], ...]
    boxes: tuple[BBox, ...]
    median_box: BBox
    mean_embedding: tuple[float, ...] | None = None

    def __post_init__(self):
        if not self.members:
            raise ValidationError(f"{self.object_id}: object without members")
        if len(self.boxes) != len(self.members):
            raise ValidationError(f"{self.object_id}: members and boxes differ in length")
        zs = [z for z, _ in self.members]
        if zs != sorted(zs):
            raise ValidationError(f"{self.object_id}: members not sorted by z")
        if len(set(zs)) != len(zs):
            raise ValidationError(f"{self.object_id}: more than one member per z")

    @property
    def depth_set(self) -> frozenset[int]:
        return frozenset(z for z, _ in self.members)

    @property
    def detection_ids(self) -> tuple[str, ...]:
        return tuple(d for _, d in self.members)

    def box_at(self, z: int) -> BBox:
        for (mz, _), box in zip(self.members, self.boxes):
            if mz == z:
                return box
        raise KeyError(z)


def build_object(
    object_id: str,
    members: Iterable[Detection2D],
    embeddings=None,
) -> SpineObject3D:
    """Assemble a :class:`SpineObject3D` from detections of one stack and timepoint.

    ``embeddings`` is an optional mapping from detection id to vector. The mean
    embedding is only set when every member has one.
    """
    from .appearance import mean_embedding

    members = sorted(members, key=lambda d: (d.z, d.id))
    if not members:
        raise ValidationError(f"{object_id}: empty member list")
    zs = [d.z for d in members]
    if len(set(zs)) != len(zs):
        raise ValidationError(f"{object_id}: duplicate z among members")
    if len({(d.stack_id, d.timepoint) for d in members}) != 1:
        raise ValidationError(f"{object_id}: members span several stacks or timepoints")

    mean = None
    if embeddings is not None and all(d.id in embeddings for d in members):
        mean = tuple(float(v) for v in mean_embedding([embeddings[d.id] for d in members]))

    boxes = tuple(d.bbox for d in members)
    return SpineObject3D(
        object_id=object_id,
        stack_id=members[0].stack_id,
        timepoint=members[0].timepoint,
        members=tuple((d.z, d.id) for d in members),
        boxes=boxes,
        median_box=median_box(boxes),
        mean_embedding=mean,
    )


@dataclass(frozen=True)
class TimeTrack:
    """A 3D object identity chained over timepoints."""

    track_id: str
    assignments: dict[int, str] = field(hash=False)

    def __post_init__(self):
        if not self.assignments:
            raise ValidationError(f"{self.track_id}: track without assignments")

    @property
    def timepoints(self) -> list[int]:
        return sorted(self.assignments)


@dataclass(frozen=True)
class TrackingConfig:
    """Weights, gates and knobs for depth- and time-linking.

    Defaults reproduce the spatial-only depth linker. Use
    :meth:`time_defaults` for the time linker weights.
    """

    lambda_app: float = 0.0
    lambda_sp: float = 1.0
    lambda_depth: float = 0.0
    match_threshold_depth: float = 0.5
    match_threshold_time: float = 0.5
    contrastive_margin: float = 1.0
    dilation_radius: int = 2
    max_dilation_steps: int = 10
    gap_bridge: int = 0
    candidate_radius: float = 50.0
    # "post": solve, then drop pairs above the gate; "pre": forbid them first
    gate_mode: str = "post"
    normalize_embeddings: bool = True

    def __post_init__(self):
        weights = (self.lambda_app, self.lambda_sp, self.lambda_depth)
        if any(not math.isfinite(w) or w < 0 for w in weights):
            raise ValidationError(f"weights must be finite and non-negative: {weights}")
        if not any(w > 0 for w in weights):
            raise ValidationError("at least one weight must be positive")
        for name in ("match_threshold_depth", "match_threshold_time", "candidate_radius"):
            if not math.isfinite(getattr(self, name)):
                raise ValidationError(f"{name} must be finite")
        if self.contrastive_margin <= 0:
            raise ValidationError("contrastive_margin must be positive")
        if self.dilation_radius < 1 or self.max_dilation_steps < 1:
            raise ValidationError("dilation radius and step count must be positive")
        if self.gap_bridge < 0:
            raise ValidationError("gap_bridge must be non-negative")
        if self.gate_mode not in ("post", "pre"):
            raise ValidationError(f"unknown gate_mode {self.gate_mode!r}")

    @classmethod
    def time_defaults(cls, **overrides) -> "TrackingConfig":
        params = dict(lambda_sp=0.4, lambda_depth=0.4, lambda_app=0.2)
        params.update(overrides)
        return cls(**params)

    @classmethod
    def sp_app(cls, **overrides) -> "TrackingConfig":
        """Depth-linking variant weighting space and appearance equally."""
        params = dict(lambda_sp=0.5, lambda_app=0.5)
        params.update(overrides)
        return cls(**params)


@dataclass(frozen=True, eq=False)
class ImageStack:
    """A 16-bit grayscale volume of shape (depth, height, width)."""

    stack_id: str
    timepoint: int
    pixels: np.ndarray
    voxel_size_um: tuple[float, float, float] = DEFAULT_VOXEL_SIZE_UM

    def __post_init__(self):
        pixels = np.asarray(self.pixels)
        if pixels.ndim != 3 or 0 in pixels.shape:
            raise ValidationError(f"{self.stack_id}: pixels must be a non-empty 3D array")
        if pixels.dtype != np.uint16:
            raise ValidationError(f"{self.stack_id}: pixels must be uint16, got {pixels.dtype}")
        if len(self.voxel_size_um) != 3 or any(v <= 0 for v in self.voxel_size_um):
            raise ValidationError(f"{self.stack_id}: voxel sizes must be three positive reals")
        if self.timepoint < 0:
            raise ValidationError(f"{self.stack_id}: negative timepoint")
        pixels = pixels.copy()
        pixels.flags.writeable = False
        object.__setattr__(self, "pixels", pixels)
        object.__setattr__(self, "voxel_size_um", tuple(float(v) for v in self.voxel_size_um))

    @property
    def depth(self) -> int:
        return self.pixels.shape[0]

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]

    def __eq__(self, other):
        if not isinstance(other, ImageStack):
            return NotImplemented
        return (
            self.stack_id == other.stack_id
            and self.timepoint == other.timepoint
            and self.voxel_size_um == other.voxel_size_um
            and np.array_equal(self.pixels, other.pixels)
        )


@dataclass
class EvalReport:
    """Scores of one evaluation run.

    Tracking scores are on a 0-100 scale and ``None`` when the mode does not
    produce them (e.g. detection-only evaluation).
    """

    mode: str
    mota: float | None = None
    hota: float | None = None
    idf1: float | None = None
    assa: float | None = None
    deta: float | None = None
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0
    detections: int = 0
    tracks: int = 0
    id_switches: int = 0
    fn: int = 0
    fp: int = 0
    flags: list[str] = field(default_factory=list)


def f1_score(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def validate_dataset(detections: Sequence[Detection2D], stacks: Sequence[ImageStack]) -> list[str]:
    """List consistency violations between detections and stacks.

    An empty list means the dataset is internally consistent.
    """
    violations = []
    by_key = {(s.stack_id, s.timepoint): s for s in stacks}
    by_id = {}
    for s in stacks:
        by_id.setdefault(s.stack_id, []).append(s)
    seen = set()
    for det in detections:
        if det.id in seen:
            violations.append(f"duplicate id {det.id!r}")
        seen.add(det.id)
        stack = by_key.get((det.stack_id, det.timepoint))
        if stack is None:
            if det.stack_id in by_id:
                violations.append(f"{det.id}: no stack {det.stack_id!r} at timepoint {det.timepoint}")
            else:
                violations.append(f"{det.id}: dangling stack_id {det.stack_id!r}")
            continue
        if det.z >= stack.depth:
            violations.append(f"{det.id}: z out of range ({det.z} >= depth {stack.depth})")
    return violations
