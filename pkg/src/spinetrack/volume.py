"""Stack-level image operations.

Maximum intensity projection, translation-only slice alignment, z-offset
estimation between stacks and a block-matching deformation field that maps
one timepoint's projection onto the next.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.fft
from skimage.feature import match_template

from .model import BBox, ImageStack, ValidationError


@dataclass(frozen=True)
class SliceOffsets:
    """Per-slice translation of slice content relative to slice 0.

    A feature at ``(x, y)`` on slice 0 appears at ``(x + dx, y + dy)`` on
    slice ``z``; :meth:`align_box` maps a box from slice ``z`` back into the
    slice-0 frame.
    """

    offsets: tuple[tuple[float, float], ...]
    flags: tuple[bool, ...] = ()

    def __post_init__(self):
        if not self.offsets or tuple(self.offsets[0]) != (0.0, 0.0):
            raise ValidationError("slice offsets must start with (0, 0)")
        object.__setattr__(self, "offsets", tuple((float(dx), float(dy)) for dx, dy in self.offsets))
        if not self.flags:
            object.__setattr__(self, "flags", (False,) * len(self.offsets))
        if len(self.flags) != len(self.offsets):
            raise ValidationError("one flag per slice required")

    @classmethod
    def zeros(cls, depth: int) -> "SliceOffsets":
        return cls(((0.0, 0.0),) * depth)

    def __len__(self) -> int:
        return len(self.offsets)

    def __getitem__(self, z: int) -> tuple[float, float]:
        return self.offsets[z]

    def align_box(self, box: BBox, z: int) -> BBox:
        dx, dy = self.offsets[z]
        return box.translated(-dx, -dy)


@dataclass(frozen=True)
class ZOffset:
    """Integer slice shift: slice ``k`` of stack a matches slice ``k + shift`` of b."""

    shift: int
    score: float = float("nan")
    flagged: bool = False

    def __int__(self) -> int:
        return self.shift


@dataclass(frozen=True, eq=False)
class DeformationField:
    """Displacement grid over an image, evaluated by bilinear interpolation.

    Node ``(iy, ix)`` sits at pixel ``(ix * spacing, iy * spacing)``;
    ``vectors[iy, ix]`` holds its ``(dx, dy)``.
    """

    spacing: int
    image_shape: tuple[int, int]
    vectors: np.ndarray

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=float)
        gy, gx = grid_shape(self.image_shape, self.spacing)
        if vectors.shape != (gy, gx, 2):
            raise ValidationError(f"field grid {vectors.shape} does not cover image {self.image_shape}")
        if not np.all(np.isfinite(vectors)):
            raise ValidationError("non-finite displacement")
        vectors = vectors.copy()
        vectors.flags.writeable = False
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "image_shape", tuple(int(s) for s in self.image_shape))

    @classmethod
    def constant(cls, image_shape, dx: float = 0.0, dy: float = 0.0, spacing: int = 32) -> "DeformationField":
        gy, gx = grid_shape(image_shape, spacing)
        vectors = np.empty((gy, gx, 2))
        vectors[..., 0] = dx
        vectors[..., 1] = dy
        return cls(spacing, tuple(image_shape), vectors)

    @classmethod
    def zeros(cls, image_shape, spacing: int = 32) -> "DeformationField":
        return cls.constant(image_shape, 0.0, 0.0, spacing)

    def displacement_at(self, x: float, y: float) -> tuple[float, float]:
        gy, gx = self.vectors.shape[:2]
        fx = min(max(x / self.spacing, 0.0), gx - 1)
        fy = min(max(y / self.spacing, 0.0), gy - 1)
        ix, iy = min(int(fx), gx - 2) if gx > 1 else 0, min(int(fy), gy - 2) if gy > 1 else 0
        tx, ty = fx - ix, fy - iy
        v = self.vectors
        ix1, iy1 = min(ix + 1, gx - 1), min(iy + 1, gy - 1)
        top = (1 - tx) * v[iy, ix] + tx * v[iy, ix1]
        bottom = (1 - tx) * v[iy1, ix] + tx * v[iy1, ix1]
        d = (1 - ty) * top + ty * bottom
        return float(d[0]), float(d[1])

    def __eq__(self, other):
        if not isinstance(other, DeformationField):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and self.image_shape == other.image_shape
            and np.array_equal(self.vectors, other.vectors)
        )


# (mip_a, mip_b) -> field; anything with this signature can stand in for
# the built-in block matcher.
DeformationProvider = Callable[[np.ndarray, np.ndarray], DeformationField]


def grid_shape(image_shape, spacing: int) -> tuple[int, int]:
    if spacing < 1:
        raise ValidationError("grid spacing must be positive")
    h, w = image_shape
    return math.ceil((h - 1) / spacing) + 1, math.ceil((w - 1) / spacing) + 1


def mip(stack: ImageStack) -> np.ndarray:
    """Maximum intensity projection over z, shape (height, width)."""
    return stack.pixels.max(axis=0)


def _window_sums(img: np.ndarray, th: int, tw: int) -> np.ndarray:
    """Sums over every ``th x tw`` window, indexed by the window's top-left pixel."""
    c = np.zeros((img.shape[0] + 1, img.shape[1] + 1))
    c[1:, 1:] = img.cumsum(axis=0).cumsum(axis=1)
    return c[th:, tw:] - c[:-th, tw:] - c[th:, :-tw] + c[:-th, :-tw]


def _ncc_window(ref: np.ndarray, mov: np.ndarray, my: int, mx: int) -> np.ndarray | None:
    """NCC of ref's central crop against ``mov`` for every shift in ``±my, ±mx``.

    Entry ``[my + dy, mx + dx]`` scores the crop moved by ``(dx, dy)``.
    """
    h, w = ref.shape
    th, tw = h - 2 * my, w - 2 * mx
    crop = ref[my:h - my, mx:w - mx]
    crop = crop - crop.mean()
    crop_norm = np.sqrt(np.sum(crop * crop))
    if crop_norm == 0:
        return None
    padded = np.zeros_like(ref)
    padded[my:h - my, mx:w - mx] = crop
    corr = scipy.fft.irfft2(np.conj(scipy.fft.rfft2(padded)) * scipy.fft.rfft2(mov), s=(h, w))
    # circular lags -my..my, -mx..mx
    rows = np.arange(-my, my + 1) % h
    cols = np.arange(-mx, mx + 1) % w
    num = corr[np.ix_(rows, cols)]
    n = th * tw
    s1 = _window_sums(mov, th, tw)
    s2 = _window_sums(mov * mov, th, tw)
    var = np.maximum(s2 - s1 * s1 / n, 0.0)
    denom = crop_norm * np.sqrt(var)
    with np.errstate(divide="ignore", invalid="ignore"):
        ncc = np.where(denom > 0, num / denom, -1.0)
    return ncc


def _best_shift(ref: np.ndarray, mov: np.ndarray, max_shift: int) -> tuple[int, int, float] | None:
    """Integer translation of ``mov`` relative to ``ref`` by NCC peak.

    Returns ``(dx, dy, score)`` or None when either image has no signal.
    """
    ref = ref.astype(np.float64)
    mov = mov.astype(np.float64)
    if ref.std() == 0 or mov.std() == 0:
        return None
    h, w = ref.shape
    my = min(max_shift, (h - 1) // 2)
    mx = min(max_shift, (w - 1) // 2)
    ncc = _ncc_window(ref, mov, my, mx)
    if ncc is None:
        return None
    r, c = np.unravel_index(int(np.argmax(ncc)), ncc.shape)
    return int(c - mx), int(r - my), float(ncc[r, c])


def align_slices(stack: ImageStack, max_shift: int = 20) -> SliceOffsets:
    """Cumulative translation of every slice relative to slice 0.

    Consecutive slices are registered by the normalized cross-correlation
    peak within ``±max_shift`` pixels. A slice pair without signal adds a
    zero step and flags the later slice.
    """
    offsets = [(0.0, 0.0)]
    flags = [False]
    pixels = stack.pixels
    for z in range(1, stack.depth):
        found = _best_shift(pixels[z - 1], pixels[z], max_shift)
        if found is None:
            step = (0, 0)
            flags.append(True)
        else:
            step = found[:2]
            flags.append(False)
        px, py = offsets[-1]
        offsets.append((px + step[0], py + step[1]))
    if stack.depth == 1 and stack.pixels.std() == 0:
        flags[0] = True
    elif flags[1:] and all(flags[1:]):
        flags[0] = True
    return SliceOffsets(tuple(offsets), tuple(flags))


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    xc = x - x.mean()
    yc = y - y.mean()
    denom = math.sqrt(float(np.sum(xc * xc)) * float(np.sum(yc * yc)))
    if denom == 0:
        return float("nan")
    return float(np.sum(xc * yc)) / denom


def _profile(stack) -> np.ndarray:
    pixels = stack.pixels if isinstance(stack, ImageStack) else np.asarray(stack)
    return pixels.reshape(pixels.shape[0], -1).mean(axis=1)


def estimate_z_offset(a, b, max_shift: int = 10, min_overlap: int | None = None) -> ZOffset:
    """Slice shift maximizing the correlation of mean-intensity profiles.

    ``a`` and ``b`` are stacks (or raw ``(depth, h, w)`` arrays) of the same
    field of view. Each shift is scored by the Pearson correlation over the
    overlapping part of the two profiles.
    """
    pa, pb = _profile(a), _profile(b)
    da, db = len(pa), len(pb)
    if min_overlap is None:
        min_overlap = max(3, math.ceil(min(da, db) / 2))
    min_overlap = min(min_overlap, min(da, db))
    limit = min(max_shift, min(da, db) - 1)

    best = None
    for s in range(-limit, limit + 1):
        lo, hi = max(0, -s), min(da, db - s)
        n = hi - lo
        if n < min_overlap:
            continue
        r = _pearson(pa[lo:hi], pb[lo + s:hi + s])
        if math.isnan(r):
            continue
        key = (r, n, -abs(s))
        if best is None or key > best[0]:
            best = (key, s)
    if best is None:
        return ZOffset(0, float("nan"), True)
    return ZOffset(best[1], best[0][0], False)


def _patch_bounds(center: int, radius: int, search: int, size: int) -> tuple[int, int]:
    """Patch extent around ``center`` pulled inward to leave room for the search."""
    lo = center - radius
    hi = center + radius + 1
    if size >= 2 * (radius + search) + 1:
        lo = min(max(lo, search), size - search - (2 * radius + 1))
        hi = lo + 2 * radius + 1
    return max(lo, 0), min(hi, size)


def _fill_invalid(vectors: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Give each invalid node the median of its valid 8-neighbours, growing outward."""
    vectors = vectors.copy()
    valid = valid.copy()
    if not valid.any():
        vectors[:] = 0.0
        return vectors
    gy, gx = valid.shape
    while not valid.all():
        updates = {}
        for iy, ix in zip(*np.nonzero(~valid)):
            ys = slice(max(iy - 1, 0), min(iy + 2, gy))
            xs = slice(max(ix - 1, 0), min(ix + 2, gx))
            neigh = vectors[ys, xs][valid[ys, xs]]
            if len(neigh):
                updates[(iy, ix)] = np.median(neigh, axis=0)
        for (iy, ix), v in updates.items():
            vectors[iy, ix] = v
            valid[iy, ix] = True
    return vectors


def estimate_deformation(
    mip_a: np.ndarray,
    mip_b: np.ndarray,
    grid_spacing: int = 32,
    search_radius: int = 32,
    patch_radius: int | None = None,
    min_score: float = 0.3,
    min_texture: float = 1e-3,
) -> DeformationField:
    """Block-matching displacement field carrying ``mip_a`` onto ``mip_b``.

    Each grid node matches a patch of ``mip_a`` into ``mip_b`` by normalized
    cross-correlation within ``±search_radius`` pixels. Nodes whose patch is
    textureless (std below ``min_texture`` times the image std) or whose best
    score is below ``min_score`` take the median of valid neighbours.
    """
    a = np.asarray(mip_a, dtype=np.float64)
    b = np.asarray(mip_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"projection shapes differ: {a.shape} vs {b.shape}")
    if patch_radius is None:
        patch_radius = max(8, grid_spacing // 2)
    h, w = a.shape
    gy, gx = grid_shape(a.shape, grid_spacing)
    vectors = np.zeros((gy, gx, 2))
    valid = np.zeros((gy, gx), dtype=bool)
    image_std = a.std()

    for iy in range(gy):
        cy = min(iy * grid_spacing, h - 1)
        r0, r1 = _patch_bounds(cy, patch_radius, search_radius, h)
        for ix in range(gx):
            cx = min(ix * grid_spacing, w - 1)
            c0, c1 = _patch_bounds(cx, patch_radius, search_radius, w)
            patch = a[r0:r1, c0:c1]
            if image_std == 0 or patch.std() <= min_texture * image_std:
                continue
            sr0, sr1 = max(r0 - search_radius, 0), min(r1 + search_radius, h)
            sc0, sc1 = max(c0 - search_radius, 0), min(c1 + search_radius, w)
            region = b[sr0:sr1, sc0:sc1]
            if region.std() == 0:
                continue
            ncc = match_template(region, patch)
            r, c = np.unravel_index(int(np.argmax(ncc)), ncc.shape)
            if ncc[r, c] < min_score:
                continue
            vectors[iy, ix] = (sc0 + c - c0, sr0 + r - r0)
            valid[iy, ix] = True

    return DeformationField(grid_spacing, (h, w), _fill_invalid(vectors, valid))


def project_box(box: BBox, field: DeformationField) -> BBox:
    """Move both box corners along ``field`` and re-normalize the result."""
    dx1, dy1 = field.displacement_at(box.x1, box.y1)
    dx2, dy2 = field.displacement_at(box.x2, box.y2)
    xa, xb = box.x1 + dx1, box.x2 + dx2
    ya, yb = box.y1 + dy1, box.y2 + dy2
    try:
        return BBox(min(xa, xb), min(ya, yb), max(xa, xb), max(ya, yb))
    except ValidationError as exc:
        raise ValueError(f"projected box collapsed: {exc}") from exc
