"""Spine size and spine-to-dendrite distance from image stacks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage
from skimage.filters import threshold_otsu
from skimage.morphology import disk

from .model import BBox, ImageStack, SpineObject3D, TimeTrack, TrackingConfig


@dataclass(frozen=True)
class SpineFeatures:
    object_id: str
    timepoint: int
    size_au: float
    spine_to_dendrite_um: float | None
    representative_z: int
    track_id: str | None = None
    flags: tuple[str, ...] = field(default=())


def segment_dendrite(
    image: np.ndarray,
    exclusion_boxes: Sequence[BBox] = (),
    opening_radius: int = 1,
) -> tuple[np.ndarray, bool]:
    """Binary dendrite mask of one slice and whether it came out empty.

    Otsu foreground, morphological opening, largest connected component,
    then every pixel inside an exclusion box is cleared.
    """
    img = np.asarray(image, dtype=np.float64)
    mask = np.zeros(img.shape, dtype=bool)
    if img.max() == img.min():
        return mask, True
    fg = img > threshold_otsu(img)
    if opening_radius > 0:
        fg = ndimage.binary_opening(fg, structure=disk(opening_radius))
    labels, n = ndimage.label(fg)
    if n == 0:
        return mask, True
    sizes = np.bincount(labels.ravel())[1:]
    mask = labels == (int(np.argmax(sizes)) + 1)
    for box in exclusion_boxes:
        mask[box.pixel_slices(mask.shape)] = False
    return mask, not mask.any()


def _ring(box: BBox, shape, width: int = 2) -> tuple[tuple[slice, slice], np.ndarray]:
    """Outer window and a boolean ring mask for the ``width``-pixel border around ``box``."""
    rs, cs = box.pixel_slices()
    r0, r1 = max(rs.start - width, 0), min(rs.stop + width, shape[0])
    c0, c1 = max(cs.start - width, 0), min(cs.stop + width, shape[1])
    ring = np.ones((r1 - r0, c1 - c0), dtype=bool)
    ring[max(rs.start, 0) - r0:min(rs.stop, shape[0]) - r0, max(cs.start, 0) - c0:min(cs.stop, shape[1]) - c0] = False
    return (slice(r0, r1), slice(c0, c1)), ring


def local_background(image: np.ndarray, box: BBox, width: int = 2) -> tuple[float, float]:
    """Median and MAD of the border ring around ``box``."""
    window, ring = _ring(box, image.shape, width)
    values = np.asarray(image[window], dtype=np.float64)[ring]
    if values.size == 0:
        values = np.asarray(image, dtype=np.float64).ravel()
    med = float(np.median(values))
    return med, float(np.median(np.abs(values - med)))


def integrated_excess(image: np.ndarray, box: BBox, background: float) -> float:
    patch = np.asarray(image[box.pixel_slices(image.shape)], dtype=np.float64)
    return float(np.clip(patch - background, 0.0, None).sum())


def representative_member(obj: SpineObject3D, stack: ImageStack, ring_width: int = 2) -> tuple[int, BBox, float, float]:
    """Member with the largest background-subtracted integrated intensity.

    Returns ``(z, box, integrated_excess, background)``; ties go to the lowest z.
    """
    best = None
    for (z, _), box in zip(obj.members, obj.boxes):
        image = stack.pixels[z]
        bg, _ = local_background(image, box, ring_width)
        total = integrated_excess(image, box, bg)
        if best is None or total > best[2]:
            best = (z, box, total, bg)
    return best


def dendrite_norm(
    image: np.ndarray,
    mask: np.ndarray,
    center: tuple[float, float],
    background: float,
    radius: float = 100.0,
) -> float | None:
    """Background-subtracted mean of the brightest quartile of nearby dendrite pixels.

    None when no dendrite pixel lies within ``radius`` or the value is not positive.
    """
    rows, cols = np.nonzero(mask)
    if radius is not None and len(rows):
        cx, cy = center
        near = (cols + 0.5 - cx) ** 2 + (rows + 0.5 - cy) ** 2 <= radius * radius
        rows, cols = rows[near], cols[near]
    if len(rows) == 0:
        return None
    values = np.asarray(image[rows, cols], dtype=np.float64)
    top = values[values >= np.percentile(values, 75)]
    norm = float(top.mean()) - background
    return norm if norm > 0 else None


def spine_size(
    obj: SpineObject3D,
    stack: ImageStack,
    dendrite_masks: Mapping[int, np.ndarray] | Sequence[np.ndarray],
    ring_width: int = 2,
    norm_radius: float = 100.0,
) -> tuple[float, int, tuple[str, ...]]:
    """Integrated excess fluorescence of the best slice over dendrite brightness.

    Returns ``(size_au, representative_z, flags)``. When no dendrite lies near
    the spine the whole-slice dendrite is used and a flag is raised.
    """
    z, box, total, bg = representative_member(obj, stack, ring_width)
    image = stack.pixels[z]
    mask = dendrite_masks[z]
    flags = []
    norm = dendrite_norm(image, mask, box.center, bg, norm_radius)
    if norm is None:
        flags.append("no dendrite near spine: normalized by whole-slice dendrite")
        norm = dendrite_norm(image, mask, box.center, bg, None)
    if norm is None:
        flags.append("no dendrite in slice: size unnormalized")
        norm = 1.0
    return total / norm, z, tuple(flags)


def spine_mask(image: np.ndarray, box: BBox, ring_width: int = 2, k_mad: float = 3.0) -> tuple[np.ndarray, float]:
    """Full-image mask of bright pixels inside ``box``, and the background level."""
    bg, mad = local_background(image, box, ring_width)
    mask = np.zeros(image.shape, dtype=bool)
    window = box.pixel_slices(image.shape)
    mask[window] = np.asarray(image[window], dtype=np.float64) > bg + k_mad * mad
    return mask, bg


def spine_to_dendrite_distance(
    obj: SpineObject3D,
    stack: ImageStack,
    dendrite_masks: Mapping[int, np.ndarray] | Sequence[np.ndarray],
    cfg: TrackingConfig | None = None,
    representative_z: int | None = None,
) -> tuple[float | None, tuple[str, ...]]:
    """Head-centre to spine-dendrite junction distance in micrometres.

    The spine mask is dilated step by step until it meets the dendrite; the
    junction is the centroid of that first overlap and the head centre the
    intensity-weighted centroid of the spine mask. Returns ``(None, flags)``
    when the dendrite is out of reach.
    """
    cfg = cfg or TrackingConfig()
    if representative_z is None:
        representative_z = representative_member(obj, stack)[0]
    z = representative_z
    box = obj.box_at(z)
    image = np.asarray(stack.pixels[z], dtype=np.float64)
    dend = np.asarray(dendrite_masks[z], dtype=bool)
    mask, bg = spine_mask(image, box)
    if not mask.any():
        return None, ("empty spine mask",)

    rows, cols = np.nonzero(mask)
    weights = image[rows, cols] - bg
    head = (float(np.average(cols, weights=weights)), float(np.average(rows, weights=weights)))

    grown = mask
    structure = disk(cfg.dilation_radius)
    for _ in range(cfg.max_dilation_steps):
        grown = ndimage.binary_dilation(grown, structure=structure)
        overlap = grown & dend
        if overlap.any():
            jr, jc = np.nonzero(overlap)
            junction = (float(jc.mean()), float(jr.mean()))
            dist_px = math.hypot(head[0] - junction[0], head[1] - junction[1])
            return dist_px * stack.voxel_size_um[0], ()
    return None, ("dendrite not reached after dilation",)


def dendrite_masks_for(stack: ImageStack, objects: Sequence[SpineObject3D]) -> list[np.ndarray]:
    """Per-slice dendrite masks with every spine box of that slice excluded."""
    boxes = {z: [] for z in range(stack.depth)}
    for obj in objects:
        for (z, _), box in zip(obj.members, obj.boxes):
            boxes[z].append(box)
    return [segment_dendrite(stack.pixels[z], boxes[z])[0] for z in range(stack.depth)]


def extract_features(
    objects: Sequence[SpineObject3D],
    stack: ImageStack,
    cfg: TrackingConfig | None = None,
    tracks: Sequence[TimeTrack] = (),
) -> list[SpineFeatures]:
    """Size and distance for every object of one stack."""
    cfg = cfg or TrackingConfig()
    track_of = {oid: trk.track_id for trk in tracks for oid in trk.assignments.values()}
    objects = [o for o in objects if (o.stack_id, o.timepoint) == (stack.stack_id, stack.timepoint)]
    masks = dendrite_masks_for(stack, objects)
    out = []
    for obj in objects:
        size, z, size_flags = spine_size(obj, stack, masks)
        dist, dist_flags = spine_to_dendrite_distance(obj, stack, masks, cfg, z)
        out.append(SpineFeatures(
            object_id=obj.object_id,
            timepoint=obj.timepoint,
            size_au=size,
            spine_to_dendrite_um=dist,
            representative_z=z,
            track_id=track_of.get(obj.object_id),
            flags=size_flags + dist_flags,
        ))
    return out


def feature_correlation(manual: Sequence[float], automated: Sequence[float]) -> float:
    """Pearson correlation between manual and automated feature values."""
    x = np.asarray(manual, dtype=float)
    y = np.asarray(automated, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or len(x) == 0:
        raise ValueError("feature lists must be nonempty and of equal length")
    xc, yc = x - x.mean(), y - y.mean()
    sxx, syy = float(xc @ xc), float(yc @ yc)
    if sxx == 0 or syy == 0:
        raise ValueError("correlation undefined for a zero-variance series")
    return float(xc @ yc) / math.sqrt(sxx * syy)
