"""Link 2D detections across consecutive z-slices into 3D spine objects."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .appearance import appearance_cost
from .assign import CostMatrix, solve_gated
from .geometry import iom, spatial_cost
from .model import Detection2D, SpineObject3D, TrackingConfig, ValidationError, build_object
from .volume import SliceOffsets


def group_by_slice(detections: Iterable[Detection2D]) -> dict[int, list[Detection2D]]:
    """Bucket detections of one stack and timepoint by z, sorted by id."""
    detections = list(detections)
    keys = {(d.stack_id, d.timepoint) for d in detections}
    if len(keys) > 1:
        raise ValidationError(f"detections span several stacks/timepoints: {sorted(keys)}")
    by_z = defaultdict(list)
    for d in detections:
        by_z[d.z].append(d)
    return {z: sorted(ds, key=lambda d: d.id) for z, ds in sorted(by_z.items())}


def _normalize_input(detections) -> dict[int, list[Detection2D]]:
    if isinstance(detections, Mapping):
        flat = [d for ds in detections.values() for d in ds]
    else:
        flat = [d for item in detections for d in (item if isinstance(item, (list, tuple)) else [item])]
    return group_by_slice(flat)


def depth_cost(
    i: Detection2D,
    j: Detection2D,
    offsets: SliceOffsets | None,
    cfg: TrackingConfig,
    embeddings: Mapping | None = None,
    fallback_app: float | None = None,
    max_gap: int = 1,
) -> float:
    """Weighted spatial plus appearance cost between two detections.

    Boxes are moved into the slice-0 frame before the spatial term. The
    appearance term is dropped when ``lambda_app`` is zero, or when either
    embedding is missing and no ``fallback_app`` is given.
    """
    if (i.stack_id, i.timepoint) != (j.stack_id, j.timepoint):
        raise ValueError(f"{i.id} and {j.id} come from different stacks/timepoints")
    if not 1 <= j.z - i.z <= max_gap:
        raise ValueError(f"{i.id} (z={i.z}) and {j.id} (z={j.z}) are not on adjacent slices")
    bi, bj = i.bbox, j.bbox
    if offsets is not None:
        bi, bj = offsets.align_box(bi, i.z), offsets.align_box(bj, j.z)
    cost = cfg.lambda_sp * spatial_cost(bi, bj)
    if cfg.lambda_app > 0:
        if embeddings is not None and i.id in embeddings and j.id in embeddings:
            cost += cfg.lambda_app * appearance_cost(embeddings[i.id], embeddings[j.id])
        elif fallback_app is not None:
            cost += cfg.lambda_app * fallback_app
    return cost


@dataclass
class _Identity:
    key: int
    members: list[Detection2D]

    @property
    def last(self) -> Detection2D:
        return self.members[-1]


def _median_app_cost(by_z, embeddings, offsets, cfg) -> float | None:
    """Median appearance cost over candidate pairs where both embeddings exist."""
    values = []
    zs = sorted(by_z)
    for z in zs:
        for dz in range(1, cfg.gap_bridge + 2):
            for a in by_z[z]:
                if a.id not in embeddings:
                    continue
                for b in by_z.get(z + dz, ()):
                    if b.id in embeddings and _within_radius(a, b, offsets, cfg.candidate_radius):
                        values.append(appearance_cost(embeddings[a.id], embeddings[b.id]))
    return float(np.median(values)) if values else None


def _aligned_center(d: Detection2D, offsets: SliceOffsets | None) -> tuple[float, float]:
    cx, cy = d.bbox.center
    if offsets is not None:
        dx, dy = offsets[d.z]
        cx, cy = cx - dx, cy - dy
    return cx, cy


def _within_radius(a, b, offsets, radius) -> bool:
    ax, ay = _aligned_center(a, offsets)
    bx, by = _aligned_center(b, offsets)
    return math.hypot(ax - bx, ay - by) <= radius


def _cost_bound(cfg: TrackingConfig, embeddings) -> float:
    """Largest cost a candidate pair can take (unit embeddings are at most 2 apart)."""
    bound = cfg.lambda_sp
    if cfg.lambda_app > 0 and embeddings is not None:
        if getattr(embeddings, "normalized", False):
            bound += 2 * cfg.lambda_app
        else:
            bound += cfg.lambda_app * 2 * max((float(np.linalg.norm(v)) for v in embeddings.values()), default=1.0)
    return bound


def _finish(identities: Sequence[_Identity], embeddings, prefix: str) -> list[SpineObject3D]:
    ordered = sorted(identities, key=lambda ident: ident.key)
    return [build_object(f"{prefix}o{n:04d}", ident.members, embeddings) for n, ident in enumerate(ordered)]


def _object_prefix(by_z) -> str:
    first = next(d for ds in by_z.values() for d in ds)
    return f"{first.stack_id}_t{first.timepoint}_"


def link_depth(
    detections,
    offsets: SliceOffsets | None,
    cfg: TrackingConfig,
    embeddings: Mapping | None = None,
) -> list[SpineObject3D]:
    """Chain detections of one stack into 3D objects slice by slice.

    For each slice ``z + 1`` the open identities (last seen within
    ``gap_bridge + 1`` slices) are matched to its detections by gated
    Hungarian assignment on :func:`depth_cost`. Unmatched detections open
    new identities. Every detection ends up in exactly one object.

    ``detections`` is either a mapping ``z -> list`` or a flat iterable.
    """
    by_z = _normalize_input(detections)
    if not by_z:
        return []
    if offsets is not None and max(by_z) >= len(offsets):
        raise ValidationError(f"detection at z={max(by_z)} beyond {len(offsets)} slice offsets")
    use_app = cfg.lambda_app > 0 and embeddings is not None
    fallback = _median_app_cost(by_z, embeddings, offsets, cfg) if use_app else None
    emb = embeddings if use_app else None
    max_gap = cfg.gap_bridge + 1
    bound = _cost_bound(cfg, emb)

    identities: list[_Identity] = []
    open_ids: list[_Identity] = []
    for z in range(min(by_z), max(by_z) + 1):
        current = by_z.get(z, [])
        open_ids = [ident for ident in open_ids if z - ident.last.z <= max_gap]
        if not current:
            continue
        matched = {}
        if open_ids:
            n, m = len(open_ids), len(current)
            costs = np.zeros((n, m))
            pruned = np.zeros((n, m), dtype=bool)
            for r, ident in enumerate(open_ids):
                for c, det in enumerate(current):
                    if not _within_radius(ident.last, det, offsets, cfg.candidate_radius):
                        pruned[r, c] = True
                        continue
                    costs[r, c] = depth_cost(ident.last, det, offsets, cfg, emb, fallback, max_gap)
            # Pruned pairs take the worst possible cost instead of being
            # forbidden: a maximum matching over the remaining cells could
            # otherwise trade one good pair for two bad ones.
            costs[pruned] = max(bound, costs.max())
            row_ids = tuple(f"{ident.key:08d}" for ident in open_ids)
            col_ids = tuple(d.id for d in current)
            result = solve_gated(CostMatrix(row_ids, col_ids, costs), cfg.match_threshold_depth, cfg.gate_mode)
            never = {(row_ids[r], col_ids[c]) for r, c in zip(*np.nonzero(pruned))}
            matched = {col: int(row) for row, col, _ in result.pairs if (row, col) not in never}
        by_key = {ident.key: ident for ident in open_ids}
        for det in current:
            if det.id in matched:
                by_key[matched[det.id]].members.append(det)
            else:
                ident = _Identity(len(identities), [det])
                identities.append(ident)
                open_ids.append(ident)
    return _finish(identities, embeddings, _object_prefix(by_z))


def link_depth_iom_baseline(detections, threshold: float = 0.5) -> list[SpineObject3D]:
    """Greedy adjacent-slice grouping by intersection over minimum.

    Pairs with IoM >= ``threshold`` are accepted in order of decreasing IoM,
    each identity and detection taking at most one partner per slice step.
    """
    by_z = _normalize_input(detections)
    if not by_z:
        return []
    identities: list[_Identity] = []
    previous: list[_Identity] = []
    for z in range(min(by_z), max(by_z) + 1):
        current = by_z.get(z, [])
        candidates = []
        for ident in previous:
            for det in current:
                score = iom(ident.last.bbox, det.bbox)
                if score >= threshold:
                    candidates.append((-score, ident.key, det.id, ident, det))
        candidates.sort(key=lambda item: item[:3])
        used_ids, used_dets = set(), set()
        extended = []
        for _, key, det_id, ident, det in candidates:
            if key in used_ids or det_id in used_dets:
                continue
            used_ids.add(key)
            used_dets.add(det_id)
            ident.members.append(det)
            extended.append(ident)
        for det in current:
            if det.id not in used_dets:
                ident = _Identity(len(identities), [det])
                identities.append(ident)
                extended.append(ident)
        previous = extended
    return _finish(identities, None, _object_prefix(by_z))
