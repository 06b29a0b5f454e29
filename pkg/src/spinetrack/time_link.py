"""Associate 3D spine objects across consecutive timepoints."""

from __future__ import annotations

from typing import Iterable, Mapping, Sequence

import numpy as np

from .appearance import appearance_cost
from .assign import CostMatrix, solve_gated
from .geometry import spatial_cost
from .model import SpineObject3D, TimeTrack, TrackingConfig, ValidationError
from .volume import DeformationField, ZOffset, project_box


def depth_consistency_cost(z_i: Iterable[int], z_j: Iterable[int], z_offset: int | ZOffset = 0) -> float:
    """Depth-layer mismatch between two objects.

    ``z_offset`` is added to every layer of ``z_i`` first. Overlapping sets
    score ``1 - |overlap| / min size``; disjoint sets score the positive gap
    in layers between them, which is deliberately unbounded. Disjoint sets
    that interleave (``{0, 2}`` and ``{1}``) have no gap and score 1, the
    zero-overlap value.
    """
    shift = int(z_offset)
    a = {int(z) + shift for z in z_i}
    b = {int(z) for z in z_j}
    if not a or not b:
        raise ValueError("depth sets must be nonempty")
    inter = len(a & b)
    if inter == 0:
        return float(max(min(a) - max(b), min(b) - max(a), 1))
    return 1.0 - inter / min(len(a), len(b))


def time_cost(
    i: SpineObject3D,
    j: SpineObject3D,
    field: DeformationField | None,
    z_offset: int | ZOffset,
    cfg: TrackingConfig,
    fallback_app: float | None = None,
) -> float:
    """Weighted spatial, depth and appearance cost of linking ``i`` to ``j``.

    The spatial term compares ``i``'s median box carried through ``field``
    with ``j``'s median box. The appearance term uses the mean embeddings and
    falls back to ``fallback_app`` (or is dropped) when one is missing.
    """
    if field is None:
        raise ValueError("a deformation field is required for time linking")
    cost = 0.0
    if cfg.lambda_sp > 0:
        cost += cfg.lambda_sp * spatial_cost(project_box(i.median_box, field), j.median_box)
    if cfg.lambda_depth > 0:
        cost += cfg.lambda_depth * depth_consistency_cost(i.depth_set, j.depth_set, z_offset)
    if cfg.lambda_app > 0:
        if i.mean_embedding is not None and j.mean_embedding is not None:
            cost += cfg.lambda_app * appearance_cost(i.mean_embedding, j.mean_embedding)
        elif fallback_app is not None:
            cost += cfg.lambda_app * fallback_app
    return cost


def _pair_inputs(pairs, n_pairs: int, default, name: str) -> list:
    if pairs is None:
        return [default] * n_pairs
    if isinstance(pairs, Mapping):
        out = []
        for t in range(n_pairs):
            if t in pairs:
                out.append(pairs[t])
            elif (t, t + 1) in pairs:
                out.append(pairs[(t, t + 1)])
            else:
                raise ValueError(f"no {name} for timepoints ({t}, {t + 1})")
        return out
    pairs = list(pairs)
    if len(pairs) != n_pairs:
        raise ValueError(f"expected {n_pairs} {name} entries, got {len(pairs)}")
    return pairs


def _median_app(prev: Sequence[SpineObject3D], curr: Sequence[SpineObject3D]) -> float | None:
    values = [
        appearance_cost(a.mean_embedding, b.mean_embedding)
        for a in prev
        if a.mean_embedding is not None
        for b in curr
        if b.mean_embedding is not None
    ]
    return float(np.median(values)) if values else None


def link_time(
    objects_by_timepoint: Mapping[int, Sequence[SpineObject3D]],
    fields=None,
    z_offsets=None,
    cfg: TrackingConfig | None = None,
) -> list[TimeTrack]:
    """Chain objects of consecutive timepoints into tracks.

    ``fields`` and ``z_offsets`` hold one entry per pair ``(t, t + 1)``,
    either as a sequence or a mapping keyed by ``t``; missing fields default
    to the identity and missing offsets to zero. Objects unmatched at
    ``t + 1`` start new tracks; tracks unmatched at ``t`` end there.
    """
    cfg = cfg or TrackingConfig.time_defaults()
    timepoints = sorted(objects_by_timepoint)
    if not timepoints:
        return []
    if timepoints != list(range(len(timepoints))):
        raise ValidationError(f"timepoints must be consecutive from 0, got {timepoints}")
    for t in timepoints:
        for obj in objects_by_timepoint[t]:
            if obj.timepoint != t:
                raise ValidationError(f"{obj.object_id} has timepoint {obj.timepoint}, listed under {t}")
    n_pairs = len(timepoints) - 1
    fields = _pair_inputs(fields, n_pairs, None, "deformation field")
    z_offsets = _pair_inputs(z_offsets, n_pairs, 0, "z offset")

    tracks: list[dict] = []
    open_tracks: dict[str, int] = {}  # object id at t -> track index
    first = sorted(objects_by_timepoint[0], key=lambda o: o.object_id)
    for obj in first:
        open_tracks[obj.object_id] = len(tracks)
        tracks.append({0: obj.object_id})

    for t in range(n_pairs):
        prev = sorted(objects_by_timepoint[t], key=lambda o: o.object_id)
        curr = sorted(objects_by_timepoint[t + 1], key=lambda o: o.object_id)
        field = fields[t]
        if field is None:
            shape = _implied_shape(prev + curr)
            field = DeformationField.zeros(shape, spacing=max(shape))
        fallback = _median_app(prev, curr) if cfg.lambda_app > 0 else None
        costs = np.array(
            [[time_cost(a, b, field, z_offsets[t], cfg, fallback) for b in curr] for a in prev]
        ).reshape(len(prev), len(curr))
        matrix = CostMatrix(tuple(o.object_id for o in prev), tuple(o.object_id for o in curr), costs)
        result = solve_gated(matrix, cfg.match_threshold_time, cfg.gate_mode)
        matched = {col: row for row, col, _ in result.pairs}

        next_open = {}
        for obj in curr:
            if obj.object_id in matched:
                idx = open_tracks[matched[obj.object_id]]
            else:
                idx = len(tracks)
                tracks.append({})
            tracks[idx][t + 1] = obj.object_id
            next_open[obj.object_id] = idx
        open_tracks = next_open

    return [TimeTrack(f"trk{n:05d}", assignments) for n, assignments in enumerate(tracks)]


def _implied_shape(objects: Sequence[SpineObject3D]) -> tuple[int, int]:
    if not objects:
        return (1, 1)
    h = max(o.median_box.y2 for o in objects)
    w = max(o.median_box.x2 for o in objects)
    return (int(np.ceil(h)) + 1, int(np.ceil(w)) + 1)
