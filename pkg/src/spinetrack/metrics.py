"""Detection and multi-object tracking evaluation.

Tracking metrics follow the TrackEval definitions: CLEAR-MOT for MOTA, the
global identity bijection for IDF1 and the 19-threshold HOTA sweep for
HOTA, DetA and AssA. Inputs are flat lists of :class:`TrackPoint`; frames
are any sortable keys (z-slices for depth tracking, timepoints for time
tracking).
"""

from __future__ import annotations

from collections import defaultdict
from typing import Hashable, NamedTuple, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .assign import CostMatrix, MatchResult, solve
from .geometry import similarity_fn
from .model import BBox, Detection2D, EvalReport, SpineObject3D, TimeTrack, f1_score, median_box

HOTA_ALPHAS = np.arange(0.05, 0.99, 0.05)
_EPS = np.finfo(float).eps


class EvaluationError(ValueError):
    pass


class TrackPoint(NamedTuple):
    frame: Hashable
    track_id: str
    bbox: BBox


def _frame_key(d: Detection2D):
    return (d.stack_id, d.timepoint, d.z)


def match_frame(
    gt: Sequence[Detection2D],
    pred: Sequence[Detection2D],
    similarity: str = "iom",
    threshold: float = 0.7,
) -> MatchResult:
    """Optimal one-to-one matching of ground truth to predictions in one frame.

    Minimizes ``1 - similarity``; pairs below ``threshold`` can never match.
    The pair costs in the result are ``1 - similarity``.
    """
    sim = similarity_fn(similarity)
    costs = np.zeros((len(gt), len(pred)))
    forbidden = np.zeros_like(costs, dtype=bool)
    for r, g in enumerate(gt):
        for c, p in enumerate(pred):
            s = sim(g.bbox, p.bbox)
            costs[r, c] = 1.0 - s
            forbidden[r, c] = s < threshold
    return solve(CostMatrix(tuple(g.id for g in gt), tuple(p.id for p in pred), costs, forbidden))


def detection_prf(
    gt: Sequence[Detection2D],
    pred: Sequence[Detection2D],
    similarity: str = "iom",
    threshold: float = 0.7,
) -> tuple[float, float, float, list[str]]:
    """Precision, recall, F1 and flags over all frames.

    Frames are ``(stack_id, timepoint, z)``. Undefined ratios score 0 and
    add a flag.
    """
    gt_frames, pred_frames = defaultdict(list), defaultdict(list)
    for d in gt:
        gt_frames[_frame_key(d)].append(d)
    for d in pred:
        pred_frames[_frame_key(d)].append(d)
    tp = 0
    for key in set(gt_frames) | set(pred_frames):
        tp += len(match_frame(gt_frames.get(key, []), pred_frames.get(key, []), similarity, threshold).pairs)
    flags = []
    if pred:
        precision = tp / len(pred)
    else:
        precision = 0.0
        flags.append("precision undefined: no predictions")
    if gt:
        recall = tp / len(gt)
    else:
        recall = 0.0
        flags.append("recall undefined: no ground truth")
    return precision, recall, f1_score(precision, recall), flags


class _Frames:
    """Tracking data indexed for the metric loops."""

    def __init__(self, gt: Sequence[TrackPoint], pred: Sequence[TrackPoint], similarity: str = "iou"):
        sim = similarity_fn(similarity)
        self.gt_names = sorted({p.track_id for p in gt})
        self.pred_names = sorted({p.track_id for p in pred})
        gt_index = {n: k for k, n in enumerate(self.gt_names)}
        pred_index = {n: k for k, n in enumerate(self.pred_names)}
        gt_by, pred_by = defaultdict(list), defaultdict(list)
        for p in gt:
            gt_by[p.frame].append(p)
        for p in pred:
            pred_by[p.frame].append(p)
        self.frames = []
        for key in _sorted_frames(set(gt_by) | set(pred_by)):
            g, q = gt_by.get(key, []), pred_by.get(key, [])
            for pts in (g, q):
                ids = [p.track_id for p in pts]
                if len(set(ids)) != len(ids):
                    raise EvaluationError(f"frame {key!r}: identity present twice")
            gids = np.array([gt_index[p.track_id] for p in g], dtype=int)
            pids = np.array([pred_index[p.track_id] for p in q], dtype=int)
            s = np.array([[sim(a.bbox, b.bbox) for b in q] for a in g]).reshape(len(g), len(q))
            self.frames.append((gids, pids, s))
        self.n_gt_dets = len(gt)
        self.n_pred_dets = len(pred)
        if self.n_gt_dets == 0:
            raise EvaluationError("no ground-truth detections")


def _sorted_frames(keys):
    try:
        return sorted(keys)
    except TypeError:
        return sorted(keys, key=repr)


def clear_mot(data: _Frames, threshold: float = 0.5) -> dict:
    """CLEAR-MOT counts with previous-frame identity preference."""
    n_gt = len(data.gt_names)
    prev_id = np.full(n_gt, np.nan)
    prev_step_id = np.full(n_gt, np.nan)
    tp = fn = fp = idsw = 0
    for gids, pids, sim in data.frames:
        if len(gids) == 0:
            fp += len(pids)
            continue
        if len(pids) == 0:
            fn += len(gids)
            continue
        continuing = pids[None, :] == prev_step_id[gids][:, None]
        score = 1000.0 * continuing + sim
        score[sim < threshold - _EPS] = 0.0
        rows, cols = linear_sum_assignment(-score)
        ok = score[rows, cols] > _EPS
        rows, cols = rows[ok], cols[ok]
        matched_g, matched_p = gids[rows], pids[cols]
        before = prev_id[matched_g]
        idsw += int(np.sum(~np.isnan(before) & (matched_p != before)))
        prev_step_id[:] = np.nan
        prev_step_id[matched_g] = matched_p
        prev_id[matched_g] = matched_p
        tp += len(rows)
        fn += len(gids) - len(rows)
        fp += len(pids) - len(rows)
    mota = 1.0 - (fn + fp + idsw) / data.n_gt_dets
    return {"tp": tp, "fn": fn, "fp": fp, "idsw": idsw, "mota": 100.0 * mota}


def identity_scores(data: _Frames, threshold: float = 0.5) -> dict:
    """IDF1 from the optimal bijection between ground-truth and predicted ids."""
    overlap = np.zeros((len(data.gt_names), len(data.pred_names)))
    for gids, pids, sim in data.frames:
        r, c = np.nonzero(sim >= threshold - _EPS)
        np.add.at(overlap, (gids[r], pids[c]), 1)
    if overlap.size:
        rows, cols = linear_sum_assignment(overlap, maximize=True)
        idtp = float(overlap[rows, cols].sum())
    else:
        idtp = 0.0
    idfn = data.n_gt_dets - idtp
    idfp = data.n_pred_dets - idtp
    idf1 = 2 * idtp / max(1.0, 2 * idtp + idfp + idfn)
    return {"idtp": idtp, "idfn": idfn, "idfp": idfp, "idf1": 100.0 * idf1}


def hota_scores(data: _Frames) -> dict:
    """HOTA, DetA and AssA per threshold and averaged, on a 0-100 scale."""
    n_gt, n_pr = len(data.gt_names), len(data.pred_names)
    n_alpha = len(HOTA_ALPHAS)
    if n_pr == 0:
        zeros = np.zeros(n_alpha)
        return {"hota": 0.0, "deta": 0.0, "assa": 0.0,
                "hota_alpha": zeros, "deta_alpha": zeros, "assa_alpha": zeros}

    potential = np.zeros((n_gt, n_pr))
    gt_count = np.zeros(n_gt)
    pr_count = np.zeros(n_pr)
    for gids, pids, sim in data.frames:
        gt_count[gids] += 1
        pr_count[pids] += 1
        if sim.size == 0:
            continue
        denom = sim.sum(axis=0)[None, :] + sim.sum(axis=1)[:, None] - sim
        sim_iou = np.zeros_like(sim)
        mask = denom > _EPS
        sim_iou[mask] = sim[mask] / denom[mask]
        potential[gids[:, None], pids[None, :]] += sim_iou
    global_score = potential / (gt_count[:, None] + pr_count[None, :] - potential)

    tp = np.zeros(n_alpha)
    fn = np.zeros(n_alpha)
    fp = np.zeros(n_alpha)
    matches = np.zeros((n_alpha, n_gt, n_pr))
    for gids, pids, sim in data.frames:
        if len(gids) == 0:
            fp += len(pids)
            continue
        if len(pids) == 0:
            fn += len(gids)
            continue
        score = global_score[gids[:, None], pids[None, :]] * sim
        rows, cols = linear_sum_assignment(-score)
        for a, alpha in enumerate(HOTA_ALPHAS):
            ok = sim[rows, cols] >= alpha - _EPS
            r, c = rows[ok], cols[ok]
            tp[a] += len(r)
            fn[a] += len(gids) - len(r)
            fp[a] += len(pids) - len(r)
            if len(r):
                matches[a, gids[r], pids[c]] += 1

    deta = tp / np.maximum(1.0, tp + fn + fp)
    assa = np.zeros(n_alpha)
    for a in range(n_alpha):
        m = matches[a]
        ass = m / np.maximum(1.0, gt_count[:, None] + pr_count[None, :] - m)
        assa[a] = np.sum(m * ass) / max(1.0, tp[a])
    hota = np.sqrt(deta * assa)
    return {
        "hota": 100.0 * float(hota.mean()),
        "deta": 100.0 * float(deta.mean()),
        "assa": 100.0 * float(assa.mean()),
        "hota_alpha": 100.0 * hota,
        "deta_alpha": 100.0 * deta,
        "assa_alpha": 100.0 * assa,
    }


def mota(gt: Sequence[TrackPoint], pred: Sequence[TrackPoint], threshold: float = 0.5, similarity: str = "iou") -> float:
    return clear_mot(_Frames(gt, pred, similarity), threshold)["mota"]


def idf1(gt: Sequence[TrackPoint], pred: Sequence[TrackPoint], threshold: float = 0.5, similarity: str = "iou") -> float:
    return identity_scores(_Frames(gt, pred, similarity), threshold)["idf1"]


def hota_assa(gt: Sequence[TrackPoint], pred: Sequence[TrackPoint], similarity: str = "iou") -> tuple[float, float, float]:
    """Return ``(hota, assa, deta)`` percentages."""
    scores = hota_scores(_Frames(gt, pred, similarity))
    return scores["hota"], scores["assa"], scores["deta"]


def evaluate_tracking(
    gt: Sequence[TrackPoint],
    pred: Sequence[TrackPoint],
    threshold: float = 0.5,
    similarity: str = "iou",
    mode: str = "tracking",
) -> EvalReport:
    data = _Frames(gt, pred, similarity)
    clear = clear_mot(data, threshold)
    ident = identity_scores(data, threshold)
    hota = hota_scores(data)
    flags = []
    if not pred:
        flags.append("no predictions: scores are 0")
    precision = clear["tp"] / data.n_pred_dets if data.n_pred_dets else 0.0
    recall = clear["tp"] / data.n_gt_dets
    return EvalReport(
        mode=mode,
        mota=clear["mota"],
        hota=hota["hota"],
        idf1=ident["idf1"],
        assa=hota["assa"],
        deta=hota["deta"],
        precision=precision,
        recall=recall,
        f1=f1_score(precision, recall),
        detections=data.n_pred_dets,
        tracks=len(data.pred_names),
        id_switches=clear["idsw"],
        fn=clear["fn"],
        fp=clear["fp"],
        flags=flags,
    )


def evaluate_detections(
    gt: Sequence[Detection2D],
    pred: Sequence[Detection2D],
    similarity: str = "iom",
    threshold: float = 0.7,
) -> EvalReport:
    precision, recall, f1, flags = detection_prf(gt, pred, similarity, threshold)
    tp = round(recall * len(gt)) if gt else round(precision * len(pred))
    return EvalReport(
        mode="detection",
        precision=precision,
        recall=recall,
        f1=f1,
        detections=len(pred),
        fn=len(gt) - tp,
        fp=len(pred) - tp,
        flags=flags,
    )


# Adapters from pipeline outputs to track points.

def gt_depth_points(detections: Sequence[Detection2D]) -> list[TrackPoint]:
    """Ground-truth 3D identities, one frame per (stack, timepoint, z)."""
    points = []
    for d in detections:
        if d.gt_object_id is None:
            raise EvaluationError(f"{d.id} has no gt_object_id")
        points.append(TrackPoint(_frame_key(d), f"{d.stack_id}|{d.timepoint}|{d.gt_object_id}", d.bbox))
    return points


def pred_depth_points(objects: Sequence[SpineObject3D]) -> list[TrackPoint]:
    return [
        TrackPoint((o.stack_id, o.timepoint, z), o.object_id, box)
        for o in objects
        for (z, _), box in zip(o.members, o.boxes)
    ]


def gt_time_points(detections: Sequence[Detection2D]) -> list[TrackPoint]:
    """One median box per ground-truth object, framed by (stack, timepoint)."""
    groups = defaultdict(list)
    track_of = {}
    for d in detections:
        if d.gt_object_id is None or d.gt_track_id is None:
            raise EvaluationError(f"{d.id} lacks gt_object_id or gt_track_id")
        key = (d.stack_id, d.timepoint, d.gt_object_id)
        groups[key].append(d.bbox)
        if track_of.setdefault(key, d.gt_track_id) != d.gt_track_id:
            raise EvaluationError(f"object {d.gt_object_id} carries two track ids")
    return [
        TrackPoint((stack, t), f"{stack}|{track_of[(stack, t, obj)]}", median_box(boxes))
        for (stack, t, obj), boxes in sorted(groups.items())
    ]


def pred_time_points(tracks: Sequence[TimeTrack], objects: Sequence[SpineObject3D]) -> list[TrackPoint]:
    by_id = {o.object_id: o for o in objects}
    points = []
    for track in tracks:
        for t, oid in sorted(track.assignments.items()):
            obj = by_id[oid]
            points.append(TrackPoint((obj.stack_id, t), f"{obj.stack_id}|{track.track_id}", obj.median_box))
    return points
