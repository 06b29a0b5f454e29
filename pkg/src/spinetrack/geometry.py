"""Overlap measures between axis-aligned boxes."""

from __future__ import annotations

from .model import BBox


def _intersection(a: BBox, b: BBox) -> float:
    w = min(a.x2, b.x2) - max(a.x1, b.x1)
    h = min(a.y2, b.y2) - max(a.y1, b.y1)
    if w <= 0 or h <= 0:
        return 0.0
    return w * h


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union, 0 for disjoint boxes."""
    inter = _intersection(a, b)
    return inter / (a.area + b.area - inter)


def giou(a: BBox, b: BBox) -> float:
    """Generalized IoU (Rezatofighi et al. 2019), in (-1, 1]."""
    inter = _intersection(a, b)
    union = a.area + b.area - inter
    enclosing = (max(a.x2, b.x2) - min(a.x1, b.x1)) * (max(a.y2, b.y2) - min(a.y1, b.y1))
    return inter / union - (enclosing - union) / enclosing


def iom(a: BBox, b: BBox) -> float:
    """Intersection over the smaller of the two box areas."""
    return _intersection(a, b) / min(a.area, b.area)


def spatial_cost(a: BBox, b: BBox) -> float:
    """Map gIoU onto a [0, 1] cost; 0 for identical boxes."""
    return (1.0 - giou(a, b)) / 2.0


SIMILARITIES = {"iou": iou, "iom": iom, "giou": giou}


def similarity_fn(name: str):
    try:
        return SIMILARITIES[name.lower()]
    except KeyError:
        raise ValueError(f"unknown similarity {name!r}; expected one of {sorted(SIMILARITIES)}") from None
