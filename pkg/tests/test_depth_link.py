import math

import pytest
from hypothesis import given, strategies as st

from conftest import det
from spinetrack.depth_link import depth_cost, link_depth, link_depth_iom_baseline
from spinetrack.model import TrackingConfig
from spinetrack.volume import SliceOffsets

SP = TrackingConfig()


def column(prefix, x, zs, size=10):
    return [det(f"{prefix}{z}", z, (x, 10, x + size, 10 + size)) for z in zs]


def test_depth_cost_hand_values():
    # nested boxes with area ratio 1/5: gIoU = IoU = 0.2, spatial cost 0.4
    a = det("a", 0, (0, 0, 5, 1))
    b = det("b", 1, (0, 0, 1, 1))
    c = math.sqrt(1 - 0.82 ** 2)
    emb = {"a": (1.0, 0.0), "b": (0.82, c)}  # distance 0.6
    cfg = TrackingConfig(lambda_sp=0.5, lambda_app=0.5)
    assert depth_cost(a, b, None, cfg, emb) == pytest.approx(0.5, abs=1e-12)
    assert depth_cost(a, b, None, TrackingConfig(lambda_sp=2.0), emb) == pytest.approx(0.8, abs=1e-12)
    same = det("c", 1, (0, 0, 5, 1))
    assert depth_cost(a, same, None, cfg, {"a": (1, 0), "c": (1, 0)}) == 0.0


def test_depth_cost_uses_alignment():
    a = det("a", 0, (0, 0, 10, 10))
    b = det("b", 1, (3, 0, 13, 10))
    offsets = SliceOffsets(((0, 0), (3, 0)), (False, False))
    assert depth_cost(a, b, offsets, SP) == 0.0
    assert depth_cost(a, b, None, SP) > 0.0


def test_single_column():
    objs = link_depth(column("d", 0, range(5)), None, SP)
    assert len(objs) == 1 and len(objs[0].depth_set) == 5


def test_two_parallel_columns():
    dets = column("a", 0, range(6)) + column("b", 40, range(6))
    objs = link_depth(dets, None, SP)
    assert sorted(o.detection_ids for o in objs) == [tuple(f"a{z}" for z in range(6)), tuple(f"b{z}" for z in range(6))]


def test_missing_slice_splits_without_bridge():
    dets = column("d", 0, [0, 1, 3, 4])
    assert len(link_depth(dets, None, SP)) == 2
    assert len(link_depth(dets, None, TrackingConfig(gap_bridge=1))) == 1


def test_iom_baseline():
    nested = [det("a", 0, (0, 0, 10, 10)), det("b", 1, (2, 2, 6, 6))]
    assert len(link_depth_iom_baseline(nested)) == 1
    disjoint = [det("a", 0, (0, 0, 10, 10)), det("b", 1, (20, 20, 30, 30))]
    assert len(link_depth_iom_baseline(disjoint)) == 2
    # intersection 50 over min area 100: IoM exactly 0.5 is merged
    half = [det("a", 0, (0, 0, 10, 10)), det("b", 1, (5, 0, 15, 10))]
    assert len(link_depth_iom_baseline(half, 0.5)) == 1


def test_missing_embedding_uses_median_fallback():
    dets = column("d", 0, range(3))
    emb = {"d0": (1, 0), "d1": (1, 0)}
    objs = link_depth(dets, None, TrackingConfig.sp_app(), emb)
    assert len(objs) == 1 and objs[0].mean_embedding is None


boxes = st.tuples(st.integers(0, 60), st.integers(0, 60), st.integers(4, 14))
layers = st.lists(st.lists(boxes, max_size=4), min_size=1, max_size=8)


def _dets(layer_boxes):
    return [det(f"d{z}_{k}", z, (x, y, x + s, y + s)) for z, bs in enumerate(layer_boxes) for k, (x, y, s) in enumerate(bs)]


@given(layers, st.integers(0, 2))
def test_partition_and_z_order(layer_boxes, bridge):
    dets = _dets(layer_boxes)
    if not dets:
        return
    objs = link_depth(dets, None, TrackingConfig(gap_bridge=bridge))
    ids = [d for o in objs for d in o.detection_ids]
    assert sorted(ids) == sorted(d.id for d in dets)
    for o in objs:
        zs = [z for z, _ in o.members]
        assert all(0 < b - a <= bridge + 1 for a, b in zip(zs, zs[1:]))


@given(layers)
def test_embeddings_ignored_without_appearance_weight(layer_boxes):
    dets = _dets(layer_boxes)
    if not dets:
        return
    emb = {d.id: (math.cos(i), math.sin(i)) for i, d in enumerate(dets)}
    plain = link_depth(dets, None, SP)
    with_emb = link_depth(dets, None, SP, emb)
    assert [o.detection_ids for o in plain] == [o.detection_ids for o in with_emb]


@given(layers, st.floats(0.25, 4.0))
def test_weight_and_gate_scaling(layer_boxes, k):
    dets = _dets(layer_boxes)
    if not dets:
        return
    base = link_depth(dets, None, SP)
    scaled = link_depth(dets, None, TrackingConfig(lambda_sp=k, match_threshold_depth=0.5 * k))
    assert [o.detection_ids for o in base] == [o.detection_ids for o in scaled]


def test_pruned_candidates_do_not_distort_the_matching():
    # B's only in-radius partner is X; a maximum matching over the remaining
    # cells would pair A-Y and B-X and gate both away, losing the exact A-X link
    dets = [
        det("A", 0, (100, 100, 110, 110)),
        det("B", 0, (140, 100, 150, 110)),
        det("X", 1, (100, 100, 110, 110)),
        det("Y", 1, (60, 100, 70, 110)),
    ]
    objs = link_depth(dets, None, TrackingConfig(candidate_radius=45))
    assert ("A", "X") in [o.detection_ids for o in objs]
