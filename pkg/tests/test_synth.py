import numpy as np

from spinetrack import synth
from spinetrack.geometry import iou
from spinetrack.model import validate_dataset


def test_reproducible():
    a = synth.generate(seed=3, n_tracks=5, depth=10, width=160, height=160)
    b = synth.generate(seed=3, n_tracks=5, depth=10, width=160, height=160)
    assert a.detections == b.detections
    np.testing.assert_array_equal(a.stacks[0].pixels, b.stacks[0].pixels)


def test_dataset_is_consistent_and_separated():
    ds = synth.generate(seed=1, missing_rate=0.0)
    assert validate_dataset(ds.detections, ds.stacks) == []
    assert len({d.gt_track_id for d in ds.detections}) == 20
    by_z = {}
    for d in ds.detections:
        by_z.setdefault(d.z, []).append(d)
    for dets in by_z.values():
        for i, a in enumerate(dets):
            assert all(iou(a.bbox, b.bbox) == 0 for b in dets[i + 1:])


def test_drift_is_bounded_integer_walk():
    ds = synth.generate(seed=2, drift=5)
    steps = np.diff(ds.slice_drift[0], axis=0)
    assert np.all(np.hypot(steps[:, 0], steps[:, 1]) <= 5)
    assert np.all(steps == np.round(steps))
    assert synth.generate(seed=2, drift=0).slice_drift[0].max() == 0


def test_missing_rate_drops_detections():
    full = synth.generate(seed=4, missing_rate=0.0)
    sparse = synth.generate(seed=4, missing_rate=0.3)
    assert len(sparse.detections) < 0.85 * len(full.detections)


def test_timepoints_and_shifts():
    ds = synth.generate(seed=5, n_tracks=6, timepoints=3, time_shift=4, z_shift=2, width=200, height=200, depth=16)
    assert len(ds.stacks) == 3 and [s.timepoint for s in ds.stacks] == [0, 1, 2]
    assert ds.xy_shifts[0] == (0, 0) and all(abs(z) <= 2 for z in ds.z_shifts)
