"""
Box overlap measures and gated assignment
=========================================

The linkers compare boxes with gIoU and match candidates with the
Hungarian algorithm, discarding matches whose cost is above a gate.
"""

import numpy as np

from spinetrack.assign import CostMatrix, solve, solve_gated
from spinetrack.geometry import giou, iom, iou, spatial_cost
from spinetrack.model import BBox

# Two 2x2 boxes overlapping in a single unit square.
a = BBox(0, 0, 2, 2)
b = BBox(1, 1, 3, 3)
print(f"IoU   {iou(a, b):.4f}   (1/7)")
print(f"gIoU  {giou(a, b):.4f}  (1/7 - 2/9)")
print(f"IoM   {iom(a, b):.4f}   (1/4)")

# gIoU keeps decreasing once boxes stop touching, so the spatial cost
# (1 - gIoU) / 2 still ranks far-apart candidates.
for gap in (0, 2, 10, 100):
    c = BBox(2 + gap, 0, 4 + gap, 2)
    print(f"gap {gap:3d} px: IoU {iou(a, c):.2f}  spatial cost {spatial_cost(a, c):.3f}")

# Hungarian matching of three open tracks to three detections.
costs = np.array([
    [0.05, 0.90, 0.95],
    [0.80, 0.10, 0.70],
    [0.90, 0.85, 0.65],
])
matrix = CostMatrix(("t0", "t1", "t2"), ("d0", "d1", "d2"), costs)
print("optimal:", solve(matrix).pairs)

# With the 0.5 gate the third pair (0.65) is dropped: d2 opens a new track.
gated = solve_gated(matrix, 0.5)
print("gated:  ", gated.pairs, "unmatched", gated.unmatched_rows, gated.unmatched_cols)
