"""
The full pipeline from the command line
=======================================

Runs every subcommand on a small synthetic dataset in a temporary
directory, the way a shell script would.
"""

import subprocess
import sys
import tempfile
from pathlib import Path


def spinetrack(*args):
    cmd = [sys.executable, "-m", "spinetrack", *map(str, args)]
    print("$ spinetrack", " ".join(map(str, args)), flush=True)
    subprocess.run(cmd, check=True)


with tempfile.TemporaryDirectory() as tmp:
    d = Path(tmp)
    stacks = [a for t in range(3) for a in ("--stack", d / f"ds/stacks/t{t}")]
    spinetrack("synth", "--seed", 7, "--timepoints", 3, "--drift", 0, "--time-shift", 4, "-o", d / "ds")
    spinetrack("align", "--stack", d / "ds/stacks/t1", "--reference", d / "ds/stacks/t0",
               "--field-out", d / "f01.json", "-o", d / "align1.json")
    spinetrack("depth-track", "--detections", d / "ds/gt_detections.json", *stacks,
               "--lambda-sp", 1, "--lambda-app", 0, "--threshold", 0.5, "-o", d / "objects.json")
    spinetrack("time-track", "--objects", d / "objects.json", *stacks, "-o", d / "tracks.json")
    spinetrack("eval", "--mode", "depth", "--gt", d / "ds/gt_detections.json", "--pred", d / "objects.json",
               "-o", d / "depth_report.json")
    spinetrack("eval", "--mode", "time", "--gt", d / "ds/gt_detections.json", "--pred", d / "tracks.json",
               "--objects", d / "objects.json", "-o", d / "time_report.json")
    spinetrack("features", "--objects", d / "objects.json", *stacks, "--tracks", d / "tracks.json",
               "-o", d / "features.csv")
    print("".join((d / "features.csv").read_text().splitlines(keepends=True)[:4]))
