"""Regenerate the committed golden outputs for the shipped instances.

Run deliberately (never from the test suite): theorem-level regressions
must show up as byte diffs, not silent refreshes.

    python3 tools/regen_goldens.py
"""
import pathlib
import sys

from rbsde_lab.cli import main

ROOT = pathlib.Path(__file__).resolve().parents[1]
INSTANCES = ROOT / "instances"
GOLDENS = ROOT / "goldens"

JOBS = [
    ["solve", str(INSTANCES / "two_sided_affine.json"), "--method", "projection",
     "--out", str(GOLDENS / "two_sided_affine.projection.json")],
    ["solve", str(INSTANCES / "two_sided_affine.json"), "--method", "inc-pen",
     "--out", str(GOLDENS / "two_sided_affine.inc-pen.json")],
    ["converge", str(INSTANCES / "two_sided_affine.json"), "--mode", "inc-pen",
     "--out", str(GOLDENS / "two_sided_affine.converge.csv")],
    ["solve", str(INSTANCES / "barrier_jumps.json"), "--method", "projection",
     "--out", str(GOLDENS / "barrier_jumps.projection.json")],
    ["converge", str(INSTANCES / "barrier_jumps.json"), "--mode", "dec-pen",
     "--out", str(GOLDENS / "barrier_jumps.converge.csv")],
    ["solve", str(INSTANCES / "lower_only.json"), "--method", "projection",
     "--out", str(GOLDENS / "lower_only.projection.json")],
]

if __name__ == "__main__":
    GOLDENS.mkdir(exist_ok=True)
    for job in JOBS:
        code = main(job)
        if code != 0:
            sys.exit(f"golden job failed with exit {code}: {job}")
    print(f"regenerated {len(JOBS)} goldens under {GOLDENS}")
