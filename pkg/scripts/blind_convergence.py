"""Blind probe retrieval: fitness against iteration at several overlaps (Fig. 11 protocol).

Runs Ptycho-EP with EM probe updates, ePIE and Difference Map on jittered
raster scans, then writes ``curves.csv``: the median over trials of
fitness / noise floor at every iteration, one column per (overlap, algorithm).

    python3 scripts/blind_convergence.py --out runs/blind --trials 3 --jobs 3
"""

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from ptychoep import cli


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--overlaps", default="60,50,40")
    ap.add_argument("--trials", type=int, default=3)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--iters", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    out = Path(args.out)
    rc = cli.main(["benchmark", "--sweep", "overlap", "--out", str(out), "--values", args.overlaps,
                   "--algos", "ptycho-ep,epie,dm", "--trials", str(args.trials), "--jobs", str(args.jobs),
                   "--iters", str(args.iters), "--seed", str(args.seed)])
    if rc != cli.EXIT_OK:
        return rc
    cells = list(csv.DictReader((out / "cells.csv").open()))
    curves = {}
    for c in cells:
        if c["status"] != "ok":
            continue
        value = float(c["value"])
        trace = list(csv.DictReader((out / "cells" / f"overlap_{value:g}" / c["algo"] / f"trial{c['trial']}"
                                     / "trace.csv").open()))
        floor = float(c["fitness"]) / float(c["fitness_over_floor"])
        curves.setdefault(f"{value:g}%_{c['algo']}", []).append([float(r["fitness"]) / floor for r in trace])
    cols = sorted(curves)
    med = {k: np.median(np.array(v), axis=0) for k, v in curves.items()}
    n = max(len(m) for m in med.values())
    with open(out / "curves.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", *cols])
        for t in range(n):
            w.writerow([t + 1, *(f"{med[k][t]:.6g}" if t < len(med[k]) else "" for k in cols)])
    print(f"median fitness / noise floor per iteration in {out / 'curves.csv'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
