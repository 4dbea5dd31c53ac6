"""Known-probe NMSE against sampling ratio (the Table I protocol, desk-scaled).

Runs Ptycho-EP and PIE (plus the Bernoulli-Gaussian prior on a sparse object
with ``--sparse``) over a range of sampling ratios and writes the benchmark
report to ``--out``.

    python3 scripts/sampling_ratio_sweep.py --out runs/table1 --trials 5 --jobs 4
    python3 scripts/sampling_ratio_sweep.py --out runs/table1_sparse --sparse
"""

import argparse
import sys

from ptychoep import cli


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--alphas", default=",".join(str(a) for a in cli.TABLE_I_ALPHAS))
    ap.add_argument("--trials", type=int, default=5)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--iters", type=int, default=400)
    ap.add_argument("--sparse", action="store_true", help="60%%-zero object, adds the BG prior")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    algos = "ptycho-ep,ptycho-ep-bg,pie" if args.sparse else "ptycho-ep,pie,epie,rpie"
    cmd = ["benchmark", "--sweep", "alpha", "--out", args.out, "--values", args.alphas,
           "--algos", algos, "--trials", str(args.trials), "--jobs", str(args.jobs),
           "--iters", str(args.iters), "--seed", str(args.seed)]
    if args.sparse:
        cmd += ["--sparsity", "0.6"]
    return cli.main(cmd)


if __name__ == "__main__":
    sys.exit(main())
