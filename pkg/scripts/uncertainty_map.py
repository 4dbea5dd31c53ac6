"""Uncertainty map growth (Fig. 10 protocol, desk-scaled).

A sparse Fermat spiral plus four heavily overlapping central scans. The
belief precision map is saved as log10 PNGs at chosen iterations, and the
mean precision over the central quarter and over the outer illuminated ring
is printed, showing the well-determined region growing from the centre.

    python3 scripts/uncertainty_map.py --out runs/uncertainty
"""

import argparse
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from ptychoep import engine, metrics, sim
from ptychoep.core import ScanGeometry


def _log_png(arr, path, lo, hi):
    img = np.clip((np.log10(arr) - lo) / max(hi - lo, 1e-12), 0, 1)
    Image.fromarray((255 * img).astype(np.uint8), mode="L").save(path)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--window", type=int, default=32)
    ap.add_argument("--diameter", type=float, default=24)
    ap.add_argument("--alpha", type=float, default=2.2)
    ap.add_argument("--snaps", default="5,20,50,100,200")
    ap.add_argument("--seed", type=int, default=11)
    args = ap.parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    shape, win = (args.size,) * 2, (args.window,) * 2
    base = sim.fermat_for_alpha(shape, win, args.alpha)
    c = (args.size - args.window) // 2
    extra = [(c - 2, c - 2), (c - 2, c + 2), (c + 2, c - 2), (c + 2, c + 2)]
    geom = ScanGeometry(shape, win, extra + list(base.offsets))
    probe = sim.disk_probe(win, args.diameter)
    ds = sim.simulate(sim.synthetic_object(shape, seed=args.seed), probe, geom,
                      sim.NoiseSpec(30.0, args.seed + 1))
    central = np.zeros(shape, bool)
    central[metrics.central_crop(shape)] = True
    inner = np.zeros(shape, bool)
    q = args.size // 8
    inner[q:-q, q:-q] = True
    ring = metrics.illuminated(geom, probe) & ~inner
    snaps = sorted(int(s) for s in args.snaps.split(","))
    maps = {}

    def record(t, state):
        if t in snaps:
            maps[t] = state.gamma_hat.copy()
            print(f"iter {t:4d}  mean precision: central {state.gamma_hat[central].mean():10.4g}"
                  f"  outer ring {state.gamma_hat[ring].mean():10.4g}"
                  f"  NMSE {metrics.nmse(ds.truth, state.o_hat)[1]:6.2f} dB")

    engine.run(ds, engine.EngineConfig(max_iter=max(snaps), seed=args.seed + 2), callback=record)
    logs = np.log10(np.concatenate([m.ravel() for m in maps.values()]))
    lo, hi = np.percentile(logs, 1), np.percentile(logs, 99)
    for t, m in maps.items():
        _log_png(m, out / f"gamma_hat_iter{t:04d}.png", lo, hi)
    print(f"log10 precision maps (shared scale {lo:.2f}..{hi:.2f}) in {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
