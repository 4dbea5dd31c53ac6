"""``ptycho`` command-line front end: simulate, reconstruct, benchmark, info.

Every option can also come from a JSON config file (``--config``); flags
override file values, which override built-in defaults. A ``run_manifest.json``
written by a previous run is itself a valid config file, so::

    ptycho reconstruct --config old/run_manifest.json --out new

repeats a reconstruction. Seeds fall back to ``$PTYCHO_SEED`` and then 0.

Exit codes: 0 success, 2 configuration error, 3 diverged, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__, baselines, engine, metrics, sim
from .core import GeometryError, read_cimg
from .denoise import PriorSpec

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4

TABLE_I_ALPHAS = (4.0, 3.0, 2.5, 2.4, 2.3, 2.2, 2.1)
TABLE_II_OVERLAPS = (60.0, 50.0, 40.0)
EP_ALGOS = ("ptycho-ep", "ptycho-ep-bg")
ALGOS = EP_ALGOS + tuple(baselines.DEFAULT_PARAMS)


class DataIOError(Exception):
    """A dataset, probe or config file could not be read or written."""


@dataclass
class RunManifest:
    """Everything needed to repeat a run: effective config, inputs, seeds."""

    command: str
    config: dict
    dataset: str | None = None
    seeds: dict = field(default_factory=dict)
    version: str = __version__
    platform: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    def write(self, out_dir) -> Path:
        if not self.platform:
            self.platform = {
                "python": platform.python_version(),
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "machine": platform.machine(),
            }
        path = Path(out_dir) / "run_manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True, default=_json_default))
        return path


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, (tuple, set)):
        return list(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


# --- configuration ---------------------------------------------------------

SIM_DEFAULTS = {
    "out": None,
    "object": "synthetic",
    "object_size": 128,
    "correlation": 3.0,
    "sparsity": 0.0,
    "probe": "disk:24",
    "window": 32,
    "scan": "fermat",
    "target_alpha": 2.4,
    "coverage_fraction": 0.65,
    "n_scans": None,
    "radius_scale": None,
    "step": 12,
    "grid": None,
    "max_dev": 0,
    "snr_db": 30.0,
    "seed": None,
}

RECON_DEFAULTS = {
    "dataset": None,
    "out": None,
    "algo": "ptycho-ep",
    "prior": "gaussian",
    "rho": None,
    "mu": None,
    "prior_mu": None,
    "prior_warmup": None,
    "iters": 100,
    "em_updates": 2,
    "em_warmup": 2,
    "scheme": "sequential",
    "workers": 1,
    "seed": None,
    "blind": False,
    "probe_init": None,
    "alpha": None,
    "beta": None,
    "trace_every": 1,
    "tol": None,
    "clamp_mode": None,
    "precision_floor": 1e-8,
    "init_gamma_psi": None,
    "png": False,
}

BENCH_DEFAULTS = {
    "out": None,
    "sweep": "alpha",
    "values": None,
    "algos": None,
    "trials": 3,
    "jobs": 1,
    "iters": None,
    "object_size": None,
    "window": None,
    "probe_diameter": None,
    "snr_db": 30.0,
    "sparsity": 0.0,
    "seed": None,
    "trace_every": 1,
}


def _read_config_file(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as err:
        raise DataIOError(f"cannot read config {path}: {err}") from err
    except json.JSONDecodeError as err:
        raise engine.ConfigError(f"config {path} is not valid JSON: {err}") from err
    if not isinstance(data, dict):
        raise engine.ConfigError(f"config {path} must hold a JSON object")
    if "command" in data and isinstance(data.get("config"), dict):
        data = data["config"]  # a run manifest from an earlier run
    return {k.replace("-", "_"): v for k, v in data.items()}


def resolve_config(defaults: dict, flags: dict, config_path=None) -> tuple[dict, str]:
    """Merge defaults, config file and flags; return ``(config, seed_source)``."""
    cfg = dict(defaults)
    file_cfg = _read_config_file(config_path) if config_path else {}
    unknown = sorted(set(file_cfg) - set(defaults))
    if unknown:
        raise engine.ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg.update(file_cfg)
    cfg.update({k: v for k, v in flags.items() if k in defaults})
    source = "flag" if "seed" in flags else "config" if file_cfg.get("seed") is not None else None
    if cfg.get("seed") is None and "seed" in defaults:
        env = os.environ.get("PTYCHO_SEED")
        if env is not None:
            try:
                cfg["seed"] = int(env)
            except ValueError as err:
                raise engine.ConfigError(f"PTYCHO_SEED={env!r} is not an integer") from err
            source = "env"
        else:
            cfg["seed"] = 0
            source = "default"
    if "seed" in defaults and (not isinstance(cfg["seed"], int) or cfg["seed"] < 0):
        raise engine.ConfigError(f"seed must be a nonnegative integer, got {cfg['seed']!r}")
    return cfg, source or "config"


def _parse_disk(spec: str, window) -> np.ndarray:
    """``disk:D[:blur[:dy:dx]]`` -> disk probe in ``window``."""
    parts = spec.split(":")[1:]
    try:
        vals = [float(v) for v in parts]
    except ValueError as err:
        raise engine.ConfigError(f"bad disk probe spec {spec!r}") from err
    if len(vals) not in (1, 2, 4) or vals[0] <= 0:
        raise engine.ConfigError(f"disk probe spec must be disk:D[:blur[:dy:dx]], got {spec!r}")
    blur = vals[1] if len(vals) > 1 else 0.0
    center = None
    if len(vals) == 4:
        center = ((window[0] - 1) / 2.0 + vals[2], (window[1] - 1) / 2.0 + vals[3])
    return sim.disk_probe(window, vals[0], center=center, blur=blur)


def _load_probe(spec: str, window) -> np.ndarray:
    if spec.startswith("disk:"):
        return _parse_disk(spec, window)
    try:
        probe = read_cimg(spec).astype(np.complex128)
    except (OSError, ValueError) as err:
        raise DataIOError(f"cannot read probe {spec}: {err}") from err
    if probe.shape != tuple(window):
        raise engine.ConfigError(f"probe {spec} has shape {probe.shape}, window is {tuple(window)}")
    return probe


def _load_object(spec: str, size: int, seed: int, correlation: float) -> np.ndarray:
    if spec == "synthetic":
        return sim.synthetic_object((size, size), seed=seed, correlation=correlation)
    try:
        if "," in spec:
            from PIL import Image

            mag_path, phase_path = spec.split(",", 1)
            mag = np.asarray(Image.open(mag_path).convert("L"), dtype=np.float64) / 255.0
            ph = np.asarray(Image.open(phase_path).convert("L"), dtype=np.float64) / 255.0
            if mag.shape != ph.shape:
                raise engine.ConfigError("magnitude and phase images differ in shape")
            return sim.complex_object(mag, ph)
        return read_cimg(spec).astype(np.complex128)
    except OSError as err:
        raise DataIOError(f"cannot read object {spec}: {err}") from err


def _load_dataset(path):
    try:
        return sim.load_dataset(path)
    except (OSError, ValueError, KeyError) as err:
        raise DataIOError(f"cannot load dataset {path}: {err}") from err


def _mean_neighbour_step(geom) -> float:
    """Median nearest-neighbour distance between scan centres."""
    pts = np.asarray(geom.offsets, dtype=np.float64)
    if len(pts) < 2:
        return float("nan")
    d = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
    np.fill_diagonal(d, np.inf)
    return float(np.median(d.min(axis=1)))


# --- simulate --------------------------------------------------------------


def cmd_simulate(flags: dict, config_path=None) -> int:
    cfg, seed_source = resolve_config(SIM_DEFAULTS, flags, config_path)
    if not cfg["out"]:
        raise engine.ConfigError("--out is required")
    t0 = time.perf_counter()
    seed = cfg["seed"]
    seeds = {"object": seed, "sparsity": seed, "noise": seed + 1, "jitter": seed + 2}
    obj = _load_object(cfg["object"], int(cfg["object_size"]), seeds["object"], float(cfg["correlation"]))
    if cfg["sparsity"]:
        obj = sim.sparsify(obj, float(cfg["sparsity"]), seed=seeds["sparsity"])
    window = (int(cfg["window"]),) * 2
    probe = _load_probe(cfg["probe"], window)
    shape = obj.shape
    if cfg["scan"] == "fermat":
        if cfg["n_scans"] is not None:
            if cfg["radius_scale"] is not None:
                geom = sim.fermat_spiral(shape, window, int(cfg["n_scans"]), float(cfg["radius_scale"]))
            else:
                _, geom = sim.tune_fermat_radius(shape, window, int(cfg["n_scans"]), float(cfg["target_alpha"]))
        else:
            geom = sim.fermat_for_alpha(shape, window, float(cfg["target_alpha"]),
                                        coverage_fraction=float(cfg["coverage_fraction"]))
        step = _mean_neighbour_step(geom)
    elif cfg["scan"] == "raster":
        step = int(cfg["step"])
        grid = cfg["grid"]
        if grid is None:
            n = (min(shape) - window[0] - 2 * int(cfg["max_dev"])) // step + 1
            grid = (n, n)
        geom = sim.raster_jitter(shape, window, step, tuple(grid), int(cfg["max_dev"]), seed=seeds["jitter"])
    else:
        raise engine.ConfigError(f"unknown scan pattern {cfg['scan']!r}")
    alpha = sim.sampling_ratio(geom)
    covered = int(np.count_nonzero(geom.coverage()))
    overlap = sim.overlap_ratio(probe, step) if math.isfinite(step) else float("nan")
    meta = {
        "scan": cfg["scan"],
        "alpha": alpha,
        "overlap_ratio": overlap,
        "step": step,
        "covered_pixels": covered,
        "zero_fraction": float(cfg["sparsity"]),
        "seeds": seeds,
    }
    ds = sim.simulate(obj, probe, geom, sim.NoiseSpec(float(cfg["snr_db"]), seeds["noise"]), meta)
    try:
        out = sim.save_dataset(ds, cfg["out"])
    except OSError as err:
        raise DataIOError(f"cannot write dataset to {cfg['out']}: {err}") from err
    floor = metrics.noise_floor(ds)
    RunManifest("simulate", cfg, str(out.resolve()), {"seed": seed, "source": seed_source, **seeds},
                timings={"total_s": time.perf_counter() - t0}).write(out)
    print(f"dataset      {out}")
    print(f"scans J      {geom.J}")
    print(f"alpha        {alpha:.4f}")
    print(f"overlap R    {overlap:.4f} (step {step:.2f} px)")
    print(f"coverage     {covered} px ({covered / geom.N:.1%} of object)")
    print(f"sigma        {ds.sigma:.6g}")
    print(f"noise floor  {floor:.6g}")
    return EXIT_OK


# --- reconstruct -----------------------------------------------------------


def _prior_for(cfg, ds) -> PriorSpec:
    if cfg["prior"] == "gaussian":
        return PriorSpec("gaussian", 1.0)
    if cfg["prior"] != "bg":
        raise engine.ConfigError(f"unknown prior {cfg['prior']!r}")
    rho = cfg["rho"]
    if rho is None:
        zf = float(ds.meta.get("zero_fraction", 0.0) or 0.0)
        if zf <= 0:
            raise engine.ConfigError("--prior bg needs --rho (the dataset records no sparsity)")
        rho = 1.0 - zf
        cfg["rho"] = rho
    try:
        return PriorSpec("bg", float(rho))
    except ValueError as err:
        raise engine.ConfigError(str(err)) from err


def build_solver(cfg: dict, ds):
    """Engine or baseline config object for the resolved ``cfg``."""
    algo = cfg["algo"]
    if algo not in ("ptycho-ep",) + tuple(baselines.DEFAULT_PARAMS):
        raise engine.ConfigError(f"unknown algorithm {algo!r}")
    probe_init = None
    if cfg["probe_init"] is not None:
        probe_init = _load_probe(cfg["probe_init"], ds.geometry.window)
    elif cfg["blind"]:
        raise engine.ConfigError("blind mode needs --probe-init")
    elif ds.probe is None:
        raise engine.ConfigError("dataset has no probe; pass --blind --probe-init")
    if algo == "ptycho-ep":
        return engine.EngineConfig(
            mu=cfg["mu"], max_iter=int(cfg["iters"]), em_updates=int(cfg["em_updates"]),
            scheme=cfg["scheme"], prior=_prior_for(cfg, ds), precision_floor=float(cfg["precision_floor"]),
            init_gamma_psi=cfg["init_gamma_psi"], em_warmup=int(cfg["em_warmup"]), seed=int(cfg["seed"]),
            probe_init=probe_init, workers=int(cfg["workers"]), tol=cfg["tol"],
            trace_every=int(cfg["trace_every"]), clamp_mode=cfg["clamp_mode"],
            prior_mu=cfg["prior_mu"], prior_warmup=cfg["prior_warmup"],
        )
    return baselines.BaselineConfig(algo, alpha=cfg["alpha"], beta=cfg["beta"], iterations=int(cfg["iters"]),
                                    seed=int(cfg["seed"]), probe_init=probe_init,
                                    trace_every=int(cfg["trace_every"]))


def solve(ds, solver_cfg):
    if isinstance(solver_cfg, engine.EngineConfig):
        return engine.run(ds, solver_cfg)
    return baselines.run_baseline(ds, solver_cfg)


def _summary(ds, res, wall_s) -> dict:
    floor = metrics.noise_floor(ds)
    last = res.trace[-1] if res.trace else {}
    fit = float(last.get("fitness", metrics.fitness(ds, res.o_hat, res.probe)))
    out = {
        "algorithm": res.algorithm,
        "iterations": int(last.get("iter", 0)),
        "fitness": fit,
        "noise_floor": floor,
        "fitness_over_floor": fit / floor if floor > 0 else None,
        "J": ds.geometry.J,
        "alpha": sim.sampling_ratio(ds.geometry) if ds.geometry.J else None,
        "wall_s": wall_s,
    }
    if ds.truth is not None:
        raw, db = metrics.nmse(ds.truth, res.o_hat, None, metrics.illuminated(ds.geometry, ds.probe if ds.probe is not None else res.probe))
        out["nmse_raw"], out["nmse_db"] = raw, db
    return out


def write_previews(out_dir, o_hat, gamma_hat=None, probe=None) -> list[Path]:
    """8-bit PNGs: linear magnitude, HSV phase, log-scaled certainty map."""
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def to_u8(a):
        a = np.asarray(a, dtype=np.float64)
        lo, hi = float(a.min()), float(a.max())
        scaled = (a - lo) / (hi - lo) if hi > lo else np.zeros_like(a)
        return np.round(255.0 * scaled).astype(np.uint8)

    def hsv_phase(z):
        hue = np.round((np.angle(z) % (2 * np.pi)) / (2 * np.pi) * 255.0).astype(np.uint8)
        full = np.full(hue.shape, 255, dtype=np.uint8)
        return Image.fromarray(np.stack([hue, full, full], axis=-1), "HSV").convert("RGB")

    written = []
    items = [("o_hat_magnitude.png", Image.fromarray(to_u8(np.abs(o_hat)), "L")),
             ("o_hat_phase.png", hsv_phase(o_hat))]
    if gamma_hat is not None:
        items.append(("gamma_hat.png", Image.fromarray(to_u8(np.log10(gamma_hat)), "L")))
    if probe is not None:
        items.append(("probe_magnitude.png", Image.fromarray(to_u8(np.abs(probe)), "L")))
    for name, img in items:
        img.save(out / name)
        written.append(out / name)
    return written


def cmd_reconstruct(flags: dict, config_path=None) -> int:
    cfg, seed_source = resolve_config(RECON_DEFAULTS, flags, config_path)
    if not cfg["dataset"]:
        raise engine.ConfigError("a dataset directory is required")
    if not cfg["out"]:
        raise engine.ConfigError("--out is required")
    ds = _load_dataset(cfg["dataset"])
    solver_cfg = build_solver(cfg, ds)
    cfg["dataset"] = str(Path(cfg["dataset"]).resolve())
    t0 = time.perf_counter()
    res = solve(ds, solver_cfg)
    wall = time.perf_counter() - t0
    out = Path(cfg["out"])
    try:
        engine.save_result(res, out)
        summary = _summary(ds, res, wall)
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
        if cfg["png"]:
            write_previews(out / "previews", res.o_hat, res.gamma_hat, res.probe)
        RunManifest("reconstruct", {**cfg, "out": None}, cfg["dataset"],
                    {"seed": cfg["seed"], "source": seed_source},
                    timings={"solve_s": wall, "per_iter_ms": res.timings_ms[-1] / len(res.timings_ms)
                             if res.timings_ms else None},
                    ).write(out)
    except OSError as err:
        raise DataIOError(f"cannot write results to {out}: {err}") from err
    msg = f"{res.algorithm}: {summary['iterations']} iterations, fitness {summary['fitness']:.4g}"
    if summary["fitness_over_floor"] is not None:
        msg += f" ({summary['fitness_over_floor']:.3f} x noise floor)"
    if "nmse_db" in summary:
        msg += f", NMSE {summary['nmse_db']:.2f} dB"
    print(msg)
    print(f"results in {out}")
    return EXIT_OK


# --- benchmark -------------------------------------------------------------


def _bench_params(cfg) -> dict:
    alpha_sweep = cfg["sweep"] == "alpha"
    if cfg["sweep"] not in ("alpha", "overlap"):
        raise engine.ConfigError(f"unknown sweep {cfg['sweep']!r}")
    p = {
        "values": cfg["values"] or (TABLE_I_ALPHAS if alpha_sweep else TABLE_II_OVERLAPS),
        "algos": cfg["algos"] or (["ptycho-ep", "pie"] if alpha_sweep else ["ptycho-ep", "epie", "dm"]),
        "object_size": cfg["object_size"] or (128 if alpha_sweep else 256),
        "window": cfg["window"] or (32 if alpha_sweep else 64),
        "probe_diameter": cfg["probe_diameter"] or (24 if alpha_sweep else 30),
    }
    if isinstance(p["algos"], str):
        p["algos"] = [a.strip() for a in p["algos"].split(",") if a.strip()]
    bad = [a for a in p["algos"] if a not in ALGOS]
    if bad:
        raise engine.ConfigError(f"unknown algorithms {bad}; choose from {list(ALGOS)}")
    if "ptycho-ep-bg" in p["algos"] and not cfg["sparsity"]:
        raise engine.ConfigError("ptycho-ep-bg needs --sparsity > 0")
    if int(cfg["trials"]) < 1 or int(cfg["jobs"]) < 1:
        raise engine.ConfigError("--trials and --jobs must be >= 1")
    return p


def default_iterations(sweep: str, algo: str) -> int:
    """400 everywhere on the alpha sweep; 100 for EP and DM, 200 for PIE-type on overlap."""
    if sweep == "alpha":
        return 400
    return 100 if algo in EP_ALGOS or algo == "dm" else 200


def overlap_geometry(object_size, window, probe, overlap_pct, max_dev=2, seed=0):
    """Jittered raster whose step gives ``overlap_pct`` for ``probe``."""
    step = int(round((1.0 - overlap_pct / 100.0) * sim.probe_diameter(probe)))
    if step < 1:
        raise engine.ConfigError(f"overlap {overlap_pct}% gives a step below one pixel")
    n = (object_size - window - 2 * max_dev) // step + 1
    geom = sim.raster_jitter((object_size,) * 2, (window,) * 2, step, (n, n), max_dev, seed=seed)
    return geom, step, n


def build_cell_dataset(cell: dict):
    """Dataset for one benchmark cell; identical for every algorithm of a trial."""
    size, win, base, trial = cell["object_size"], cell["window"], cell["seed"], cell["trial"]
    probe = sim.disk_probe((win, win), cell["probe_diameter"])
    if cell["sweep"] == "alpha":
        geom = sim.fermat_for_alpha((size, size), (win, win), cell["value"])
        obj = sim.synthetic_object((size, size), seed=base + 100 + trial)
        if cell["sparsity"]:
            obj = sim.sparsify(obj, cell["sparsity"], seed=base + 100 + trial)
        noise_seed, extra = base + 200 + trial, {}
    else:
        geom, step, n = overlap_geometry(size, win, probe, cell["value"], seed=base + 5 + trial)
        obj = sim.synthetic_object((size, size), seed=base + 1 + trial)
        if cell["sparsity"]:
            obj = sim.sparsify(obj, cell["sparsity"], seed=base + 1 + trial)
        noise_seed, extra = base + 1 + trial, {"step": step, "grid": n}
    ds = sim.simulate(obj, probe, geom, sim.NoiseSpec(cell["snr_db"], noise_seed),
                      {"zero_fraction": cell["sparsity"]})
    return ds, extra


def blind_probe_init(window: int, diameter: float) -> np.ndarray:
    """Wider, shifted, blurred disk used as the initial probe in blind runs."""
    c = (window - 1) / 2.0
    return sim.disk_probe((window, window), diameter + 4, center=(c + 2.0, c + 1.0), blur=2.0)


def run_cell(cell: dict) -> dict:
    """One fully isolated benchmark run; writes its trace under ``cell['dir']``."""
    ds, extra = build_cell_dataset(cell)
    algo, iters = cell["algo"], cell["iters"]
    init_seed = cell["seed"] + (300 if cell["sweep"] == "alpha" else 3) + cell["trial"]
    blind = cell["sweep"] == "overlap"
    probe_init = blind_probe_init(cell["window"], cell["probe_diameter"]) if blind else None
    if algo in EP_ALGOS:
        prior = PriorSpec("bg", 1.0 - cell["sparsity"]) if algo == "ptycho-ep-bg" else PriorSpec()
        solver = engine.EngineConfig(max_iter=iters, seed=init_seed, prior=prior, probe_init=probe_init,
                                     trace_every=cell["trace_every"])
    else:
        solver = baselines.BaselineConfig(algo, iterations=iters, seed=init_seed, probe_init=probe_init,
                                          trace_every=cell["trace_every"])
    t0 = time.perf_counter()
    try:
        res = solve(ds, solver)
        status = "ok"
    except engine.DivergedError as err:
        res, status = None, f"diverged@{err.iteration}"
    wall = time.perf_counter() - t0
    floor = metrics.noise_floor(ds)
    row = {"sweep": cell["sweep"], "value": cell["value"], "algo": algo, "trial": cell["trial"],
           "J": ds.geometry.J, "alpha": sim.sampling_ratio(ds.geometry), "status": status,
           "fitness": float("nan"), "fitness_over_floor": float("nan"), "nmse_db": float("nan"),
           "iters_to_1p5_floor": None, "wall_s": wall, **extra}
    if res is not None:
        engine.write_trace(cell["dir"], res)
        last = res.trace[-1]
        row["fitness"] = last["fitness"]
        row["fitness_over_floor"] = last["fitness"] / floor if floor > 0 else float("nan")
        row["nmse_db"] = last.get("nmse_db", float("nan"))
        if floor > 0:
            row["iters_to_1p5_floor"] = next((r["iter"] for r in res.trace if r["fitness"] <= 1.5 * floor), None)
    return row


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6g}"
    return "" if v is None else str(v)


def aggregate(rows, sweep, values, algos) -> list[dict]:
    """Median per (condition, algorithm): NMSE dB for alpha, fitness/floor for overlap."""
    table = []
    for v in values:
        cells = [r for r in rows if r["value"] == v]
        line = {"alpha" if sweep == "alpha" else "overlap_pct": v,
                "J": cells[0]["J"] if cells else None}
        if sweep == "overlap" and cells:
            line["step"], line["grid"] = cells[0].get("step"), cells[0].get("grid")
        for a in algos:
            rs = [r for r in cells if r["algo"] == a]
            if sweep == "alpha":
                line[a] = float(np.median([r["nmse_db"] for r in rs])) if rs else float("nan")
            else:
                line[a] = float(np.median([r["fitness_over_floor"] for r in rs])) if rs else float("nan")
                hits = [r["iters_to_1p5_floor"] for r in rs]
                line[f"{a}_iters_to_1.5floor"] = (float(np.median(hits)) if rs and all(h is not None for h in hits)
                                                  else None)
        table.append(line)
    return table


def _write_csv(path, rows):
    if not rows:
        return
    cols = list(rows[0])
    for r in rows[1:]:
        cols += [k for k in r if k not in cols]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in cols])


def cmd_benchmark(flags: dict, config_path=None) -> int:
    cfg, seed_source = resolve_config(BENCH_DEFAULTS, flags, config_path)
    if not cfg["out"]:
        raise engine.ConfigError("--out is required")
    p = _bench_params(cfg)
    out = Path(cfg["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise DataIOError(f"cannot create {out}: {err}") from err
    cells = []
    for v in p["values"]:
        for a in p["algos"]:
            for trial in range(int(cfg["trials"])):
                cells.append({
                    "sweep": cfg["sweep"], "value": float(v), "algo": a, "trial": trial,
                    "iters": int(cfg["iters"] or default_iterations(cfg["sweep"], a)),
                    "object_size": int(p["object_size"]), "window": int(p["window"]),
                    "probe_diameter": float(p["probe_diameter"]), "snr_db": float(cfg["snr_db"]),
                    "sparsity": float(cfg["sparsity"]), "seed": int(cfg["seed"]),
                    "trace_every": int(cfg["trace_every"]),
                    "dir": str(out / "cells" / f"{cfg['sweep']}_{v:g}" / a / f"trial{trial}"),
                })
    t0 = time.perf_counter()
    if int(cfg["jobs"]) > 1:
        with ProcessPoolExecutor(int(cfg["jobs"])) as pool:
            rows = list(pool.map(run_cell, cells))
    else:
        rows = [run_cell(c) for c in cells]
    wall = time.perf_counter() - t0
    values = [float(v) for v in p["values"]]
    table = aggregate(rows, cfg["sweep"], values, p["algos"])
    _write_csv(out / "cells.csv", rows)
    _write_csv(out / "table.csv", table)
    RunManifest("benchmark", {**cfg, **p, "out": None}, None, {"seed": cfg["seed"], "source": seed_source},
                timings={"total_s": wall}).write(out)
    metric = "median NMSE [dB]" if cfg["sweep"] == "alpha" else "median final fitness / noise floor"
    print(f"{metric}, {cfg['trials']} trial(s) per cell")
    keys = list(table[0]) if table else []
    print("  ".join(f"{k:>12}" for k in keys))
    for line in table:
        print("  ".join(f"{_fmt(line[k]):>12}" for k in keys))
    print(f"table in {out / 'table.csv'}")
    return EXIT_OK


# --- info ------------------------------------------------------------------


def cmd_info(flags: dict, config_path=None) -> int:
    path = flags.get("path")
    if path is None:
        print(f"ptychoep {__version__}")
        print(f"python {platform.python_version()}, numpy {np.__version__}, scipy {scipy.__version__}")
        print(f"algorithms: {', '.join(('ptycho-ep',) + tuple(baselines.DEFAULT_PARAMS))}")
        return EXIT_OK
    root = Path(path)
    if (root / "manifest.json").exists():
        ds = _load_dataset(root)
        g = ds.geometry
        print(f"dataset      {root}")
        print(f"object       {g.object_shape[0]}x{g.object_shape[1]}, window {g.window[0]}x{g.window[1]}")
        print(f"scans J      {g.J}")
        if g.J:
            print(f"alpha        {sim.sampling_ratio(g):.4f}")
            print(f"coverage     {int(np.count_nonzero(g.coverage()))} px")
        print(f"sigma        {ds.sigma:.6g}")
        if ds.intensities.sum() > 0:
            print(f"noise floor  {metrics.noise_floor(ds):.6g}")
        print(f"probe        {'yes' if ds.probe is not None else 'no'}")
        print(f"truth        {'yes' if ds.truth is not None else 'no'}")
        return EXIT_OK
    for name in ("summary.json", "run_manifest.json"):
        if (root / name).exists():
            try:
                print(json.dumps(json.loads((root / name).read_text()), indent=2, sort_keys=True))
            except (OSError, json.JSONDecodeError) as err:
                raise DataIOError(f"cannot read {root / name}: {err}") from err
            return EXIT_OK
    raise DataIOError(f"{root} is not a dataset or result directory")


# --- argument parsing ------------------------------------------------------


def _csv_floats(s):
    try:
        return [float(v) for v in s.split(",") if v.strip()]
    except ValueError as err:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {s!r}") from err


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ptycho", description="Ptychographic phase retrieval by expectation propagation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    p = sub.add_parser("simulate", help="synthesise a dataset", argument_default=S)
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--out", help="output dataset directory")
    p.add_argument("--object", help="'synthetic', a complex .cimg, or MAG.png,PHASE.png")
    p.add_argument("--object-size", type=int, help="side of the synthetic object")
    p.add_argument("--correlation", type=float, help="smoothness of the synthetic texture (px)")
    p.add_argument("--sparsity", type=float, help="fraction of object pixels set to zero")
    p.add_argument("--probe", help="'disk:D[:blur[:dy:dx]]' or a .cimg file")
    p.add_argument("--window", type=int, help="probe window side")
    p.add_argument("--scan", choices=["fermat", "raster"])
    p.add_argument("--target-alpha", type=float, help="sampling ratio for the Fermat spiral")
    p.add_argument("--coverage-fraction", type=float, help="Fermat: covered share of the object")
    p.add_argument("--n-scans", type=int, help="Fermat: fixed number of scans")
    p.add_argument("--radius-scale", type=float, help="Fermat: fixed radius scale (with --n-scans)")
    p.add_argument("--step", type=int, help="raster step (px)")
    p.add_argument("--grid", type=int, nargs=2, metavar=("ROWS", "COLS"))
    p.add_argument("--max-dev", type=int, help="raster jitter bound (px)")
    p.add_argument("--snr-db", type=float, help="amplitude SNR in dB; 'inf' for noiseless")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("reconstruct", help="run Ptycho-EP or a baseline", argument_default=S)
    p.add_argument("dataset", nargs="?", help="dataset directory")
    p.add_argument("--config", default=None, help="JSON config file or run_manifest.json")
    p.add_argument("--out", help="output directory")
    p.add_argument("--algo", choices=["ptycho-ep", *baselines.DEFAULT_PARAMS])
    p.add_argument("--prior", choices=["gaussian", "bg"])
    p.add_argument("--rho", type=float, help="Bernoulli-Gaussian nonzero rate")
    p.add_argument("--mu", type=float, help="damping of the scan messages")
    p.add_argument("--prior-mu", type=float, help="damping of the prior message")
    p.add_argument("--prior-warmup", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--em-updates", type=int)
    p.add_argument("--em-warmup", type=int)
    p.add_argument("--scheme", choices=["sequential", "parallel"])
    p.add_argument("--workers", type=int, help="threads for the parallel scheme")
    p.add_argument("--seed", type=int)
    p.add_argument("--blind", action="store_true", help="estimate the probe (needs --probe-init)")
    p.add_argument("--probe-init", help="'disk:D[:blur[:dy:dx]]' or a .cimg file; implies blind")
    p.add_argument("--alpha", type=float, help="baseline regularisation")
    p.add_argument("--beta", type=float, help="baseline step size")
    p.add_argument("--trace-every", type=int)
    p.add_argument("--tol", type=float, help="stop when the relative message change drops below")
    p.add_argument("--clamp-mode", choices=["relative", "posterior", "literal"])
    p.add_argument("--precision-floor", type=float)
    p.add_argument("--init-gamma-psi", type=float)
    p.add_argument("--png", action="store_true", help="write PNG previews")

    p = sub.add_parser("benchmark", help="sampling-ratio or overlap sweeps", argument_default=S)
    p.add_argument("--config", default=None)
    p.add_argument("--out", help="report directory")
    p.add_argument("--sweep", choices=["alpha", "overlap"])
    p.add_argument("--values", type=_csv_floats, help="alphas, or overlap percentages")
    p.add_argument("--algos", help=f"comma-separated subset of {','.join(ALGOS)}")
    p.add_argument("--trials", type=int)
    p.add_argument("--jobs", type=int, help="worker processes")
    p.add_argument("--iters", type=int, help="override the per-algorithm iteration count")
    p.add_argument("--object-size", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--probe-diameter", type=float)
    p.add_argument("--snr-db", type=float)
    p.add_argument("--sparsity", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--trace-every", type=int)

    p = sub.add_parser("info", help="describe a dataset or result directory")
    p.add_argument("path", nargs="?", default=None)
    return parser


COMMANDS = {
    "simulate": cmd_simulate,
    "reconstruct": cmd_reconstruct,
    "benchmark": cmd_benchmark,
    "info": cmd_info,
}


def main(argv=None) -> int:
    args = vars(build_parser().parse_args(argv))
    command = args.pop("command")
    config_path = args.pop("config", None)
    try:
        return COMMANDS[command](args, config_path)
    except (engine.ConfigError, GeometryError) as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except engine.DivergedError as err:
        print(f"diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataIOError, OSError) as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return EXIT_IO
    except ValueError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
