"""Projection-based reference solvers: PIE, ePIE, rPIE and Difference Map.

Update rules follow the usual formulations:

* PIE (Rodenburg & Faulkner 2004)::

      O_j += beta * |P|/max|P| * P^* / (|P|^2 + alpha max|P|^2) * (psi' - psi)

* ePIE / rPIE (Maiden & Rodenburg 2009; Maiden, Johnson & Li 2017)::

      O_j += P^* / ((1 - alpha)|P|^2 + alpha max|P|^2) * (psi' - psi)
      P   += beta * O_j^* / max|O_j|^2 * (psi' - psi)

  ``alpha = 1`` is ePIE, ``alpha = 0.1`` the regularised rPIE; both share
  the ePIE probe step.

* Difference Map (Thibault et al. 2009)::

      psi_j += beta * (Pi_F(2 Pi_O(psi) - psi) - Pi_O(psi))

  where ``Pi_O`` is the least-squares overlap projection (object and probe
  solved alternately once) and ``Pi_F`` the detector amplitude projection.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np

from .core import Propagator
from .engine import ConfigError, DivergedError, ReconstructionResult
from . import metrics

__all__ = [
    "BaselineConfig",
    "DEFAULT_PARAMS",
    "amplitude_project",
    "run_pie_family",
    "run_difference_map",
    "run_baseline",
]

DEFAULT_PARAMS = {
    "pie": {"alpha": 0.1, "beta": 1.0},
    "epie": {"alpha": 1.0, "beta": 1.0},
    "rpie": {"alpha": 0.1, "beta": 1.0},
    "dm": {"alpha": 1.0, "beta": 1.0},
}


@dataclass
class BaselineConfig:
    algorithm: str = "epie"
    alpha: float | None = None
    beta: float | None = None
    iterations: int = 100
    seed: int = 0
    update_probe: bool = False
    probe_init: np.ndarray | None = None
    object_init: np.ndarray | None = None
    trace_every: int = 1

    def __post_init__(self):
        self.algorithm = self.algorithm.lower()
        if self.algorithm not in DEFAULT_PARAMS:
            raise ConfigError(f"unknown baseline {self.algorithm!r}")
        defaults = DEFAULT_PARAMS[self.algorithm]
        if self.alpha is None:
            self.alpha = defaults["alpha"]
        if self.beta is None:
            self.beta = defaults["beta"]
        if not (self.alpha > 0 and self.beta > 0):
            raise ConfigError("alpha and beta must be positive")
        if self.probe_init is not None:
            self.update_probe = True

    def snapshot(self) -> dict:
        d = asdict(self)
        d.pop("probe_init")
        d.pop("object_init")
        d["blind"] = self.probe_init is not None
        return d


def amplitude_project(psi, intensity):
    """Replace magnitudes by ``sqrt(I)``, keeping the phase (0 where ``psi == 0``)."""
    amp = np.sqrt(np.maximum(intensity, 0.0))
    mag = np.abs(psi)
    phase = np.where(mag > 0, psi / np.where(mag > 0, mag, 1.0), 1.0)
    return amp * phase


def _initial(dataset, cfg):
    geom = dataset.geometry
    rng = np.random.default_rng(cfg.seed)
    shape = geom.object_shape
    if cfg.object_init is not None:
        obj = np.array(cfg.object_init, dtype=np.complex128)
    else:
        obj = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)
    if cfg.probe_init is not None:
        probe = np.array(cfg.probe_init, dtype=np.complex128)
    elif dataset.probe is not None:
        probe = np.array(dataset.probe, dtype=np.complex128)
    else:
        raise ConfigError("no probe: dataset has none and no probe_init was given")
    return obj, probe


def _check_finite(t, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise DivergedError(t)


def _trace_row(dataset, obj, probe, t, crop, lit):
    fit = metrics.fitness(dataset, obj, probe)
    if not np.isfinite(fit):
        raise DivergedError(t, "fitness")
    row = {"iter": t, "fitness": fit}
    if dataset.truth is not None:
        row["nmse_db"] = metrics.nmse(dataset.truth, obj, crop, lit)[1]
    return row


def run_pie_family(dataset, cfg: BaselineConfig, crop=None) -> ReconstructionResult:
    geom = dataset.geometry
    prop = Propagator(geom.window)
    obj, probe = _initial(dataset, cfg)
    if dataset.truth is not None and crop is None:
        crop = metrics.central_crop(dataset.truth.shape)
    lit = metrics.illuminated(geom, dataset.probe if dataset.probe is not None else probe)
    trace, timings = [], []
    t0 = time.perf_counter()
    for t in range(1, cfg.iterations + 1):
        for j in range(geom.J):
            sl = geom.slices(j)
            o_j = obj[sl].copy()
            exit_wave = probe * o_j
            revised = prop.adjoint(amplitude_project(prop.forward(exit_wave), dataset.intensities[j]))
            diff = revised - exit_wave
            p2 = np.abs(probe) ** 2
            p2max = p2.max()
            if cfg.algorithm == "pie":
                weight = np.abs(probe) / np.sqrt(p2max) * np.conj(probe) / (p2 + cfg.alpha * p2max)
                obj[sl] += cfg.beta * weight * diff
            else:
                obj[sl] += np.conj(probe) / ((1.0 - cfg.alpha) * p2 + cfg.alpha * p2max) * diff
            if cfg.update_probe:
                o2max = float(np.max(np.abs(o_j) ** 2))
                if o2max > 0:
                    probe = probe + cfg.beta * np.conj(o_j) / o2max * diff
        _check_finite(t, obj, probe)
        timings.append((time.perf_counter() - t0) * 1e3)
        if t % cfg.trace_every == 0 or t == cfg.iterations:
            trace.append(_trace_row(dataset, obj, probe, t, crop, lit))
    return ReconstructionResult(obj, None, probe, trace, timings, cfg.algorithm, cfg.snapshot())


def _overlap_projection(exits, obj, probe, geom, update_probe):
    """Least-squares object (then probe) given per-scan exit waves."""
    num = np.zeros(geom.object_shape, dtype=np.complex128)
    den = np.zeros(geom.object_shape)
    pc, p2 = np.conj(probe), np.abs(probe) ** 2
    for j in range(geom.J):
        sl = geom.slices(j)
        num[sl] += pc * exits[j]
        den[sl] += p2
    lit = den > 1e-12 * (den.max() if den.size else 0.0)
    obj = obj.copy()
    obj[lit] = num[lit] / den[lit]
    if update_probe:
        o_js = np.stack([obj[geom.slices(j)] for j in range(geom.J)])
        pnum = np.sum(np.conj(o_js) * exits, axis=0)
        pden = np.sum(np.abs(o_js) ** 2, axis=0)
        probe = pnum / np.maximum(pden, 1e-12 * pden.max())
    return obj, probe


def run_difference_map(dataset, cfg: BaselineConfig, crop=None) -> ReconstructionResult:
    geom = dataset.geometry
    prop = Propagator(geom.window)
    obj, probe = _initial(dataset, cfg)
    if dataset.truth is not None and crop is None:
        crop = metrics.central_crop(dataset.truth.shape)
    lit = metrics.illuminated(geom, dataset.probe if dataset.probe is not None else probe)
    psi = np.stack([probe * obj[geom.slices(j)] for j in range(geom.J)])
    trace, timings = [], []
    t0 = time.perf_counter()
    for t in range(1, cfg.iterations + 1):
        obj, probe = _overlap_projection(psi, obj, probe, geom, cfg.update_probe)
        exits = np.stack([probe * obj[geom.slices(j)] for j in range(geom.J)])
        reflected = prop.forward(2.0 * exits - psi)
        fourier = prop.adjoint(amplitude_project(reflected, dataset.intensities))
        psi = psi + cfg.beta * (fourier - exits)
        _check_finite(t, psi, obj, probe)
        timings.append((time.perf_counter() - t0) * 1e3)
        if t % cfg.trace_every == 0 or t == cfg.iterations:
            trace.append(_trace_row(dataset, obj, probe, t, crop, lit))
    return ReconstructionResult(obj, None, probe, trace, timings, "dm", cfg.snapshot())


def run_baseline(dataset, cfg: BaselineConfig, crop=None) -> ReconstructionResult:
    if cfg.algorithm == "dm":
        return run_difference_map(dataset, cfg, crop)
    return run_pie_family(dataset, cfg, crop)
