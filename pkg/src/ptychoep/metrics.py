"""Reconstruction quality: phase-aligned NMSE and data fitness."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import Propagator

__all__ = [
    "MetricsReport",
    "NMSE_DB_CAP",
    "central_crop",
    "align_phase",
    "nmse",
    "nmse_paper",
    "fitness",
    "noise_floor",
    "illuminated",
    "report",
]

NMSE_DB_CAP = 300.0


@dataclass(frozen=True)
class MetricsReport:
    nmse_raw: float
    nmse_db: float
    fitness: float
    crop: tuple[slice, slice]


def central_crop(shape, fraction: float = 0.5) -> tuple[slice, slice]:
    """Centred rectangle covering ``fraction`` of each dimension."""
    out = []
    for n in shape:
        m = max(1, int(round(n * fraction)))
        s = (n - m) // 2
        out.append(slice(s, s + m))
    return tuple(out)


def align_phase(truth, est):
    """Rotate ``est`` by the global phase that best matches ``truth``.

    Returns ``(theta, aligned)``; ``theta = 0`` when the two are orthogonal.
    """
    if np.shape(truth) != np.shape(est):
        raise ValueError("truth and estimate shapes differ")
    inner = np.vdot(est, truth)
    theta = float(np.angle(inner)) if inner != 0 else 0.0
    return theta, np.exp(1j * theta) * np.asarray(est)


def nmse(truth, est, crop=None, mask=None):
    """Energy-normalised, phase-aligned squared error on ``crop``.

    ``mask`` (boolean, full object shape) further restricts the evaluation,
    typically to pixels illuminated by at least one scan.

    Returns ``(nmse_raw, nmse_db)`` with ``nmse_db = -10 log10(nmse_raw)``,
    capped at ``NMSE_DB_CAP`` for a perfect match.
    """
    truth = np.asarray(truth)
    est = np.asarray(est)
    if truth.shape != est.shape:
        raise ValueError("truth and estimate shapes differ")
    crop = crop if crop is not None else central_crop(truth.shape)
    t, e = truth[crop], est[crop]
    if mask is not None:
        keep = np.asarray(mask, dtype=bool)[crop]
        t, e = t[keep], e[keep]
    energy = float(np.vdot(t, t).real)
    if energy == 0:
        raise ValueError("ground truth is zero on the evaluation crop")
    _, aligned = align_phase(t, e)
    raw = float(np.sum(np.abs(t - aligned) ** 2) / energy)
    db = NMSE_DB_CAP if raw <= 10 ** (-NMSE_DB_CAP / 10) else min(-10.0 * math.log10(raw), NMSE_DB_CAP)
    return raw, db


def nmse_paper(truth, est, crop=None) -> float:
    """Literal ``min_theta ||O - e^{i theta} O_alg||^2 / N^2`` on the crop."""
    crop = crop if crop is not None else central_crop(np.shape(truth))
    t, e = np.asarray(truth)[crop], np.asarray(est)[crop]
    _, aligned = align_phase(t, e)
    return float(np.sum(np.abs(t - aligned) ** 2) / t.size**2)


def _model_amplitudes(geometry, obj, probe):
    prop = Propagator(geometry.window)
    exits = np.stack([probe * obj[geometry.slices(j)] for j in range(geometry.J)])
    return np.abs(prop.forward(exits))


def fitness(dataset, obj, probe) -> float:
    """Amplitude residual ``sum ||sqrt(I) - |F[P O_j]| ||^2 / sum I``."""
    total = float(dataset.intensities.sum())
    if total <= 0:
        raise ValueError("dataset has zero total intensity")
    amp = _model_amplitudes(dataset.geometry, obj, probe)
    return float(np.sum((np.sqrt(dataset.intensities) - amp) ** 2) / total)


def noise_floor(dataset) -> float:
    """Expected fitness of the ground truth, ``J M sigma^2 / sum I``."""
    total = float(dataset.intensities.sum())
    if total <= 0:
        raise ValueError("dataset has zero total intensity")
    g = dataset.geometry
    return g.J * g.M * dataset.sigma**2 / total


def illuminated(geometry, probe=None, rel: float = 1e-12) -> np.ndarray:
    """Pixels that receive probe intensity from at least one scan.

    Without a probe, any pixel inside a scan window counts.
    """
    if probe is None:
        return geometry.coverage() > 0
    dose = np.zeros(geometry.object_shape)
    p2 = np.abs(probe) ** 2
    for j in range(geometry.J):
        dose[geometry.slices(j)] += p2
    return dose > rel * (dose.max() if dose.size else 0.0)


def report(dataset, obj, probe, crop=None) -> MetricsReport:
    fit = fitness(dataset, obj, probe)
    if dataset.truth is None:
        return MetricsReport(float("nan"), float("nan"), fit, crop)
    crop = crop if crop is not None else central_crop(dataset.truth.shape)
    raw, db = nmse(dataset.truth, obj, crop, illuminated(dataset.geometry, dataset.probe if dataset.probe is not None else probe))
    return MetricsReport(raw, db, fit, crop)
