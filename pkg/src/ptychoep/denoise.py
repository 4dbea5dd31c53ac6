"""Componentwise posterior-mean denoisers.

``g_in`` is the MMSE estimator of an object pixel observed through a
complex Gaussian channel ``O_tilde = O + CN(0, 1/Gamma)``; ``g_out`` is the
Laplace-approximated posterior of a detector-plane pixel given its
measured intensity under additive Gaussian noise on the amplitude.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

__all__ = ["PriorSpec", "NoiseSpecOut", "g_in", "g_out", "bg_nonzero_prob"]


@dataclass(frozen=True)
class PriorSpec:
    """Object prior: ``"gaussian"`` (CN(0, 1)) or ``"bg"`` (Bernoulli-Gaussian)."""

    kind: str = "gaussian"
    rho: float = 1.0

    def __post_init__(self):
        if self.kind not in ("gaussian", "bg"):
            raise ValueError(f"unknown prior kind {self.kind!r}")
        if not 0.0 < self.rho <= 1.0:
            raise ValueError(f"sparsity rate must lie in (0, 1], got {self.rho}")

    @property
    def is_gaussian(self) -> bool:
        return self.kind == "gaussian" or self.rho == 1.0


@dataclass(frozen=True)
class NoiseSpecOut:
    """Standard deviation of the Gaussian noise on measured amplitudes."""

    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"amplitude noise sigma must be positive, got {self.sigma}")


def _check_precision(gamma):
    gamma = np.asarray(gamma, dtype=np.float64)
    if np.any(~(gamma > 0)):
        raise ValueError("precisions must be strictly positive")
    return gamma


def bg_nonzero_prob(o_tilde, gamma, rho):
    """Posterior probability that a Bernoulli-Gaussian pixel is nonzero.

    Evaluated as a logistic of the log density ratio so that large
    ``|o_tilde|**2 * gamma`` cannot overflow.
    """
    if rho == 1.0:
        return np.ones(np.shape(o_tilde))
    a2 = np.abs(o_tilde) ** 2
    # log[(1-rho) CN(o; 0, 1/g)] - log[rho CN(o; 0, 1 + 1/g)]
    z = np.log1p(-rho) - np.log(rho) + np.log1p(gamma) - a2 * gamma**2 / (1.0 + gamma)
    return expit(-z)


def g_in(prior: PriorSpec, o_tilde, gamma_tilde):
    """Posterior mean and variance of object pixels.

    Parameters
    ----------
    prior : PriorSpec
    o_tilde : complex array
        Noisy observation of the object.
    gamma_tilde : positive real array
        Precision of the observation noise.

    Returns
    -------
    o_hat : complex array
    var : real array
        Posterior variance, i.e. the inverse of the output precision.
    """
    o_tilde = np.asarray(o_tilde, dtype=np.complex128)
    gamma = _check_precision(gamma_tilde)
    shrink = gamma / (1.0 + gamma)
    mean_nz = shrink * o_tilde
    var_nz = 1.0 / (1.0 + gamma)
    if prior.is_gaussian:
        return mean_nz, np.broadcast_to(var_nz, o_tilde.shape).copy()
    pi = bg_nonzero_prob(o_tilde, gamma, prior.rho)
    o_hat = pi * mean_nz
    var = pi * (1.0 - pi) * np.abs(mean_nz) ** 2 + pi * var_nz
    return o_hat, var


def g_out(noise: NoiseSpecOut, psi_tilde, gamma_tilde, intensity):
    """Amplitude-denoised detector field and its scalar variance.

    Parameters
    ----------
    noise : NoiseSpecOut
    psi_tilde : complex array
        Incoming estimate of the detector field.
    gamma_tilde : float
        Scalar precision of ``psi_tilde``.
    intensity : real array
        Measured intensities (negative values are treated as 0).

    Returns
    -------
    psi_hat : complex array
        Same phase as ``psi_tilde``; magnitude pulled towards ``sqrt(I)``.
    var : float
        Pixel average of the per-pixel posterior variance.
    """
    gamma = float(gamma_tilde)
    if not gamma > 0:
        raise ValueError("precision must be strictly positive")
    psi_tilde = np.asarray(psi_tilde, dtype=np.complex128)
    amp_meas = np.sqrt(np.maximum(np.asarray(intensity, dtype=np.float64), 0.0))
    mag = np.abs(psi_tilde)
    floor = 1e-8 * (mag.max() if mag.size else 0.0) + 1e-30
    phase = np.where(mag > 0, psi_tilde / np.where(mag > 0, mag, 1.0), 1.0)
    mag = np.maximum(mag, floor)
    s2g = 2.0 * noise.sigma**2 * gamma
    mag_hat = (amp_meas + s2g * mag) / (1.0 + s2g)
    var_pix = (amp_meas + 2.0 * s2g * mag) / (2.0 * gamma * mag * (1.0 + s2g))
    return mag_hat * phase, float(var_pix.mean())
