"""Independent reference implementations used by the tests.

* ``quadrature_posterior`` and ``g_out_direct``: the denoisers by brute
  force (2-D quadrature, per-pixel loops).
* ``DenseModel`` / ``parallel_iteration``: one parallel EP iteration with
  every operator an explicit matrix, S_j (M x N selection), F (M x M
  unitary DFT), diag(P).
"""

import numpy as np

from ptychoep.denoise import g_in, g_out

_NODES, _WEIGHTS = np.polynomial.legendre.leggauss(160)


def quadrature_posterior(o_tilde, gamma, rho):
    """Posterior mean and variance of O by 2-D Gauss-Legendre quadrature.

    Prior ``(1 - rho) delta(O) + rho CN(0, 1)``; likelihood ``CN(o_tilde; O, 1/gamma)``.
    The point mass is integrated exactly, the continuous part on a box that
    spans both 0 and ``o_tilde`` with a 12-standard-deviation margin.
    """
    s = 1.0 / np.sqrt(1.0 + gamma)
    margin = 12.0 * s
    lo_r, hi_r = min(0.0, o_tilde.real) - margin, max(0.0, o_tilde.real) + margin
    lo_i, hi_i = min(0.0, o_tilde.imag) - margin, max(0.0, o_tilde.imag) + margin
    xr = 0.5 * (hi_r - lo_r) * _NODES + 0.5 * (hi_r + lo_r)
    xi = 0.5 * (hi_i - lo_i) * _NODES + 0.5 * (hi_i + lo_i)
    w = np.outer(_WEIGHTS, _WEIGHTS) * 0.25 * (hi_r - lo_r) * (hi_i - lo_i)
    O = xr[:, None] + 1j * xi[None, :]
    # log of rho CN(O; 0, 1) CN(o_tilde; O, 1/gamma)
    log_cont = np.log(rho) - np.log(np.pi) - np.abs(O) ** 2 + np.log(gamma / np.pi) - gamma * np.abs(o_tilde - O) ** 2
    log_point = (np.log1p(-rho) if rho < 1 else -np.inf) + np.log(gamma / np.pi) - gamma * abs(o_tilde) ** 2
    shift = max(log_cont.max(), log_point)
    f = np.exp(log_cont - shift) * w
    point = np.exp(log_point - shift)
    z = f.sum() + point
    mean = (O * f).sum() / z
    second = (np.abs(O) ** 2 * f).sum() / z
    return mean, second - abs(mean) ** 2


def g_out_direct(sigma, psi, gamma, intensity):
    """Straight per-pixel evaluation of the Laplace output denoiser."""
    mags = np.abs(psi)
    floor = 1e-8 * mags.max() + 1e-30
    out, var = [], []
    for z, I in zip(psi.ravel(), intensity.ravel()):
        a = np.sqrt(max(I, 0.0))
        m = max(abs(z), floor)
        ph = z / abs(z) if abs(z) > 0 else 1.0
        out.append((a + 2 * sigma**2 * gamma * m) / (1 + 2 * sigma**2 * gamma) * ph)
        var.append((a + 4 * sigma**2 * gamma * m) / (2 * gamma * m * (1 + 2 * sigma**2 * gamma)))
    return np.array(out).reshape(psi.shape), float(np.mean(var))


def selection_matrix(geom, j):
    H, W = geom.object_shape
    mh, mw = geom.window
    r, c = geom.offsets[j]
    S = np.zeros((mh * mw, H * W))
    for a in range(mh):
        for b in range(mw):
            S[a * mw + b, (r + a) * W + (c + b)] = 1.0
    return S


def dft_matrix(h, w):
    Fh = np.exp(-2j * np.pi * np.outer(np.arange(h), np.arange(h)) / h) / np.sqrt(h)
    Fw = np.exp(-2j * np.pi * np.outer(np.arange(w), np.arange(w)) / w) / np.sqrt(w)
    return np.kron(Fh, Fw)


class DenseModel:
    def __init__(self, geom, probe):
        self.geom = geom
        self.F = dft_matrix(*geom.window)
        self.S = [selection_matrix(geom, j) for j in range(geom.J)]
        self.DP = np.diag(probe.ravel())
        self.A = [self.F @ self.DP @ S for S in self.S]

    def belief(self, o_tilde, gamma_o, psis, gammas):
        """Belief precision, accumulator and mean from all messages."""
        gam = gamma_o.copy()
        lam = gamma_o * o_tilde
        for j, A in enumerate(self.A):
            gam = gam + gammas[j] * np.real(np.diag(A.conj().T @ A))
            lam = lam + gammas[j] * (A.conj().T @ psis[j])
        return lam / gam, gam, lam


def divide(mean_post, gamma_post, mean_ext, gamma_ext, cfg):
    """Posterior / extrinsic with the engine's clamp rules, written out per mode."""
    floor, ceil = cfg.precision_floor, cfg.precision_ceiling
    gamma_post = np.asarray(gamma_post, dtype=float)
    if cfg.clamp_mode == "relative":
        gamma_post = np.where(gamma_post < (1 + cfg.relative_floor) * gamma_ext,
                              (1 + cfg.relative_floor) * gamma_ext, gamma_post)
    raw = gamma_post - gamma_ext
    g = np.minimum(np.maximum(raw, floor), ceil)
    m = (gamma_post * mean_post - gamma_ext * mean_ext) / g
    if cfg.clamp_mode == "posterior":
        m = np.where(raw < floor, mean_post, m)
    return m, g


def damp(new, old, mu):
    (m_new, g_new), (m_old, g_old) = new, old
    return mu * m_new + (1 - mu) * m_old, (mu / np.sqrt(g_new) + (1 - mu) / np.sqrt(g_old)) ** -2


def parallel_iteration(model, messages, intensities, sigma, cfg, prior_update=True):
    """One parallel data sweep plus the prior update, all in vectorised object space.

    ``messages`` holds ``o_tilde, gamma_o`` (length-N vectors) and ``psis``
    (J vectors of length M), ``gammas`` (J scalars). Returns the new
    messages and the final belief ``o_hat, gamma_hat``.
    """
    o_tilde, gamma_o = messages["o_tilde"], messages["gamma_o"]
    psis, gammas = [p.copy() for p in messages["psis"]], list(messages["gammas"])
    o_hat, gam, _ = model.belief(o_tilde, gamma_o, psis, gammas)
    M = model.F.shape[0]
    new_psis, new_gammas = [], []
    for j, A in enumerate(model.A):
        psi_hat = A @ o_hat
        cov = A @ np.diag(1.0 / gam) @ A.conj().T
        gamma_hat_psi = M / np.real(np.trace(cov))
        g_ext = max(gamma_hat_psi - gammas[j], cfg.precision_floor)
        psi_ext = (gamma_hat_psi * psi_hat - gammas[j] * psis[j]) / g_ext
        shape = model.geom.window
        post, var = g_out(_noise(sigma), psi_ext.reshape(shape), g_ext, intensities[j])
        m_int, g_int = divide(post.ravel(), 1.0 / var, psi_ext, g_ext, cfg)
        m, g = damp((m_int, float(g_int)), (psis[j], gammas[j]), cfg.mu)
        new_psis.append(m)
        new_gammas.append(float(g))
    o_hat, gam, _ = model.belief(o_tilde, gamma_o, new_psis, new_gammas)
    if prior_update:
        g_ext = np.maximum(gam - gamma_o, cfg.precision_floor)
        o_ext = (gam * o_hat - gamma_o * o_tilde) / g_ext
        post, var = g_in(cfg.prior, o_ext, g_ext)
        gamma_post = 1.0 / np.maximum(var, 1.0 / cfg.precision_ceiling)
        new_prior = divide(post, gamma_post, o_ext, g_ext, cfg)
        if cfg.prior_mu != 1.0:
            new_prior = damp(new_prior, (o_tilde, gamma_o), cfg.prior_mu)
        o_tilde, gamma_o = new_prior
        o_hat, gam, _ = model.belief(o_tilde, gamma_o, new_psis, new_gammas)
    return {"o_tilde": o_tilde, "gamma_o": gamma_o, "psis": new_psis, "gammas": new_gammas,
            "o_hat": o_hat, "gamma_hat": gam}


def _noise(sigma):
    from ptychoep.denoise import NoiseSpecOut

    return NoiseSpecOut(sigma)


def messages_from_state(state):
    return {
        "o_tilde": state.o_tilde.ravel().copy(),
        "gamma_o": state.gamma_o.ravel().copy(),
        "psis": [p.ravel().copy() for p in state.psi_tilde],
        "gammas": [float(g) for g in state.gamma_psi],
    }


def rel_err(a, b, scale=None):
    """``||a - b|| / ||b||``, or relative to ``scale`` when ``b`` may vanish."""
    a, b = np.asarray(a).ravel(), np.asarray(b).ravel()
    nb = np.linalg.norm(b) if scale is None else scale
    return np.linalg.norm(a - b) / (nb if nb > 0 else 1.0)
