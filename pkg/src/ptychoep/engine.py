"""Expectation-propagation solver for ptychographic phase retrieval.

The object belief is a diagonal complex Gaussian with mean ``o_hat`` and
precision ``gamma_hat``. It is the product of a prior-side message
``(o_tilde, gamma_o)`` and one scalar-precision message per scan,
``(psi_tilde[j], gamma_psi[j])``, living in the detector plane. Each sweep
refreshes the scan messages against the measured intensities (through
``g_out``), then the prior message (through ``g_in``), and, when the probe
is unknown, re-estimates the probe and the message precisions by EM.
"""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import Propagator, read_cimg, write_cimg
from .denoise import NoiseSpecOut, PriorSpec, g_in, g_out
from . import metrics

__all__ = [
    "ConfigError",
    "DivergedError",
    "EngineConfig",
    "MessageState",
    "ReconstructionResult",
    "init_state",
    "belief_update",
    "message_update_by_data",
    "message_update_by_prior",
    "apply_prior_message",
    "damp",
    "incremental_belief_refresh",
    "iterate_sequential",
    "iterate_parallel",
    "em_update",
    "extrinsic_belief",
    "run",
    "save_result",
    "load_result",
    "write_trace",
    "TRACE_COLUMNS",
]

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Inconsistent or incomplete run configuration."""


class DivergedError(RuntimeError):
    def __init__(self, iteration: int, what: str = "state"):
        super().__init__(f"non-finite {what} at iteration {iteration}")
        self.iteration = iteration


@dataclass
class EngineConfig:
    """Run parameters.

    ``mu`` damps the scan messages. It defaults to 0.9 for the Gaussian
    prior and 0.7 for the Bernoulli-Gaussian prior, which additionally
    damps its own messages with ``prior_mu`` (0.2) and keeps the flat
    ``(0, 1)`` prior message for the first ``prior_warmup`` (20) iterations.
    With the Gaussian prior the prior message is constant, so the last two
    settings have no effect.

    ``init_gamma_psi`` is the initial scan-message precision: ``1e-2`` with
    a known probe, ``1 / max|P_init|^2`` in blind mode.

    ``sigma`` defaults to the dataset's amplitude-noise level (a tiny
    positive value is substituted for noiseless data). Passing
    ``probe_init`` switches to blind mode, where ``em_updates`` EM steps
    follow every iteration after the first ``em_warmup`` ones.

    A message whose precision would come out nonpositive is handled by
    ``clamp_mode``: ``"relative"`` raises the posterior precision to
    ``(1 + relative_floor)`` times the extrinsic one, ``"posterior"`` sends
    the posterior mean at ``precision_floor``, ``"literal"`` only clamps the
    precision difference at ``precision_floor``. The default is
    ``"posterior"`` in blind mode and ``"relative"`` otherwise.
    """

    mu: float | None = None
    max_iter: int = 100
    em_updates: int = 2
    scheme: str = "sequential"
    prior: PriorSpec = field(default_factory=PriorSpec)
    sigma: float | None = None
    precision_floor: float = 1e-8
    precision_ceiling: float = 1e10
    init_gamma_psi: float | None = None
    em_warmup: int = 2
    seed: int = 0
    probe_init: np.ndarray | None = None
    workers: int = 1
    tol: float | None = None
    trace_every: int = 1
    clamp_mode: str | None = None
    relative_floor: float = 0.01
    prior_mu: float | None = None
    prior_warmup: int | None = None

    def __post_init__(self):
        gauss = self.prior.is_gaussian
        if self.mu is None:
            self.mu = 0.9 if gauss else 0.7
        if self.prior_mu is None:
            self.prior_mu = 1.0 if gauss else 0.2
        if self.prior_warmup is None:
            self.prior_warmup = 0 if gauss else 20
        if self.clamp_mode is None:
            self.clamp_mode = "posterior" if self.probe_init is not None else "relative"
        for name in ("mu", "prior_mu"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ConfigError(f"damping {name} must lie in (0, 1], got {v}")
        if self.prior_warmup < 0:
            raise ConfigError("prior_warmup must be nonnegative")
        if self.scheme not in ("sequential", "parallel"):
            raise ConfigError(f"unknown scheme {self.scheme!r}")
        if self.max_iter < 0 or self.em_updates < 0:
            raise ConfigError("iteration counts must be nonnegative")
        if not self.precision_floor > 0:
            raise ConfigError("precision_floor must be positive")
        if self.clamp_mode not in ("relative", "posterior", "literal"):
            raise ConfigError(f"unknown clamp_mode {self.clamp_mode!r}")
        if not self.relative_floor > 0:
            raise ConfigError("relative_floor must be positive")

    @property
    def blind(self) -> bool:
        return self.probe_init is not None

    def snapshot(self) -> dict:
        d = asdict(replace(self, probe_init=None))
        d["prior"] = asdict(self.prior)
        d["blind"] = self.blind
        return d


@dataclass
class MessageState:
    """All messages and the current object belief.

    ``fh_psi[j]`` caches ``F^H psi_tilde[j]`` so the belief can be refreshed
    without an extra inverse transform.
    """

    o_tilde: np.ndarray
    gamma_o: np.ndarray
    o_hat: np.ndarray
    gamma_hat: np.ndarray
    lam_hat: np.ndarray
    psi_tilde: np.ndarray
    gamma_psi: np.ndarray
    fh_psi: np.ndarray
    probe: np.ndarray

    def copy(self) -> "MessageState":
        return MessageState(**{k: np.array(v, copy=True) for k, v in self.__dict__.items()})


@dataclass
class ReconstructionResult:
    o_hat: np.ndarray
    gamma_hat: np.ndarray
    probe: np.ndarray
    trace: list = field(default_factory=list)
    timings_ms: list = field(default_factory=list)
    algorithm: str = "ptycho-ep"
    config: dict = field(default_factory=dict)
    state: MessageState | None = None


def _noise(dataset, config) -> NoiseSpecOut:
    sigma = config.sigma if config.sigma is not None else dataset.sigma
    if not sigma > 0:
        rms = float(np.sqrt(np.mean(dataset.intensities))) if dataset.intensities.size else 1.0
        sigma = 1e-4 * max(rms, 1e-300)
    return NoiseSpecOut(float(sigma))


def _probe(dataset, config) -> np.ndarray:
    if config.probe_init is not None:
        p = np.asarray(config.probe_init, dtype=np.complex128)
    elif dataset.probe is not None:
        p = np.asarray(dataset.probe, dtype=np.complex128)
    else:
        raise ConfigError("no probe: dataset has none and no probe_init was given")
    if p.shape != dataset.geometry.window:
        raise ConfigError(f"probe shape {p.shape} != window {dataset.geometry.window}")
    return p.copy()


def _init_gamma_psi(probe, config) -> float:
    if config.init_gamma_psi is not None:
        return float(config.init_gamma_psi)
    if not config.blind:
        return 1e-2
    # blind runs need the scan messages to dominate the flat prior from the start
    peak = float(np.max(np.abs(probe) ** 2))
    return 1.0 / peak if peak > 0 else 1.0


def init_state(dataset, config: EngineConfig) -> MessageState:
    """Prior message (0, 1), scan messages from a random CN(0, I) object."""
    geom = dataset.geometry
    prop = Propagator(geom.window)
    probe = _probe(dataset, config)
    rng = np.random.default_rng(config.seed)
    shape = geom.object_shape
    o_init = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)
    if geom.J:
        exits = np.stack([probe * o_init[geom.slices(j)] for j in range(geom.J)])
    else:
        exits = np.zeros((0, *geom.window), dtype=np.complex128)
    psi = prop.forward(exits)
    state = MessageState(
        o_tilde=np.zeros(shape, dtype=np.complex128),
        gamma_o=np.ones(shape),
        o_hat=np.zeros(shape, dtype=np.complex128),
        gamma_hat=np.ones(shape),
        lam_hat=np.zeros(shape, dtype=np.complex128),
        psi_tilde=psi,
        gamma_psi=np.full(geom.J, _init_gamma_psi(probe, config)),
        fh_psi=prop.adjoint(psi),
        probe=probe,
    )
    belief_update(state, geom)
    return state


def belief_update(state: MessageState, geom):
    """Recompute the belief from all messages, in scan order."""
    p2 = np.abs(state.probe) ** 2
    pc = np.conj(state.probe)
    gamma_hat = state.gamma_o.copy()
    lam = state.gamma_o * state.o_tilde
    for j in range(geom.J):
        sl = geom.slices(j)
        g = state.gamma_psi[j]
        gamma_hat[sl] += g * p2
        lam[sl] += g * (pc * state.fh_psi[j])
    state.gamma_hat = gamma_hat
    state.lam_hat = lam
    state.o_hat = lam / gamma_hat
    return state.o_hat, state.gamma_hat


def message_update_by_data(state: MessageState, j: int, dataset, config: EngineConfig,
                           noise: NoiseSpecOut | None = None):
    """Undamped new message ``(psi_tilde, gamma_psi)`` for scan ``j``."""
    geom = dataset.geometry
    noise = noise or _noise(dataset, config)
    floor = config.precision_floor
    sl = geom.slices(j)
    probe = state.probe
    M = geom.M
    # belief projected onto the detector plane, scalar precision
    psi_hat = np.fft.fft2(probe * state.o_hat[sl], norm="ortho")
    tr = float(np.sum(np.abs(probe) ** 2 / state.gamma_hat[sl]))
    gamma_psi_hat = M / tr if tr > 0 else config.precision_ceiling
    # extrinsic message towards the likelihood
    g_old = state.gamma_psi[j]
    g_ext = max(gamma_psi_hat - g_old, floor)
    psi_ext = (gamma_psi_hat * psi_hat - g_old * state.psi_tilde[j]) / g_ext
    psi_post, var_post = g_out(noise, psi_ext, g_ext, dataset.intensities[j])
    # back towards the belief; a vanishing or non-finite variance is left to the divergence check
    gamma_post = 1.0 / var_post if var_post > 0 else config.precision_ceiling
    return extrinsic_divide(psi_post, gamma_post, psi_ext, g_ext, config)


def extrinsic_divide(mean_post, gamma_post, mean_ext, gamma_ext, config: EngineConfig):
    """Message ``posterior / extrinsic`` with its precision kept positive.

    ``"relative"`` raises the posterior precision to at least
    ``(1 + relative_floor) * gamma_ext`` before dividing, which turns an
    invalid message into a bounded step towards ``mean_post``.
    ``"posterior"`` replaces an invalid message by ``(mean_post, floor)``;
    ``"literal"`` only clamps the precision difference.
    """
    floor, ceil = config.precision_floor, config.precision_ceiling
    if config.clamp_mode == "relative":
        gamma_post = np.maximum(gamma_post, (1.0 + config.relative_floor) * gamma_ext)
    g_raw = gamma_post - gamma_ext
    g_int = np.clip(g_raw, floor, ceil)
    mean_int = (gamma_post * mean_post - gamma_ext * mean_ext) / g_int
    if config.clamp_mode == "posterior":
        mean_int = np.where(g_raw < floor, mean_post, mean_int)
    if np.ndim(g_int) == 0:
        return mean_int, float(g_int)
    return mean_int, g_int


def damp(raw, old, mu: float):
    """Mix a new message into the previous one.

    Means are mixed linearly, precisions through their inverse square roots.
    ``raw`` and ``old`` are ``(mean, precision)`` pairs.
    """
    psi_raw, g_raw = raw
    psi_old, g_old = old
    if mu == 1.0:
        return psi_raw, g_raw
    psi = mu * psi_raw + (1.0 - mu) * psi_old
    g = (mu * g_raw**-0.5 + (1.0 - mu) * g_old**-0.5) ** -2
    return psi, g


def incremental_belief_refresh(state: MessageState, j: int, new, geom):
    """Swap scan ``j``'s message into the belief without a full resum."""
    psi_new, g_new = new
    sl = geom.slices(j)
    fh_new = np.fft.ifft2(psi_new, norm="ortho")
    g_old = state.gamma_psi[j]
    pc = np.conj(state.probe)
    state.gamma_hat[sl] += (g_new - g_old) * (np.abs(state.probe) ** 2)
    state.lam_hat[sl] += g_new * (pc * fh_new) - g_old * (pc * state.fh_psi[j])
    state.o_hat[sl] = state.lam_hat[sl] / state.gamma_hat[sl]
    state.psi_tilde[j] = psi_new
    state.gamma_psi[j] = g_new
    state.fh_psi[j] = fh_new
    return state


def message_update_by_prior(state: MessageState, config: EngineConfig):
    """New prior-side message ``(o_tilde, gamma_o)``.

    The Gaussian prior gives ``(0, 1)`` whatever the belief, so that case
    short-circuits.
    """
    shape = state.o_hat.shape
    if config.prior.is_gaussian:
        return np.zeros(shape, dtype=np.complex128), np.ones(shape)
    floor, ceil = config.precision_floor, config.precision_ceiling
    g_ext = np.maximum(state.gamma_hat - state.gamma_o, floor)
    o_ext = (state.gamma_hat * state.o_hat - state.gamma_o * state.o_tilde) / g_ext
    o_post, var_post = g_in(config.prior, o_ext, g_ext)
    gamma_post = 1.0 / np.maximum(var_post, 1.0 / ceil)
    return extrinsic_divide(o_post, gamma_post, o_ext, g_ext, config)


def apply_prior_message(state: MessageState, new):
    """Replace the prior message and shift the belief accordingly."""
    o_new, g_new = new
    state.gamma_hat += g_new - state.gamma_o
    state.lam_hat += g_new * o_new - state.gamma_o * state.o_tilde
    state.o_hat = state.lam_hat / state.gamma_hat
    state.o_tilde = o_new
    state.gamma_o = g_new
    return state


def extrinsic_belief(state: MessageState, config: EngineConfig):
    """Prior-side belief ``(o_hat_ext, gamma_hat_ext)``; equals the belief at a fixed point."""
    g_ext = np.maximum(state.gamma_hat - state.gamma_o, config.precision_floor)
    o_ext = (state.gamma_hat * state.o_hat - state.gamma_o * state.o_tilde) / g_ext
    o_post, var_post = g_in(config.prior, o_ext, g_ext)
    return o_post, 1.0 / var_post


def iterate_sequential(state: MessageState, dataset, config: EngineConfig, noise=None):
    """One sweep over the scans, refreshing the belief after each scan."""
    geom = dataset.geometry
    noise = noise or _noise(dataset, config)
    if geom.J == 1:
        # the two schedules coincide for one scan; share the code path
        return iterate_parallel(state, dataset, config, noise)
    for j in range(geom.J):
        raw = message_update_by_data(state, j, dataset, config, noise)
        new = damp(raw, (state.psi_tilde[j], state.gamma_psi[j]), config.mu)
        incremental_belief_refresh(state, j, new, geom)
    return state


def iterate_parallel(state: MessageState, dataset, config: EngineConfig, noise=None):
    """All scan messages from one frozen belief, then one full belief update."""
    geom = dataset.geometry
    noise = noise or _noise(dataset, config)
    belief_update(state, geom)

    def one(j):
        return message_update_by_data(state, j, dataset, config, noise)

    if config.workers > 1 and geom.J > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            raws = list(pool.map(one, range(geom.J)))
    else:
        raws = [one(j) for j in range(geom.J)]
    for j, raw in enumerate(raws):
        psi, g = damp(raw, (state.psi_tilde[j], state.gamma_psi[j]), config.mu)
        state.psi_tilde[j] = psi
        state.gamma_psi[j] = g
        state.fh_psi[j] = np.fft.ifft2(psi, norm="ortho")
    belief_update(state, geom)
    return state


def em_update(state: MessageState, dataset, config: EngineConfig, n_updates: int | None = None):
    """Alternate the probe and per-scan precision EM updates, belief held fixed."""
    geom = dataset.geometry
    tau = config.em_updates if n_updates is None else n_updates
    if tau == 0 or geom.J == 0:
        return state
    M = geom.M
    o_js = np.stack([state.o_hat[geom.slices(j)] for j in range(geom.J)])
    v_js = np.stack([1.0 / state.gamma_hat[geom.slices(j)] for j in range(geom.J)])
    second_moment = v_js + np.abs(o_js) ** 2
    for _ in range(tau):
        w = state.gamma_psi[:, None, None]
        num = np.sum(w * np.conj(o_js) * state.fh_psi, axis=0)
        den = np.sum(w * second_moment, axis=0)
        den = np.maximum(den, 1e-12 * den.max())
        state.probe = num / den
        p2 = np.abs(state.probe) ** 2
        resid = np.sum(np.abs(state.fh_psi - state.probe * o_js) ** 2, axis=(1, 2))
        var = (resid + np.sum(p2 * v_js, axis=(1, 2))) / M
        state.gamma_psi = np.clip(1.0 / np.maximum(var, 1e-300),
                                  config.precision_floor, config.precision_ceiling)
    belief_update(state, geom)
    return state


def _record(dataset, state, it, delta, crop, lit):
    row = {"iter": it, "fitness": metrics.fitness(dataset, state.o_hat, state.probe)}
    if dataset.truth is not None:
        row["nmse_db"] = metrics.nmse(dataset.truth, state.o_hat, crop, lit)[1]
    row["delta"] = delta
    return row


def run(dataset, config: EngineConfig, callback=None, crop=None) -> ReconstructionResult:
    """Run ``config.max_iter`` outer iterations.

    ``callback(t, state)`` is called after every iteration (``t`` starts
    at 1) and may return True to stop early.
    """
    geom = dataset.geometry
    noise = _noise(dataset, config)
    state = init_state(dataset, config)
    step = iterate_sequential if config.scheme == "sequential" else iterate_parallel
    trace, timings = [], []
    if dataset.truth is not None and crop is None:
        crop = metrics.central_crop(dataset.truth.shape)
    lit = metrics.illuminated(geom, dataset.probe if dataset.probe is not None else state.probe)
    t0 = time.perf_counter()
    for t in range(1, config.max_iter + 1):
        psi_before = state.psi_tilde.copy()
        step(state, dataset, config, noise)
        if t > config.prior_warmup:
            new = message_update_by_prior(state, config)
            new = damp(new, (state.o_tilde, state.gamma_o), config.prior_mu)
            apply_prior_message(state, new)
        if config.blind and t > config.em_warmup:
            em_update(state, dataset, config)
        if not (np.all(np.isfinite(state.o_hat)) and np.all(np.isfinite(state.gamma_hat))
                and np.all(np.isfinite(state.probe))):
            raise DivergedError(t)
        denom = np.linalg.norm(psi_before)
        delta = float(np.linalg.norm(state.psi_tilde - psi_before) / denom) if denom > 0 else 0.0
        timings.append((time.perf_counter() - t0) * 1e3)
        if t % config.trace_every == 0 or t == config.max_iter:
            trace.append(_record(dataset, state, t, delta, crop, lit))
        if callback is not None and callback(t, state):
            break
        if config.tol is not None and delta < config.tol:
            log.info("converged at iteration %d (delta=%.3g)", t, delta)
            break
    return ReconstructionResult(
        o_hat=state.o_hat.copy(),
        gamma_hat=state.gamma_hat.copy(),
        probe=state.probe.copy(),
        trace=trace,
        timings_ms=timings,
        algorithm="ptycho-ep",
        config=config.snapshot(),
        state=state,
    )


TRACE_COLUMNS = ("iter", "fitness", "nmse_db")


def save_result(result: ReconstructionResult, out_dir) -> Path:
    """Write rasters, ``trace.csv`` and ``timing.csv`` into ``out_dir``.

    Wall-clock times go to ``timing.csv`` so that ``trace.csv`` depends only
    on the inputs and is byte-reproducible.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_cimg(out / "o_hat.cimg", result.o_hat, real=False)
    if result.gamma_hat is not None:
        write_cimg(out / "gamma_hat.cimg", result.gamma_hat, real=True)
    write_cimg(out / "probe.cimg", result.probe, real=False)
    write_trace(out, result)
    return out


def write_trace(out_dir, result: ReconstructionResult) -> None:
    """``trace.csv`` (iter, fitness, nmse_db when known) and ``timing.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cols = [c for c in TRACE_COLUMNS if any(c in row for row in result.trace)]
    with open(out / "trace.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in result.trace:
            w.writerow([repr(float(row[c])) if c != "iter" else int(row[c]) for c in cols])
    with open(out / "timing.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", "wall_ms"])
        for t, ms in enumerate(result.timings_ms, start=1):
            w.writerow([t, f"{ms:.3f}"])


def load_result(path) -> ReconstructionResult:
    root = Path(path)
    gamma_file = root / "gamma_hat.cimg"
    gamma = read_cimg(gamma_file) if gamma_file.exists() else None
    with open(root / "trace.csv", newline="") as fh:
        trace = [{k: (int(v) if k == "iter" else float(v)) for k, v in row.items()}
                 for row in csv.DictReader(fh)]
    timings = []
    timing_file = root / "timing.csv"
    if timing_file.exists():
        with open(timing_file, newline="") as fh:
            timings = [float(row["wall_ms"]) for row in csv.DictReader(fh)]
    return ReconstructionResult(read_cimg(root / "o_hat.cimg"), gamma, read_cimg(root / "probe.cimg"),
                                trace, timings)
