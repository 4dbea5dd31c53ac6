import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ptychoep import baselines, metrics, sim
from ptychoep.baselines import BaselineConfig, amplitude_project
from ptychoep.engine import ConfigError, DivergedError

from conftest import random_complex, small_dataset

ALGOS = ("pie", "epie", "rpie", "dm")


def test_paper_defaults():
    assert (BaselineConfig("pie").alpha, BaselineConfig("pie").beta) == (0.1, 1.0)
    assert (BaselineConfig("epie").alpha, BaselineConfig("epie").beta) == (1.0, 1.0)
    assert (BaselineConfig("rpie").alpha, BaselineConfig("rpie").beta) == (0.1, 1.0)
    assert BaselineConfig("DM").beta == 1.0
    with pytest.raises(ConfigError):
        BaselineConfig("hio")
    with pytest.raises(ConfigError):
        BaselineConfig("epie", alpha=-1)


def test_amplitude_project_examples(rng):
    psi = random_complex(rng, (5, 5))
    np.testing.assert_allclose(amplitude_project(psi, np.abs(psi) ** 2), psi, rtol=1e-14)
    assert amplitude_project(np.zeros(1, complex), np.array([4.0]))[0] == 2 + 0j


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_amplitude_project_hits_the_constraint_set(seed):
    rng = np.random.default_rng(seed)
    psi = random_complex(rng, (6, 6))
    inten = rng.uniform(0, 5, (6, 6))
    out = amplitude_project(psi, inten)
    np.testing.assert_allclose(np.abs(out) ** 2, inten, rtol=1e-13, atol=1e-15)
    np.testing.assert_allclose(amplitude_project(out, inten), out, rtol=1e-13)
    lit = inten > 0
    np.testing.assert_allclose(np.angle(out[lit] / psi[lit]), 0, atol=1e-12)


@pytest.mark.parametrize("algo", ALGOS)
def test_truth_is_a_fixed_point(algo):
    ds = small_dataset(snr_db=math.inf)
    res = baselines.run_baseline(ds, BaselineConfig(algo, iterations=3, object_init=ds.truth))
    lit = metrics.illuminated(ds.geometry, ds.probe)
    np.testing.assert_allclose(res.o_hat[lit], ds.truth[lit], atol=1e-12)
    assert res.trace[-1]["fitness"] < 1e-20


@pytest.mark.parametrize("algo", ALGOS)
def test_unilluminated_pixels_untouched(algo):
    ds = small_dataset(size=20, offsets=((0, 0), (3, 4)))
    init = np.random.default_rng(9).standard_normal((20, 20)) + 0j
    res = baselines.run_baseline(ds, BaselineConfig(algo, iterations=4, object_init=init))
    dark = ~metrics.illuminated(ds.geometry)
    assert dark.any()
    assert res.o_hat[dark].tobytes() == init[dark].tobytes()


@pytest.mark.parametrize("algo", ALGOS)
def test_traces_are_finite_and_deterministic(algo):
    ds = small_dataset()
    a = baselines.run_baseline(ds, BaselineConfig(algo, iterations=10, seed=4))
    b = baselines.run_baseline(ds, BaselineConfig(algo, iterations=10, seed=4))
    assert len(a.trace) == 10 and a.trace == b.trace
    assert all(math.isfinite(r["fitness"]) and math.isfinite(r["nmse_db"]) for r in a.trace)


@pytest.mark.parametrize("algo", ALGOS)
def test_known_probe_reduces_fitness(algo):
    geom = sim.fermat_for_alpha((48, 48), (16, 16), 3.5)
    ds = sim.simulate(sim.synthetic_object((48, 48), seed=2), sim.disk_probe((16, 16), 12), geom,
                      sim.NoiseSpec(40.0, 1))
    res = baselines.run_baseline(ds, BaselineConfig(algo, iterations=60, seed=1))
    fit = [r["fitness"] for r in res.trace]
    assert fit[-1] < 0.2 * fit[0]


def test_dm_single_scan_trend_non_increasing():
    ds = small_dataset(offsets=((4, 4),), snr_db=math.inf)
    res = baselines.run_difference_map(ds, BaselineConfig("dm", iterations=40, seed=2))
    fit = np.array([r["fitness"] for r in res.trace])
    blocks = fit.reshape(4, 10).mean(axis=1)
    assert np.all(np.diff(blocks) <= 1e-12)


def test_blind_mode_updates_probe():
    ds = small_dataset()
    init = sim.disk_probe((8, 8), 6, blur=1.0)
    for algo in ("epie", "dm"):
        res = baselines.run_baseline(ds, BaselineConfig(algo, iterations=3, probe_init=init))
        assert not np.array_equal(res.probe, init)
        assert res.config["blind"] is True


def test_missing_probe_and_divergence(tiny):
    ds = small_dataset()
    ds.probe = None
    with pytest.raises(ConfigError):
        baselines.run_baseline(ds, BaselineConfig("epie"))
    tiny.intensities[1, 2, 2] = np.nan
    with pytest.raises(DivergedError):
        baselines.run_baseline(tiny, BaselineConfig("epie", iterations=2))
