import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ptychoep import metrics, sim
from ptychoep.core import GeometryError, ScanGeometry

from conftest import random_complex


def test_forward_impulse_probe_gives_flat_field():
    geom = ScanGeometry((8, 8), (4, 4), [(0, 0), (2, 3)])
    probe = np.zeros((4, 4), complex)
    probe[0, 0] = 1
    psi = sim.forward(np.ones((8, 8), complex), probe, geom)
    np.testing.assert_allclose(psi, np.full((2, 4, 4), 0.25), atol=1e-15)


def test_forward_zero_probe_and_norms(rng):
    geom = ScanGeometry((8, 8), (4, 4), [(0, 0), (4, 1)])
    obj = random_complex(rng, (8, 8))
    assert np.all(sim.forward(obj, np.zeros((4, 4), complex), geom) == 0)
    probe = random_complex(rng, (4, 4))
    psi = sim.forward(obj, probe, geom)
    for j in range(2):
        exit_wave = probe * obj[geom.slices(j)]
        assert np.isclose(np.linalg.norm(psi[j]), np.linalg.norm(exit_wave), rtol=1e-12)


def test_forward_shape_errors():
    geom = ScanGeometry((8, 8), (4, 4), [(0, 0)])
    with pytest.raises(ValueError):
        sim.forward(np.ones((8, 8)), np.ones((3, 3)), geom)
    with pytest.raises(ValueError):
        sim.forward(np.ones((9, 8)), np.ones((4, 4)), geom)


def test_add_noise_infinite_snr_is_exact(rng):
    psi = random_complex(rng, (3, 5, 5))
    inten, sigma = sim.add_noise(psi, sim.NoiseSpec(math.inf, 0))
    assert sigma == 0
    np.testing.assert_array_equal(inten, np.abs(psi) ** 2)


def test_add_noise_deterministic_and_nonnegative(rng):
    psi = random_complex(rng, (4, 8, 8))
    a = sim.add_noise(psi, sim.NoiseSpec(10.0, 5))
    b = sim.add_noise(psi, sim.NoiseSpec(10.0, 5))
    assert a[1] == b[1] and a[0].tobytes() == b[0].tobytes()
    assert a[0].shape == psi.shape and np.all(a[0] >= 0)
    c = sim.add_noise(psi, sim.NoiseSpec(10.0, 6))
    assert not np.array_equal(a[0], c[0])


def test_realised_snr_matches_request():
    rng = np.random.default_rng(0)
    psi = random_complex(rng, (10, 100, 100))  # 1e5 pixels
    inten, sigma = sim.add_noise(psi, sim.NoiseSpec(30.0, 1))
    assert abs(sigma**2 / inten.mean() / 10**-3 - 1) < 0.01
    # the injected noise itself has standard deviation sigma
    resid = np.sqrt(inten) - np.abs(psi)
    assert abs(resid.std() / sigma - 1) < 0.01


def test_noise_spec_rejects_nan():
    with pytest.raises(ValueError):
        sim.NoiseSpec(float("nan"))


def test_fermat_single_scan_centred():
    g = sim.fermat_spiral((64, 64), (16, 16), 1, 3.0)
    assert g.offsets == ((24, 24),)


def test_fermat_sorted_by_centre_distance():
    g = sim.fermat_spiral((128, 128), (32, 32), 40, 6.0)
    c = (128 - 32) / 2
    d = [math.hypot(r - c, q - c) for r, q in g.offsets]
    assert all(a <= b for a, b in zip(d, d[1:]))


def test_fermat_out_of_bounds_names_scan():
    with pytest.raises(GeometryError, match="fermat scan"):
        sim.fermat_spiral((64, 64), (32, 32), 30, 10.0)


def test_fermat_figure_geometry_alpha():
    # 129 scans of a 64x64 window at alpha ~ 2.4 cover ~220064 pixels. With every
    # window inside the object this needs more than 512x512; 576x576 suffices.
    assert 129 * 4096 / 220064 == pytest.approx(2.401, abs=1e-3)
    with pytest.raises(ValueError, match="closest"):
        sim.tune_fermat_radius((512, 512), (64, 64), 129, 2.4)
    _, g = sim.tune_fermat_radius((576, 576), (64, 64), 129, 2.4)
    a = sim.sampling_ratio(g)
    assert abs(a - 2.4) <= 0.02
    covered = np.count_nonzero(g.coverage())
    assert abs(covered - 220064) / 220064 < 0.01


@pytest.mark.parametrize("alpha", [4.0, 3.0, 2.4, 2.1])
def test_fermat_for_alpha_hits_target(alpha):
    g = sim.fermat_for_alpha((128, 128), (32, 32), alpha)
    assert abs(sim.sampling_ratio(g) - alpha) <= 0.02


def test_raster_exact_grid_without_jitter():
    g = sim.raster_jitter((64, 64), (16, 16), 10, (3, 4), 0, sort=False)
    rows = sorted({r for r, _ in g.offsets})
    cols = sorted({c for _, c in g.offsets})
    assert np.all(np.diff(rows) == 10) and np.all(np.diff(cols) == 10) and g.J == 12


def test_raster_jitter_bounds_and_determinism():
    ref = sim.raster_jitter((128, 128), (32, 32), 12, (6, 6), 0, sort=False)
    g = sim.raster_jitter((128, 128), (32, 32), 12, (6, 6), 2, seed=9, sort=False)
    dev = np.array(g.offsets) - np.array(ref.offsets)
    assert np.abs(dev).max() <= 2 and np.abs(dev).max() > 0
    assert g == sim.raster_jitter((128, 128), (32, 32), 12, (6, 6), 2, seed=9, sort=False)


def test_raster_out_of_bounds():
    with pytest.raises(GeometryError):
        sim.raster_jitter((64, 64), (32, 32), 20, (3, 3), 0)


def test_overlap_condition_sixty_percent():
    probe = sim.disk_probe((64, 64), 30)
    assert sim.probe_diameter(probe) == 30
    assert sim.overlap_ratio(probe, 12) == pytest.approx(0.6)
    assert sim.overlap_ratio(probe, 15) == pytest.approx(0.5)
    assert sim.overlap_ratio(probe, 18) == pytest.approx(0.4)


def test_overlap_ratio_limits_and_errors():
    probe = sim.disk_probe((32, 32), 20)
    d = sim.probe_diameter(probe)
    assert sim.overlap_ratio(probe, d) == 0
    assert sim.overlap_ratio(probe, d / 2) == 0.5
    with pytest.raises(ValueError):
        sim.overlap_ratio(np.zeros((8, 8)), 2)


def test_sampling_ratio_examples():
    assert sim.sampling_ratio(ScanGeometry((16, 16), (4, 4), [(3, 3)])) == 1
    assert sim.sampling_ratio(ScanGeometry((16, 16), (4, 4), [(0, 0), (8, 8)])) == 1
    assert sim.sampling_ratio(ScanGeometry((16, 16), (4, 4), [(0, 0), (0, 2)])) == 32 / 24
    with pytest.raises(ValueError):
        sim.sampling_ratio(ScanGeometry((16, 16), (4, 4), []))


@settings(max_examples=30, deadline=None)
@given(st.permutations(list(range(12))))
def test_sampling_ratio_order_invariant(perm):
    g = sim.raster_jitter((64, 64), (16, 16), 9, (3, 4), 2, seed=3)
    assert sim.sampling_ratio(g.reordered(perm)) == sim.sampling_ratio(g)


def test_noiseless_truth_has_zero_fitness():
    g = sim.fermat_for_alpha((64, 64), (16, 16), 3.0)
    obj = sim.synthetic_object((64, 64), seed=4)
    ds = sim.simulate(obj, sim.disk_probe((16, 16), 12), g, sim.NoiseSpec(math.inf))
    assert metrics.fitness(ds, obj, ds.probe) <= 1e-20


def test_synthetic_object_ranges():
    obj = sim.synthetic_object((64, 64), seed=2)
    assert np.abs(obj).min() >= 0 and np.abs(obj).max() <= 1 + 1e-12
    ph = np.angle(obj[np.abs(obj) > 0])
    assert ph.min() >= -1e-12 and ph.max() <= np.pi / 2 + 1e-12
    np.testing.assert_array_equal(obj, sim.synthetic_object((64, 64), seed=2))


@pytest.mark.parametrize("frac", [0.0, 0.3, 0.6])
def test_sparsify_zero_fraction(frac):
    obj = sim.synthetic_object((64, 64), seed=1) + 0.01
    sp = sim.sparsify(obj, frac, seed=3)
    assert abs(np.mean(sp == 0) - frac) < 1 / 64**2 + 1e-12
    nz = sp != 0
    np.testing.assert_array_equal(sp[nz], obj[nz])
    with pytest.raises(ValueError):
        sim.sparsify(obj, 1.0)


def test_dataset_roundtrip(tmp_path):
    g = sim.fermat_for_alpha((64, 64), (16, 16), 2.5)
    ds = sim.simulate(sim.synthetic_object((64, 64)), sim.disk_probe((16, 16), 10, blur=1.0), g,
                      sim.NoiseSpec(20.0, 3), {"note": "x"})
    sim.save_dataset(ds, tmp_path / "d")
    back = sim.load_dataset(tmp_path / "d")
    assert back.geometry == ds.geometry and back.sigma == ds.sigma and back.meta["note"] == "x"
    np.testing.assert_array_equal(back.intensities, ds.intensities)
    np.testing.assert_array_equal(back.probe, ds.probe)
    np.testing.assert_array_equal(back.truth, ds.truth)


def test_dataset_validation():
    g = ScanGeometry((8, 8), (4, 4), [(0, 0)])
    with pytest.raises(ValueError):
        sim.PtychoDataset(g, np.ones((2, 4, 4)))
    with pytest.raises(ValueError):
        sim.PtychoDataset(g, -np.ones((1, 4, 4)))
