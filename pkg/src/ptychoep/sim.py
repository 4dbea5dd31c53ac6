"""Synthetic ptychography datasets: scan patterns, forward model, noise."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import GeometryError, Propagator, ScanGeometry, read_cimg, write_cimg

__all__ = [
    "NoiseSpec",
    "PtychoDataset",
    "forward",
    "add_noise",
    "simulate",
    "fermat_spiral",
    "fermat_for_alpha",
    "tune_fermat_radius",
    "raster_jitter",
    "sampling_ratio",
    "overlap_ratio",
    "probe_diameter",
    "smooth_texture",
    "complex_object",
    "synthetic_object",
    "sparsify",
    "disk_probe",
    "save_dataset",
    "load_dataset",
    "GOLDEN_ANGLE",
    "DATASET_FORMAT_VERSION",
]

GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))
DATASET_FORMAT_VERSION = 1


@dataclass(frozen=True)
class NoiseSpec:
    snr_db: float = 30.0
    seed: int = 0

    def __post_init__(self):
        if math.isnan(self.snr_db) or self.snr_db == -math.inf:
            raise ValueError(f"invalid SNR {self.snr_db}")


@dataclass
class PtychoDataset:
    """Diffraction intensities plus everything needed to interpret them.

    ``intensities`` is a (J, m_h, m_w) float array aligned with
    ``geometry.offsets``. ``probe`` is present when the illumination is
    known; ``truth`` only for simulated data.
    """

    geometry: ScanGeometry
    intensities: np.ndarray
    sigma: float = 0.0
    probe: np.ndarray | None = None
    truth: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.intensities = np.asarray(self.intensities, dtype=np.float64)
        J = self.geometry.J
        if self.intensities.shape != (J, *self.geometry.window):
            raise ValueError(
                f"intensities have shape {self.intensities.shape}, "
                f"expected {(J, *self.geometry.window)}"
            )
        if np.any(self.intensities < 0):
            raise ValueError("intensities must be nonnegative")
        if self.probe is not None and self.probe.shape != self.geometry.window:
            raise ValueError("probe shape does not match the scan window")
        if self.truth is not None and self.truth.shape != self.geometry.object_shape:
            raise ValueError("truth shape does not match the object shape")

    @property
    def propagator(self) -> Propagator:
        return Propagator(self.geometry.window)

    def with_geometry_order(self, order) -> "PtychoDataset":
        order = list(order)
        return PtychoDataset(
            self.geometry.reordered(order),
            self.intensities[order],
            self.sigma,
            self.probe,
            self.truth,
            dict(self.meta),
        )


def forward(obj, probe, geom: ScanGeometry, prop: Propagator | None = None) -> np.ndarray:
    """Detector-plane fields ``F[P * O_j]`` for every scan, shape (J, m_h, m_w)."""
    if probe.shape != geom.window:
        raise ValueError(f"probe shape {probe.shape} != window {geom.window}")
    if obj.shape != geom.object_shape:
        raise ValueError(f"object shape {obj.shape} != geometry {geom.object_shape}")
    prop = prop or Propagator(geom.window)
    exits = np.stack([probe * obj[geom.slices(j)] for j in range(geom.J)]) if geom.J else (
        np.zeros((0, *geom.window), dtype=np.complex128)
    )
    return prop.forward(exits)


def add_noise(wavefields, spec: NoiseSpec):
    """White Gaussian noise on amplitudes at a prescribed SNR.

    The noise level is ``sigma**2 = mean(|Psi|**2) * 10**(-snr_db / 10)``,
    the mean running over every detector pixel of every scan. Negative noisy
    amplitudes are clamped to zero before squaring.

    Returns
    -------
    intensities : ndarray
    sigma : float
    """
    amp = np.abs(np.asarray(wavefields))
    if math.isinf(spec.snr_db):
        return amp**2, 0.0
    mean_int = float(np.mean(amp**2))
    sigma = math.sqrt(mean_int * 10.0 ** (-spec.snr_db / 10.0))
    rng = np.random.default_rng(spec.seed)
    noisy = np.maximum(amp + sigma * rng.standard_normal(amp.shape), 0.0)
    return noisy**2, sigma


def simulate(obj, probe, geom: ScanGeometry, noise: NoiseSpec, meta: dict | None = None) -> PtychoDataset:
    psi = forward(obj, probe, geom)
    intensities, sigma = add_noise(psi, noise)
    info = {"snr_db": noise.snr_db, "noise_seed": noise.seed}
    info.update(meta or {})
    return PtychoDataset(geom, intensities, sigma, probe.copy(), obj.copy(), info)


# --- scan patterns -------------------------------------------------------


def _sort_by_center_distance(offsets, object_shape, window):
    cy = (object_shape[0] - window[0]) / 2.0
    cx = (object_shape[1] - window[1]) / 2.0
    d = [(r - cy) ** 2 + (c - cx) ** 2 for r, c in offsets]
    order = sorted(range(len(offsets)), key=lambda k: (d[k], k))
    return [offsets[k] for k in order]


def fermat_spiral(object_shape, window, n_scans: int, radius_scale: float) -> ScanGeometry:
    """Fermat-spiral scan, sorted by distance from the object centre.

    Scan ``k = 0 .. n_scans-1`` is centred at radius ``radius_scale*sqrt(k)``
    and angle ``k * GOLDEN_ANGLE`` around the object centre, so a single
    scan sits exactly in the middle.
    """
    if n_scans < 1:
        raise ValueError("n_scans must be >= 1")
    H, W = object_shape
    mh, mw = window
    cy, cx = (H - mh) / 2.0, (W - mw) / 2.0
    offsets = []
    for k in range(n_scans):
        r = radius_scale * math.sqrt(k)
        t = k * GOLDEN_ANGLE
        row = int(round(cy + r * math.sin(t)))
        col = int(round(cx + r * math.cos(t)))
        if row < 0 or col < 0 or row + mh > H or col + mw > W:
            raise GeometryError(
                f"fermat scan {k} at offset ({row}, {col}) leaves the {H}x{W} object"
            )
        offsets.append((row, col))
    return ScanGeometry(object_shape, window, _sort_by_center_distance(offsets, object_shape, window))


def _max_radius_scale(object_shape, window, n_scans):
    if n_scans <= 1:
        return 0.0
    room = min(object_shape[0] - window[0], object_shape[1] - window[1]) / 2.0 - 0.5
    return max(room, 0.0) / math.sqrt(n_scans - 1)


def tune_fermat_radius(object_shape, window, n_scans, target_alpha, tol=0.02, max_iter=80):
    """Bisect the spiral radius scale so the sampling ratio hits ``target_alpha``.

    Returns ``(radius_scale, geometry)``; raises ValueError when the target
    cannot be met within ``tol``.
    """
    lo, hi = 0.0, _max_radius_scale(object_shape, window, n_scans)
    best = None
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        geom = fermat_spiral(object_shape, window, n_scans, mid)
        a = sampling_ratio(geom)
        if best is None or abs(a - target_alpha) < abs(best[2] - target_alpha):
            best = (mid, geom, a)
        if abs(a - target_alpha) <= tol / 4:
            break
        if a > target_alpha:
            lo = mid
        else:
            hi = mid
    if abs(best[2] - target_alpha) > tol:
        raise ValueError(
            f"could not reach alpha={target_alpha} with {n_scans} scans "
            f"(closest {best[2]:.3f})"
        )
    return best[0], best[1]


def fermat_for_alpha(object_shape, window, target_alpha, coverage_fraction=0.65, tol=0.02):
    """Spiral with a scan count chosen so the covered area is roughly fixed."""
    H, W = object_shape
    M = window[0] * window[1]
    n0 = max(1, int(round(target_alpha * coverage_fraction * H * W / M)))
    last_err = None
    for dn in (0, -1, 1, -2, 2, -3, 3, -4, 4):
        n = n0 + dn
        if n < 1:
            continue
        try:
            _, geom = tune_fermat_radius(object_shape, window, n, target_alpha, tol)
            return geom
        except ValueError as err:
            last_err = err
    raise ValueError(str(last_err))


def raster_jitter(object_shape, window, step: int, grid, max_dev: int = 0, seed: int = 0,
                  sort: bool = True) -> ScanGeometry:
    """Centred raster grid with uniform integer jitter in [-max_dev, max_dev]."""
    rows, cols = grid
    H, W = object_shape
    mh, mw = window
    r0 = (H - mh - (rows - 1) * step) // 2
    c0 = (W - mw - (cols - 1) * step) // 2
    rng = np.random.default_rng(seed)
    dev = rng.integers(-max_dev, max_dev + 1, size=(rows * cols, 2)) if max_dev > 0 else (
        np.zeros((rows * cols, 2), dtype=int)
    )
    offsets = []
    for k in range(rows * cols):
        i, jj = divmod(k, cols)
        r = r0 + i * step + int(dev[k, 0])
        c = c0 + jj * step + int(dev[k, 1])
        if r < 0 or c < 0 or r + mh > H or c + mw > W:
            raise GeometryError(f"raster scan {k} at offset ({r}, {c}) leaves the {H}x{W} object")
        offsets.append((r, c))
    if sort:
        offsets = _sort_by_center_distance(offsets, object_shape, window)
    return ScanGeometry(object_shape, window, offsets)


def sampling_ratio(geom: ScanGeometry) -> float:
    covered = int(np.count_nonzero(geom.coverage()))
    if covered == 0:
        raise ValueError("geometry covers no object pixels")
    return geom.J * geom.M / covered


def probe_diameter(probe) -> int:
    """Bounding-box extent of the region where ``|P|**2`` exceeds 10% of its peak."""
    inten = np.abs(np.asarray(probe)) ** 2
    peak = inten.max() if inten.size else 0.0
    if peak == 0:
        raise ValueError("probe is identically zero")
    rows, cols = np.nonzero(inten > 0.1 * peak)
    return int(max(rows.max() - rows.min() + 1, cols.max() - cols.min() + 1))


def overlap_ratio(probe, step: float) -> float:
    """``1 - step/d`` with ``d`` the probe diameter of :func:`probe_diameter`."""
    return 1.0 - step / probe_diameter(probe)


# --- test objects and probes -------------------------------------------


def smooth_texture(shape, seed: int, correlation: float = 3.0) -> np.ndarray:
    """Smooth random field rescaled to [0, 1]."""
    rng = np.random.default_rng(seed)
    f = ndimage.gaussian_filter(rng.standard_normal(shape), correlation, mode="wrap")
    f -= f.min()
    return f / f.max()


def complex_object(magnitude, phase_source) -> np.ndarray:
    """Magnitude in [0, 1], phase ``pi/2 * phase_source`` in [0, pi/2]."""
    mag = np.clip(np.asarray(magnitude, dtype=np.float64), 0.0, 1.0)
    ph = 0.5 * math.pi * np.clip(np.asarray(phase_source, dtype=np.float64), 0.0, 1.0)
    return mag * np.exp(1j * ph)


def synthetic_object(shape, seed: int = 0, correlation: float = 3.0) -> np.ndarray:
    return complex_object(
        smooth_texture(shape, seed, correlation),
        smooth_texture(shape, seed + 7919, correlation),
    )


def sparsify(obj, zero_fraction: float = 0.6, seed: int = 0, correlation: float = 0.0) -> np.ndarray:
    """Zero the pixels where an independent random field falls below its quantile.

    ``correlation = 0`` gives an i.i.d. mask, the support model of the
    Bernoulli-Gaussian prior; larger values give blob-shaped zero regions.
    """
    if not 0.0 <= zero_fraction < 1.0:
        raise ValueError("zero_fraction must lie in [0, 1)")
    if zero_fraction == 0.0:
        return np.array(obj, dtype=np.complex128)
    mask_field = smooth_texture(obj.shape, seed + 104729, correlation)
    thr = np.quantile(mask_field, zero_fraction)
    out = np.array(obj, dtype=np.complex128)
    out[mask_field <= thr] = 0
    return out


def disk_probe(window, diameter: float, center=None, blur: float = 0.0,
               amplitude: float = 1.0) -> np.ndarray:
    """Flat round aperture, optionally shifted and Gaussian-blurred."""
    mh, mw = window
    cy, cx = center if center is not None else ((mh - 1) / 2.0, (mw - 1) / 2.0)
    yy, xx = np.mgrid[0:mh, 0:mw]
    disk = ((yy - cy) ** 2 + (xx - cx) ** 2 <= (diameter / 2.0) ** 2).astype(np.float64)
    if blur > 0:
        disk = ndimage.gaussian_filter(disk, blur)
    return (amplitude * disk).astype(np.complex128)


# --- persistence -------------------------------------------------------


def save_dataset(ds: PtychoDataset, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for j in range(ds.geometry.J):
        name = f"intensity_{j:04d}.cimg"
        write_cimg(out / name, ds.intensities[j], real=True)
        files.append(name)
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "geometry": ds.geometry.to_dict(),
        "sigma": ds.sigma,
        "intensity_files": files,
        "probe_file": None,
        "truth_file": None,
        "meta": ds.meta,
    }
    if ds.probe is not None:
        write_cimg(out / "probe.cimg", ds.probe, real=False)
        manifest["probe_file"] = "probe.cimg"
    if ds.truth is not None:
        write_cimg(out / "truth.cimg", ds.truth, real=False)
        manifest["truth_file"] = "truth.cimg"
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def load_dataset(path) -> PtychoDataset:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("format_version") != DATASET_FORMAT_VERSION:
        raise ValueError(f"{root}: unsupported dataset format {manifest.get('format_version')}")
    geom = ScanGeometry.from_dict(manifest["geometry"])
    if geom.J:
        intens = np.stack([read_cimg(root / f) for f in manifest["intensity_files"]])
    else:
        intens = np.zeros((0, *geom.window))
    probe = read_cimg(root / manifest["probe_file"]) if manifest.get("probe_file") else None
    truth = read_cimg(root / manifest["truth_file"]) if manifest.get("truth_file") else None
    return PtychoDataset(geom, intens, float(manifest["sigma"]), probe, truth, manifest.get("meta", {}))
