"""Basic containers and linear operators.

Images are plain 2-D ``numpy`` arrays (complex128 for fields, float64 for
precisions and intensities). A scan geometry lists the top-left corner of
every illuminated window; ``gather`` and ``scatter_add`` are the selection
operator and its adjoint.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "GeometryError",
    "ScanGeometry",
    "Propagator",
    "gather",
    "scatter_add",
    "propagate",
    "propagate_adjoint",
    "as_image",
    "write_cimg",
    "read_cimg",
]


class GeometryError(ValueError):
    """A scan window does not fit inside the object."""


@dataclass(frozen=True)
class ScanGeometry:
    """Ordered list of window offsets on an object raster.

    Parameters
    ----------
    object_shape : (int, int)
        Object height and width in pixels.
    window : (int, int)
        Probe window height and width in pixels.
    offsets : sequence of (int, int)
        Top-left (row, col) corner of each window, in processing order.
    """

    object_shape: tuple[int, int]
    window: tuple[int, int]
    offsets: tuple[tuple[int, int], ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "object_shape", tuple(int(v) for v in self.object_shape))
        object.__setattr__(self, "window", tuple(int(v) for v in self.window))
        object.__setattr__(
            self, "offsets", tuple((int(r), int(c)) for r, c in self.offsets)
        )
        H, W = self.object_shape
        mh, mw = self.window
        if min(H, W, mh, mw) <= 0:
            raise GeometryError("object and window sizes must be positive")
        for j, (r, c) in enumerate(self.offsets):
            if r < 0 or c < 0 or r + mh > H or c + mw > W:
                raise GeometryError(
                    f"scan {j} at offset ({r}, {c}) puts a {mh}x{mw} window "
                    f"outside the {H}x{W} object"
                )

    @property
    def J(self) -> int:
        return len(self.offsets)

    @property
    def M(self) -> int:
        return self.window[0] * self.window[1]

    @property
    def N(self) -> int:
        return self.object_shape[0] * self.object_shape[1]

    def slices(self, j: int) -> tuple[slice, slice]:
        if not 0 <= j < self.J:
            raise IndexError(f"scan index {j} out of range for {self.J} scans")
        r, c = self.offsets[j]
        return slice(r, r + self.window[0]), slice(c, c + self.window[1])

    def coverage(self) -> np.ndarray:
        """Number of windows covering each object pixel."""
        cnt = np.zeros(self.object_shape, dtype=np.int64)
        for j in range(self.J):
            cnt[self.slices(j)] += 1
        return cnt

    def reordered(self, order: Sequence[int]) -> "ScanGeometry":
        return ScanGeometry(self.object_shape, self.window, [self.offsets[k] for k in order])

    def to_dict(self) -> dict:
        return {
            "object_shape": list(self.object_shape),
            "window": list(self.window),
            "offsets": [list(o) for o in self.offsets],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScanGeometry":
        return cls(tuple(d["object_shape"]), tuple(d["window"]), [tuple(o) for o in d["offsets"]])


def gather(obj: np.ndarray, geom: ScanGeometry, j: int) -> np.ndarray:
    """Copy of the window of scan ``j``."""
    if obj.shape != geom.object_shape:
        raise ValueError(f"object shape {obj.shape} != geometry {geom.object_shape}")
    return obj[geom.slices(j)].copy()


def scatter_add(acc: np.ndarray, win: np.ndarray, geom: ScanGeometry, j: int) -> np.ndarray:
    """Add ``win`` into the window of scan ``j`` of ``acc``, in place.

    Returns ``acc`` for chaining. The caller owns ``acc``.
    """
    if win.shape != geom.window:
        raise ValueError(f"window shape {win.shape} != geometry {geom.window}")
    if acc.shape != geom.object_shape:
        raise ValueError(f"accumulator shape {acc.shape} != geometry {geom.object_shape}")
    acc[geom.slices(j)] += win
    return acc


@dataclass(frozen=True)
class Propagator:
    """Unitary far-field propagator (orthonormal 2-D DFT)."""

    shape: tuple[int, int]
    kind: str = "dft2d"

    def __post_init__(self):
        if self.kind != "dft2d":
            raise ValueError(f"unsupported propagator kind {self.kind!r}")
        object.__setattr__(self, "shape", tuple(int(v) for v in self.shape))

    def _check(self, x):
        if x.shape[-2:] != self.shape:
            raise ValueError(f"input shape {x.shape[-2:]} != propagator shape {self.shape}")

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._check(x)
        return np.fft.fft2(x, norm="ortho")

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        self._check(y)
        return np.fft.ifft2(y, norm="ortho")


def propagate(p: Propagator, x: np.ndarray) -> np.ndarray:
    return p.forward(x)


def propagate_adjoint(p: Propagator, y: np.ndarray) -> np.ndarray:
    return p.adjoint(y)


def as_image(a, *, real: bool = False) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64 if real else np.complex128)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D raster, got shape {arr.shape}")
    return arr


# CIMG: b"CIMG", u16 version, u32 height, u32 width, u8 flag (0 complex, 1 real),
# then little-endian float64 payload in row-major order.
_MAGIC = b"CIMG"
_HEADER = struct.Struct("<4sHIIB")
CIMG_VERSION = 1


def write_cimg(path, img: np.ndarray, *, real: bool | None = None) -> None:
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError("CIMG stores 2-D rasters only")
    if real is None:
        real = not np.iscomplexobj(img)
    if real:
        if np.iscomplexobj(img) and np.any(img.imag != 0):
            raise ValueError("real-only CIMG requested for an image with imaginary part")
        payload = np.ascontiguousarray(np.real(img), dtype="<f8").tobytes()
    else:
        payload = np.ascontiguousarray(img, dtype="<c16").tobytes()
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, CIMG_VERSION, h, w, 1 if real else 0))
        fh.write(payload)


def read_cimg(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated CIMG header")
    magic, version, h, w, flag = _HEADER.unpack_from(data)
    if magic != _MAGIC:
        raise ValueError(f"{path}: not a CIMG file")
    if version != CIMG_VERSION:
        raise ValueError(f"{path}: unsupported CIMG version {version}")
    body = data[_HEADER.size:]
    dtype = "<f8" if flag == 1 else "<c16"
    expected = h * w * np.dtype(dtype).itemsize
    if len(body) != expected:
        raise ValueError(f"{path}: payload has {len(body)} bytes, expected {expected}")
    arr = np.frombuffer(body, dtype=dtype).reshape(h, w)
    return arr.astype(np.float64 if flag == 1 else np.complex128)
