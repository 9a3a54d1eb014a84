"""Accelerated-acquisition simulator.

Images live in [0,1]; k-space is their orthonormal 2-D discrete Fourier
transform.  Acquisition keeps an equispaced subset of phase-encode
columns (plus an optional centered block), zeroes the rest, and the
zero-filled magnitude image is the degraded network input.  The FFT here
is a from-scratch iterative radix-2 transform restricted to power-of-two
extents; complex images are plain complex128 arrays.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .rng import RngState, integers, stream, uniform

# --------------------------------------------------------------------------
# orthonormal radix-2 FFT
# --------------------------------------------------------------------------


def _check_pow2(n: int) -> None:
    if n < 1 or (n & (n - 1)) != 0:
        raise ShapeError(f"extent {n} is not a power of two")


@lru_cache(maxsize=32)
def _bit_reversal(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.intp)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


@lru_cache(maxsize=64)
def _twiddles(size: int) -> np.ndarray:
    half = size // 2
    return np.exp(-2j * np.pi * np.arange(half) / size)


def _fft_last_axis(x: np.ndarray) -> np.ndarray:
    """Unitary DFT along the last axis via iterative Cooley-Tukey."""
    n = x.shape[-1]
    _check_pow2(n)
    y = np.ascontiguousarray(x[..., _bit_reversal(n)], dtype=np.complex128)
    size = 2
    while size <= n:
        half = size // 2
        tw = _twiddles(size)
        v = y.reshape(y.shape[:-1] + (n // size, size))
        even = v[..., :half]
        odd = v[..., half:] * tw
        y = np.concatenate([even + odd, even - odd], axis=-1).reshape(x.shape)
        size *= 2
    return y / np.sqrt(n)


def fft2(z: np.ndarray) -> np.ndarray:
    """Orthonormal 2-D DFT over the last two axes (power-of-two extents)."""
    z = np.asarray(z)
    if z.ndim < 2:
        raise ShapeError(f"fft2 expects at least 2 axes, got shape {z.shape}")
    out = _fft_last_axis(z.astype(np.complex128, copy=False))
    out = _fft_last_axis(out.swapaxes(-1, -2)).swapaxes(-1, -2)
    return out


def ifft2(z: np.ndarray) -> np.ndarray:
    """Inverse of fft2; for a unitary transform this is the conjugate trick."""
    return np.conj(fft2(np.conj(np.asarray(z, dtype=np.complex128))))


# --------------------------------------------------------------------------
# sampling masks
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SamplingMask:
    width: int
    columns: np.ndarray
    acceleration: int
    center_lines: int
    offset: int

    @property
    def density(self) -> float:
        return float(self.columns.sum()) / self.width


def make_mask(width: int, acceleration: int, center_lines: int = 0,
              offset: int = 0) -> SamplingMask:
    """Equispaced phase-encode column mask with an optional centered block."""
    if width < 1:
        raise ConfigError(f"width must be positive, got {width}")
    if not 1 <= acceleration <= width:
        raise ConfigError(f"acceleration {acceleration} outside [1, {width}]")
    if not 0 <= center_lines < width:
        raise ConfigError(f"center_lines {center_lines} outside [0, {width})")
    if not 0 <= offset < acceleration:
        raise ConfigError(f"offset {offset} outside [0, {acceleration})")
    c = np.arange(width)
    columns = (c - offset) % acceleration == 0
    if center_lines:
        start = (width - center_lines) // 2
        columns[start:start + center_lines] = True
    return SamplingMask(width=width, columns=columns, acceleration=acceleration,
                        center_lines=center_lines, offset=offset)


def masked_spectrum(x: np.ndarray, mask: SamplingMask) -> np.ndarray:
    """k-space of x with unselected columns zeroed.

    Selected columns carry the ground-truth spectrum bit-exactly, which
    is the data-consistency surface downstream checks rely on.
    """
    x = _check_image(x, mask)
    k = fft2(x)
    return np.where(mask.columns[None, :], k, 0.0 + 0.0j)


def zero_fill(x: np.ndarray, mask: SamplingMask) -> np.ndarray:
    """Complex zero-filled image: inverse transform of the masked spectrum."""
    return ifft2(masked_spectrum(x, mask))


def undersample(x: np.ndarray, mask: SamplingMask) -> np.ndarray:
    """Magnitude of the zero-filled image; the degraded input y0."""
    return np.abs(zero_fill(x, mask))


def _check_image(x: np.ndarray, mask: SamplingMask) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 2:
        raise ShapeError(f"expected a 2-D image, got shape {x.shape}")
    if np.iscomplexobj(x):
        raise DataError("undersampling expects a real magnitude image")
    if x.shape[1] != mask.width:
        raise ShapeError(f"image width {x.shape[1]} does not match mask width {mask.width}")
    if float(x.min()) < -1e-6 or float(x.max()) > 1.0 + 1e-6:
        raise DataError(f"image values outside [0, 1]: min {x.min():.4g}, max {x.max():.4g}")
    return x.astype(np.float64, copy=False)


# --------------------------------------------------------------------------
# synthetic phantoms
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PhantomSpec:
    seed: int
    height: int = 64
    width: int = 64
    ellipse_count: tuple[int, int] = (4, 9)
    intensity: tuple[float, float] = (0.15, 0.95)

    def validate(self) -> None:
        if self.height < 8 or self.width < 8:
            raise ConfigError(f"phantom extents too small: {self.height}x{self.width}")
        lo, hi = self.ellipse_count
        if not 1 <= lo <= hi:
            raise ConfigError(f"bad ellipse_count range {self.ellipse_count}")
        ilo, ihi = self.intensity
        if not 0.0 <= ilo <= ihi <= 1.0:
            raise ConfigError(f"intensity range {self.intensity} not inside [0, 1]")


def render_ellipses(height: int, width: int, ellipses) -> np.ndarray:
    """Accumulate soft-edged ellipses; positive intensity adds, negative cuts.

    Each ellipse is (cy, cx, ay, ax, angle, intensity) in pixel units.
    The soft edge spans the outer 15% of the normalized radius, so
    interior pixels receive the full intensity exactly.
    """
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    img = np.zeros((height, width))
    for cy, cx, ay, ax, angle, intensity in ellipses:
        u = (yy - cy) * np.cos(angle) + (xx - cx) * np.sin(angle)
        v = -(yy - cy) * np.sin(angle) + (xx - cx) * np.cos(angle)
        d = np.sqrt((u / ay) ** 2 + (v / ax) ** 2)
        weight = np.clip((1.0 - d) / 0.15, 0.0, 1.0)
        img += intensity * weight
    return np.clip(img, 0.0, 1.0)


def generate_phantom(spec: PhantomSpec) -> np.ndarray:
    """Deterministic soft-ellipse phantom in [0,1] derived from spec.seed."""
    spec.validate()
    state = stream(spec.seed, "phantom")
    lo, hi = spec.ellipse_count
    count = int(integers(state, lo, hi))
    small = min(spec.height, spec.width)
    ellipses = []
    for i in range(count):
        cy = float(uniform(state, 0.2, 0.8)) * spec.height
        cx = float(uniform(state, 0.2, 0.8)) * spec.width
        if i == 0:
            ay = float(uniform(state, 0.28, 0.45)) * small
            ax = float(uniform(state, 0.28, 0.45)) * small
        else:
            ay = float(uniform(state, 0.05, 0.28)) * small
            ax = float(uniform(state, 0.05, 0.28)) * small
        angle = float(uniform(state, 0.0, np.pi))
        intensity = float(uniform(state, spec.intensity[0], spec.intensity[1]))
        if i > 0 and float(uniform(state, 0.0, 1.0)) < 0.35:
            intensity = -intensity
        ellipses.append((cy, cx, ay, ax, angle, intensity))
    return render_ellipses(spec.height, spec.width, ellipses)
