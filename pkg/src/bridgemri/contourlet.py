"""Laplacian pyramid + directional filter bank decomposition.

The pyramid repeatedly splits an image into a half-resolution lowpass
and a full-resolution highpass residual.  Because the residual is
defined as input minus interpolated lowpass, reconstruction is exact for
any DC-preserving filter; the 5-tap binomial [1,4,6,4,1]/16 is used with
symmetric boundaries so constant images produce an exactly constant
lowpass and a zero residual.

Each highpass band is split into 2^j directional subbands by ideal
angular wedge masks in the DFT domain.  The masks form a partition of
unity (every frequency bin belongs to exactly one wedge) and are
symmetrized over conjugate bin pairs so subbands of real inputs stay
real.  Wedge 0 is centered on the kx axis, putting vertical image detail
in subbands 0 .. 2^(j-1)-1 and horizontal detail in the rest.

The CDEM path resizes and stacks a pyramid's subbands per level and maps
them through three trainable convolutions onto denoiser encoder shapes.
The decomposition itself is not differentiated; gradients reach the
convolution parameters only.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

log = logging.getLogger(__name__)

LP_KERNEL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


# --------------------------------------------------------------------------
# Laplacian pyramid
# --------------------------------------------------------------------------


def _binomial_filter_last(x: np.ndarray) -> np.ndarray:
    pad = [(0, 0)] * (x.ndim - 1) + [(2, 2)]
    xp = np.pad(x, pad, mode="symmetric")
    return (xp[..., :-4] + 4.0 * xp[..., 1:-3] + 6.0 * xp[..., 2:-2]
            + 4.0 * xp[..., 3:-1] + xp[..., 4:]) / 16.0


def _interp2_last(low: np.ndarray) -> np.ndarray:
    """Length n -> 2n: zero-stuffing followed by the doubled lowpass.

    The synthesis kernel is 2x the analysis kernel so interpolation
    preserves constants (zero-stuffing alone halves the DC gain).
    Evaluated in polyphase form with edge-replicated boundaries.
    """
    pad = [(0, 0)] * (low.ndim - 1) + [(1, 1)]
    p = np.pad(low, pad, mode="edge")
    even = (p[..., :-2] + 6.0 * p[..., 1:-1] + p[..., 2:]) / 8.0
    odd = (p[..., 1:-1] + p[..., 2:]) / 2.0
    out = np.stack([even, odd], axis=-1)
    return out.reshape(low.shape[:-1] + (2 * low.shape[-1],))


def lp_interpolate(low: np.ndarray) -> np.ndarray:
    """Upsample 2x along the last two axes with the synthesis filter."""
    out = _interp2_last(low)
    out = _interp2_last(out.swapaxes(-1, -2)).swapaxes(-1, -2)
    return out


def lp_decompose(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(low, high): half-resolution lowpass and full-resolution residual."""
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[-2], x.shape[-1]
    if h % 2 or w % 2:
        raise ShapeError(f"pyramid level needs even extents, got {h}x{w}")
    filtered = _binomial_filter_last(x)
    filtered = _binomial_filter_last(filtered.swapaxes(-1, -2)).swapaxes(-1, -2)
    low = filtered[..., ::2, ::2]
    high = x - lp_interpolate(low)
    return low, high


def lp_reconstruct(low: np.ndarray, high: np.ndarray) -> np.ndarray:
    return high + lp_interpolate(low)


# --------------------------------------------------------------------------
# directional filter bank
# --------------------------------------------------------------------------


@lru_cache(maxsize=64)
def _wedge_map(h: int, w: int, j: int) -> np.ndarray:
    """Per-bin wedge index in 0..2^j-1, symmetric under bin conjugation."""
    n = 1 << j
    iy, ix = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    fy = np.where(iy <= h // 2, iy, iy - h).astype(np.float64)
    fx = np.where(ix <= w // 2, ix, ix - w).astype(np.float64)
    phi = np.mod(np.arctan2(fy, fx), np.pi)
    width = np.pi / n
    wedge = np.floor(np.mod(phi + width / 2.0, np.pi) / width).astype(np.intp) % n
    # force exact conjugate symmetry: both bins of a conjugate pair take the
    # wedge of the lexicographically smaller one (Nyquist rows/columns would
    # otherwise disagree and make subbands complex)
    cy = (-iy) % h
    cx = (-ix) % w
    is_rep = (iy < cy) | ((iy == cy) & (ix <= cx))
    return np.where(is_rep, wedge, wedge[cy, cx])


def dfb_wedge_masks(h: int, w: int, j: int) -> np.ndarray:
    """(2^j, h, w) indicator masks; sums to one at every bin."""
    if j < 1:
        raise ConfigError(f"directional levels must be >= 1, got {j}")
    if (1 << j) > min(h, w):
        log.warning("2^%d directional subbands exceed the angular resolution "
                    "of a %dx%d band", j, h, w)
    wedge = _wedge_map(h, w, j)
    return (wedge[None, :, :] == np.arange(1 << j)[:, None, None]).astype(np.float64)


def dfb_decompose(high: np.ndarray, j: int) -> list[np.ndarray]:
    """Split a real band into 2^j directional subbands that sum back to it."""
    high = np.asarray(high, dtype=np.float64)
    if high.ndim != 2:
        raise ShapeError(f"expected a 2-D band, got shape {high.shape}")
    spectrum = np.fft.fft2(high)
    masks = dfb_wedge_masks(high.shape[0], high.shape[1], j)
    return [np.fft.ifft2(spectrum * m).real for m in masks]


# --------------------------------------------------------------------------
# full decomposition
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ContourletPyramid:
    levels: int
    j_per_level: tuple[int, ...]
    subbands: tuple[tuple[np.ndarray, ...], ...]
    lowpass: np.ndarray
    source_shape: tuple[int, int]


def contourlet_decompose(x: np.ndarray, levels: int,
                         j_per_level: tuple[int, ...] = (3, 3, 2)) -> ContourletPyramid:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"expected a 2-D image, got shape {x.shape}")
    if levels < 1:
        raise ConfigError(f"levels must be >= 1, got {levels}")
    if len(j_per_level) != levels:
        raise ConfigError(f"need {levels} directional orders, got {len(j_per_level)}")
    h, w = x.shape
    if h % (1 << levels) or w % (1 << levels):
        raise ShapeError(f"extents {h}x{w} not divisible by 2^{levels}")
    subbands = []
    running = x
    for j in j_per_level:
        running, high = lp_decompose(running)
        subbands.append(tuple(dfb_decompose(high, j)))
    return ContourletPyramid(levels=levels, j_per_level=tuple(j_per_level),
                             subbands=tuple(subbands), lowpass=running,
                             source_shape=(h, w))


def contourlet_reconstruct(pyr: ContourletPyramid) -> np.ndarray:
    running = pyr.lowpass
    for bands in reversed(pyr.subbands):
        high = np.sum(bands, axis=0)
        running = lp_reconstruct(running, high)
    return running


# --------------------------------------------------------------------------
# CDEM feature path
# --------------------------------------------------------------------------


def nearest_resize(img: np.ndarray, h: int, w: int) -> np.ndarray:
    sh, sw = img.shape
    ry = (np.arange(h) * sh) // h
    rx = (np.arange(w) * sw) // w
    return img[np.ix_(ry, rx)]


def stack_pyramid_features(pyrs, target_hw) -> list[np.ndarray]:
    """Per level, resize and stack every pyramid's subbands: (B, 2^j, H, W)."""
    out = []
    for level, (h, w) in enumerate(target_hw):
        per_image = []
        for pyr in pyrs:
            bands = [nearest_resize(b, h, w) for b in pyr.subbands[level]]
            per_image.append(np.stack(bands, axis=0))
        out.append(np.stack(per_image, axis=0))
    return out


def cdem_embed(pyr, target_shapes, conv_params: dict[str, Tensor]) -> list[Tensor]:
    """Map pyramid subbands onto per-level encoder feature tensors.

    pyr is one ContourletPyramid or a batch of them; target_shapes gives
    (channels, H, W) per encoder level.  conv_params holds the three
    trainable convolutions per level under keys
    "cdem{l}.conv{1,2,3}.{w,b}".  Output: one (B, channels, H, W) Tensor
    per level, ready to add to the encoder features.
    """
    pyrs = [pyr] if isinstance(pyr, ContourletPyramid) else list(pyr)
    if any(p.levels != len(target_shapes) for p in pyrs):
        raise ConfigError(f"pyramid levels {pyrs[0].levels} do not match "
                          f"{len(target_shapes)} encoder levels")
    stacked = stack_pyramid_features(pyrs, [(h, w) for _, h, w in target_shapes])
    dtype = next(iter(conv_params.values())).dtype
    out = []
    for level, feats in enumerate(stacked):
        x = Tensor(feats.astype(dtype))
        for k in (1, 2, 3):
            w = conv_params[f"cdem{level}.conv{k}.w"]
            b = conv_params[f"cdem{level}.conv{k}.b"]
            x = T.add(T.conv2d(x, w), b)
            if k < 3:
                x = T.silu(x)
        out.append(x)
    return out
