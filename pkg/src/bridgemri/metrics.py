"""Reconstruction quality metrics and the paired signed-rank test.

psnr/ssim/nmse score one reconstruction against its reference;
wilcoxon_signed_rank compares two methods over a shared image set.  All
of it is plain-array arithmetic — the statistical test enumerates the
exact null distribution up to 25 effective pairs and switches to a
tie-corrected normal approximation with continuity correction beyond.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DataError, ShapeError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
EXACT_LIMIT = 25          # largest sample enumerated exactly
SIGNIFICANCE_THRESHOLD = 0.005

ALTERNATIVES = ("two-sided", "greater", "less")


def _as_pair(ref, est) -> tuple[np.ndarray, np.ndarray]:
    ref = np.asarray(ref, dtype=np.float64)
    est = np.asarray(est, dtype=np.float64)
    if ref.shape != est.shape:
        raise ShapeError(f"image shapes differ: {ref.shape} vs {est.shape}")
    return ref, est


def psnr(ref, est, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical images give +inf."""
    if peak <= 0:
        raise ConfigError(f"peak must be > 0, got {peak}")
    ref, est = _as_pair(ref, est)
    mse = float(np.mean((ref - est) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * math.log10(peak * peak / mse)


def nmse(ref, est) -> float:
    """Squared error energy normalized by the reference energy."""
    ref, est = _as_pair(ref, est)
    energy = float(np.sum(ref * ref))
    if energy == 0.0:
        raise DataError("nmse is undefined for an all-zero reference")
    return float(np.sum((ref - est) ** 2)) / energy


def _gaussian_window() -> np.ndarray:
    ax = np.arange(SSIM_WINDOW, dtype=np.float64) - (SSIM_WINDOW - 1) / 2
    g = np.exp(-(ax ** 2) / (2.0 * SSIM_SIGMA ** 2))
    win = np.outer(g, g)
    return win / win.sum()


def _windowed_mean(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    view = sliding_window_view(img, win.shape)
    return np.tensordot(view, win, axes=([2, 3], [0, 1]))


def ssim(ref, est, peak: float = 1.0) -> float:
    """Mean local structural similarity over full-overlap window positions.

    Gaussian-weighted 11x11 window (sigma 1.5), stabilizers K1=0.01 and
    K2=0.03 scaled by the dynamic range.
    """
    if peak <= 0:
        raise ConfigError(f"peak must be > 0, got {peak}")
    ref, est = _as_pair(ref, est)
    if ref.ndim != 2:
        raise ShapeError(f"ssim expects 2-D images, got shape {ref.shape}")
    if min(ref.shape) < SSIM_WINDOW:
        raise ShapeError(f"image {ref.shape} is smaller than the "
                         f"{SSIM_WINDOW}x{SSIM_WINDOW} window")
    win = _gaussian_window()
    ux = _windowed_mean(ref, win)
    uy = _windowed_mean(est, win)
    vx = _windowed_mean(ref * ref, win) - ux * ux
    vy = _windowed_mean(est * est, win) - uy * uy
    vxy = _windowed_mean(ref * est, win) - ux * uy
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / (
        (ux * ux + uy * uy + c1) * (vx + vy + c2))
    return float(np.mean(s))


# --------------------------------------------------------------------------
# Paired signed-rank test
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float
    p_value: float
    alternative: str
    n: int  # nonzero differences actually ranked

    @property
    def significant(self) -> bool:
        return self.p_value < SIGNIFICANCE_THRESHOLD


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    sorted_v = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_v[j + 1] == sorted_v[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _exact_cdf(w: float, ranks: np.ndarray) -> float:
    """P(W <= w) by enumerating every sign assignment of the ranks.

    Average ranks are half-integers, so doubling them keeps the dynamic
    program on an integer lattice even under ties.
    """
    doubled = np.rint(2.0 * ranks).astype(int)
    counts = np.zeros(int(doubled.sum()) + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:counts.size - r]
        counts += shifted
    cutoff = int(math.floor(2.0 * w + 1e-9))
    return float(counts[:cutoff + 1].sum()) / 2.0 ** ranks.size


def _approx_cdf(w: float, ranks: np.ndarray) -> float:
    """Tie-corrected normal approximation of P(W <= w), continuity 1/2."""
    n = ranks.size
    mean = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0
    _, counts = np.unique(ranks, return_counts=True)
    var -= float(np.sum(counts.astype(np.float64) ** 3 - counts)) / 48.0
    if var <= 0:
        raise DataError("degenerate rank distribution")
    z = (w + 0.5 - mean) / math.sqrt(var)
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def wilcoxon_signed_rank(pairs, alternative: str = "two-sided") -> WilcoxonResult:
    """Paired signed-rank test on (a, b) value pairs.

    Differences a - b are ranked by magnitude with average ranks on ties;
    zero differences are dropped.  The statistic is the smaller of the
    two signed rank sums.  "greater" asks whether a tends to exceed b.
    """
    if alternative not in ALTERNATIVES:
        raise ConfigError(f"alternative must be one of {ALTERNATIVES}, got "
                          f"{alternative!r}")
    d = np.asarray([float(a) - float(b) for a, b in pairs], dtype=np.float64)
    d = d[d != 0.0]
    if d.size == 0:
        raise DataError("every paired difference is zero")
    ranks = _average_ranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    statistic = min(w_plus, w_minus)
    if alternative == "greater":
        w = w_minus
    elif alternative == "less":
        w = w_plus
    else:
        w = statistic
    cdf = _exact_cdf if d.size <= EXACT_LIMIT else _approx_cdf
    p = cdf(w, ranks)
    if alternative == "two-sided":
        p = min(1.0, 2.0 * p)
    return WilcoxonResult(statistic=statistic, p_value=p,
                          alternative=alternative, n=int(d.size))


# --------------------------------------------------------------------------
# Report assembly
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricReport:
    """Per-image scores plus a mean/std aggregate and optional test."""

    image_ids: tuple[str, ...]
    psnr_db: tuple[float, ...]
    ssim: tuple[float, ...]
    nmse: tuple[float, ...]
    significance: WilcoxonResult | None = None

    def rows(self) -> list[tuple[str, float, float, float]]:
        return list(zip(self.image_ids, self.psnr_db, self.ssim, self.nmse))

    def aggregate(self) -> dict[str, tuple[float, float]]:
        out = {}
        for name in ("psnr_db", "ssim", "nmse"):
            vals = np.asarray(getattr(self, name), dtype=np.float64)
            out[name] = (float(vals.mean()), float(vals.std()))
        return out


def format_mean_std(mean: float, std: float, decimals: int = 2) -> str:
    return f"{mean:.{decimals}f}±{std:.{decimals}f}"


def evaluate_pairs(image_ids, refs, ests, peak: float = 1.0,
                   significance: WilcoxonResult | None = None) -> MetricReport:
    ids = tuple(str(i) for i in image_ids)
    refs = list(refs)
    ests = list(ests)
    if not ids:
        raise DataError("no images to evaluate")
    if len(ids) != len(refs) or len(ids) != len(ests):
        raise DataError(f"count mismatch: {len(ids)} ids, {len(refs)} "
                        f"references, {len(ests)} estimates")
    return MetricReport(
        image_ids=ids,
        psnr_db=tuple(psnr(r, e, peak) for r, e in zip(refs, ests)),
        ssim=tuple(ssim(r, e, peak) for r, e in zip(refs, ests)),
        nmse=tuple(nmse(r, e) for r, e in zip(refs, ests)),
        significance=significance,
    )
