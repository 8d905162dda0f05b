"""Diagnostics on spectra and outputs.

Correlation estimates between Fourier components, the power-linearity
fit, spur detection against a rolling-median floor, GSM band masking,
harmonic ratios, word-occupancy scans and two basic output sanity tests
(monobit and byte chi-square).
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import stats
from scipy.ndimage import median_filter
from scipy.special import erfc

from .errors import DataError
from .spectral import PsdEstimate, Spectrum

__all__ = [
    "BandMask",
    "CorrelationReport",
    "correlation",
    "correlation_scan",
    "fit_linearity",
    "detect_spurs",
    "group_spurs",
    "default_gsm_mask",
    "second_harmonic_ratio",
    "bin_occupancy_scan",
    "monobit_test",
    "byte_chi2_test",
    "write_csv",
]

SPUR_WINDOW = 201


@dataclass(frozen=True)
class BandMask:
    """Excluded frequency intervals, each half-open [f_lo, f_hi) in Hz.

    Construction sorts and merges overlapping or touching intervals.
    """

    intervals: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        iv = sorted((float(lo), float(hi)) for lo, hi in self.intervals)
        merged: list[list[float]] = []
        for lo, hi in iv:
            if not (0 <= lo < hi):
                raise ValueError(f"bad band [{lo}, {hi}]")
            if merged and lo <= merged[-1][1]:
                merged[-1][1] = max(merged[-1][1], hi)
            else:
                merged.append([lo, hi])
        object.__setattr__(self, "intervals", tuple((lo, hi) for lo, hi in merged))

    def normalized(self) -> "BandMask":
        return BandMask(self.intervals)

    def contains(self, f):
        f = np.asarray(f, dtype=float)
        hit = np.zeros(f.shape, dtype=bool)
        for lo, hi in self.intervals:
            hit |= (f >= lo) & (f < hi)
        return bool(hit) if hit.ndim == 0 else hit

    def __contains__(self, f) -> bool:
        return bool(self.contains(f))

    def check_range(self, nyquist: float):
        if self.intervals and self.intervals[-1][1] > nyquist:
            raise ValueError("band mask extends beyond Nyquist")

    @property
    def width(self) -> float:
        return sum(hi - lo for lo, hi in self.intervals)

    def to_list(self) -> list[list[float]]:
        return [[lo, hi] for lo, hi in self.intervals]

    @classmethod
    def from_list(cls, items) -> "BandMask":
        return cls(tuple((lo, hi) for lo, hi in (items or ())))


def default_gsm_mask() -> BandMask:
    """GSM-900 uplink 876-915 MHz widened by 5 MHz guard bands."""
    return BandMask(((871e6, 920e6),))


def correlation(x, y) -> float:
    """Pearson coefficient <dx dy> / sqrt(<dx^2><dy^2>)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-d arrays of equal length")
    if x.size < 2:
        raise ValueError("need at least two samples")
    dx, dy = x - x.mean(), y - y.mean()
    vx, vy = np.mean(dx * dx), np.mean(dy * dy)
    if vx == 0 or vy == 0:
        raise ValueError("zero variance")
    return float(np.mean(dx * dy) / math.sqrt(vx * vy))


class _PairSums:
    """Running sums for column-wise correlations between paired samples."""

    def __init__(self, width: int):
        self.n = 0
        self.sx = np.zeros(width)
        self.sy = np.zeros(width)
        self.sxx = np.zeros(width)
        self.syy = np.zeros(width)
        self.sxy = np.zeros(width)

    def add(self, x: np.ndarray, y: np.ndarray):
        self.n += x.shape[0]
        self.sx += x.sum(0)
        self.sy += y.sum(0)
        self.sxx += (x * x).sum(0)
        self.syy += (y * y).sum(0)
        self.sxy += (x * y).sum(0)

    def corr(self) -> np.ndarray:
        n = self.n
        cov = self.sxy / n - (self.sx / n) * (self.sy / n)
        vx = self.sxx / n - (self.sx / n) ** 2
        vy = self.syy / n - (self.sy / n) ** 2
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.clip(cov / np.sqrt(vx * vy), -1.0, 1.0)


@dataclass(frozen=True, eq=False)
class CorrelationReport:
    """Boxcar-averaged correlations; ``freqs`` are window centers."""

    freqs: np.ndarray
    re_im: np.ndarray
    consecutive_blocks: np.ndarray
    neighbor_bins: np.ndarray
    smooth_window: float
    blocks: int

    def to_dict(self) -> dict:
        return {"schema_version": 1, "smooth_window_hz": self.smooth_window,
                "blocks": self.blocks,
                "records": [{"freq_hz": float(f), "c_re_im": float(a), "c_t": float(b),
                             "c_f": float(c)}
                            for f, a, b, c in zip(self.freqs, self.re_im,
                                                  self.consecutive_blocks, self.neighbor_bins)]}

    def band_mean(self, f_lo: float, f_hi: float) -> dict:
        sel = (self.freqs >= f_lo) & (self.freqs < f_hi)
        return {"re_im": float(np.nanmean(self.re_im[sel])),
                "consecutive_blocks": float(np.nanmean(self.consecutive_blocks[sel])),
                "neighbor_bins": float(np.nanmean(self.neighbor_bins[sel]))}


def _amplitude_chunks(spectra) -> Iterable[np.ndarray]:
    chunk: list[np.ndarray] = []
    for s in spectra:
        if isinstance(s, Spectrum):
            chunk.append(s.amplitudes)
            if len(chunk) == 256:
                yield np.asarray(chunk)
                chunk = []
        else:
            if chunk:
                yield np.asarray(chunk)
                chunk = []
            yield np.atleast_2d(np.asarray(s))
    if chunk:
        yield np.asarray(chunk)


def correlation_scan(spectra, delta_f: float, smooth_window: float,
                     min_blocks: int = 1000) -> CorrelationReport:
    """Per-bin correlations across a stream of block spectra.

    `spectra` yields Spectrum objects or 2-d chunks of complex amplitudes
    (blocks x bins 1..N/2-1) in block order. Three families are estimated
    per bin: Re vs Im, the same bin in consecutive blocks, and neighboring
    bins k, k+1 within a block (Re and Im pooled for the latter two). Each
    family is then averaged over non-overlapping windows of `smooth_window`.
    """
    re_im = t_corr = f_corr = None
    prev_last = None
    blocks = 0
    for a in _amplitude_chunks(spectra):
        if re_im is None:
            width = a.shape[1]
            re_im, t_corr, f_corr = _PairSums(width), _PairSums(width), _PairSums(width - 1)
        elif a.shape[1] != re_im.sx.size:
            raise DataError("spectra differ in block length")
        blocks += a.shape[0]
        re, im = a.real, a.imag
        re_im.add(re, im)
        pooled = np.concatenate([re, im], axis=0)
        f_corr.add(pooled[:, :-1], pooled[:, 1:])
        seq = a if prev_last is None else np.concatenate([prev_last[None, :], a], axis=0)
        if seq.shape[0] > 1:
            t_corr.add(np.concatenate([seq[:-1].real, seq[:-1].imag], axis=0),
                       np.concatenate([seq[1:].real, seq[1:].imag], axis=0))
        prev_last = a[-1]
    if blocks < max(min_blocks, 3):
        raise DataError(f"correlation scan needs >= {max(min_blocks, 3)} blocks, got {blocks}")

    c_ri = re_im.corr()
    c_t = t_corr.corr()
    c_f = np.append(f_corr.corr(), np.nan)
    freqs = np.arange(1, c_ri.size + 1) * delta_f
    w = max(1, int(round(smooth_window / delta_f)))
    groups = c_ri.size // w
    if groups == 0:
        raise DataError("smoothing window wider than the spectrum")

    def box(v):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return np.nanmean(v[: groups * w].reshape(groups, w), axis=1)

    return CorrelationReport(box(freqs), box(c_ri), box(c_t), box(c_f), smooth_window, blocks)


def fit_linearity(points: Sequence[tuple[float, float]]) -> tuple[float, float, float]:
    """Unweighted least-squares line through (power, psd); returns (slope, offset, R^2)."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 3 or pts.shape[1] != 2:
        raise ValueError("need at least three (power, psd) points")
    x, y = pts[:, 0], pts[:, 1]
    if np.unique(x).size < 3:
        raise ValueError("need at least three distinct powers")
    slope, offset = np.polyfit(x, y, 1)
    resid = y - (slope * x + offset)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(offset), r2


def detect_spurs(psd: PsdEstimate, threshold_db: float, window: int = SPUR_WINDOW,
                 min_blocks: int = 100) -> list[dict]:
    """Bins whose power exceeds the rolling median of `window` bins by > threshold_db.

    Returns [{freq_hz, excess_db}] sorted by decreasing excess.
    """
    if psd.blocks_averaged < min_blocks:
        raise DataError(f"spur detection needs >= {min_blocks} averaged blocks, "
                        f"got {psd.blocks_averaged}")
    p = np.asarray(psd.power, dtype=float)
    if p.size < window:
        raise DataError(f"{p.size} bins is fewer than the {window}-bin median window")
    floor = median_filter(p, size=window, mode="nearest")
    with np.errstate(divide="ignore", invalid="ignore"):
        excess = 10 * np.log10(p / floor)
    hits = np.nonzero(np.isfinite(excess) & (excess > threshold_db))[0]
    order = hits[np.argsort(-excess[hits], kind="stable")]
    return [{"freq_hz": float(k * psd.delta_f), "excess_db": float(excess[k])} for k in order]


def group_spurs(spurs: list[dict], delta_f: float) -> list[dict]:
    """Merge flagged bins that touch into regions with their span and peak."""
    if not spurs:
        return []
    by_freq = sorted(spurs, key=lambda s: s["freq_hz"])
    groups, cur = [], [by_freq[0]]
    for s in by_freq[1:]:
        if s["freq_hz"] - cur[-1]["freq_hz"] <= 1.5 * delta_f:
            cur.append(s)
        else:
            groups.append(cur)
            cur = [s]
    groups.append(cur)
    out = []
    for g in groups:
        peak = max(g, key=lambda s: s["excess_db"])
        out.append({"f_lo_hz": g[0]["freq_hz"], "f_hi_hz": g[-1]["freq_hz"],
                    "width_hz": g[-1]["freq_hz"] - g[0]["freq_hz"] + delta_f,
                    "peak_freq_hz": peak["freq_hz"], "peak_excess_db": peak["excess_db"],
                    "bins": len(g)})
    return sorted(out, key=lambda r: -r["peak_excess_db"])


def second_harmonic_ratio(psd: PsdEstimate, f0: float) -> float:
    """power(f0) - power(2 f0) in dB."""
    nyq = psd.delta_f * (psd.power.size - 1)
    if not (0 < f0 and 2 * f0 < nyq):
        raise ValueError("f0 and 2*f0 must lie inside (0, Nyquist)")
    p0, p2 = psd.power[psd.bin_of(f0)], psd.power[psd.bin_of(2 * f0)]
    if p0 <= 0 or p2 <= 0:
        raise ValueError("empty bin at f0 or 2*f0")
    return 10 * math.log10(p0 / p2)


def bin_occupancy_scan(words, n: int) -> float:
    """max(count) / mean(count) of the word histogram over all 2**n cells."""
    w = np.asarray(words, dtype=np.int64).ravel()
    cells = 2**n
    if w.size < 16 * cells:
        raise DataError(f"need >= {16 * cells} words for n={n}, got {w.size}")
    if w.min() < 0 or w.max() >= cells:
        raise ValueError("word outside the n-bit range")
    counts = np.bincount(w, minlength=cells)
    return float(counts.max() / counts.mean())


def monobit_test(bits) -> float:
    """Two-sided p-value of the ones count against a fair coin."""
    b = np.asarray(bits, dtype=np.int64).ravel()
    if b.size == 0:
        raise ValueError("empty bitstream")
    s = 2 * int(b.sum()) - b.size
    return float(erfc(abs(s) / math.sqrt(2 * b.size)))


def byte_chi2_test(bits) -> float:
    """Chi-square p-value of byte frequencies (MSB-first packing) against uniform."""
    b = np.asarray(bits, dtype=np.uint8).ravel()
    nbytes = b.size // 8
    if nbytes < 256 * 5:
        raise ValueError("need at least 1280 whole bytes")
    counts = np.bincount(np.packbits(b[: nbytes * 8]), minlength=256)
    return float(stats.chisquare(counts).pvalue)


def write_csv(path: str | Path, columns: dict[str, Sequence]) -> Path:
    """Plot-ready CSV; one column per key."""
    path = Path(path)
    keys = list(columns)
    rows = zip(*(columns[k] for k in keys))
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for r in rows:
            w.writerow([f"{v:.10g}" if isinstance(v, (float, np.floating)) else v for v in r])
    return path
