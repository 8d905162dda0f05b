"""Shannon, min- and conditional entropies for the binned amplitudes.

Generic discrete versions come first, then closed forms for the two
binning schemes under the Gaussian channel T = Q + K (quantum plus
classical noise, variances adding), and finally the per-frequency
entropy report built from a dark/total calibration.

All entropies are in bits.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from .binning import CyclicBinning
from .errors import DataError

__all__ = [
    "shannon",
    "min_entropy",
    "conditional_entropies",
    "GaussianChannelParams",
    "equal_area_cond_shannon",
    "equal_area_cond_shannon_given_k",
    "equal_area_extra_losses",
    "cyclic_cell_probabilities",
    "cyclic_cond_entropies",
    "shannon_lower_bound_via_mutual_info",
    "extractable_bits",
    "EntropyReport",
    "ChannelCalibration",
    "build_entropy_report",
]

LN2 = math.log(2.0)
_SUM_TOL = 1e-12


def _distribution(p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("distribution must be a non-empty 1-d array")
    if np.any(~np.isfinite(p)) or np.any(p < 0):
        raise ValueError("probabilities must be finite and non-negative")
    if abs(p.sum() - 1.0) > _SUM_TOL:
        raise ValueError(f"probabilities sum to {p.sum()!r}, not 1")
    return p


def shannon(p) -> float:
    """H1 = sum p log2(1/p), with 0 log(1/0) = 0."""
    p = _distribution(p)
    nz = p[p > 0]
    return float(-(nz * np.log2(nz)).sum())


def min_entropy(p) -> float:
    """H_inf = log2(1 / max p)."""
    p = _distribution(p)
    return float(-math.log2(p.max()))


def conditional_entropies(rows, weights) -> tuple[float, float]:
    """(H1(X|Y), H_inf(X|Y)) from rows p(x|y) and weights p(y).

    The Shannon part is the p(y)-weighted mean of row entropies. The min
    part is the worst case over every row regardless of its weight.
    """
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    w = _distribution(weights)
    if rows.shape[0] != w.size:
        raise ValueError("one weight per conditional row required")
    h1 = [shannon(r) for r in rows]
    return float(np.dot(w, h1)), float(-math.log2(rows.max()))


@dataclass(frozen=True)
class GaussianChannelParams:
    """Per-value standard deviations of the total and classical noise."""

    sigma_T: float
    sigma_K: float

    def __post_init__(self):
        if not (self.sigma_K > 0):
            raise ValueError("sigma_K must be positive")
        if not (self.sigma_T > self.sigma_K):
            raise ValueError("sigma_T must exceed sigma_K (non-positive quantum variance)")

    @property
    def sigma_Q(self) -> float:
        return math.sqrt(self.sigma_T**2 - self.sigma_K**2)

    @classmethod
    def from_snr_db(cls, snr_db: float, sigma_K: float = 1.0) -> "GaussianChannelParams":
        """Params with sigma_T^2 / sigma_K^2 = 10**(snr_db/10)."""
        return cls(sigma_K * 10 ** (snr_db / 20), sigma_K)


def equal_area_cond_shannon(params: GaussianChannelParams, n: int) -> float:
    """n - log2(sigma_T / sigma_Q), valid for many small cells (n >= 6)."""
    if n < 6:
        raise ValueError("closed form assumes fine binning, n >= 6")
    return n - math.log2(params.sigma_T / params.sigma_Q)


def equal_area_cond_shannon_given_k(params: GaussianChannelParams, n: int, k: float) -> float:
    """H1(R | K=k) = n - log2(sigma_T/sigma_Q) + (sigma_K^2 - k^2) / (2 sigma_T^2) * log2(e)."""
    t, kk = params.sigma_T, params.sigma_K
    return (n - math.log2(t / params.sigma_Q)
            + (kk * kk - k * k) / (2 * t * t) / LN2)


def equal_area_extra_losses(drift_rel: float, n: int, m: int) -> tuple[float, float]:
    """(drift loss, refit loss) per sample.

    drift: (dsigma/sigma)^2 / ln 2 from slow intensity wander;
    refit: (n / 2m) log2((2 pi / e) (m / n)) from forcing m samples into
    equal-count cells.
    """
    if drift_rel < 0:
        raise ValueError("drift_rel must be >= 0")
    if not (m >= n >= 1):
        raise ValueError("need m >= n >= 1")
    drift = drift_rel**2 / LN2
    refit = 0.5 * (n / m) * math.log2((2 * math.pi / math.e) * (m / n))
    return drift, refit


# --- cyclic binning -------------------------------------------------------

_FOURIER_MAX_RATIO = 6.0   # B / sigma above which the direct sum is cheaper
_TERM_FLOOR = 1e-40
_TAIL_SIGMAS = 39.0


def _fourier_coeffs(ratio: float, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Modes j and coefficients c_j with p_r = 2^-n + sum_j c_j cos(2 pi j u_r / B)."""
    alpha = 2 * math.pi**2 / ratio**2
    j_max = max(1, int(math.ceil(math.sqrt(-math.log(_TERM_FLOOR) / alpha))))
    j = np.arange(1, j_max + 1, dtype=float)
    a = np.exp(-alpha * j * j)
    c = 2 * a / (math.pi * j) * np.sin(math.pi * j / 2**n)
    return j, c


def _eps_fourier(ratio: float, n: int, phase: float) -> np.ndarray:
    """Relative deviations 2^n p_r - 1 of every cell; `phase` is the shift in units of b."""
    j, c = _fourier_coeffs(ratio, n)
    u = (np.arange(2**n) + 0.5 - phase) / 2**n          # cell centers in units of B
    return 2**n * (np.cos(2 * np.pi * np.outer(u, j)) @ c)


def _probs_direct(ratio: float, n: int, phase: float) -> np.ndarray:
    """Cell probabilities by summing normal CDF differences over all wraps."""
    cells = 2**n
    b = ratio / cells                                    # sigma = 1 units
    lo = math.floor((phase * b - _TAIL_SIGMAS) / b)
    hi = math.ceil((phase * b + _TAIL_SIGMAS) / b)
    edges = (np.arange(lo, hi + 1) - phase) * b
    z1, z2 = edges[:-1], edges[1:]
    upper = z1 > 0
    p = np.where(upper, ndtr(-z1) - ndtr(-z2), ndtr(z2) - ndtr(z1))
    labels = np.mod(np.arange(lo, hi), cells)
    out = np.bincount(labels, weights=p, minlength=cells)
    return out / out.sum()


def cyclic_cell_probabilities(sigma: float, binning: CyclicBinning, shift: float = 0.0) -> np.ndarray:
    """Word distribution of N(shift, sigma) under `binning`."""
    ratio = binning.B / sigma
    phase = ((shift - binning.offset) / binning.b) % 2**binning.n
    if ratio <= _FOURIER_MAX_RATIO:
        return (1.0 + _eps_fourier(ratio, binning.n, phase)) / 2**binning.n
    return _probs_direct(ratio, binning.n, phase)


def _entropies_at(ratio: float, n: int, phase: float) -> tuple[float, float]:
    if ratio <= _FOURIER_MAX_RATIO:
        eps = np.maximum(_eps_fourier(ratio, n, phase), -1.0)
        live = eps > -1.0
        # (1 + eps) log1p(eps) keeps full precision while eps ~ 1e-9
        terms = (1.0 + eps[live]) * np.log1p(eps[live])
        h1 = n - terms.sum() / 2**n / LN2
        hmin = n - math.log1p(eps.max()) / LN2
        return h1, hmin
    p = _probs_direct(ratio, n, phase)
    nz = p[p > 0]
    return float(-(nz * np.log2(nz)).sum()), float(-math.log2(p.max()))


@lru_cache(maxsize=4096)
def _cyclic_normalized(ratio: float, n: int) -> tuple[float, float]:
    # min-entropy: the worst shift centers a cell on the mean (the wrapped
    # normal is symmetric and unimodal on the circle).
    if ratio <= _FOURIER_MAX_RATIO:
        j, c = _fourier_coeffs(ratio, n)
        eps_max = 2**n * c.sum()
        hmin = n - math.log1p(eps_max) / LN2
        if eps_max < 1e-5:
            # second order in eps; cross terms vanish on phase averaging
            return n - 4**n * float(np.dot(c, c)) / (4 * LN2), hmin
    else:
        hmin = _entropies_at(ratio, n, 0.5)[1]

    # Shannon part: mean over a uniform shift within one cell, by the
    # periodic trapezoid rule with doubling until converged.
    m = 4
    prev = np.mean([_entropies_at(ratio, n, (i + 0.5) / m)[0] for i in range(m)])
    while m < 4096:
        m *= 2
        cur = np.mean([_entropies_at(ratio, n, (i + 0.5) / m)[0] for i in range(m)])
        if abs(cur - prev) < 1e-13:
            break
        prev = cur
    return float(min(cur, n)), float(min(hmin, cur))


def cyclic_cond_entropies(sigma_Q: float, binning: CyclicBinning) -> tuple[float, float]:
    """(H1(R|K), H_inf(R|K)) for cyclic binning of Gaussian quantum noise.

    Given K = k the word distribution is the wrapped N(k, sigma_Q) integrated
    over width-b cells. Shifts by whole cells only permute labels; the
    residual sub-cell phase is uniform for a classical noise much wider than
    b. H1 is the average over that phase, H_inf the worst phase. Both depend
    on sigma_Q and the binning only through B / sigma_Q and n.
    """
    if sigma_Q <= 0:
        raise ValueError("sigma_Q must be positive")
    return _cyclic_normalized(float(binning.B / sigma_Q), int(binning.n))


def shannon_lower_bound_via_mutual_info(H1_T: float, H1_K: float) -> float:
    """H1(T|K) >= H1(T) - H1(K), clamped at zero."""
    if H1_T < 0 or H1_K < 0:
        raise ValueError("entropies must be non-negative")
    return max(0.0, H1_T - H1_K)


def extractable_bits(Hmin_cond_total: float, epsilon: float) -> float:
    """H_inf(R|K) - 2 log2(1/epsilon), clamped at zero."""
    if not (0 < epsilon <= 1):
        raise ValueError("epsilon must lie in (0, 1]")
    return max(0.0, Hmin_cond_total - 2 * math.log2(1 / epsilon))


# --- calibration and report -----------------------------------------------

@dataclass(eq=False)
class ChannelCalibration:
    """Per-bin total and dark PSDs (mean |a_k|^2) for bins 1 .. K.

    Each of Re and Im carries half the bin power, so per-value standard
    deviations are sqrt(psd / 2).
    """

    freqs: np.ndarray
    psd_total: np.ndarray
    psd_dark: np.ndarray
    delta_f: float
    sample_rate: float
    block_length: int
    blocks_total: int = 0
    blocks_dark: int = 0

    def __post_init__(self):
        self.freqs = np.asarray(self.freqs, dtype=float)
        self.psd_total = np.asarray(self.psd_total, dtype=float)
        self.psd_dark = np.asarray(self.psd_dark, dtype=float)
        if not (self.freqs.shape == self.psd_total.shape == self.psd_dark.shape):
            raise DataError("calibration arrays differ in length")
        if abs(self.delta_f * self.block_length - self.sample_rate) > 1e-9 * self.sample_rate:
            raise DataError("delta_f * block_length != sample_rate")

    @property
    def sigma_T(self) -> np.ndarray:
        return np.sqrt(self.psd_total / 2)

    @property
    def sigma_K(self) -> np.ndarray:
        return np.sqrt(self.psd_dark / 2)

    @property
    def sigma_Q(self) -> np.ndarray:
        return np.sqrt(np.clip(self.psd_total - self.psd_dark, 0, None) / 2)

    def bin_indices(self) -> np.ndarray:
        return np.rint(self.freqs / self.delta_f).astype(np.int64)

    def check_quantum_variance(self, retained: np.ndarray | None = None):
        bad = self.psd_total <= self.psd_dark
        if retained is not None:
            bad &= retained
        if np.any(bad):
            f = self.freqs[np.argmax(bad)]
            raise DataError(f"non-positive quantum variance in {int(bad.sum())} bins "
                            f"(first at {f:.6g} Hz)")

    @classmethod
    def from_psds(cls, dark, total, f_max: float) -> "ChannelCalibration":
        """Build from two PsdEstimates, keeping bins 1 .. floor(f_max / delta_f)."""
        if dark.power.size != total.power.size or not math.isclose(dark.delta_f, total.delta_f,
                                                                   rel_tol=1e-12):
            raise DataError("dark and total spectra differ in resolution")
        k_max = min(int(math.floor(f_max / total.delta_f + 1e-9)), total.power.size - 2)
        k = np.arange(1, k_max + 1)
        return cls(k * total.delta_f, total.power[k], dark.power[k], total.delta_f,
                   total.delta_f * total.block_length, total.block_length,
                   total.blocks_averaged, dark.blocks_averaged)

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "delta_f_hz": self.delta_f,
            "sample_rate_hz": self.sample_rate,
            "block_length": self.block_length,
            "blocks_total": self.blocks_total,
            "blocks_dark": self.blocks_dark,
            "freq_hz": self.freqs.tolist(),
            "psd_total": self.psd_total.tolist(),
            "psd_dark": self.psd_dark.tolist(),
            "sigma_T": self.sigma_T.tolist(),
            "sigma_K": self.sigma_K.tolist(),
            "sigma_Q": self.sigma_Q.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelCalibration":
        try:
            return cls(d["freq_hz"], d["psd_total"], d["psd_dark"], float(d["delta_f_hz"]),
                       float(d["sample_rate_hz"]), int(d["block_length"]),
                       int(d.get("blocks_total", 0)), int(d.get("blocks_dark", 0)))
        except KeyError as exc:
            raise DataError(f"calibration missing field {exc}") from None

    def save(self, path: str | Path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "ChannelCalibration":
        path = Path(path)
        if not path.exists():
            raise DataError(f"calibration file {path} not found")
        return cls.from_dict(json.loads(path.read_text()))


@dataclass(eq=False)
class EntropyReport:
    """Per-frequency entropies in bits per value (one value = Re or Im)."""

    freqs: np.ndarray
    H1: np.ndarray
    Hmin: np.ndarray
    H1_cond: np.ndarray
    Hmin_cond: np.ndarray
    word_bits: int
    scheme: str = "cyclic"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("freqs", "H1", "Hmin", "H1_cond", "Hmin_cond"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        tol = 1e-9
        if np.any(self.Hmin_cond < -tol) or np.any(self.Hmin_cond > self.H1_cond + tol) \
                or np.any(self.H1_cond > self.word_bits + tol):
            raise ValueError("entropy ordering 0 <= Hmin_cond <= H1_cond <= n violated")

    @property
    def extractable_bits(self) -> np.ndarray:
        """Conditional min-entropy contributed per bin (Re + Im), before the epsilon penalty."""
        return 2 * self.Hmin_cond

    @classmethod
    def uniform(cls, freqs, word_bits: int, hmin_per_value: float,
                h1_per_value: float | None = None) -> "EntropyReport":
        """Report assigning the same entropy to every bin (rate planning)."""
        freqs = np.asarray(freqs, dtype=float)
        h1 = hmin_per_value if h1_per_value is None else h1_per_value
        full = np.full(freqs.size, float(word_bits))
        return cls(freqs, full, full, np.full(freqs.size, h1),
                   np.full(freqs.size, hmin_per_value), word_bits, "uniform")

    def records(self) -> list[dict]:
        return [{"freq_hz": float(f), "H1": float(a), "Hmin": float(b), "H1_cond": float(c),
                 "Hmin_cond": float(d), "extractable_bits": float(2 * d)}
                for f, a, b, c, d in zip(self.freqs, self.H1, self.Hmin, self.H1_cond,
                                         self.Hmin_cond)]

    def to_dict(self) -> dict:
        return {"schema_version": 1, "scheme": self.scheme, "word_bits": self.word_bits,
                "units": "bits per value", "meta": self.meta, "records": self.records()}

    @classmethod
    def from_dict(cls, d: dict) -> "EntropyReport":
        recs = d["records"]
        col = lambda k: [r[k] for r in recs]  # noqa: E731
        return cls(col("freq_hz"), col("H1"), col("Hmin"), col("H1_cond"), col("Hmin_cond"),
                   int(d["word_bits"]), d.get("scheme", "cyclic"), d.get("meta", {}))


def build_entropy_report(cal: ChannelCalibration, n: int = 16, scheme: str = "cyclic",
                         period_sigma: float = 0.5, offset: float = 0.0):
    """Entropy report plus per-bin binnings for a calibration.

    Cyclic: each bin gets b with B = period_sigma * sigma_Q. Equal-area: the
    Shannon part is the closed form; the min-entropy has no positive lower
    bound against an unbounded classical offset and is reported as 0.
    Bins without positive quantum variance get zero entropy and no binning.
    """
    sq, st, sk = cal.sigma_Q, cal.sigma_T, cal.sigma_K
    ok = (cal.psd_total > cal.psd_dark) & (sk > 0)
    size = cal.freqs.size
    H1, Hmin = np.zeros(size), np.zeros(size)
    H1c, Hminc = np.zeros(size), np.zeros(size)
    binnings: list = [None] * size
    if scheme == "cyclic":
        h1c, hmc = _cyclic_normalized(float(period_sigma), int(n))
        for i in np.nonzero(ok)[0]:
            bn = CyclicBinning.for_sigma(float(sq[i]), n, period_sigma, offset)
            binnings[i] = bn
            H1c[i], Hminc[i] = h1c, hmc
            H1[i], Hmin[i] = _cyclic_normalized(float(bn.B / st[i]), int(n))
        meta = {"period_sigma": period_sigma, "offset": offset}
    elif scheme == "equal_area":
        for i in np.nonzero(ok)[0]:
            H1c[i] = equal_area_cond_shannon(GaussianChannelParams(float(st[i]), float(sk[i])), n)
        H1[ok] = n
        Hmin[ok] = n
        meta = {"min_entropy_note": "unbounded classical offset; no positive bound"}
    else:
        raise ValueError(f"unknown binning scheme {scheme!r}")
    report = EntropyReport(cal.freqs.copy(), H1, Hmin, H1c, Hminc, n, scheme, meta)
    return report, binnings
