"""Map real frequency amplitudes to n-bit words.

Two schemes:

* equal-area: 2**n cells cut at empirical quantiles of a fitting ensemble,
  so the marginal word distribution is uniform by construction;
* cyclic: equal-width cells of width ``b`` whose labels repeat with period
  ``B = 2**n * b``. Knowing a classical offset only shifts the wrapped
  distribution, which stays nearly flat once B is small against sigma.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

__all__ = [
    "EqualAreaBinning",
    "CyclicBinning",
    "fit_equal_area",
    "apply_equal_area",
    "apply_cyclic",
    "wrapped_flatness",
    "flatness_excess",
    "binning_from_dict",
    "words_to_bits",
]

DEFAULT_REFIT_SAMPLES = 500_000


@dataclass(frozen=True, eq=False)
class EqualAreaBinning:
    boundaries: np.ndarray
    n: int
    m: int

    def __post_init__(self):
        b = np.asarray(self.boundaries, dtype=float)
        if b.shape != (2**self.n - 1,):
            raise ValueError(f"need {2**self.n - 1} boundaries for n={self.n}")
        if np.any(np.diff(b) <= 0):
            raise ValueError("boundaries must be strictly increasing")
        b.flags.writeable = False
        object.__setattr__(self, "boundaries", b)

    def to_dict(self) -> dict:
        return {"scheme": "equal_area", "n": self.n, "m": self.m,
                "boundaries": self.boundaries.tolist()}


@dataclass(frozen=True)
class CyclicBinning:
    b: float
    n: int
    offset: float = 0.0

    def __post_init__(self):
        if not (self.b > 0 and math.isfinite(self.b)):
            raise ValueError("bin width must be positive and finite")
        if self.n < 1:
            raise ValueError("need at least one bit per word")

    @property
    def B(self) -> float:
        """Label period 2**n * b (exact: scaling by a power of two)."""
        return math.ldexp(self.b, self.n)

    @classmethod
    def for_sigma(cls, sigma_q: float, n: int, period_sigma: float = 0.5,
                  offset: float = 0.0) -> "CyclicBinning":
        """Binning whose period is `period_sigma` times the quantum std."""
        return cls(math.ldexp(period_sigma * sigma_q, -n), n, offset)

    def to_dict(self) -> dict:
        return {"scheme": "cyclic", "n": self.n, "b": self.b, "offset": self.offset}


def binning_from_dict(d: dict):
    if d["scheme"] == "cyclic":
        return CyclicBinning(float(d["b"]), int(d["n"]), float(d.get("offset", 0.0)))
    if d["scheme"] == "equal_area":
        return EqualAreaBinning(np.asarray(d["boundaries"], dtype=float), int(d["n"]), int(d["m"]))
    raise ValueError(f"unknown binning scheme {d['scheme']!r}")


def fit_equal_area(samples, n: int) -> EqualAreaBinning:
    """Cut the sorted ensemble into 2**n runs of (nearly) equal count.

    Each boundary sits halfway between the last sample of one cell and the
    first of the next, so the fitting ensemble itself lands m/2**n +- 1 per
    word.
    """
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    m = x.size
    if n < 1:
        raise ValueError("n must be >= 1")
    if m < 2 ** (n + 2):
        raise ValueError(f"need at least {2 ** (n + 2)} samples for n={n}, got {m}")
    if not np.all(np.isfinite(x)):
        raise ValueError("samples must be finite")
    idx = (np.arange(1, 2**n) * m) // 2**n
    bounds = 0.5 * (x[idx - 1] + x[idx])
    if np.any(np.diff(bounds) <= 0) or np.any(x[idx - 1] == x[idx]):
        raise ValueError("ensemble too degenerate (repeated values) for equal-area cells")
    return EqualAreaBinning(bounds, n, m)


def apply_equal_area(binning: EqualAreaBinning, x):
    """Number of boundaries <= x; a value on a boundary goes to the upper cell."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("values must be finite")
    out = np.searchsorted(binning.boundaries, x, side="right")
    return int(out) if out.ndim == 0 else out.astype(np.int64)


def apply_cyclic(binning: CyclicBinning, x):
    """floor((x - offset) / b) mod 2**n with a non-negative remainder."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("values must be finite")
    cell = np.floor((x - binning.offset) / binning.b)
    out = np.mod(cell, 2**binning.n).astype(np.int64)
    return int(out) if out.ndim == 0 else out


def _log_theta_tail(sigma: float, B: float) -> float:
    """log of sum_{j>=1} exp(-2 pi^2 sigma^2 j^2 / B^2), summed in log space."""
    c = 2 * math.pi**2 * (sigma / B) ** 2
    terms = [-c]
    j = 1
    # stop once the next term is below 1e-40 of the running sum
    while True:
        j += 1
        t = -c * j * j
        if t < logsumexp(terms) + math.log(1e-40):
            break
        terms.append(t)
    return float(logsumexp(terms))


def flatness_excess(sigma: float, B: float, log: bool = False) -> float:
    """max/mean - 1 of a N(0, sigma) density wrapped onto period B.

    The wrapped density is (1/B) [1 + 2 sum_j exp(-2 pi^2 sigma^2 j^2/B^2) cos(2 pi j x/B)],
    maximal at x = 0. With ``log=True`` the natural log of the excess is
    returned, which stays finite where the excess itself underflows.
    """
    if sigma <= 0 or B <= 0:
        raise ValueError("sigma and B must be positive")
    le = math.log(2.0) + _log_theta_tail(sigma, B)
    return le if log else math.exp(le)


def wrapped_flatness(sigma: float, B: float) -> float:
    """max(p)/<p> of the wrapped normal; rounds to 1.0 once the excess < 1e-16."""
    return 1.0 + flatness_excess(sigma, B)


def words_to_bits(words: np.ndarray, n: int) -> np.ndarray:
    """Concatenate n-bit words most-significant bit first, as a uint8 0/1 array."""
    words = np.asarray(words, dtype=np.int64).ravel()
    shifts = np.arange(n - 1, -1, -1, dtype=np.int64)
    return ((words[:, None] >> shifts) & 1).astype(np.uint8).ravel()
