"""Rate planning, randomness extraction and the end-to-end pipeline.

Every block contributes the Re and Im parts of its retained frequency
bins, binned into n-bit words in ascending frequency with Re before Im.
The concatenated word bits of one block form a single hash input, so the
2 log2(1/epsilon) security penalty is paid once per block.
"""

from __future__ import annotations

import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
from scipy.fft import next_fast_len

from .analysis import BandMask
from .binning import words_to_bits
from .entropy import ChannelCalibration, EntropyReport, build_entropy_report, extractable_bits
from .errors import ConfigError, DataError, EntropySafetyError

__all__ = [
    "DEFAULT_EPSILON",
    "DEFAULT_HASH_RATIO",
    "ExtractionPlan",
    "SeededToeplitz",
    "BinningConfig",
    "plan_extraction",
    "toeplitz_hash",
    "crypto_hash_extract",
    "block_words",
    "run_pipeline",
    "pack_bits",
    "unpack_bits",
]

DEFAULT_EPSILON = 2.0**-100
DEFAULT_HASH_RATIO = 14 / 16
_DIRECT_CONV_LIMIT = 1 << 21


def _retained_bins(delta_f: float, f_max: float, mask: BandMask) -> np.ndarray:
    k_max = int(math.floor(f_max / delta_f + 1e-9))
    k = np.arange(1, k_max + 1)
    return k[~np.atleast_1d(mask.contains(k * delta_f))]


@dataclass(frozen=True, eq=False)
class ExtractionPlan:
    word_bits: int
    values_per_block: int
    hash_in_bits: int
    hash_out_bits: int
    epsilon: float
    band_mask: BandMask
    delta_f: float
    f_max: float
    hmin_cond_total: float
    hash_ratio: float = DEFAULT_HASH_RATIO

    def __post_init__(self):
        bound = extractable_bits(self.hmin_cond_total, self.epsilon)
        if self.hash_out_bits > bound:
            raise EntropySafetyError(f"hash output {self.hash_out_bits} bits exceeds the "
                                     f"extractable bound {bound:.3f}")
        if self.hash_out_bits < 0 or self.hash_out_bits > self.hash_in_bits:
            raise ConfigError("hash output must lie in [0, hash input]")

    @property
    def block_duration(self) -> float:
        return 1.0 / self.delta_f

    @property
    def gross_rate(self) -> float:
        """Digitized word bits per second before hashing."""
        return self.hash_in_bits / self.block_duration

    @property
    def net_rate(self) -> float:
        return self.hash_out_bits / self.block_duration

    @property
    def extractable_bits(self) -> float:
        return extractable_bits(self.hmin_cond_total, self.epsilon)

    def retained_bins(self) -> np.ndarray:
        return _retained_bins(self.delta_f, self.f_max, self.band_mask)

    def summary_line(self) -> str:
        return (f"values/block={self.values_per_block} hash {self.hash_in_bits}->"
                f"{self.hash_out_bits} bits net_rate={self.net_rate / 1e9:.4f} Gbit/s "
                f"gross_rate={self.gross_rate / 1e9:.4f} Gbit/s")

    def to_dict(self) -> dict:
        return {"schema_version": 1, "word_bits": self.word_bits,
                "values_per_block": self.values_per_block, "hash_in_bits": self.hash_in_bits,
                "hash_out_bits": self.hash_out_bits, "epsilon": self.epsilon,
                "log2_inv_epsilon": -math.log2(self.epsilon),
                "band_mask": self.band_mask.to_list(), "delta_f_hz": self.delta_f,
                "f_max_hz": self.f_max, "hmin_cond_total": self.hmin_cond_total,
                "hash_ratio": self.hash_ratio, "block_duration_s": self.block_duration,
                "gross_rate_bps": self.gross_rate, "net_rate_bps": self.net_rate}

    @classmethod
    def from_dict(cls, d: dict) -> "ExtractionPlan":
        return cls(int(d["word_bits"]), int(d["values_per_block"]), int(d["hash_in_bits"]),
                   int(d["hash_out_bits"]), float(d["epsilon"]),
                   BandMask.from_list(d.get("band_mask")), float(d["delta_f_hz"]),
                   float(d["f_max_hz"]), float(d["hmin_cond_total"]),
                   float(d.get("hash_ratio", DEFAULT_HASH_RATIO)))


def plan_extraction(report: EntropyReport, epsilon: float = DEFAULT_EPSILON,
                    band_mask: BandMask | Iterable = (), delta_f: float = 1e5,
                    f_max: float = 1e9, hash_ratio: float = DEFAULT_HASH_RATIO) -> ExtractionPlan:
    """Size the per-block hash from the entropy report.

    The output is floor(extractable bits), further capped at `hash_ratio`
    of the input so a generous entropy estimate is never fully trusted.
    """
    mask = band_mask if isinstance(band_mask, BandMask) else BandMask.from_list(band_mask)
    if not (delta_f > 0 and f_max > 0):
        raise ConfigError("delta_f and f_max must be positive")
    if not (0 < hash_ratio <= 1):
        raise ConfigError("hash_ratio must lie in (0, 1]")
    bins = _retained_bins(delta_f, f_max, mask)
    if bins.size == 0:
        raise ConfigError("no frequency bins left after masking")
    report_bins = np.rint(report.freqs / delta_f).astype(np.int64)
    if not np.allclose(report_bins * delta_f, report.freqs, rtol=1e-9, atol=0):
        raise ConfigError("report frequencies are not on the delta_f grid")
    index = {int(k): i for i, k in enumerate(report_bins)}
    k_max = int(math.floor(f_max / delta_f + 1e-9))
    missing = [k for k in range(1, k_max + 1) if k not in index]
    if missing:
        raise ConfigError(f"report lacks {len(missing)} bins below f_max "
                          f"(first at {missing[0] * delta_f:.6g} Hz)")
    rows = np.array([index[int(k)] for k in bins])
    n = report.word_bits
    values = 2 * bins.size
    hash_in = values * n
    hmin_total = float(2 * report.Hmin_cond[rows].sum())
    bound = extractable_bits(hmin_total, epsilon)
    hash_out = min(int(math.floor(bound)), int(math.floor(hash_in * hash_ratio + 1e-9)))
    if hash_out <= 0:
        raise EntropySafetyError(f"no extractable output: conditional min-entropy "
                                 f"{hmin_total:.3f} bits vs penalty "
                                 f"{2 * math.log2(1 / epsilon):.1f}")
    return ExtractionPlan(n, values, hash_in, hash_out, epsilon, mask, delta_f, f_max,
                          hmin_total, hash_ratio)


@dataclass(frozen=True, eq=False)
class SeededToeplitz:
    """Binary Toeplitz matrix T[i, j] = s[i - j + in - 1] for out x in bits."""

    bits: np.ndarray
    in_bits: int
    out_bits: int
    _fft_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        b = np.asarray(self.bits, dtype=np.uint8).ravel()
        if self.in_bits < 1 or self.out_bits < 0:
            raise ValueError("need in_bits >= 1 and out_bits >= 0")
        if b.size != self.seed_length(self.in_bits, self.out_bits):
            raise ValueError(f"seed must hold exactly in+out-1 = "
                             f"{self.seed_length(self.in_bits, self.out_bits)} bits, got {b.size}")
        if np.any(b > 1):
            raise ValueError("seed bits must be 0 or 1")
        b.flags.writeable = False
        object.__setattr__(self, "bits", b)

    @staticmethod
    def seed_length(in_bits: int, out_bits: int) -> int:
        return max(in_bits + out_bits - 1, 0)

    @classmethod
    def from_seed(cls, seed: int, in_bits: int, out_bits: int) -> "SeededToeplitz":
        rng = np.random.default_rng(seed)
        bits = rng.integers(0, 2, size=cls.seed_length(in_bits, out_bits), dtype=np.uint8)
        return cls(bits, in_bits, out_bits)

    @classmethod
    def identity(cls, k: int) -> "SeededToeplitz":
        bits = np.zeros(2 * k - 1, dtype=np.uint8)
        bits[k - 1] = 1
        return cls(bits, k, k)

    @classmethod
    def from_bytes(cls, data: bytes, in_bits: int, out_bits: int) -> "SeededToeplitz":
        need = cls.seed_length(in_bits, out_bits)
        if len(data) != (need + 7) // 8:
            raise ValueError(f"seed file must be {(need + 7) // 8} bytes for "
                             f"{in_bits}->{out_bits} bits, got {len(data)}")
        bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8))[:need]
        return cls(bits, in_bits, out_bits)

    def to_bytes(self) -> bytes:
        return np.packbits(self.bits).tobytes()

    def save(self, path: str | Path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path, in_bits: int, out_bits: int) -> "SeededToeplitz":
        return cls.from_bytes(Path(path).read_bytes(), in_bits, out_bits)

    def matrix(self) -> np.ndarray:
        i = np.arange(self.out_bits)[:, None]
        j = np.arange(self.in_bits)[None, :]
        return self.bits[i - j + self.in_bits - 1]

    def _seed_spectrum(self, size: int) -> np.ndarray:
        if size not in self._fft_cache:
            self._fft_cache[size] = np.fft.rfft(self.bits.astype(np.float64), size)
        return self._fft_cache[size]


def toeplitz_hash(seed: SeededToeplitz, bits) -> np.ndarray:
    """GF(2) product of the seeded Toeplitz matrix with a bit vector.

    Row i of the product is sum_j s[i - j + in - 1] x[j], which is entry
    i + in - 1 of the linear convolution s * x. Large sizes use an FFT
    convolution of length >= len(s); wrap-around cannot reach the needed
    window, and the integer result is checked before reduction mod 2.
    """
    x = np.asarray(bits, dtype=np.uint8).ravel()
    if x.size != seed.in_bits:
        raise ValueError(f"input must hold {seed.in_bits} bits, got {x.size}")
    if seed.out_bits == 0:
        return np.zeros(0, dtype=np.uint8)
    lo, hi = seed.in_bits - 1, seed.in_bits - 1 + seed.out_bits
    if seed.in_bits * seed.out_bits <= _DIRECT_CONV_LIMIT:
        y = np.convolve(seed.bits.astype(np.int64), x.astype(np.int64))[lo:hi]
        return (y & 1).astype(np.uint8)
    size = next_fast_len(seed.bits.size, real=True)
    y = np.fft.irfft(seed._seed_spectrum(size) * np.fft.rfft(x.astype(np.float64), size),
                     size)[lo:hi]
    r = np.rint(y)
    if np.max(np.abs(y - r)) >= 0.25:
        raise RuntimeError("FFT convolution lost integer precision")
    return (r.astype(np.int64) & 1).astype(np.uint8)


def _sha512(data: bytes) -> bytes:
    return hashlib.sha512(data).digest()


def crypto_hash_extract(bits, out_bits: int, hash_fn: Callable[[bytes], bytes] = _sha512,
                        digest_bits: int = 512) -> np.ndarray:
    """Leading `out_bits` of hash_fn(bit-length prefix || MSB-first packed input)."""
    if out_bits < 0 or out_bits > digest_bits:
        raise ValueError(f"out_bits must lie in [0, {digest_bits}]")
    if out_bits == 0:
        return np.zeros(0, dtype=np.uint8)
    x = np.asarray(bits, dtype=np.uint8).ravel()
    payload = x.size.to_bytes(8, "big") + np.packbits(x).tobytes()
    digest = np.frombuffer(hash_fn(payload), dtype=np.uint8)
    if digest.size * 8 < out_bits:
        raise ValueError("hash primitive returned a short digest")
    return np.unpackbits(digest)[:out_bits]


@dataclass(frozen=True)
class BinningConfig:
    scheme: str = "cyclic"
    n: int = 16
    period_sigma: float = 0.5
    offset: float = 0.0

    def to_dict(self) -> dict:
        return {"scheme": self.scheme, "n": self.n, "period_sigma": self.period_sigma,
                "offset": self.offset}


def block_words(samples: np.ndarray, bins: np.ndarray, widths: np.ndarray, n: int,
                offset: float = 0.0) -> np.ndarray:
    """Cyclic words of one block: bins ascending, Re then Im per bin.

    `widths` holds the cell width b of each retained bin.
    """
    spec = np.fft.rfft(np.asarray(samples, dtype=np.float64)) / math.sqrt(samples.size)
    a = spec[bins]
    vals = np.empty(2 * bins.size)
    vals[0::2], vals[1::2] = a.real, a.imag
    cell = np.floor((vals - offset) / np.repeat(widths, 2))
    return np.mod(cell, 2**n).astype(np.int64)


def _frames_of(blocks, block_length: int, sample_rate: float):
    for blk in blocks:
        if hasattr(blk, "samples"):
            if not math.isclose(blk.sample_rate, sample_rate, rel_tol=1e-12):
                raise DataError(f"block sample rate {blk.sample_rate} differs from "
                                f"calibration {sample_rate}")
            s = blk.samples
        else:
            s = np.asarray(blk)
        if s.size % block_length:
            raise DataError(f"block of {s.size} samples is not a multiple of {block_length}")
        for i in range(0, s.size, block_length):
            yield s[i:i + block_length]


def run_pipeline(blocks: Iterable, calibration: ChannelCalibration, plan: ExtractionPlan,
                 binning: BinningConfig = BinningConfig(), seed: int | SeededToeplitz = 0,
                 workers: int = 1, extractor: str = "toeplitz"):
    """Blocks to hashed bits; returns (bit array, EntropyReport).

    Each block is transformed, restricted to the plan's retained bins,
    binned and hashed on its own, so any worker count gives the same
    bit-identical, block-ordered output.
    """
    if not math.isclose(calibration.delta_f, plan.delta_f, rel_tol=1e-9):
        raise ConfigError(f"calibration delta_f {calibration.delta_f} differs from plan "
                          f"{plan.delta_f}")
    if binning.n != plan.word_bits:
        raise ConfigError(f"binning uses {binning.n} bits per word, plan expects "
                          f"{plan.word_bits}")
    bins = plan.retained_bins()
    if 2 * bins.size != plan.values_per_block:
        raise ConfigError("plan values_per_block inconsistent with its band mask")
    cal_bins = calibration.bin_indices()
    pos = np.searchsorted(cal_bins, bins)
    if np.any(pos >= cal_bins.size) or np.any(cal_bins[np.minimum(pos, cal_bins.size - 1)] != bins):
        raise DataError("calibration does not cover every retained bin")
    retained_mask = np.zeros(cal_bins.size, dtype=bool)
    retained_mask[pos] = True
    calibration.check_quantum_variance(retained_mask)

    report, binnings = build_entropy_report(calibration, binning.n, binning.scheme,
                                            binning.period_sigma, binning.offset)
    hmin_total = float(2 * report.Hmin_cond[pos].sum())
    bound = extractable_bits(hmin_total, plan.epsilon)
    if plan.hash_out_bits > bound:
        raise EntropySafetyError(f"plan emits {plan.hash_out_bits} bits per block but the "
                                 f"calibrated bound is {bound:.3f}")
    if binning.scheme != "cyclic":
        raise ConfigError("extraction supports the cyclic scheme only")
    widths = np.array([binnings[i].b for i in pos])

    if isinstance(seed, SeededToeplitz):
        hasher = seed
        if (hasher.in_bits, hasher.out_bits) != (plan.hash_in_bits, plan.hash_out_bits):
            raise ConfigError("seed dimensions do not match the plan")
    else:
        hasher = SeededToeplitz.from_seed(int(seed), plan.hash_in_bits, plan.hash_out_bits)
    if extractor not in ("toeplitz", "sha512"):
        raise ConfigError(f"unknown extractor {extractor!r}")

    def process(frame: np.ndarray) -> np.ndarray:
        words = block_words(frame, bins, widths, binning.n, binning.offset)
        x = words_to_bits(words, binning.n)
        if extractor == "toeplitz":
            out = toeplitz_hash(hasher, x)
        else:
            out = crypto_hash_extract(x, min(plan.hash_out_bits, 512))
        if out.size > bound:
            raise EntropySafetyError("block output exceeds the extractable bound")
        return out

    frames = _frames_of(blocks, calibration.block_length, calibration.sample_rate)
    if workers <= 1:
        outs = [process(f) for f in frames]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(process, frames))
    bits = np.concatenate(outs) if outs else np.zeros(0, dtype=np.uint8)
    report.meta.update({"blocks": len(outs), "hash_out_bits": plan.hash_out_bits,
                        "hmin_cond_total": hmin_total, "extractor": extractor})
    return bits, report


def pack_bits(bits) -> bytes:
    """MSB-first bytes; a trailing partial byte is zero-padded."""
    return np.packbits(np.asarray(bits, dtype=np.uint8)).tobytes()


def unpack_bits(data: bytes, count: int | None = None) -> np.ndarray:
    out = np.unpackbits(np.frombuffer(data, dtype=np.uint8))
    return out if count is None else out[:count]
