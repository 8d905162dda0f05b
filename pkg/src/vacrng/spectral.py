"""Block DFT, half-spectrum handling and PSD accumulation.

Transforms use the unitary 1/sqrt(N) normalization and a rectangular
window. Blocks are non-overlapping. numpy's pocketfft backs the transform
for every N, power of two or not.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import DataError

__all__ = [
    "Spectrum",
    "PsdEstimate",
    "PsdAccumulator",
    "dft_block",
    "dft_frames",
    "inverse_dft",
    "frames",
    "accumulate_psd",
    "psd_of_trace",
    "to_decibel",
    "leak_kernel",
    "export_psd_json",
]


@dataclass(frozen=True, eq=False)
class Spectrum:
    """Non-redundant half of a real block's DFT.

    ``amplitudes`` holds bins 1 .. N/2-1; ``dc`` and ``nyquist`` are the
    two purely real bins.
    """

    amplitudes: np.ndarray
    dc: float
    nyquist: float
    delta_f: float
    block_length: int

    def __post_init__(self):
        if self.amplitudes.shape != (self.block_length // 2 - 1,):
            raise DataError("amplitude array must hold N/2 - 1 bins")

    @property
    def sample_rate(self) -> float:
        return self.delta_f * self.block_length

    @property
    def freqs(self) -> np.ndarray:
        """Frequencies of the ``amplitudes`` entries."""
        return np.arange(1, self.block_length // 2) * self.delta_f

    @property
    def real_values(self) -> np.ndarray:
        """Re/Im of every bin interleaved, ascending frequency, Re first."""
        out = np.empty(2 * self.amplitudes.size)
        out[0::2] = self.amplitudes.real
        out[1::2] = self.amplitudes.imag
        return out

    def power(self) -> np.ndarray:
        """|a_k|^2 for k = 0 .. N/2."""
        return np.concatenate(([self.dc**2], np.abs(self.amplitudes) ** 2, [self.nyquist**2]))


@dataclass(frozen=True, eq=False)
class PsdEstimate:
    """Mean |a_k|^2 (codes^2) for k = 0 .. N/2."""

    power: np.ndarray
    blocks_averaged: int
    delta_f: float

    @property
    def block_length(self) -> int:
        return 2 * (self.power.size - 1)

    @property
    def freqs(self) -> np.ndarray:
        return np.arange(self.power.size) * self.delta_f

    def bin_of(self, f: float) -> int:
        k = int(round(f / self.delta_f))
        if not 0 <= k < self.power.size:
            raise DataError(f"frequency {f} Hz outside the spectrum")
        return k

    def total_power(self) -> float:
        """Mean-square time-domain amplitude implied by Parseval (sum a_j^2 / N)."""
        p = self.power
        return float((p[0] + p[-1] + 2 * p[1:-1].sum()) / self.block_length)


def _check_length(n: int):
    if n < 4 or n % 2:
        raise DataError(f"block length must be even and >= 4, got {n}")


def frames(samples: np.ndarray, block_length: int) -> np.ndarray:
    """Split into non-overlapping blocks of `block_length` (remainder dropped)."""
    _check_length(block_length)
    count = samples.size // block_length
    if count == 0:
        raise DataError(f"trace of {samples.size} samples shorter than one block")
    return samples[: count * block_length].reshape(count, block_length)


def _spectrum(row: np.ndarray, delta_f: float) -> Spectrum:
    return Spectrum(row[1:-1], float(row[0].real), float(row[-1].real), delta_f,
                    2 * (row.size - 1))


def dft_frames(blocks: np.ndarray, sample_rate: float) -> np.ndarray:
    """Unitary rfft of each row of `blocks`; returns complex array (count, N/2+1)."""
    blocks = np.atleast_2d(blocks)
    n = blocks.shape[1]
    _check_length(n)
    return np.fft.rfft(blocks.astype(np.float64), axis=1) / math.sqrt(n)


def dft_block(block, sample_rate: float | None = None) -> Spectrum:
    """DFT of one block (a SampleBlock or a plain array with `sample_rate`)."""
    if hasattr(block, "samples"):
        samples, sample_rate = block.samples, block.sample_rate
    else:
        samples = np.asarray(block)
        if sample_rate is None:
            raise DataError("sample_rate required for bare arrays")
    n = samples.size
    _check_length(n)
    row = dft_frames(samples[None, :], sample_rate)[0]
    return _spectrum(row, sample_rate / n)


def inverse_dft(spec: Spectrum) -> np.ndarray:
    """Rebuild the real block; the upper half follows from Hermitian symmetry."""
    full = np.concatenate(([spec.dc], spec.amplitudes, [spec.nyquist]))
    return np.fft.irfft(full * math.sqrt(spec.block_length), n=spec.block_length)


class PsdAccumulator:
    """Mergeable running sum of |a_k|^2.

    Partial accumulators from separate workers combine with ``merge``; the
    result is exact up to floating-point summation order.
    """

    def __init__(self):
        self._sum = None
        self.count = 0
        self.delta_f = None

    def _check(self, n_bins: int, delta_f: float):
        if self._sum is None:
            return
        if n_bins != self._sum.size or not math.isclose(delta_f, self.delta_f, rel_tol=1e-12):
            raise DataError("spectra differ in block length or resolution")

    def add(self, spec: Spectrum) -> "PsdAccumulator":
        p = spec.power()
        self._check(p.size, spec.delta_f)
        if self._sum is None:
            self._sum, self.delta_f = np.zeros_like(p), spec.delta_f
        self._sum += p
        self.count += 1
        return self

    def add_power(self, power_rows: np.ndarray, delta_f: float) -> "PsdAccumulator":
        """Add a (count, N/2+1) stack of per-block |a_k|^2 rows."""
        power_rows = np.atleast_2d(power_rows)
        self._check(power_rows.shape[1], delta_f)
        if self._sum is None:
            self._sum, self.delta_f = np.zeros(power_rows.shape[1]), delta_f
        self._sum += power_rows.sum(axis=0)
        self.count += power_rows.shape[0]
        return self

    def merge(self, other: "PsdAccumulator") -> "PsdAccumulator":
        if other._sum is None:
            return self
        self._check(other._sum.size, other.delta_f)
        if self._sum is None:
            self._sum, self.delta_f = np.zeros_like(other._sum), other.delta_f
        self._sum += other._sum
        self.count += other.count
        return self

    def result(self) -> PsdEstimate:
        if self.count == 0:
            raise DataError("no spectra accumulated")
        return PsdEstimate(self._sum / self.count, self.count, self.delta_f)


def accumulate_psd(spectra: Iterable[Spectrum]) -> PsdEstimate:
    acc = PsdAccumulator()
    for s in spectra:
        acc.add(s)
    return acc.result()


def psd_of_trace(samples: np.ndarray, sample_rate: float, block_length: int) -> PsdEstimate:
    """Average PSD over all complete blocks of a long trace."""
    fr = frames(np.asarray(samples), block_length)
    acc = PsdAccumulator()
    chunk = max(1, 2**22 // block_length)
    for i in range(0, fr.shape[0], chunk):
        amp = dft_frames(fr[i:i + chunk], sample_rate)
        acc.add_power(np.abs(amp) ** 2, sample_rate / block_length)
    return acc.result()


def to_decibel(power, reference=1.0):
    """10 log10(power / reference)."""
    power = np.asarray(power, dtype=float)
    reference = np.asarray(reference, dtype=float)
    if np.any(power <= 0) or np.any(reference <= 0):
        raise ValueError("decibel conversion needs positive power and reference")
    out = 10.0 * np.log10(power / reference)
    return float(out) if out.ndim == 0 else out


def leak_kernel(T: float, f_offset):
    """Amplitude weight T*sinc(pi*T*f) of a length-T rectangular window.

    sinc here is the unnormalized sin(x)/x with sinc(0) = 1; numpy's
    normalized sinc absorbs the factor pi.
    """
    if T <= 0:
        raise ValueError("window length T must be positive")
    out = T * np.sinc(T * np.asarray(f_offset, dtype=float))
    return float(out) if out.ndim == 0 else out


def export_psd_json(psd: PsdEstimate, path: str | Path, reference: float = 1.0) -> Path:
    """Write [{freq_hz, power, power_db}, ...]; power_db is null for empty bins."""
    records = []
    for f, p in zip(psd.freqs, psd.power):
        db = 10.0 * math.log10(p / reference) if p > 0 else None
        records.append({"freq_hz": float(f), "power": float(p), "power_db": db})
    path = Path(path)
    path.write_text(json.dumps({"schema_version": 1, "blocks_averaged": psd.blocks_averaged,
                                "delta_f_hz": psd.delta_f, "records": records}))
    return path
