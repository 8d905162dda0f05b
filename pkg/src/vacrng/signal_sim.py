"""Synthetic detector traces for a homodyne vacuum-noise source.

A trace is the quantized sum of

* Gaussian quantum noise whose variance grows linearly with optical power,
  optionally shaped by a detector low-pass response,
* classical electronic noise colored to a given one-sided PSD,
* deterministic spurs (continuous tones or time-limited bursts),
* interleaver artifact tones at integer fractions of the sample rate,

digitized to signed 8-bit codes. Everything is a pure function of its
arguments and the seed, so the simulator doubles as a test oracle for the
spectral and entropy stages downstream.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError

__all__ = [
    "PiecewiseLinear",
    "Spur",
    "NoiseModel",
    "SampleBlock",
    "default_electronic_psd",
    "flat_electronic_psd",
    "simulate_block",
    "inject_gsm_burst",
    "quantize",
    "write_trace",
    "read_trace",
    "power_sweep",
]

ADC_MAX = 127
DEFAULT_SAMPLE_RATE = 20e9
DEFAULT_BLOCK_LENGTH = 2**18


@dataclass(frozen=True)
class PiecewiseLinear:
    """Curve defined by knots, linearly interpolated, constant beyond the ends."""

    freqs: tuple[float, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        f = np.asarray(self.freqs, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if f.ndim != 1 or f.size == 0 or f.shape != v.shape:
            raise ConfigError("knots need matching non-empty freqs/values")
        if np.any(np.diff(f) < 0):
            raise ConfigError("knot frequencies must be sorted")
        if not (np.all(np.isfinite(f)) and np.all(np.isfinite(v))):
            raise ConfigError("knots must be finite")
        object.__setattr__(self, "freqs", tuple(float(x) for x in f))
        object.__setattr__(self, "values", tuple(float(x) for x in v))

    def __call__(self, f):
        return np.interp(f, self.freqs, self.values)

    def scaled(self, factor: float) -> "PiecewiseLinear":
        return PiecewiseLinear(self.freqs, tuple(v * factor for v in self.values))

    def integral(self, f_lo: float, f_hi: float) -> float:
        """Exact integral of the interpolant over [f_lo, f_hi]."""
        inner = [f for f in self.freqs if f_lo < f < f_hi]
        grid = np.array([f_lo, *inner, f_hi])
        return float(np.trapezoid(self(grid), grid))

    def to_dict(self) -> dict:
        return {"freqs": list(self.freqs), "values": list(self.values)}

    @classmethod
    def from_dict(cls, d: dict) -> "PiecewiseLinear":
        return cls(tuple(d["freqs"]), tuple(d["values"]))


def flat_electronic_psd(variance: float, sample_rate: float) -> PiecewiseLinear:
    """One-sided flat PSD (code^2/Hz) integrating to `variance` over [0, fs/2]."""
    return PiecewiseLinear((0.0,), (2.0 * variance / sample_rate,))


def default_electronic_psd(variance: float = 25.0,
                           sample_rate: float = DEFAULT_SAMPLE_RATE) -> PiecewiseLinear:
    """Flat floor with a broad hump around 3 GHz, scaled to `variance`.

    The hump shape is a visual approximation of a measured dark spectrum,
    not a fitted model.
    """
    shape = PiecewiseLinear((0.0, 2.0e9, 3.0e9, 4.0e9), (1.0, 1.0, 3.0, 1.0))
    total = shape.integral(0.0, sample_rate / 2)
    return shape.scaled(variance / total)


@dataclass(frozen=True)
class Spur:
    """Deterministic sinusoid; `window` is a half-open sample range or None (continuous)."""

    freq_hz: float
    amplitude: float
    phase: float = 0.0
    window: tuple[int, int] | None = None

    def to_dict(self) -> dict:
        return {"freq_hz": self.freq_hz, "amplitude": self.amplitude, "phase": self.phase,
                "window": list(self.window) if self.window is not None else "continuous"}

    @classmethod
    def from_dict(cls, d: dict) -> "Spur":
        w = d.get("window", "continuous")
        window = None if w in (None, "continuous") else (int(w[0]), int(w[1]))
        return cls(float(d["freq_hz"]), float(d["amplitude"]), float(d.get("phase", 0.0)), window)


@dataclass(frozen=True)
class NoiseModel:
    """Simulator parameters.

    quantum_var_per_mw is the time-domain variance (codes^2) of the quantum
    part per mW of optical power, before any detector shaping.
    electronic_psd is one-sided in codes^2/Hz. detector_response is the
    amplitude gain applied to the quantum part (None means flat).
    quadratic_coeff adds c*s**2 to the detector signal s (quantum + spurs)
    to model a weakly nonlinear detector.
    """

    quantum_var_per_mw: float = 50.0
    electronic_psd: PiecewiseLinear = field(default_factory=default_electronic_psd)
    detector_response: PiecewiseLinear | None = None
    spurs: tuple[Spur, ...] = ()
    adc_artifact_period: int | None = None
    adc_artifact_amplitude: float = 0.0
    drift_rel: float = 0.0
    quadratic_coeff: float = 0.0

    def __post_init__(self):
        if not (self.quantum_var_per_mw >= 0):
            raise ConfigError("quantum_var_per_mw must be >= 0")
        if min(self.electronic_psd.values) < 0:
            raise ConfigError("electronic PSD must be non-negative")
        g = self.detector_response
        if g is not None:
            vals = np.asarray(g.values)
            if g.freqs[0] != 0.0 or vals[0] != 1.0:
                raise ConfigError("detector response must start at gain(0) = 1")
            if np.any(vals <= 0) or np.any(vals > 1):
                raise ConfigError("detector gain must lie in (0, 1]")
            below = np.nonzero(vals < 1 / math.sqrt(2))[0]
            if below.size and np.any(np.diff(vals[below[0] - 1:]) > 0):
                raise ConfigError("detector gain must not rise above its -3 dB point")
        if self.adc_artifact_period is not None and self.adc_artifact_period < 2:
            raise ConfigError("adc_artifact_period must be >= 2")
        if not (0 <= self.drift_rel < 1):
            raise ConfigError("drift_rel must lie in [0, 1)")
        object.__setattr__(self, "spurs", tuple(self.spurs))

    def electronic_variance(self, sample_rate: float) -> float:
        return self.electronic_psd.integral(0.0, sample_rate / 2)

    def to_dict(self) -> dict:
        return {
            "quantum_var_per_mw": self.quantum_var_per_mw,
            "electronic_psd": self.electronic_psd.to_dict(),
            "detector_response": None if self.detector_response is None
            else self.detector_response.to_dict(),
            "spurs": [s.to_dict() for s in self.spurs],
            "adc_artifact_period": self.adc_artifact_period,
            "adc_artifact_amplitude": self.adc_artifact_amplitude,
            "drift_rel": self.drift_rel,
            "quadratic_coeff": self.quadratic_coeff,
        }

    @classmethod
    def from_dict(cls, d: dict, sample_rate: float = DEFAULT_SAMPLE_RATE) -> "NoiseModel":
        """Build from a config mapping.

        The electronic noise is given either as explicit PSD knots
        (``electronic_psd``), or as a target variance (``electronic_variance``)
        with ``electronic_shape`` "flat" or "default".
        """
        kw = {}
        if "quantum_var_per_mw" in d:
            kw["quantum_var_per_mw"] = float(d["quantum_var_per_mw"])
        if d.get("electronic_psd") is not None:
            kw["electronic_psd"] = PiecewiseLinear.from_dict(d["electronic_psd"])
        elif "electronic_variance" in d:
            var = float(d["electronic_variance"])
            shape = d.get("electronic_shape", "default")
            if shape == "flat":
                kw["electronic_psd"] = flat_electronic_psd(var, sample_rate)
            elif shape == "default":
                kw["electronic_psd"] = default_electronic_psd(var, sample_rate)
            else:
                raise ConfigError(f"unknown electronic_shape {shape!r}")
        else:
            kw["electronic_psd"] = default_electronic_psd(sample_rate=sample_rate)
        if d.get("detector_response") is not None:
            kw["detector_response"] = PiecewiseLinear.from_dict(d["detector_response"])
        kw["spurs"] = tuple(Spur.from_dict(s) for s in d.get("spurs", []))
        for key in ("adc_artifact_period",):
            if d.get(key) is not None:
                kw[key] = int(d[key])
        for key in ("adc_artifact_amplitude", "drift_rel", "quadratic_coeff"):
            if key in d:
                kw[key] = float(d[key])
        return cls(**kw)


@dataclass(frozen=True, eq=False)
class SampleBlock:
    """Contiguous run of signed 8-bit samples plus acquisition metadata."""

    samples: np.ndarray
    sample_rate: float
    optical_power: float
    seed: int
    kind: str = "total"
    clip_count: int = 0

    def __post_init__(self):
        s = np.asarray(self.samples)
        if s.dtype != np.int8:
            raise DataError("samples must be int8 codes")
        if s.ndim != 1 or s.size == 0 or s.size % 2:
            raise DataError("sample count must be positive and even")
        if np.any(s < -128):  # int8 cannot hold less, kept for clarity
            raise DataError("sample out of range")
        if self.sample_rate <= 0:
            raise DataError("sample_rate must be positive")
        if self.kind not in ("total", "dark"):
            raise DataError(f"unknown kind {self.kind!r}")
        if self.kind == "dark" and self.optical_power != 0:
            raise DataError("dark runs carry zero optical power")
        s.flags.writeable = False
        object.__setattr__(self, "samples", s)

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def variance(self) -> float:
        return float(np.var(self.samples.astype(np.float64)))

    def metadata(self) -> dict:
        return {
            "schema_version": 1,
            "sample_rate_hz": self.sample_rate,
            "optical_power_mw": self.optical_power,
            "kind": self.kind,
            "seed": self.seed,
            "clip_count": self.clip_count,
            "n_samples": int(self.samples.size),
        }

    def __eq__(self, other):
        if not isinstance(other, SampleBlock):
            return NotImplemented
        return (self.metadata() == other.metadata()
                and np.array_equal(self.samples, other.samples))


def quantize(analog: np.ndarray) -> tuple[np.ndarray, int]:
    """Round half away from zero and saturate at +-127. Returns (codes, clip count)."""
    rounded = np.sign(analog) * np.floor(np.abs(analog) + 0.5)
    clipped = int(np.count_nonzero(np.abs(rounded) > ADC_MAX))
    codes = np.clip(rounded, -ADC_MAX, ADC_MAX).astype(np.int8)
    return codes, clipped


def _tone(freq, amplitude, phase, t):
    return amplitude * np.cos(2 * np.pi * freq * t + phase)


def _colored(white: np.ndarray, amplitude: np.ndarray) -> np.ndarray:
    return np.fft.irfft(np.fft.rfft(white) * amplitude, n=white.size)


def simulate_block(model: NoiseModel, power: float, length: int,
                   sample_rate: float = DEFAULT_SAMPLE_RATE, seed: int = 0,
                   kind: str | None = None) -> SampleBlock:
    """Draw one trace of `length` samples at `power` mW.

    Deterministic for fixed arguments. `kind` defaults to "dark" at zero
    power and "total" otherwise.
    """
    if length <= 0 or length % 2:
        raise ConfigError("length must be a positive even integer")
    if sample_rate <= 0:
        raise ConfigError("sample_rate must be positive")
    if power < 0:
        raise ConfigError("optical power must be >= 0")
    if kind is None:
        kind = "dark" if power == 0 else "total"

    rng = np.random.default_rng(seed)
    drift = 1.0 + model.drift_rel * rng.uniform(-1.0, 1.0)
    white_q = rng.standard_normal(length)
    white_e = rng.standard_normal(length)

    freqs = np.fft.rfftfreq(length, 1.0 / sample_rate)
    t = np.arange(length) / sample_rate

    q_std = math.sqrt(model.quantum_var_per_mw * power) * drift
    if model.detector_response is None:
        detector = white_q * q_std
    else:
        detector = _colored(white_q, q_std * model.detector_response(freqs))

    for spur in model.spurs:
        if spur.window is None:
            detector = detector + _tone(spur.freq_hz, spur.amplitude, spur.phase, t)
        else:
            lo, hi = max(spur.window[0], 0), min(spur.window[1], length)
            detector[lo:hi] += _tone(spur.freq_hz, spur.amplitude, spur.phase, t[lo:hi])

    if model.quadratic_coeff:
        detector = detector + model.quadratic_coeff * detector**2

    e_amp = np.sqrt(model.electronic_psd(freqs) * sample_rate / 2)
    analog = detector + _colored(white_e, e_amp)

    if model.adc_artifact_period and model.adc_artifact_amplitude:
        p = model.adc_artifact_period
        for k in range(1, p // 2 + 1):
            analog += _tone(k * sample_rate / p, model.adc_artifact_amplitude, 0.0, t)

    codes, clipped = quantize(analog)
    return SampleBlock(codes, float(sample_rate), float(power), int(seed), kind, clipped)


def inject_gsm_burst(block: SampleBlock, freq: float, amplitude: float,
                     window: tuple[int, int], phase: float = 0.0) -> SampleBlock:
    """Add a sinusoidal burst inside the half-open sample `window` only."""
    if not (0 < freq < block.sample_rate / 2):
        raise ConfigError("burst frequency outside (0, Nyquist)")
    lo, hi = window
    if not (0 <= lo <= hi <= len(block)):
        raise ConfigError("burst window outside the block")
    out = block.samples.copy()
    t = np.arange(lo, hi) / block.sample_rate
    seg = out[lo:hi].astype(np.float64) + amplitude * np.sin(2 * np.pi * freq * t + phase)
    codes, clipped = quantize(seg)
    out[lo:hi] = codes
    return replace(block, samples=out, clip_count=block.clip_count + clipped)


def _paths(base: str | Path) -> tuple[Path, Path]:
    base = Path(base)
    if base.suffix in (".bin", ".json"):
        base = base.with_suffix("")
    return base.with_suffix(".bin"), base.with_suffix(".json")


def write_trace(block: SampleBlock, base: str | Path) -> tuple[Path, Path]:
    """Write raw int8 samples to <base>.bin and metadata to <base>.json."""
    raw, meta = _paths(base)
    raw.parent.mkdir(parents=True, exist_ok=True)
    raw.write_bytes(block.samples.astype("<i1").tobytes())
    meta_d = block.metadata()
    meta_d["variance"] = block.variance()
    meta.write_text(json.dumps(meta_d, indent=2, sort_keys=True) + "\n")
    return raw, meta


def read_trace(base: str | Path) -> SampleBlock:
    raw, meta = _paths(base)
    if not raw.exists() or not meta.exists():
        raise DataError(f"missing trace files for {raw.with_suffix('')}")
    m = json.loads(meta.read_text())
    samples = np.frombuffer(raw.read_bytes(), dtype="<i1").astype(np.int8)
    if "n_samples" in m and m["n_samples"] != samples.size:
        raise DataError(f"{raw}: sidecar says {m['n_samples']} samples, file has {samples.size}")
    try:
        return SampleBlock(samples, float(m["sample_rate_hz"]), float(m["optical_power_mw"]),
                           int(m["seed"]), m["kind"], int(m.get("clip_count", 0)))
    except KeyError as exc:
        raise DataError(f"{meta}: missing field {exc}") from None


def power_sweep(model: NoiseModel, powers: Sequence[float], length: int,
                sample_rate: float = DEFAULT_SAMPLE_RATE, seed: int = 0) -> list[SampleBlock]:
    """One trace per power point, seeds derived as seed + index."""
    return [simulate_block(model, p, length, sample_rate, seed + i) for i, p in enumerate(powers)]
