"""Command line driver: simulate, calibrate, extract, report, rate.

Settings are layered: built-in defaults, then a JSON config file
(``--config``), then environment variables for paths only
(VACRNG_TRACE, VACRNG_DARK, VACRNG_OUT_DIR, VACRNG_CALIBRATION), then
command line flags.

Exit codes: 0 success, 2 configuration error, 3 data error,
4 entropy-safety violation.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import analysis, signal_sim, spectral
from .entropy import ChannelCalibration, EntropyReport, build_entropy_report
from .errors import ConfigError, DataError, EntropySafetyError
from .extract import (DEFAULT_EPSILON, DEFAULT_HASH_RATIO, BinningConfig, SeededToeplitz,
                      block_words, pack_bits, plan_extraction, run_pipeline)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_SAFETY = 0, 2, 3, 4
SCHEMA_VERSION = 1
PATH_ENV = {"trace": "VACRNG_TRACE", "dark": "VACRNG_DARK", "out_dir": "VACRNG_OUT_DIR",
            "calibration": "VACRNG_CALIBRATION"}
_SIM_CHUNK = 1 << 22


@dataclass
class RunConfig:
    trace: str | None = None
    dark: str | None = None
    out_dir: str = "out"
    calibration: str | None = None
    sweep: list = field(default_factory=list)
    sample_rate: float = signal_sim.DEFAULT_SAMPLE_RATE
    delta_f: float = 1e5
    f_max: float = 1e9
    scheme: str = "cyclic"
    n: int = 16
    period_sigma: float = 0.5
    offset: float = 0.0
    epsilon: float = DEFAULT_EPSILON
    hash_ratio: float = DEFAULT_HASH_RATIO
    band_mask: list = field(default_factory=lambda: analysis.default_gsm_mask().to_list())
    model: dict = field(default_factory=dict)
    power_mw: float = 4.5
    duration: float = 1e-4
    sweep_powers_mw: list = field(default_factory=list)
    sim_seed: int = 0
    extract_seed: int = 1
    seed_file: str | None = None
    workers: int = 1
    extractor: str = "toeplitz"
    smooth_window: float = 10e6
    spur_threshold_db: float = 20.0
    hmin_per_value: float = 14.0

    @property
    def block_length(self) -> int:
        return int(round(self.sample_rate / self.delta_f))

    def validate(self) -> "RunConfig":
        if not (self.sample_rate > 0 and self.delta_f > 0):
            raise ConfigError("sample_rate and delta_f must be positive")
        n = self.sample_rate / self.delta_f
        if abs(n - round(n)) > 1e-9 * n or round(n) % 2 or round(n) < 4:
            raise ConfigError(f"delta_f {self.delta_f} must divide sample_rate "
                              f"{self.sample_rate} into an even block length")
        if not (0 < self.f_max <= self.sample_rate / 2):
            raise ConfigError("f_max must lie in (0, sample_rate/2]")
        if self.scheme not in ("cyclic", "equal_area"):
            raise ConfigError(f"unknown binning scheme {self.scheme!r}")
        if not (1 <= self.n <= 24):
            raise ConfigError("n must lie in [1, 24]")
        if not (0 < self.epsilon <= 1):
            raise ConfigError("epsilon must lie in (0, 1]")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        try:
            analysis.BandMask.from_list(self.band_mask).check_range(self.sample_rate / 2)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    def mask(self) -> analysis.BandMask:
        return analysis.BandMask.from_list(self.band_mask)

    def binning(self) -> BinningConfig:
        return BinningConfig(self.scheme, self.n, self.period_sigma, self.offset)

    def noise_model(self) -> signal_sim.NoiseModel:
        try:
            return signal_sim.NoiseModel.from_dict(self.model, self.sample_rate)
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"invalid noise model: {exc}") from None

    def out(self, name: str) -> Path:
        return Path(self.out_dir) / name

    def calibration_path(self) -> Path:
        return Path(self.calibration) if self.calibration else self.out("calibration.json")


def load_config(path: str | None, overrides: dict, env=os.environ) -> RunConfig:
    """Merge defaults < file < path env vars < flags."""
    known = {f.name for f in dataclasses.fields(RunConfig)}
    values: dict = {}
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path}: {exc}") from None
        unknown = set(data) - known - {"schema_version"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        data.pop("schema_version", None)
        values.update(data)
    for key, var in PATH_ENV.items():
        if env.get(var):
            values[key] = env[var]
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return RunConfig(**values).validate()
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _write_json(path: Path, payload: dict) -> Path:
    payload = {"schema_version": SCHEMA_VERSION, **payload}
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2) + "\n")
    return path


def _emit(payload: dict):
    print(json.dumps({"schema_version": SCHEMA_VERSION, **payload}))


# --- simulate ---------------------------------------------------------------

def _shift_model(model: signal_sim.NoiseModel, offset: int, fs: float) -> signal_sim.NoiseModel:
    """Model for a chunk starting at sample `offset`: tone phases and windows follow."""
    spurs = []
    for s in model.spurs:
        phase = s.phase + 2 * math.pi * s.freq_hz * offset / fs
        window = None if s.window is None else (s.window[0] - offset, s.window[1] - offset)
        spurs.append(dataclasses.replace(s, phase=phase, window=window))
    return dataclasses.replace(model, spurs=tuple(spurs))


def simulate_trace(model: signal_sim.NoiseModel, power: float, n_samples: int, fs: float,
                   seed: int, chunk: int) -> signal_sim.SampleBlock:
    """Long trace built chunkwise; chunk seeds come from one SeedSequence."""
    count = -(-n_samples // chunk)
    seeds = np.random.SeedSequence(seed).generate_state(count, dtype=np.uint64)
    parts, clips = [], 0
    for i in range(count):
        length = min(chunk, n_samples - i * chunk)
        blk = signal_sim.simulate_block(_shift_model(model, i * chunk, fs), power, length, fs,
                                        int(seeds[i]))
        parts.append(blk.samples)
        clips += blk.clip_count
    return signal_sim.SampleBlock(np.concatenate(parts), fs, float(power), int(seed),
                                  "dark" if power == 0 else "total", clips)


def cmd_simulate(cfg: RunConfig) -> int:
    n_blocks = int(math.floor(cfg.duration * cfg.delta_f + 1e-9))
    if cfg.duration <= 0 or n_blocks < 1:
        raise ConfigError("duration must cover at least one block (1/delta_f)")
    model = cfg.noise_model()
    n_samples = n_blocks * cfg.block_length
    chunk = cfg.block_length * max(1, _SIM_CHUNK // cfg.block_length)
    out_dir = Path(cfg.out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory {out_dir} not writable: {exc}") from None

    runs = [("total", cfg.power_mw, cfg.sim_seed), ("dark", 0.0, cfg.sim_seed + 1)]
    runs += [(f"sweep_{i}", p, cfg.sim_seed + 2 + i) for i, p in enumerate(cfg.sweep_powers_mw)]
    summary = []
    for name, power, seed in runs:
        blk = simulate_trace(model, power, n_samples, cfg.sample_rate, seed, chunk)
        signal_sim.write_trace(blk, out_dir / name)
        summary.append({"name": name, "optical_power_mw": power, "n_samples": n_samples,
                        "variance": blk.variance(), "clip_count": blk.clip_count})
    _emit({"command": "simulate", "traces": summary})
    return EXIT_OK


# --- calibrate --------------------------------------------------------------

def _trace_path(cfg: RunConfig, which: str) -> Path:
    value = getattr(cfg, which)
    return Path(value) if value else cfg.out(which if which == "dark" else "total")


def _load_trace(path: Path, cfg: RunConfig) -> signal_sim.SampleBlock:
    blk = signal_sim.read_trace(path)
    if not math.isclose(blk.sample_rate, cfg.sample_rate, rel_tol=1e-12):
        raise DataError(f"{path}: sample rate {blk.sample_rate} differs from configured "
                        f"{cfg.sample_rate}")
    return blk


def calibrate(cfg: RunConfig) -> ChannelCalibration:
    dark = _load_trace(_trace_path(cfg, "dark"), cfg)
    total = _load_trace(_trace_path(cfg, "trace"), cfg)
    if dark.kind != "dark":
        raise DataError("dark input is not a dark run")
    n = cfg.block_length
    psd_d = spectral.psd_of_trace(dark.samples, dark.sample_rate, n)
    psd_t = spectral.psd_of_trace(total.samples, total.sample_rate, n)
    cal = ChannelCalibration.from_psds(psd_d, psd_t, cfg.f_max)
    retained = ~np.atleast_1d(cfg.mask().contains(cal.freqs))
    cal.check_quantum_variance(retained)
    return cal


def cmd_calibrate(cfg: RunConfig) -> int:
    cal = calibrate(cfg)
    path = cfg.calibration_path()
    path.parent.mkdir(parents=True, exist_ok=True)
    cal.save(path)
    ratio = cal.psd_total / cal.psd_dark
    _emit({"command": "calibrate", "calibration": str(path), "bins": int(cal.freqs.size),
           "blocks_total": cal.blocks_total, "blocks_dark": cal.blocks_dark,
           "median_total_to_dark": float(np.median(ratio))})
    return EXIT_OK


# --- extract ----------------------------------------------------------------

def _seed(cfg: RunConfig, plan):
    if cfg.seed_file:
        try:
            return SeededToeplitz.load(cfg.seed_file, plan.hash_in_bits, plan.hash_out_bits)
        except FileNotFoundError:
            raise ConfigError(f"seed file {cfg.seed_file} not found") from None
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    return cfg.extract_seed


def cmd_extract(cfg: RunConfig) -> int:
    cal = ChannelCalibration.load(cfg.calibration_path())
    if not math.isclose(cal.delta_f, cfg.delta_f, rel_tol=1e-9):
        raise DataError(f"calibration delta_f {cal.delta_f} differs from configured {cfg.delta_f}")
    report, _ = build_entropy_report(cal, cfg.n, cfg.scheme, cfg.period_sigma, cfg.offset)
    plan = plan_extraction(report, cfg.epsilon, cfg.mask(), cfg.delta_f, cfg.f_max,
                           cfg.hash_ratio)
    trace = _load_trace(_trace_path(cfg, "trace"), cfg)
    bits, report = run_pipeline([trace], cal, plan, cfg.binning(), _seed(cfg, plan),
                                cfg.workers, cfg.extractor)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "bitstream.bin").write_bytes(pack_bits(bits))
    _write_json(out_dir / "entropy_report.json", report.to_dict())
    _write_json(out_dir / "plan.json", plan.to_dict())
    print(f"rate: {plan.summary_line()} blocks={report.meta['blocks']} bits={bits.size}")
    return EXIT_OK


# --- report -----------------------------------------------------------------

def _section(bundle: dict, name: str, fn):
    try:
        bundle[name] = fn()
    except (DataError, ValueError) as exc:
        bundle[name] = {"status": f"skipped: {exc}"}


def cmd_report(cfg: RunConfig) -> int:
    trace = _load_trace(_trace_path(cfg, "trace"), cfg)
    n = cfg.block_length
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    psd = spectral.psd_of_trace(trace.samples, trace.sample_rate, n)
    spectral.export_psd_json(psd, out_dir / "psd.json")
    pos = psd.power > 0
    analysis.write_csv(out_dir / "psd.csv", {"freq_hz": psd.freqs[pos],
                                            "power_db": spectral.to_decibel(psd.power[pos])})
    bundle: dict = {"command": "report"}

    def spurs():
        found = analysis.detect_spurs(psd, cfg.spur_threshold_db)
        return {"status": "ok", "threshold_db": cfg.spur_threshold_db, "spurs": found,
                "regions": analysis.group_spurs(found, psd.delta_f),
                "masked": [s["freq_hz"] for s in found if s["freq_hz"] in cfg.mask()]}

    def correlations():
        fr = spectral.frames(trace.samples, n)

        def chunks():
            for i in range(0, fr.shape[0], 64):
                yield spectral.dft_frames(fr[i:i + 64], trace.sample_rate)[:, 1:-1]

        rep = analysis.correlation_scan(chunks(), psd.delta_f, cfg.smooth_window)
        analysis.write_csv(out_dir / "correlation.csv",
                           {"freq_hz": rep.freqs, "c_re_im": rep.re_im,
                            "c_t": rep.consecutive_blocks, "c_f": rep.neighbor_bins})
        return {"status": "ok", **rep.to_dict()}

    def linearity():
        if len(cfg.sweep) < 3:
            raise DataError(f"need >=3 powers, got {len(cfg.sweep)}")
        pts = []
        for path in cfg.sweep:
            blk = _load_trace(Path(path), cfg)
            p = spectral.psd_of_trace(blk.samples, blk.sample_rate, n)
            k = np.arange(1, int(cfg.f_max / p.delta_f) + 1)
            pts.append((blk.optical_power, float(np.mean(p.power[k]))))
        slope, offset, r2 = analysis.fit_linearity(pts)
        analysis.write_csv(out_dir / "linearity.csv",
                           {"power_mw": [p for p, _ in pts], "psd": [v for _, v in pts]})
        return {"status": "ok", "points": pts, "slope": slope, "offset": offset, "r_squared": r2}

    def occupancy():
        cal = ChannelCalibration.load(cfg.calibration_path())
        report, binnings = build_entropy_report(cal, cfg.n, "cyclic", cfg.period_sigma,
                                                cfg.offset)
        keep = [i for i, b in enumerate(binnings)
                if b is not None and cal.freqs[i] not in cfg.mask()]
        bins = cal.bin_indices()[keep]
        widths = np.array([binnings[i].b for i in keep])
        fr = spectral.frames(trace.samples, n)
        words = np.concatenate([block_words(f, bins, widths, cfg.n, cfg.offset) for f in fr])
        return {"status": "ok", "words": int(words.size),
                "max_to_mean": analysis.bin_occupancy_scan(words, cfg.n)}

    _section(bundle, "spurs", spurs)
    _section(bundle, "correlation", correlations)
    _section(bundle, "linearity", linearity)
    _section(bundle, "occupancy", occupancy)
    _write_json(out_dir / "report.json", bundle)
    _emit({k: (v.get("status") if isinstance(v, dict) else v) for k, v in bundle.items()})
    return EXIT_OK


# --- rate -------------------------------------------------------------------

def cmd_rate(cfg: RunConfig) -> int:
    k = np.arange(1, int(math.floor(cfg.f_max / cfg.delta_f + 1e-9)) + 1)
    report = EntropyReport.uniform(k * cfg.delta_f, cfg.n, cfg.hmin_per_value)
    plan = plan_extraction(report, cfg.epsilon, cfg.mask(), cfg.delta_f, cfg.f_max,
                           cfg.hash_ratio)
    print(json.dumps(plan.to_dict()))
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "calibrate": cmd_calibrate, "extract": cmd_extract,
            "report": cmd_report, "rate": cmd_rate}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vacrng", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--trace")
    p.add_argument("--dark")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--calibration")
    p.add_argument("--sweep", nargs="+", help="trace bases of a power sweep")
    p.add_argument("--sample-rate", dest="sample_rate", type=float)
    p.add_argument("--delta-f", dest="delta_f", type=float)
    p.add_argument("--f-max", dest="f_max", type=float)
    p.add_argument("--scheme", choices=["cyclic", "equal_area"])
    p.add_argument("--n", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--hash-ratio", dest="hash_ratio", type=float)
    p.add_argument("--no-mask", action="store_true", help="disable all band masks")
    p.add_argument("--power-mw", dest="power_mw", type=float)
    p.add_argument("--duration", type=float, help="simulated trace length in seconds")
    p.add_argument("--sim-seed", dest="sim_seed", type=int)
    p.add_argument("--extract-seed", dest="extract_seed", type=int)
    p.add_argument("--seed-file", dest="seed_file")
    p.add_argument("--workers", type=int)
    p.add_argument("--extractor", choices=["toeplitz", "sha512"])
    p.add_argument("--hmin-per-value", dest="hmin_per_value", type=float)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {k: v for k, v in vars(args).items() if k not in ("command", "config", "no_mask")}
    if args.no_mask:
        overrides["band_mask"] = []
    try:
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EntropySafetyError as exc:
        print(f"entropy safety violation: {exc}", file=sys.stderr)
        return EXIT_SAFETY
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    raise SystemExit(main())
