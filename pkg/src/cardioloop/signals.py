"""Synthetic arrhythmia RR/waveform generation and waveform CSV ingestion.

Records carry per-sample rhythm labels as uint8 codes; the code values are
the ``RhythmClass`` IntEnum members, so ``record.sample_labels == RhythmClass.AFIB``
works elementwise.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum
from pathlib import Path

import numpy as np

INTERVAL_MIN_S = 0.2
INTERVAL_MAX_S = 3.0


class RhythmClass(IntEnum):
    NSR = 0
    AFIB = 1
    BRADY = 2
    TACHY = 3


ARRHYTHMIC = (RhythmClass.AFIB, RhythmClass.BRADY, RhythmClass.TACHY)


class Channel(Enum):
    PPG = "PPG"
    ECG_LEAD_I = "ECG1"


class ParameterError(ValueError):
    pass


class ParseError(ValueError):
    def __init__(self, message: str, line_no: int):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass
class RateParams:
    """Per-class heart-rate model: mean rate and RR-interval coefficient of variation."""

    mean_bpm: float
    interval_cv: float


def default_rate_params() -> dict[RhythmClass, RateParams]:
    return {
        RhythmClass.NSR: RateParams(70.0, 0.03),
        RhythmClass.AFIB: RateParams(90.0, 0.24),
        RhythmClass.BRADY: RateParams(50.0, 0.03),
        RhythmClass.TACHY: RateParams(120.0, 0.03),
    }


@dataclass
class SimConfig:
    n_episodes_per_class: int = 50
    rr_per_record: int = 100
    median_episode_len: int = 15
    clean_to_artifact_ratio: int = 30
    fs_ppg: float = 125.0
    fs_ecg: float = 500.0
    seed: int = 0
    class_rate_params: dict[RhythmClass, RateParams] = field(default_factory=default_rate_params)

    def __post_init__(self):
        if self.n_episodes_per_class < 0:
            raise ParameterError("n_episodes_per_class must be >= 0")
        if self.rr_per_record < 1 or self.median_episode_len < 1:
            raise ParameterError("rr_per_record and median_episode_len must be >= 1")
        if self.clean_to_artifact_ratio < 1:
            raise ParameterError("clean_to_artifact_ratio must be >= 1")
        if self.fs_ppg <= 0 or self.fs_ecg <= 0:
            raise ParameterError("sampling rates must be positive")


@dataclass
class ArtifactConfig:
    baseline_wander_amp: float = 0.3      # fraction of peak signal amplitude
    baseline_wander_freq: float = 0.25    # Hz
    spike_prob: float = 0.05              # per-second probability
    noise_sd: float = 0.05                # additive amplitude units
    premature_beat_rate: float = 0.05     # per-beat probability

    def __post_init__(self):
        for name in ("baseline_wander_amp", "baseline_wander_freq", "noise_sd"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be >= 0")
        for name in ("spike_prob", "premature_beat_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ParameterError(f"{name} must be in [0, 1]")


@dataclass
class RRSeries:
    intervals: np.ndarray       # seconds, each in [0.2, 3.0]
    interval_labels: np.ndarray  # uint8 RhythmClass codes, same length
    seed: int

    def __post_init__(self):
        self.intervals = np.asarray(self.intervals, dtype=np.float64)
        self.interval_labels = np.asarray(self.interval_labels, dtype=np.uint8)
        if self.intervals.shape != self.interval_labels.shape:
            raise ParameterError("intervals and interval_labels must have equal length")
        if self.intervals.size and (
            self.intervals.min() < INTERVAL_MIN_S or self.intervals.max() > INTERVAL_MAX_S
        ):
            raise ParameterError(
                f"intervals must lie in [{INTERVAL_MIN_S}, {INTERVAL_MAX_S}] s"
            )

    @property
    def duration_s(self) -> float:
        return float(self.intervals.sum())


@dataclass
class WaveformRecord:
    samples: np.ndarray
    fs: float
    channel: Channel
    sample_labels: np.ndarray   # uint8 RhythmClass codes, one per sample
    source: str = "simulated"   # "simulated" | "ingested"

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.sample_labels = np.asarray(self.sample_labels, dtype=np.uint8)
        if self.samples.size == 0:
            raise ParameterError("samples must be nonempty")
        if self.samples.shape != self.sample_labels.shape:
            raise ParameterError("sample_labels must match samples length")
        if self.fs <= 0:
            raise ParameterError("fs must be positive")

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.fs


def _interval_sigma(params: RateParams) -> tuple[float, float]:
    mean_s = 60.0 / params.mean_bpm
    return mean_s, params.interval_cv * mean_s


def _draw_intervals(rng: np.random.Generator, rhythm: RhythmClass,
                    params: RateParams, n: int) -> np.ndarray:
    mean_s, sd_s = _interval_sigma(params)
    if rhythm == RhythmClass.AFIB:
        # serially independent lognormal draws give the irregularly irregular pattern
        sigma = math.sqrt(math.log(1.0 + params.interval_cv ** 2))
        mu = math.log(mean_s) - 0.5 * sigma ** 2
        x = rng.lognormal(mu, sigma, n)
    else:
        x = rng.normal(mean_s, sd_s, n)
    return np.clip(x, INTERVAL_MIN_S, INTERVAL_MAX_S)


def episode_length_p(median_len: int) -> float:
    """Geometric success probability whose distribution median equals median_len."""
    return 1.0 - 2.0 ** (-1.0 / median_len)


def gen_rr(rhythm: RhythmClass, n: int, cfg: SimConfig, seed: int) -> RRSeries:
    """Generate n RR intervals; non-NSR classes embed one labeled episode in NSR background."""
    if n < 1:
        raise ParameterError("n must be >= 1")
    rng = np.random.default_rng(seed)
    nsr_params = cfg.class_rate_params[RhythmClass.NSR]
    labels = np.full(n, RhythmClass.NSR, dtype=np.uint8)
    if rhythm == RhythmClass.NSR:
        intervals = _draw_intervals(rng, RhythmClass.NSR, nsr_params, n)
        return RRSeries(intervals, labels, seed)

    length = int(min(rng.geometric(episode_length_p(cfg.median_episode_len)), n))
    start = int(rng.integers(0, n - length + 1))
    intervals = _draw_intervals(rng, RhythmClass.NSR, nsr_params, n)
    episode = _draw_intervals(rng, rhythm, cfg.class_rate_params[rhythm], length)
    intervals[start:start + length] = episode
    labels[start:start + length] = rhythm
    return RRSeries(intervals, labels, seed)


def steady_rr(rhythm: RhythmClass, duration_s: float, cfg: SimConfig,
              seed: int) -> RRSeries:
    """Single-class RR covering at least duration_s (monitoring-window synth)."""
    if duration_s <= 0:
        raise ParameterError("duration_s must be positive")
    params = cfg.class_rate_params[rhythm]
    # worst-case slow beats still need this many intervals
    n = int(math.ceil(duration_s / (60.0 / params.mean_bpm))) + 8
    rng = np.random.default_rng(seed)
    intervals = _draw_intervals(rng, rhythm, params, n)
    keep = int(np.searchsorted(np.cumsum(intervals), duration_s) + 1)
    keep = min(max(keep, 1), n)
    labels = np.full(keep, rhythm, dtype=np.uint8)
    return RRSeries(intervals[:keep], labels, seed)


def inject_premature_beats(rr: RRSeries, rate: float, seed: int) -> RRSeries:
    """Shorten random beats to 60% and pay the deficit back as a compensatory pause."""
    if not 0.0 <= rate <= 1.0:
        raise ParameterError("rate must be in [0, 1]")
    if rate == 0.0 or rr.intervals.size < 2:
        return replace(rr)
    rng = np.random.default_rng(seed)
    intervals = rr.intervals.copy()
    i = 0
    while i < intervals.size - 1:
        if rng.random() < rate:
            pair = intervals[i] + intervals[i + 1]
            short = max(0.6 * intervals[i], INTERVAL_MIN_S)
            intervals[i] = short
            intervals[i + 1] = min(pair - short, INTERVAL_MAX_S)
            i += 2
        else:
            i += 1
    return RRSeries(intervals, rr.interval_labels.copy(), rr.seed)


# Beat morphologies as Gaussian mixtures over beat phase in [0, 1):
# (center, width, amplitude).  PPG: two-Gaussian systolic complex plus a
# dicrotic bump.  ECG: five-Gaussian P-Q-R-S-T. Peak-normalized below.
_PPG_COMPONENTS = ((0.25, 0.09, 1.0), (0.42, 0.12, 0.45), (0.68, 0.07, 0.28))
_ECG_COMPONENTS = (
    (0.16, 0.040, 0.12),
    (0.28, 0.013, -0.16),
    (0.32, 0.016, 1.00),
    (0.36, 0.014, -0.24),
    (0.60, 0.065, 0.32),
)


def _template(phase: np.ndarray, components) -> np.ndarray:
    out = np.zeros_like(phase)
    for center, width, amp in components:
        out += amp * np.exp(-((phase - center) ** 2) / (2.0 * width ** 2))
    return out


def _template_scale(components) -> float:
    grid = np.linspace(0.0, 1.0, 4001)
    return 1.0 / float(_template(grid, components).max())


_PPG_SCALE = _template_scale(_PPG_COMPONENTS)
_ECG_SCALE = _template_scale(_ECG_COMPONENTS)


def _synthesize(rr: RRSeries, fs: float, components, scale: float,
                channel: Channel) -> WaveformRecord:
    if rr.intervals.size == 0:
        raise ParameterError("RR series is empty")
    if fs <= 0:
        raise ParameterError("fs must be positive")
    edges = np.concatenate(([0.0], np.cumsum(rr.intervals)))
    n_samples = int(round(edges[-1] * fs))
    t = np.arange(n_samples) / fs
    idx = np.clip(np.searchsorted(edges, t, side="right") - 1, 0, rr.intervals.size - 1)
    phase = (t - edges[idx]) / rr.intervals[idx]
    samples = scale * _template(phase, components)
    labels = rr.interval_labels[idx]
    return WaveformRecord(samples, fs, channel, labels)


def rr_to_ppg(rr: RRSeries, fs: float = 125.0) -> WaveformRecord:
    """Render a unit-peak PPG waveform, one beat template per RR interval."""
    return _synthesize(rr, fs, _PPG_COMPONENTS, _PPG_SCALE, Channel.PPG)


def rr_to_ecg(rr: RRSeries, fs: float = 500.0) -> WaveformRecord:
    """Render a unit-R-peak Lead-I ECG waveform, one P-QRS-T template per RR interval."""
    return _synthesize(rr, fs, _ECG_COMPONENTS, _ECG_SCALE, Channel.ECG_LEAD_I)


def inject_artifacts(w: WaveformRecord, a: ArtifactConfig, seed: int) -> WaveformRecord:
    """Add baseline wander, Gaussian noise and motion spikes; labels untouched."""
    rng = np.random.default_rng(seed)
    samples = w.samples.copy()
    n = samples.size
    ref = float(np.abs(samples).max())
    if a.baseline_wander_amp > 0 and a.baseline_wander_freq > 0:
        t = np.arange(n) / w.fs
        phase = rng.uniform(0.0, 2.0 * math.pi)
        samples += a.baseline_wander_amp * ref * np.sin(
            2.0 * math.pi * a.baseline_wander_freq * t + phase
        )
    if a.noise_sd > 0:
        samples += rng.normal(0.0, a.noise_sd, n)
    if a.spike_prob > 0 and ref > 0:
        width = max(int(0.06 * w.fs), 2)
        decay = np.exp(-np.arange(width) / (0.25 * width))
        for sec in range(int(n / w.fs)):
            if rng.random() >= a.spike_prob:
                continue
            at = int(rng.integers(sec * w.fs, min((sec + 1) * w.fs, n)))
            amp = rng.uniform(0.5, 2.0) * ref * (1 if rng.random() < 0.5 else -1)
            seg = min(width, n - at)
            samples[at:at + seg] += amp * decay[:seg]
    return WaveformRecord(samples, w.fs, w.channel, w.sample_labels.copy(), w.source)


@dataclass
class DatasetRecord:
    record: WaveformRecord
    rhythm: RhythmClass
    artifact: bool
    seed: int


@dataclass
class SimDataset:
    records: list[DatasetRecord]
    channel: Channel
    fs: float

    def __len__(self) -> int:
        return len(self.records)


def simulate_dataset(cfg: SimConfig, channel: Channel = Channel.PPG,
                     artifact_cfg: ArtifactConfig | None = None) -> SimDataset:
    """Simulate the balanced episode corpus: one record per episode, per class.

    Produces n_episodes_per_class records for each arrhythmic class plus the
    same count of NSR records; every (clean_to_artifact_ratio + 1)-th record
    gets premature beats and waveform artifacts.
    """
    artifact_cfg = artifact_cfg or ArtifactConfig()
    fs = cfg.fs_ppg if channel == Channel.PPG else cfg.fs_ecg
    synth = rr_to_ppg if channel == Channel.PPG else rr_to_ecg
    classes = [RhythmClass.AFIB, RhythmClass.BRADY, RhythmClass.TACHY, RhythmClass.NSR]
    total = cfg.n_episodes_per_class * len(classes)
    seeds = np.random.SeedSequence(cfg.seed).generate_state(3 * max(total, 1), np.uint32)
    period = cfg.clean_to_artifact_ratio + 1

    records: list[DatasetRecord] = []
    for i in range(total):
        rhythm = classes[i // max(cfg.n_episodes_per_class, 1)]
        rr_seed = int(seeds[3 * i])
        rr = gen_rr(rhythm, cfg.rr_per_record, cfg, rr_seed)
        corrupt = (i + 1) % period == 0
        if corrupt:
            rr = inject_premature_beats(rr, artifact_cfg.premature_beat_rate,
                                        int(seeds[3 * i + 1]))
        rec = synth(rr, fs)
        if corrupt:
            rec = inject_artifacts(rec, artifact_cfg, int(seeds[3 * i + 2]))
        records.append(DatasetRecord(rec, rhythm, corrupt, rr_seed))
    return SimDataset(records, channel, fs)


def _channel_by_name(name: str) -> Channel:
    for ch in Channel:
        if ch.value == name:
            return ch
    raise ParameterError(f"unknown channel {name!r}")


def save_waveform_csv(w: WaveformRecord, path: str | Path) -> None:
    """One amplitude per line with ,LABEL suffix; header carries fs and channel."""
    lines = [f"fs={w.fs!r},channel={w.channel.value}"]
    names = [c.name for c in RhythmClass]
    lines.extend(
        f"{float(v)!r},{names[c]}" for v, c in zip(w.samples, w.sample_labels)
    )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_waveform_csv(path: str | Path, fs: float | None = None,
                      channel: Channel | None = None) -> WaveformRecord:
    """Parse a waveform CSV; explicit fs/channel arguments override the header."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines:
        raise ParameterError(f"{path}: empty file")
    start = 0
    if lines[0].startswith("fs="):
        try:
            fs_part, ch_part = lines[0].split(",", 1)
            header_fs = float(fs_part[3:])
            header_ch = _channel_by_name(ch_part.split("=", 1)[1].strip())
        except (ValueError, IndexError) as exc:
            raise ParseError(f"bad header: {exc}", 1) from None
        fs = fs if fs is not None else header_fs
        channel = channel if channel is not None else header_ch
        start = 1
    if fs is None:
        raise ParameterError("fs required when the file has no header")
    channel = channel or Channel.PPG

    samples: list[float] = []
    labels: list[int] = []
    name_to_code = {c.name: int(c) for c in RhythmClass}
    for line_no, line in enumerate(lines[start:], start=start + 1):
        if not line.strip():
            continue
        parts = line.split(",")
        try:
            samples.append(float(parts[0]))
        except ValueError:
            raise ParseError(f"not a number: {parts[0]!r}", line_no) from None
        if len(parts) > 1 and parts[1].strip():
            label = parts[1].strip()
            if label not in name_to_code:
                raise ParseError(f"unknown label {label!r}", line_no)
            labels.append(name_to_code[label])
        else:
            labels.append(int(RhythmClass.NSR))
    if not samples:
        raise ParameterError(f"{path}: no samples")
    return WaveformRecord(np.array(samples), fs, channel, np.array(labels, dtype=np.uint8),
                          source="ingested")


def save_dataset(ds: SimDataset, out_dir: str | Path) -> Path:
    """Write per-record CSVs plus a manifest; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, dr in enumerate(ds.records):
        name = f"rec_{i:04d}.csv"
        save_waveform_csv(dr.record, out / name)
        entries.append({
            "path": name,
            "class": dr.rhythm.name,
            "artifact": dr.artifact,
            "seed": dr.seed,
        })
    manifest = {
        "manifest_version": 1,
        "channel": ds.channel.value,
        "fs": ds.fs,
        "records": entries,
    }
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return manifest_path


def load_dataset(dir_path: str | Path) -> SimDataset:
    root = Path(dir_path)
    manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    channel = _channel_by_name(manifest["channel"])
    records = []
    for entry in manifest["records"]:
        rec = load_waveform_csv(root / entry["path"], fs=manifest["fs"], channel=channel)
        records.append(DatasetRecord(rec, RhythmClass[entry["class"]],
                                     bool(entry["artifact"]), int(entry["seed"])))
    return SimDataset(records, channel, float(manifest["fs"]))
