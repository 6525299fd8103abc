"""Log filter-bank spectrogram features and their normalization schemes.

Frames are Hann-windowed, zero-padded to the next power of two, and turned
into a one-sided power spectrum ``|X|^2 / N``. Triangular filters with
linearly spaced centres between 0 Hz and Nyquist pool that spectrum; the log
of each bank output (floored at ``LOG_FLOOR``) plus a log-energy column make
up one feature frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
from scipy.signal import get_window

from dspeech.audio import SUPPORTED_RATES, Utterance
from dspeech.errors import ConfigError, NoDataError

LOG_FLOOR = 1e-10
STD_FLOOR = 1e-6

RAW = "raw"
PER_UTTERANCE = "per_utterance"
PER_SPEAKER = "per_speaker"
GLOBAL = "global"
NORMALIZATIONS = (RAW, PER_UTTERANCE, PER_SPEAKER, GLOBAL)


@dataclass(frozen=True)
class FeatureSequence:
    """T x (n_banks + 1) feature matrix; the last column is log energy."""

    frames: np.ndarray
    bank_count: int
    normalization: str = RAW
    speaker_id: str | None = None
    utterance_id: str = ""

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[1] != self.bank_count + 1:
            raise ValueError(f"frames must be T x {self.bank_count + 1}, got {frames.shape}")
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"unknown normalization {self.normalization!r}")
        object.__setattr__(self, "frames", frames)

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 16000
    window_ms: float = 20.0
    hop_ms: float = 10.0
    n_banks: int = 160
    normalization: str = PER_UTTERANCE
    # "features": shift all log columns by the mean log energy;
    # "audio": rescale samples to unit mean-square power before framing.
    per_utterance_mode: str = "features"

    @property
    def dim(self) -> int:
        return self.n_banks + 1

    def validate(self):
        if self.sample_rate not in SUPPORTED_RATES:
            raise ConfigError(f"bad rate: {self.sample_rate}")
        if self.window_ms < self.hop_ms or self.hop_ms <= 0:
            raise ConfigError("window_ms must be >= hop_ms > 0")
        if self.normalization not in NORMALIZATIONS:
            raise ConfigError(f"unknown normalization {self.normalization!r}")
        if self.per_utterance_mode not in ("features", "audio"):
            raise ConfigError(f"unknown per_utterance_mode {self.per_utterance_mode!r}")
        n_bins = fft_size(window_length(self.sample_rate, self.window_ms)) // 2 + 1
        if not 1 <= self.n_banks <= n_bins:
            raise ConfigError(f"n_banks must be in [1, {n_bins}] for this window")


def window_length(sample_rate: int, window_ms: float) -> int:
    return int(round(sample_rate * window_ms / 1000.0))


def fft_size(win_len: int) -> int:
    return 1 << max(0, math.ceil(math.log2(win_len)))


def frame_count(num_samples: int, win_len: int, hop_len: int) -> int:
    if num_samples < win_len:
        return 0
    return (num_samples - win_len) // hop_len + 1


def frame_signal(samples: np.ndarray, win_len: int, hop_len: int) -> np.ndarray:
    n = frame_count(samples.size, win_len, hop_len)
    view = np.lib.stride_tricks.sliding_window_view(samples, win_len)
    return view[: (n - 1) * hop_len + 1 : hop_len]


def power_spectrum(frames: np.ndarray, n_fft: int) -> np.ndarray:
    """One-sided ``|X|^2 / n_fft`` of already-windowed frames."""
    spec = np.fft.rfft(frames, n=n_fft, axis=-1)
    return (spec.real ** 2 + spec.imag ** 2) / n_fft


def bank_centers(n_banks: int, sample_rate: int) -> np.ndarray:
    return np.linspace(0.0, sample_rate / 2.0, n_banks + 2)[1:-1]


def filterbank(n_banks: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular filters, linearly spaced from 0 Hz to Nyquist; shape (n_banks, n_fft//2+1)."""
    edges = np.linspace(0.0, sample_rate / 2.0, n_banks + 2)
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def frame_spectrogram(utt: Utterance, window_ms: float = 20.0, hop_ms: float = 10.0,
                      n_banks: int = 160) -> FeatureSequence:
    """Raw log filter-bank features of an utterance.

    Raises:
        ValueError: "bad rate" for rates other than 8/16 kHz, "too short" when
            the audio does not fill a single window.
    """
    rate = utt.sample_rate_hz
    if rate not in SUPPORTED_RATES:
        raise ValueError(f"bad rate: {rate}")
    if window_ms < hop_ms:
        raise ValueError("window_ms must be >= hop_ms")
    win_len = window_length(rate, window_ms)
    hop_len = window_length(rate, hop_ms)
    n_fft = fft_size(win_len)
    if not 1 <= n_banks <= n_fft // 2 + 1:
        raise ValueError(f"n_banks={n_banks} exceeds the {n_fft // 2 + 1} FFT bins available")
    if utt.samples.size < win_len:
        raise ValueError(f"too short: {utt.samples.size} samples < window of {win_len}")

    frames = frame_signal(utt.samples, win_len, hop_len) * get_window("hann", win_len)
    power = power_spectrum(frames, n_fft)
    banks = power @ filterbank(n_banks, n_fft, rate).T
    energy = np.sum(frames * frames, axis=1, keepdims=True)
    out = np.log(np.maximum(np.hstack([banks, energy]), LOG_FLOOR))
    return FeatureSequence(out, n_banks, RAW, utt.speaker_id, utt.utterance_id)


def _require_raw(fs: FeatureSequence):
    if fs.normalization != RAW:
        raise ValueError(f"double normalization: sequence already {fs.normalization}")


def normalize_per_utterance(fs: FeatureSequence) -> FeatureSequence:
    """Remove the utterance's mean log energy from every column.

    Shifting all log columns by the same constant is what rescaling the audio
    power would do, so the result is invariant to input gain.
    """
    _require_raw(fs)
    shift = fs.frames[:, -1].mean()
    return replace(fs, frames=fs.frames - shift, normalization=PER_UTTERANCE)


def scale_to_unit_power(utt: Utterance) -> Utterance:
    """Audio-domain counterpart of per-utterance normalization."""
    power = float(np.mean(utt.samples ** 2))
    if power <= 0.0:
        return utt
    return utt.with_samples(utt.samples / math.sqrt(power))


def normalize_per_speaker(batch: Sequence[FeatureSequence]) -> list[FeatureSequence]:
    groups: dict[str, list[int]] = {}
    for i, fs in enumerate(batch):
        if fs.speaker_id is None:
            raise ValueError(f"no speaker: sequence {fs.utterance_id!r} has no speaker_id")
        _require_raw(fs)
        groups.setdefault(fs.speaker_id, []).append(i)
    out: list[FeatureSequence | None] = [None] * len(batch)
    for members in groups.values():
        stacked = np.vstack([batch[i].frames for i in members])
        mean = stacked.mean(axis=0)
        std = np.maximum(stacked.std(axis=0), STD_FLOOR)
        for i in members:
            out[i] = replace(batch[i], frames=(batch[i].frames - mean) / std,
                             normalization=PER_SPEAKER)
    return out


@dataclass
class GlobalFeatureStats:
    """Streaming per-bin mean and population variance (Chan et al. merge)."""

    mean: np.ndarray
    m2: np.ndarray
    count: int = 0
    std_floor: float = field(default=STD_FLOOR)

    @classmethod
    def empty(cls, dim: int) -> "GlobalFeatureStats":
        return cls(np.zeros(dim), np.zeros(dim), 0)

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def variance(self) -> np.ndarray:
        return self.m2 / self.count

    @property
    def std(self) -> np.ndarray:
        return np.maximum(np.sqrt(self.variance), self.std_floor)

    def merge(self, other: "GlobalFeatureStats") -> "GlobalFeatureStats":
        if other.count == 0:
            return GlobalFeatureStats(self.mean.copy(), self.m2.copy(), self.count, self.std_floor)
        if self.count == 0:
            return GlobalFeatureStats(other.mean.copy(), other.m2.copy(), other.count, self.std_floor)
        n = self.count + other.count
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.count / n)
        m2 = self.m2 + other.m2 + delta ** 2 * (self.count * other.count / n)
        return GlobalFeatureStats(mean, m2, n, self.std_floor)

    def update(self, frames: np.ndarray) -> "GlobalFeatureStats":
        frames = np.asarray(frames, dtype=np.float64)
        part_mean = frames.mean(axis=0)
        part = GlobalFeatureStats(part_mean, ((frames - part_mean) ** 2).sum(axis=0),
                                  frames.shape[0], self.std_floor)
        return self.merge(part)

    def dumps(self) -> str:
        lines = [f"{self.count} {self.dim}",
                 " ".join(f"{v:.17g}" for v in self.mean),
                 " ".join(f"{v:.17g}" for v in self.variance)]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "GlobalFeatureStats":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if len(lines) != 3:
            raise ValueError("stats file must hold a header, a mean line and a variance line")
        count, dim = (int(v) for v in lines[0].split())
        mean = np.array([float(v) for v in lines[1].split()])
        var = np.array([float(v) for v in lines[2].split()])
        if mean.size != dim or var.size != dim or count <= 0:
            raise ValueError("stats file dimensions do not match its header")
        return cls(mean, var * count, count)


def compute_global_stats(corpus: Iterable[FeatureSequence]) -> GlobalFeatureStats:
    stats = None
    for fs in corpus:
        if stats is None:
            stats = GlobalFeatureStats.empty(fs.dim)
        stats = stats.update(fs.frames)
    if stats is None or stats.count == 0:
        raise NoDataError("no data: empty corpus")
    return stats


def apply_global_stats(fs: FeatureSequence, stats: GlobalFeatureStats) -> FeatureSequence:
    if stats.count <= 0:
        raise NoDataError("no data: stats aggregated zero frames")
    if stats.dim != fs.dim:
        raise ValueError(f"stats have {stats.dim} bins, features have {fs.dim}")
    _require_raw(fs)
    return replace(fs, frames=(fs.frames - stats.mean) / stats.std, normalization=GLOBAL)


def featurize(utt: Utterance, config: FeatureConfig, stats: GlobalFeatureStats | None = None) -> FeatureSequence:
    """Single-utterance feature pipeline; per-speaker needs :func:`featurize_batch`."""
    if config.normalization == PER_UTTERANCE and config.per_utterance_mode == "audio":
        fs = frame_spectrogram(scale_to_unit_power(utt), config.window_ms, config.hop_ms, config.n_banks)
        return replace(fs, normalization=PER_UTTERANCE)
    fs = frame_spectrogram(utt, config.window_ms, config.hop_ms, config.n_banks)
    if config.normalization == RAW:
        return fs
    if config.normalization == PER_UTTERANCE:
        return normalize_per_utterance(fs)
    if config.normalization == GLOBAL:
        if stats is None:
            raise ConfigError("global normalization requires feature statistics")
        return apply_global_stats(fs, stats)
    raise ConfigError("per_speaker normalization needs the whole batch; use featurize_batch")


def featurize_batch(utts: Sequence[Utterance], config: FeatureConfig,
                    stats: GlobalFeatureStats | None = None) -> list[FeatureSequence]:
    if config.normalization == PER_SPEAKER:
        raw = [frame_spectrogram(u, config.window_ms, config.hop_ms, config.n_banks) for u in utts]
        return normalize_per_speaker(raw)
    return [featurize(u, config, stats) for u in utts]


def write_feature_dump(fs: FeatureSequence, path):
    with open(path, "w") as fh:
        fh.write(f"{fs.frame_count} {fs.dim}\n")
        for row in fs.frames:
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def read_feature_dump(path) -> np.ndarray:
    with open(path) as fh:
        t, f = (int(v) for v in fh.readline().split())
        data = np.loadtxt(fh, ndmin=2) if t else np.zeros((0, f))
    if data.shape != (t, f):
        raise ValueError(f"{path}: header says {t}x{f}, body is {data.shape[0]}x{data.shape[1]}")
    return data
