"""Noise synthesis by superposition, noise-clip screening and audio jitter."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.signal import get_window

from dspeech.audio import Utterance
from dspeech.errors import ConfigError, DegenerateSNRError
from dspeech.features import fft_size, frame_count, frame_signal, power_spectrum, window_length

log = logging.getLogger(__name__)

DEFAULT_SNR_RANGE_DB = (2.0, 6.0)
MAX_REPEATS = 3
CLIP_WARN_FRACTION = 0.01
DEFAULT_BANDS = 8
DEFAULT_TOLERANCE_DB = 15.0


@dataclass(frozen=True)
class NoiseClip:
    samples: np.ndarray
    sample_rate_hz: int
    source_id: str = ""

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise ValueError("noise clip must be a non-empty mono signal")
        object.__setattr__(self, "samples", samples)


@dataclass
class MixResult:
    utterance: Utterance
    noise: np.ndarray           # gained noise track actually added
    gain: float
    snr_db: float               # measured clean-to-noise ratio before output clipping
    clip_fraction: float
    offsets: list[int]
    sources: list[str]

    @property
    def flagged(self) -> bool:
        return self.clip_fraction > CLIP_WARN_FRACTION


@dataclass(frozen=True)
class BandPowerProfile:
    power: np.ndarray
    band_edges: np.ndarray

    @property
    def power_db(self) -> np.ndarray:
        return 10.0 * np.log10(np.maximum(self.power, 1e-30))


def mean_power(x) -> float:
    x = np.asarray(getattr(x, "samples", x), dtype=np.float64)
    return float(np.mean(x * x))


def compute_snr(signal, noise) -> float:
    """10 log10 of the mean-square power ratio, in dB."""
    s = np.asarray(getattr(signal, "samples", signal), dtype=np.float64)
    n = np.asarray(getattr(noise, "samples", noise), dtype=np.float64)
    if s.shape != n.shape:
        raise ValueError(f"signal and noise lengths differ ({s.size} vs {n.size})")
    ps, pn = mean_power(s), mean_power(n)
    if ps == 0.0 or pn == 0.0:
        raise DegenerateSNRError("degenerate: zero-power signal or noise")
    return 10.0 * math.log10(ps / pn)


def max_offset(clip: NoiseClip, length: int) -> int:
    """Largest start offset that still covers ``length`` samples within the repeat limit."""
    n = clip.samples.size
    hi = min(n - 1, MAX_REPEATS * n - length)
    if hi < 0:
        raise ValueError(f"clip {clip.source_id!r} ({n} samples) cannot tile {length} samples "
                         f"in {MAX_REPEATS} repeats")
    return hi


def noise_track(clip: NoiseClip, length: int, offset: int) -> np.ndarray:
    """Loop ``clip`` starting at ``offset`` until ``length`` samples are filled."""
    n = clip.samples.size
    offset %= n
    reps = math.ceil((offset + length) / n)
    if reps > MAX_REPEATS:
        raise ValueError(f"clip {clip.source_id!r} ({n} samples) would repeat {reps} times "
                         f"to cover {length} samples; limit is {MAX_REPEATS}")
    return np.tile(clip.samples, reps)[offset:offset + length]


def mix_noise(clean: Utterance, clips: Sequence[NoiseClip], target_snr_db: float | None = None,
              seed: int = 0, offsets: Sequence[int] | None = None) -> MixResult:
    """Superimpose every clip onto ``clean`` with one gain hitting the target SNR.

    ``target_snr_db=None`` draws the target uniformly from 2-6 dB;
    ``math.inf`` bypasses the noise entirely.
    """
    if not clips:
        raise ValueError("at least one noise clip is required")
    for clip in clips:
        if clip.sample_rate_hz != clean.sample_rate_hz:
            raise ValueError(f"clip {clip.source_id!r} is {clip.sample_rate_hz} Hz, "
                             f"utterance is {clean.sample_rate_hz} Hz")
    rng = np.random.default_rng(seed)
    if target_snr_db is None:
        target_snr_db = float(rng.uniform(*DEFAULT_SNR_RANGE_DB))
    n = clean.samples.size
    if offsets is None:
        offsets = [int(rng.integers(max_offset(c, n) + 1)) for c in clips]
    tracks = [noise_track(c, n, off) for c, off in zip(clips, offsets)]
    sources = [c.source_id for c in clips]

    if math.isinf(target_snr_db) and target_snr_db > 0:
        return MixResult(clean, np.zeros(n), 0.0, math.inf, 0.0, list(offsets), sources)

    summed = np.sum(tracks, axis=0)
    p_clean, p_noise = mean_power(clean), mean_power(summed)
    if p_clean == 0.0 or p_noise == 0.0:
        raise DegenerateSNRError("degenerate SNR: zero-power clean audio or noise")
    gain = math.sqrt(p_clean / (p_noise * 10.0 ** (target_snr_db / 10.0)))
    applied = np.zeros(n)
    for track in tracks:
        applied = applied + gain * track
    mixed = clean.samples + applied
    clipped = np.abs(mixed) > 1.0
    clip_fraction = float(clipped.mean())
    if clip_fraction > CLIP_WARN_FRACTION:
        log.warning("%s: %.1f%% of mixed samples clipped", clean.utterance_id, 100 * clip_fraction)
    out = replace(clean, samples=np.clip(mixed, -1.0, 1.0))
    return MixResult(out, applied, gain, compute_snr(clean, applied), clip_fraction, list(offsets), sources)


def default_band_edges(sample_rate: int, n_bands: int = DEFAULT_BANDS) -> np.ndarray:
    return np.linspace(0.0, sample_rate / 2.0, n_bands + 1)


def band_power_profile(audio, band_edges=None, sample_rate: int | None = None,
                       window_ms: float = 20.0, hop_ms: float = 10.0) -> BandPowerProfile:
    """Mean power per frequency band, averaged over frames and the band's FFT bins."""
    samples = np.asarray(getattr(audio, "samples", audio), dtype=np.float64)
    rate = sample_rate or getattr(audio, "sample_rate_hz", None)
    if rate is None:
        raise ValueError("sample_rate is required for raw arrays")
    edges = default_band_edges(rate) if band_edges is None else np.asarray(band_edges, dtype=np.float64)
    if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0) \
            or edges[0] != 0.0 or not np.isclose(edges[-1], rate / 2.0):
        raise ConfigError("bad config: band edges must increase strictly from 0 to Nyquist")
    win = window_length(rate, window_ms)
    hop = window_length(rate, hop_ms)
    if frame_count(samples.size, win, hop) < 1:
        raise ValueError("too short: clip shorter than one analysis window")
    n_fft = fft_size(win)
    spec = power_spectrum(frame_signal(samples, win, hop) * get_window("hann", win), n_fft).mean(axis=0)
    freqs = np.arange(spec.size) * rate / n_fft
    band = np.clip(np.searchsorted(edges, freqs, side="right") - 1, 0, edges.size - 2)
    power = np.array([spec[band == b].mean() if np.any(band == b) else 0.0 for b in range(edges.size - 1)])
    return BandPowerProfile(power, edges)


def accept_noise_clip(clip, reference: BandPowerProfile, tolerance_db: float = DEFAULT_TOLERANCE_DB,
                      sample_rate: int | None = None) -> bool:
    """True when every band is within ``tolerance_db`` of the reference profile."""
    if math.isinf(tolerance_db) and tolerance_db > 0:
        return True
    rate = sample_rate or getattr(clip, "sample_rate_hz", None)
    profile = band_power_profile(clip, reference.band_edges, rate)
    return bool(np.all(np.abs(profile.power_db - reference.power_db) <= tolerance_db))


def jitter_translate(utt: Utterance, shift_ms: float) -> Utterance:
    """Delay (positive) or advance (negative) the audio, zero-filling the gap."""
    k = int(round(shift_ms * utt.sample_rate_hz / 1000.0))
    n = utt.samples.size
    if abs(k) >= n:
        raise ValueError(f"bad shift: {shift_ms} ms is not shorter than the utterance")
    if k == 0:
        return utt.with_samples(utt.samples.copy())
    out = np.zeros(n)
    if k > 0:
        out[k:] = utt.samples[:n - k]
    else:
        out[:n + k] = utt.samples[-k:]
    return utt.with_samples(out)
