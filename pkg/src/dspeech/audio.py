"""Utterance container and 16-bit PCM WAV input/output."""

from __future__ import annotations

import wave
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

from dspeech.alphabet import ALPHABET

SUPPORTED_RATES = (8000, 16000)


@dataclass(frozen=True)
class Utterance:
    samples: np.ndarray
    sample_rate_hz: int
    transcript: str = ""
    speaker_id: str | None = None
    utterance_id: str = ""

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError("samples must be one-dimensional (mono)")
        if samples.size == 0:
            raise ValueError("samples must be non-empty")
        object.__setattr__(self, "samples", samples)

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz

    def with_samples(self, samples) -> "Utterance":
        return replace(self, samples=np.asarray(samples, dtype=np.float64))

    def validate(self):
        if self.sample_rate_hz not in SUPPORTED_RATES:
            raise ValueError(f"bad rate: {self.sample_rate_hz}")
        if not ALPHABET.is_clean(self.transcript):
            raise ValueError(f"transcript outside alphabet: {self.transcript!r}")


def read_wav(path) -> tuple[np.ndarray, int]:
    """Read mono 16-bit PCM; returns samples scaled into [-1, 1) and the rate."""
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1:
            raise ValueError(f"{path}: expected mono audio, got {fh.getnchannels()} channels")
        if fh.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit PCM, got {8 * fh.getsampwidth()}-bit")
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return samples, rate


def write_wav(path, samples, sample_rate_hz: int):
    samples = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    pcm = np.clip(np.round(samples * 32768.0), -32768, 32767).astype("<i2")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate_hz)
        fh.writeframes(pcm.tobytes())


def resample(samples: np.ndarray, from_hz: int, to_hz: int) -> np.ndarray:
    """Integer-factor conversion between 8 kHz and 16 kHz only."""
    if from_hz == to_hz:
        return samples
    if {from_hz, to_hz} != {8000, 16000}:
        raise ValueError(f"bad rate: cannot resample {from_hz} -> {to_hz}")
    if to_hz > from_hz:
        return resample_poly(samples, 2, 1)
    return resample_poly(samples, 1, 2)


def load_utterance(path, transcript="", speaker_id=None, utterance_id=None, target_rate=None) -> Utterance:
    samples, rate = read_wav(path)
    if target_rate is not None and rate != target_rate:
        samples = resample(samples, rate, target_rate)
        rate = target_rate
    if utterance_id is None:
        utterance_id = Path(path).stem
    return Utterance(samples, rate, transcript, speaker_id, utterance_id)
