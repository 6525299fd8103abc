"""Synthetic speech-like corpus: every character is rendered as its own tone.

Good enough to check that the whole pipeline can fit a handful of
utterances; not meant to resemble real speech.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from dspeech.alphabet import ALPHABET
from dspeech.audio import Utterance, write_wav

TOY_TRANSCRIPTS = (
    "hello world",
    "good morning",
    "the cat sat",
    "blue sky",
    "open the door",
    "yes",
    "no way",
    "boston",
    "it's fine",
    "quick fox",
)


def char_frequency(ch: str, sample_rate: int) -> float:
    """Evenly spaced tone frequencies between 5% and 45% of the sample rate."""
    k = ALPHABET.index(ch)
    n = len(ALPHABET.chars)
    return sample_rate * (0.05 + 0.40 * k / (n - 1))


def synthesize(text: str, sample_rate: int = 8000, char_ms: float = 70.0, gap_ms: float = 30.0,
               edge_ms: float = 60.0, amplitude: float = 0.3, noise: float = 0.003,
               seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    n_char = int(sample_rate * char_ms / 1000)
    n_gap = int(sample_rate * gap_ms / 1000)
    n_edge = int(sample_rate * edge_ms / 1000)
    t = np.arange(n_char) / sample_rate
    ramp = np.minimum(1.0, np.minimum(np.arange(n_char), np.arange(n_char)[::-1]) / (0.1 * n_char))
    parts = [np.zeros(n_edge)]
    for ch in text:
        phase = rng.uniform(0, 2 * np.pi)
        parts.append(amplitude * ramp * np.sin(2 * np.pi * char_frequency(ch, sample_rate) * t + phase))
        parts.append(np.zeros(n_gap))
    parts.append(np.zeros(n_edge))
    audio = np.concatenate(parts)
    return audio + noise * rng.standard_normal(audio.size)


def toy_corpus(sample_rate: int = 8000, seed: int = 0, transcripts=TOY_TRANSCRIPTS,
               speakers: int = 2) -> list[Utterance]:
    out = []
    for i, text in enumerate(transcripts):
        audio = synthesize(text, sample_rate, seed=seed * 1000 + i)
        out.append(Utterance(audio, sample_rate, text, f"spk{i % speakers}", f"toy{i:02d}"))
    return out


def write_toy_corpus(directory, sample_rate: int = 8000, seed: int = 0) -> Path:
    """Write WAVs plus a ``manifest.tsv``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for utt in toy_corpus(sample_rate, seed):
        wav = directory / f"{utt.utterance_id}.wav"
        write_wav(wav, utt.samples, sample_rate)
        lines.append(f"{wav.name}\t{utt.transcript}\t{utt.speaker_id}")
    manifest = directory / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest
