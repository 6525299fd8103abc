"""Manifest ingestion: ``wav_path<TAB>transcript<TAB>speaker_id`` per line.

Extra columns (as written by augmentation runs) are kept but ignored.
"""

from __future__ import annotations

import logging
import wave
from dataclasses import dataclass, field
from pathlib import Path

from dspeech.alphabet import ALPHABET, normalize_text
from dspeech.audio import SUPPORTED_RATES, Utterance, load_utterance
from dspeech.errors import ManifestError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ManifestEntry:
    wav_path: Path
    transcript: str
    speaker_id: str | None
    utterance_id: str
    extra: tuple[str, ...] = ()


@dataclass(frozen=True)
class Rejection:
    line: int
    reason: str      # "format", "alphabet", "io" or "duplicate"
    detail: str


@dataclass
class ManifestDataset:
    """Validated entries; audio is read only when an utterance is requested."""

    path: Path
    entries: list[ManifestEntry]
    rejected: list[Rejection] = field(default_factory=list)
    target_rate: int | None = None

    def __len__(self):
        return len(self.entries)

    def load(self, i: int) -> Utterance:
        e = self.entries[i]
        return load_utterance(e.wav_path, e.transcript, e.speaker_id, e.utterance_id, self.target_rate)

    def __iter__(self):
        return (self.load(i) for i in range(len(self)))

    def utterances(self) -> list[Utterance]:
        return list(self)


def _check_audio(path: Path) -> str | None:
    try:
        with wave.open(str(path), "rb") as fh:
            if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
                return "not mono 16-bit PCM"
            if fh.getframerate() not in SUPPORTED_RATES:
                return f"unsupported rate {fh.getframerate()}"
            if fh.getnframes() == 0:
                return "empty audio"
    except (OSError, EOFError, wave.Error) as exc:
        return str(exc)
    return None


def ingest_manifest(path, target_rate: int | None = None) -> ManifestDataset:
    """Validate every line; bad lines are reported, zero good lines is fatal.

    Relative WAV paths resolve against the manifest's directory.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ManifestError(f"{path}: cannot read manifest ({exc})") from exc
    entries: list[ManifestEntry] = []
    rejected: list[Rejection] = []
    seen: set[str] = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip():
            continue
        cols = raw.rstrip("\n").split("\t")
        if len(cols) < 2:
            rejected.append(Rejection(lineno, "format", "expected wav_path<TAB>transcript<TAB>speaker_id"))
            continue
        wav = Path(cols[0].strip())
        if not wav.is_absolute():
            wav = path.parent / wav
        transcript = normalize_text(cols[1])
        if not transcript or not ALPHABET.is_clean(transcript):
            rejected.append(Rejection(lineno, "alphabet", f"transcript {cols[1]!r} leaves the alphabet"))
            continue
        problem = _check_audio(wav)
        if problem is not None:
            rejected.append(Rejection(lineno, "io", f"{wav}: {problem}"))
            continue
        utt_id = wav.stem
        if utt_id in seen:
            rejected.append(Rejection(lineno, "duplicate", f"utterance id {utt_id!r} repeats"))
            continue
        seen.add(utt_id)
        speaker = cols[2].strip() if len(cols) > 2 and cols[2].strip() else None
        entries.append(ManifestEntry(wav, transcript, speaker, utt_id, tuple(cols[3:])))
    for r in rejected:
        log.warning("%s:%d rejected (%s): %s", path, r.line, r.reason, r.detail)
    if not entries:
        raise ManifestError(f"{path}: no valid lines ({len(rejected)} rejected)")
    return ManifestDataset(path, entries, rejected, target_rate)
