"""Character inventory and transcript cleaning."""

from __future__ import annotations

import re
import string
from dataclasses import dataclass, field

BLANK = "<b>"

_PUNCT = "".join(c for c in string.punctuation if c != "'")
_PUNCT_RE = re.compile("[" + re.escape(_PUNCT) + "]")
_SPACE_RE = re.compile(r"\s+")


@dataclass(frozen=True)
class Alphabet:
    """Output symbols of the acoustic model; blank is always the last index.

    The default instance carries the 29 symbols a-z, space, apostrophe and
    blank. Smaller instances are used by the brute-force oracles.
    """

    chars: tuple[str, ...] = tuple(string.ascii_lowercase) + (" ", "'")
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(set(self.chars)) != len(self.chars):
            raise ValueError("duplicate symbols in alphabet")
        if any(len(c) != 1 for c in self.chars):
            raise ValueError("alphabet symbols must be single characters")
        object.__setattr__(self, "_index", {c: i for i, c in enumerate(self.chars)})

    @property
    def size(self) -> int:
        return len(self.chars) + 1

    @property
    def blank_index(self) -> int:
        return len(self.chars)

    @property
    def symbols(self) -> tuple[str, ...]:
        return self.chars + (BLANK,)

    def __len__(self):
        return self.size

    def __contains__(self, ch):
        return ch in self._index

    def index(self, ch: str) -> int:
        return self._index[ch]

    def symbol(self, idx: int) -> str:
        return self.symbols[idx]

    def encode(self, text: str) -> list[int]:
        try:
            return [self._index[c] for c in text]
        except KeyError as exc:
            raise ValueError(f"character {exc.args[0]!r} not in alphabet") from None

    def decode(self, indices) -> str:
        """Map label indices (no blanks) back to text."""
        blank = self.blank_index
        return "".join(self.chars[i] for i in indices if i != blank)

    def is_clean(self, text: str) -> bool:
        return all(c in self._index for c in text)


ALPHABET = Alphabet()


def normalize_text(text: str) -> str:
    """Lowercase, drop punctuation other than apostrophes, collapse whitespace."""
    text = _PUNCT_RE.sub("", text.lower())
    return _SPACE_RE.sub(" ", text).strip()


def alphabet_fraction(text: str, alphabet: Alphabet = ALPHABET) -> float:
    """Fraction of characters of ``text`` (lowercased) that the alphabet covers."""
    if not text:
        return 0.0
    text = text.lower()
    return sum(c in alphabet for c in text) / len(text)
