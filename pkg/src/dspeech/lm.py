"""Backoff n-gram word language model with ARPA import/export.

Two estimators share one storage form:

* ``interpolated_kneser_ney`` (default): one absolute discount per order
  from count-of-counts, continuation counts below the top order, the
  unigram level interpolated with a uniform distribution so that every
  vocabulary word (including ``<unk>``) keeps some mass.
* ``katz``: backed-off absolute discounting on raw counts at every order,
  kept as a cross-check.

Both are written as ordinary ARPA backoff tables: stored n-grams carry
their final log10 probability and contexts carry log10 backoff weights.
"""

from __future__ import annotations

import io
import logging
import math
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from dspeech.alphabet import alphabet_fraction, normalize_text
from dspeech.errors import ArpaParseError, ConfigError, NoDataError

log = logging.getLogger(__name__)

BOS, EOS, UNK = "<s>", "</s>", "<unk>"
SPECIALS = (BOS, EOS, UNK)
NO_PROB = -99.0
SMOOTHINGS = ("interpolated_kneser_ney", "katz")
FALLBACK_DISCOUNT = 0.5


@dataclass(frozen=True)
class LmTrainConfig:
    order: int = 3
    vocab_cap: int = 495_000
    min_char_coverage: float = 0.95
    smoothing: str = "interpolated_kneser_ney"

    def validate(self):
        if self.order < 1:
            raise ConfigError("bad config: order must be >= 1")
        if self.vocab_cap < 1:
            raise ConfigError("bad config: vocab_cap must be >= 1")
        if self.smoothing not in SMOOTHINGS:
            raise ConfigError(f"bad config: smoothing must be one of {SMOOTHINGS}")


def clean_phrases(corpus: Iterable[str], min_char_coverage: float = 0.95) -> list[list[str]]:
    """Drop phrases mostly outside the alphabet; normalize and tokenize the rest."""
    out = []
    for phrase in corpus:
        phrase = phrase.strip()
        if not phrase or alphabet_fraction(phrase) < min_char_coverage:
            continue
        words = normalize_text(phrase).split()
        if words:
            out.append(words)
    return out


def build_vocab(corpus: Iterable[str], cap: int, min_char_coverage: float = 0.95) -> frozenset[str]:
    """The ``cap`` most frequent words; ties go to the lexicographically smaller word."""
    if cap < 1:
        raise ConfigError("bad config: vocab cap must be >= 1")
    sentences = clean_phrases(corpus, min_char_coverage)
    counts = Counter(w for s in sentences for w in s if w not in SPECIALS)
    if not counts:
        raise NoDataError("no data: corpus empty after filtering")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return frozenset(w for w, _ in ranked[:cap])


def _discount(counts: Iterable[float]) -> float:
    hist = Counter(counts)
    n1, n2 = hist.get(1, 0), hist.get(2, 0)
    if n1 == 0 or n2 == 0:
        return FALLBACK_DISCOUNT
    return n1 / (n1 + 2 * n2)


@dataclass
class NGramModel:
    order: int
    vocab: frozenset[str]
    probs: list[dict[tuple[str, ...], float]] = field(repr=False)
    backoffs: list[dict[tuple[str, ...], float]] = field(repr=False)

    @property
    def predictable(self) -> list[str]:
        """Every token a context can be followed by (all but ``<s>``)."""
        return sorted(w for w in self.vocab if w != BOS)

    def map_word(self, word: str) -> str:
        return word if word in self.vocab else UNK

    def score_word(self, context: Sequence[str], word: str) -> float:
        """log10 P(word | context) with standard backoff; OOV words score as ``<unk>``."""
        word = self.map_word(word)
        ctx = tuple(self.map_word(w) for w in context)[-(self.order - 1):] if self.order > 1 else ()
        penalty = 0.0
        for start in range(len(ctx) + 1):
            hist = ctx[start:]
            gram = hist + (word,)
            table = self.probs[len(gram) - 1]
            if gram in table:
                return penalty + table[gram]
            if hist:
                penalty += self.backoffs[len(hist) - 1].get(hist, 0.0)
        raise KeyError(f"{word!r} missing from the unigram table")

    def score_sequence(self, words: Sequence[str]) -> float:
        ctx = [BOS]
        total = 0.0
        for w in list(words) + [EOS]:
            total += self.score_word(ctx, w)
            ctx.append(self.map_word(w))
        return total

    def ngram_counts(self) -> list[int]:
        return [len(t) for t in self.probs]


def train_ngram(corpus: Iterable[str], config: LmTrainConfig, vocab: frozenset[str] | None = None) -> NGramModel:
    config.validate()
    corpus = list(corpus)
    if vocab is None:
        vocab = build_vocab(corpus, config.vocab_cap, config.min_char_coverage)
    sentences = clean_phrases(corpus, config.min_char_coverage)
    if not sentences:
        raise NoDataError("no data: corpus empty after filtering")
    order = config.order
    tokens = [[BOS] + [w if w in vocab else UNK for w in s] + [EOS] for s in sentences]

    raw: list[Counter] = [Counter() for _ in range(order)]
    for sent in tokens:
        for n in range(1, order + 1):
            for i in range(len(sent) - n + 1):
                raw[n - 1][tuple(sent[i:i + n])] += 1
    del raw[0][(BOS,)]

    if config.smoothing == "katz":
        counts = raw
    else:
        counts = _continuation_counts(raw, order)

    full_vocab = frozenset(vocab) | set(SPECIALS)
    predictable = sorted(w for w in full_vocab if w != BOS)
    probs: list[dict] = [dict() for _ in range(order)]
    backoffs: list[dict] = [dict() for _ in range(order)]

    # unigram level: discounted counts interpolated with a uniform floor
    d1 = _discount(counts[0].values())
    total = sum(counts[0].values())
    seen = sum(1 for c in counts[0].values() if c > 0)
    gamma = d1 * seen / total
    uni = {}
    for w in predictable:
        c = counts[0].get((w,), 0)
        uni[w] = max(c - d1, 0.0) / total + gamma / len(predictable)
    probs[0] = {(w,): math.log10(p) for w, p in uni.items()}
    probs[0][(BOS,)] = NO_PROB

    lower = lambda hist, w: 10.0 ** _backoff_score(probs, backoffs, hist, w)  # noqa: E731
    for n in range(2, order + 1):
        dn = _discount(counts[n - 1].values())
        by_hist: dict[tuple, dict[str, float]] = defaultdict(dict)
        for gram, c in counts[n - 1].items():
            by_hist[gram[:-1]][gram[-1]] = c
        for hist in sorted(by_hist):
            nexts = by_hist[hist]
            a_total = sum(nexts.values())
            if config.smoothing == "katz":
                _katz_context(probs, backoffs, n, hist, nexts, a_total, dn, predictable, lower)
            else:
                gamma = dn * len(nexts) / a_total
                for w, c in sorted(nexts.items()):
                    p = max(c - dn, 0.0) / a_total + gamma * lower(hist[1:], w)
                    probs[n - 1][hist + (w,)] = math.log10(p)
                backoffs[n - 2][hist] = math.log10(gamma)
    return NGramModel(order, full_vocab, probs, backoffs)


def _continuation_counts(raw: list[Counter], order: int) -> list[Counter]:
    """Kneser-Ney adjusted counts: distinct left extensions below the top order."""
    adjusted = [Counter() for _ in range(order)]
    adjusted[order - 1] = Counter(raw[order - 1])
    for n in range(1, order):
        for gram in raw[n]:
            adjusted[n - 1][gram[1:]] += 1
        for gram, c in raw[n - 1].items():
            if gram[0] == BOS:
                adjusted[n - 1][gram] = c
    return adjusted


def _katz_context(probs, backoffs, n, hist, nexts, c_total, dn, predictable, lower):
    seen_mass = 0.0
    lower_mass = 0.0
    for w, c in nexts.items():
        seen_mass += (c - dn) / c_total
        lower_mass += lower(hist[1:], w)
    left = 1.0 - lower_mass
    if left <= 1e-12:
        # every predictable word was seen here: no mass to back off with
        for w, c in sorted(nexts.items()):
            probs[n - 1][hist + (w,)] = math.log10(c / c_total)
        return
    for w, c in sorted(nexts.items()):
        probs[n - 1][hist + (w,)] = math.log10((c - dn) / c_total)
    backoffs[n - 2][hist] = math.log10((1.0 - seen_mass) / left)


def _backoff_score(probs, backoffs, hist: tuple, word: str) -> float:
    penalty = 0.0
    for start in range(len(hist) + 1):
        h = hist[start:]
        gram = h + (word,)
        if gram in probs[len(gram) - 1]:
            return penalty + probs[len(gram) - 1][gram]
        if h:
            penalty += backoffs[len(h) - 1].get(h, 0.0)
    raise KeyError(word)


def _fmt(v: float) -> str:
    return f"{v:.9f}"


def save_arpa(model: NGramModel, sink):
    """Write ARPA text to a path or a text stream; output is fully sorted."""
    if isinstance(sink, (str, Path)):
        with open(sink, "w", encoding="utf-8") as fh:
            save_arpa(model, fh)
        return
    sink.write("\n\\data\\\n")
    for n, table in enumerate(model.probs, start=1):
        sink.write(f"ngram {n}={len(table)}\n")
    for n, table in enumerate(model.probs, start=1):
        sink.write(f"\n\\{n}-grams:\n")
        bows = model.backoffs[n - 1] if n < model.order else {}
        for gram in sorted(table):
            line = f"{_fmt(table[gram])}\t{' '.join(gram)}"
            if gram in bows:
                line += f"\t{_fmt(bows[gram])}"
            sink.write(line + "\n")
    sink.write("\n\\end\\\n")


def dumps_arpa(model: NGramModel) -> str:
    buf = io.StringIO()
    save_arpa(model, buf)
    return buf.getvalue()


_SECTION = re.compile(r"^\\(\d+)-grams:$")
_COUNT = re.compile(r"^ngram\s+(\d+)\s*=\s*(\d+)$")


def load_arpa(source) -> NGramModel:
    if isinstance(source, (str, Path)) and "\n" not in str(source):
        with open(source, encoding="utf-8") as fh:
            return load_arpa(fh)
    if isinstance(source, str):
        source = io.StringIO(source)

    declared: dict[int, int] = {}
    probs: dict[int, dict] = {}
    backoffs: dict[int, dict] = {}
    state = "preamble"
    current = 0
    section_line = 0

    def close_section(lineno):
        if current and len(probs[current]) != declared.get(current, -1):
            raise ArpaParseError(
                f"parse error in section \\{current}-grams: declared {declared.get(current)} "
                f"entries, found {len(probs[current])}", section_line)

    lineno = 0
    for lineno, raw_line in enumerate(source, start=1):
        line = raw_line.strip()
        if not line:
            continue
        if state == "preamble":
            if line == "\\data\\":
                state = "header"
            continue
        if state == "header":
            m = _COUNT.match(line)
            if m:
                declared[int(m.group(1))] = int(m.group(2))
                continue
            state = "body"
        if line == "\\end\\":
            close_section(lineno)
            state = "done"
            break
        m = _SECTION.match(line)
        if m:
            close_section(lineno)
            current = int(m.group(1))
            if current not in declared:
                raise ArpaParseError(f"parse error: section \\{current}-grams not declared in header", lineno)
            probs[current], backoffs[current] = {}, {}
            section_line = lineno
            continue
        if not current:
            raise ArpaParseError(f"parse error: unexpected line {line!r}", lineno)
        parts = line.split()
        if len(parts) not in (current + 1, current + 2):
            raise ArpaParseError(f"parse error in section \\{current}-grams: malformed entry {line!r}", lineno)
        try:
            prob = float(parts[0])
            bow = float(parts[current + 1]) if len(parts) == current + 2 else None
        except ValueError:
            raise ArpaParseError(f"parse error in section \\{current}-grams: bad number in {line!r}", lineno)
        gram = tuple(parts[1:current + 1])
        probs[current][gram] = prob
        if bow is not None:
            backoffs[current][gram] = bow
    if state != "done":
        raise ArpaParseError("parse error: missing \\end\\ marker", lineno)
    if not declared or sorted(declared) != list(range(1, max(declared) + 1)):
        raise ArpaParseError("parse error: header must declare orders 1..N", None)
    order = max(declared)
    for n in range(1, order + 1):
        if n not in probs:
            raise ArpaParseError(f"parse error: section \\{n}-grams missing", None)
    vocab = frozenset(g[0] for g in probs[1])
    if UNK not in vocab:
        log.warning("ARPA file has no %s unigram; OOV words cannot be scored", UNK)
    return NGramModel(order, vocab,
                      [probs[n] for n in range(1, order + 1)],
                      [backoffs[n] for n in range(1, order + 1)])
