"""Transcription search over a posterior grid.

The beam search maximizes

    Q(c) = ln P(c|x) + alpha * ln P_lm(c) + beta * word_count(c)

where P(c|x) sums every CTC path collapsing to ``c``. Words are maximal
runs of non-space characters; the LM and the word bonus are applied when a
space closes a word, and once more at the end for the trailing word plus
the sentence-end token, so the final score equals the whole-string formula.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from dspeech.alphabet import ALPHABET, Alphabet
from dspeech.ctc import collapse
from dspeech.errors import ConfigError, OracleLimitError
from dspeech.lm import BOS, EOS, NGramModel
from dspeech.network import PosteriorGrid
from dspeech.scoring import word_errors

LN10 = math.log(10.0)
NEG_INF = -math.inf
TIE_TOL = 1e-12


@dataclass(frozen=True)
class DecoderConfig:
    alpha: float = 1.0
    beta: float = 1.0
    beam_width: int = 1024
    prune_threshold: float = 1e-4

    def validate(self):
        if self.beam_width < 1:
            raise ConfigError("bad config: beam_width must be >= 1")
        if not 0.0 <= self.prune_threshold < 1.0:
            raise ConfigError("bad config: prune_threshold must lie in [0, 1)")
        if self.alpha < 0:
            raise ConfigError("bad config: alpha must be >= 0")


@dataclass
class Hypothesis:
    prefix: str
    log_p_blank: float
    log_p_nonblank: float
    lm_score: float     # ln P_lm of the completed words
    words: int          # completed words
    lm_state: tuple     # context for the next word
    score: float = NEG_INF

    @property
    def log_p(self) -> float:
        return float(np.logaddexp(self.log_p_blank, self.log_p_nonblank))


def _log_probs(posteriors) -> np.ndarray:
    return np.asarray(getattr(posteriors, "log_probs", posteriors), dtype=np.float64)


def greedy_decode(posteriors: PosteriorGrid, alphabet: Alphabet = ALPHABET) -> str:
    """Per-step argmax (lowest index wins ties), then collapse."""
    best = np.argmax(_log_probs(posteriors), axis=1)
    return alphabet.decode(collapse(best, alphabet.blank_index))


class _WordScorer:
    """Memoized ln-domain LM lookups; a ``None`` model scores everything 0."""

    def __init__(self, lm: NGramModel | None):
        self.lm = lm
        self.keep = (lm.order - 1) if lm is not None else 0
        self.cache: dict = {}

    def start(self) -> tuple:
        return (BOS,)

    def word(self, state: tuple, word: str) -> tuple[float, tuple]:
        if self.lm is None:
            return 0.0, state
        key = (state, word)
        hit = self.cache.get(key)
        if hit is None:
            score = self.lm.score_word(state, word) * LN10
            nxt = (state + (self.lm.map_word(word),))[-self.keep:] if self.keep else ()
            hit = self.cache[key] = (score, nxt)
        return hit

    def end(self, state: tuple) -> float:
        return 0.0 if self.lm is None else self.word(state, EOS)[0]

    def string(self, text: str) -> tuple[float, int]:
        words = text.split()
        if self.lm is None:
            return 0.0, len(words)
        return self.lm.score_sequence(words) * LN10, len(words)


def _pick(scored: Iterable[tuple[float, str]]) -> tuple[str, float]:
    """Highest score; near-ties go to the lexicographically smallest string."""
    scored = list(scored)
    top = max(s for s, _ in scored)
    return min((c, s) for s, c in scored if s >= top - TIE_TOL)


def beam_search(posteriors: PosteriorGrid, lm: NGramModel | None, config: DecoderConfig,
                alphabet: Alphabet = ALPHABET, return_beam: bool = False):
    """CTC prefix beam search with word-level LM fusion.

    Returns ``(text, Q)``; with ``return_beam`` also the final hypotheses.
    """
    config.validate()
    lp = _log_probs(posteriors)
    if lp.shape[1] != alphabet.size:
        raise ValueError(f"grid has {lp.shape[1]} columns, alphabet has {alphabet.size}")
    blank = alphabet.blank_index
    chars = alphabet.chars
    scorer = _WordScorer(lm)
    alpha, beta = config.alpha, config.beta
    floor = math.log(config.prune_threshold) if config.prune_threshold > 0 else NEG_INF

    beam = {"": Hypothesis("", 0.0, NEG_INF, 0.0, 0, scorer.start())}
    for t in range(lp.shape[0]):
        row = lp[t]
        candidates = [k for k in range(alphabet.size) if k != blank and row[k] >= floor]
        nxt: dict[str, list] = {}

        def slot(prefix, parent, ch):
            entry = nxt.get(prefix)
            if entry is None:
                entry = nxt[prefix] = [NEG_INF, NEG_INF, parent, ch]
            return entry

        for prefix, hyp in beam.items():
            total = hyp.log_p
            e = slot(prefix, hyp, None)
            e[0] = np.logaddexp(e[0], total + row[blank])
            last = prefix[-1] if prefix else None
            for k in candidates:
                c = chars[k]
                p = row[k]
                if c == last:
                    e[1] = np.logaddexp(e[1], hyp.log_p_nonblank + p)
                    ext = slot(prefix + c, hyp, c)
                    ext[1] = np.logaddexp(ext[1], hyp.log_p_blank + p)
                else:
                    ext = slot(prefix + c, hyp, c)
                    ext[1] = np.logaddexp(ext[1], total + p)

        new_beam = {}
        for prefix, (pb, pnb, parent, ch) in nxt.items():
            if ch is None or prefix in beam:
                base = beam[prefix] if prefix in beam else parent
                lm_score, words, state = base.lm_score, base.words, base.lm_state
            else:
                lm_score, words, state = parent.lm_score, parent.words, parent.lm_state
                if ch == " " and parent.prefix and parent.prefix[-1] != " ":
                    w_score, state = scorer.word(state, parent.prefix.rsplit(" ", 1)[-1])
                    lm_score += w_score
                    words += 1
            hyp = Hypothesis(prefix, float(pb), float(pnb), lm_score, words, state)
            hyp.score = hyp.log_p + alpha * lm_score + beta * words
            new_beam[prefix] = hyp
        if len(new_beam) > config.beam_width:
            kept = sorted(new_beam.values(), key=lambda h: (-h.score, h.prefix))[:config.beam_width]
            new_beam = {h.prefix: h for h in kept}
        beam = new_beam

    finals = []
    for hyp in beam.values():
        lm_score, words, state = hyp.lm_score, hyp.words, hyp.lm_state
        if hyp.prefix and hyp.prefix[-1] != " ":
            w_score, state = scorer.word(state, hyp.prefix.rsplit(" ", 1)[-1])
            lm_score += w_score
            words += 1
        lm_score += scorer.end(state)
        finals.append((hyp.log_p + alpha * lm_score + beta * words, hyp.prefix))
    text, score = _pick(finals)
    if return_beam:
        return text, score, finals
    return text, score


def exhaustive_decode(posteriors: PosteriorGrid, lm: NGramModel | None, alpha: float, beta: float,
                      alphabet: Alphabet | None = None):
    """Global maximum of Q by enumerating every path (T' <= 4, <= 5 symbols)."""
    lp = _log_probs(posteriors)
    n_steps, n_sym = lp.shape
    if n_steps > 4 or n_sym > 5:
        raise OracleLimitError("oracle limit: exhaustive decode needs T' <= 4 and <= 5 symbols")
    if alphabet is None:
        alphabet = ALPHABET if n_sym == ALPHABET.size else None
    if alphabet is None or alphabet.size != n_sym:
        raise ValueError("exhaustive_decode needs an alphabet matching the grid width")
    blank = alphabet.blank_index
    mass: dict[str, list[float]] = {}
    for path in itertools.product(range(n_sym), repeat=n_steps):
        text = alphabet.decode(collapse(path, blank))
        mass.setdefault(text, []).append(sum(lp[t, k] for t, k in enumerate(path)))
    scorer = _WordScorer(lm)
    scored = []
    for text, terms in mass.items():
        log_p = float(np.logaddexp.reduce(terms))
        lm_score, words = scorer.string(text)
        scored.append((log_p + alpha * lm_score + beta * words, text))
    return _pick(scored)


def tune_alpha_beta(dev_set: Sequence[tuple[PosteriorGrid, str]], lm: NGramModel | None, grid_spec,
                    base: DecoderConfig | None = None, alphabet: Alphabet = ALPHABET,
                    return_table: bool = False):
    """Grid search over (alpha, beta) minimizing corpus WER.

    ``grid_spec`` is either a sequence of (alpha, beta) pairs or a mapping with
    ``"alpha"`` and ``"beta"`` value lists (their product is searched). Ties
    go to the smaller alpha, then the smaller beta.
    """
    if isinstance(grid_spec, dict):
        pairs = [(a, b) for a in grid_spec.get("alpha", ()) for b in grid_spec.get("beta", ())]
    else:
        pairs = [tuple(p) for p in grid_spec]
    if not pairs:
        raise ConfigError("bad config: empty alpha/beta grid")
    if not dev_set:
        raise ConfigError("bad config: empty development set")
    base = base or DecoderConfig()
    table = []
    for a, b in pairs:
        cfg = DecoderConfig(a, b, base.beam_width, base.prune_threshold)
        edits = words = 0
        for grid, ref in dev_set:
            hyp, _ = beam_search(grid, lm, cfg, alphabet)
            e, n = word_errors(ref, hyp)
            edits += e
            words += n
        table.append((edits / max(words, 1), a, b))
    best = min(table)
    if return_table:
        return (best[1], best[2]), table
    return best[1], best[2]
