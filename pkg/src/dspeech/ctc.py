"""CTC loss with its exact gradient, plus a path-enumeration oracle."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from dspeech.alphabet import ALPHABET, Alphabet
from dspeech.errors import OracleLimitError
from dspeech.network import PosteriorGrid, log_softmax

NEG_INF = -np.inf


@dataclass(frozen=True)
class LabelSequence:
    indices: tuple[int, ...]
    alphabet: Alphabet = ALPHABET

    def __post_init__(self):
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))
        if any(i == self.alphabet.blank_index or not 0 <= i < self.alphabet.size for i in self.indices):
            raise ValueError("label indices must be non-blank alphabet symbols")

    @classmethod
    def from_text(cls, text: str, alphabet: Alphabet = ALPHABET) -> "LabelSequence":
        return cls(tuple(alphabet.encode(text)), alphabet)

    @property
    def text(self) -> str:
        return self.alphabet.decode(self.indices)

    def __len__(self):
        return len(self.indices)


@dataclass
class CtcResult:
    loss: float
    dL_dlogits: np.ndarray
    feasible: bool = True


def collapse(path: Sequence[int], blank: int = ALPHABET.blank_index) -> tuple[int, ...]:
    """Merge consecutive repeats, then drop blanks."""
    out = []
    prev = None
    for k in path:
        if k != prev and k != blank:
            out.append(int(k))
        prev = k
    return tuple(out)


def min_frames(label: Sequence[int]) -> int:
    """Shortest path length able to emit ``label`` (repeats need a blank between)."""
    label = list(label)
    return len(label) + sum(1 for a, b in zip(label, label[1:]) if a == b)


def _indices(label):
    return tuple(label.indices) if isinstance(label, LabelSequence) else tuple(int(i) for i in label)


def _log_probs(posteriors):
    return np.asarray(getattr(posteriors, "log_probs", posteriors), dtype=np.float64)


def ctc_loss(posteriors: PosteriorGrid, label, blank: int | None = None) -> CtcResult:
    """Negative log-likelihood of ``label`` and its gradient w.r.t. the logits.

    The grid is taken as the softmax of some logits, so the returned gradient
    is ``y - occupancy / P(label)``. Infeasible labels (too long for the grid)
    yield ``loss = inf``, ``feasible = False`` and a zero gradient.
    """
    lp = _log_probs(posteriors)
    n_steps, n_sym = lp.shape
    if blank is None:
        blank = n_sym - 1
    lab = _indices(label)
    if min_frames(lab) > n_steps:
        return CtcResult(math.inf, np.zeros_like(lp), feasible=False)

    ext = np.full(2 * len(lab) + 1, blank, dtype=int)
    ext[1::2] = lab
    s_len = ext.size
    # s-2 transition allowed onto a label whose predecessor label differs
    skip = np.zeros(s_len, dtype=bool)
    skip[3::2] = ext[3::2] != ext[1:-2:2]

    emit = lp[:, ext]  # (T, S)
    alpha = np.full((n_steps, s_len), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if s_len > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, n_steps):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + emit[t]

    beta = np.full((n_steps, s_len), NEG_INF)
    beta[-1, -1] = emit[-1, -1]
    if s_len > 1:
        beta[-1, -2] = emit[-1, -2]
    # skip onto s+2 from s is allowed exactly when skip[s+2]
    skip_from = np.zeros(s_len, dtype=bool)
    skip_from[:-2] = skip[2:]
    for t in range(n_steps - 2, -1, -1):
        nxt = beta[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip_from[:-2], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc + emit[t]

    log_p = alpha[-1, -1] if s_len == 1 else np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    if not np.isfinite(log_p):
        return CtcResult(math.inf, np.zeros_like(lp), feasible=False)

    with np.errstate(invalid="ignore"):
        gamma = alpha + beta - emit  # log mass of paths through (t, s)
    occupancy = np.zeros_like(lp)
    for k in np.unique(ext):
        cols = gamma[:, ext == k]
        top = cols.max(axis=1)
        ok = np.isfinite(top)
        vals = np.zeros(n_steps)
        vals[ok] = np.exp(top[ok] + np.log(np.exp(cols[ok] - top[ok, None]).sum(axis=1)) - log_p)
        occupancy[:, k] = vals
    grad = np.exp(lp) - occupancy
    return CtcResult(float(-log_p), grad, feasible=True)


def oracle_limit(n_steps: int, n_symbols: int):
    if n_symbols <= 4:
        if n_steps > 8:
            raise OracleLimitError("oracle limit: at most 8 steps with <= 4 symbols")
    elif n_steps > 5:
        raise OracleLimitError("oracle limit: at most 5 steps with the full alphabet")


def brute_force_ctc(posteriors: PosteriorGrid, label, blank: int | None = None) -> float:
    """-log of the summed probability of every path that collapses to ``label``.

    Paths containing a symbol that is neither blank nor in the label collapse
    to something else and contribute nothing, so only the remaining symbol set
    is enumerated. Returns ``inf`` when no path matches.
    """
    lp = _log_probs(posteriors)
    n_steps, n_sym = lp.shape
    oracle_limit(n_steps, n_sym)
    if blank is None:
        blank = n_sym - 1
    lab = _indices(label)
    symbols = sorted(set(lab) | {blank})
    paths = np.array(list(itertools.product(symbols, repeat=n_steps)), dtype=int).reshape(-1, n_steps)
    changed = np.ones_like(paths, dtype=bool)
    changed[:, 1:] = paths[:, 1:] != paths[:, :-1]
    keep = changed & (paths != blank)
    match = keep.sum(axis=1) == len(lab)
    if lab:
        pos = np.clip(np.cumsum(keep, axis=1) - 1, 0, len(lab) - 1)
        match &= np.all(~keep | (paths == np.asarray(lab)[pos]), axis=1)
    path_probs = np.prod(np.exp(lp)[np.arange(n_steps), paths], axis=1)
    total = math.fsum(path_probs[match])
    return math.inf if total == 0.0 else -math.log(total)


def ctc_loss_from_logits(logits: np.ndarray, label, blank: int | None = None) -> CtcResult:
    return ctc_loss(PosteriorGrid(log_softmax(np.asarray(logits, dtype=np.float64))), label, blank)
