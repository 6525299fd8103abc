"""Nesterov-momentum training over length-sorted, silence-padded minibatches."""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from dspeech.ctc import ctc_loss
from dspeech.errors import ConfigError, DivergedError, NoDataError
from dspeech.network import NetworkParams, PosteriorGrid, backward, forward_batch, zero_grads

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Example:
    utterance_id: str
    features: np.ndarray   # (T, F), already normalized
    label: tuple[int, ...]

    @property
    def length(self) -> int:
        return self.features.shape[0]


@dataclass
class Minibatch:
    utterance_ids: tuple[str, ...]
    features: np.ndarray   # (B, T_max, F); frames past each length are silence (zeros)
    lengths: np.ndarray
    labels: list[tuple[int, ...]]

    def __len__(self):
        return len(self.utterance_ids)

    def subset(self, idx) -> "Minibatch":
        idx = list(idx)
        return Minibatch(tuple(self.utterance_ids[i] for i in idx), self.features[idx],
                         self.lengths[idx], [self.labels[i] for i in idx])


@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray]
    learning_rate: float
    momentum: float = 0.99
    epoch: int = 0
    anneal_factor: float = 0.95

    @classmethod
    def create(cls, params: NetworkParams, learning_rate: float, momentum: float = 0.99,
               anneal_factor: float = 0.95) -> "OptimizerState":
        if learning_rate <= 0:
            raise ConfigError("bad config: learning_rate must be > 0")
        if not 0.0 <= momentum < 1.0:
            raise ConfigError("bad config: momentum must lie in [0, 1)")
        if not 0.0 < anneal_factor <= 1.0:
            raise ConfigError("bad config: anneal_factor must lie in (0, 1]")
        return cls(zero_grads(params), learning_rate, momentum, 0, anneal_factor)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    epochs: int = 20
    learning_rate: float = 1e-4
    momentum: float = 0.99
    anneal_factor: float = 0.95
    n_workers: int = 1
    seed: int = 0
    threads: bool = False

    def validate(self):
        if self.batch_size < 1:
            raise ConfigError("bad config: batch_size must be >= 1")
        if self.n_workers < 1:
            raise ConfigError("bad config: n_workers must be >= 1")
        if self.epochs < 0:
            raise ConfigError("bad config: epochs must be >= 0")


@dataclass
class StepInfo:
    loss_sum: float = 0.0
    used: int = 0
    skipped: list = field(default_factory=list)


def pad_batch(examples: Sequence[Example]) -> Minibatch:
    t_max = max(e.length for e in examples)
    dim = examples[0].features.shape[1]
    feats = np.zeros((len(examples), t_max, dim))
    for i, e in enumerate(examples):
        feats[i, :e.length] = e.features
    return Minibatch(tuple(e.utterance_id for e in examples), feats,
                     np.array([e.length for e in examples]), [tuple(e.label) for e in examples])


def make_minibatches(dataset: Sequence[Example], batch_size: int, seed: int) -> list[Minibatch]:
    """Sort by frame count, cut into consecutive groups, shuffle the group order."""
    if batch_size < 1:
        raise ConfigError("bad config: batch_size must be >= 1")
    if not dataset:
        raise NoDataError("no data: empty dataset")
    ordered = sorted(dataset, key=lambda e: (e.length, e.utterance_id))
    groups = [ordered[i:i + batch_size] for i in range(0, len(ordered), batch_size)]
    order = np.random.default_rng(seed).permutation(len(groups))
    return [pad_batch(groups[i]) for i in order]


def lookahead(params: NetworkParams, state: OptimizerState) -> NetworkParams:
    """Point ``params + momentum * velocity`` where Nesterov evaluates the gradient."""
    mu = state.momentum
    return params.map(lambda k, v: v + mu * state.velocity[k])


def nesterov_step(params: NetworkParams, state: OptimizerState, grads: dict[str, np.ndarray]):
    """``v <- mu v - lr g(params + mu v)``; ``params <- params + v``.

    ``grads`` must already be evaluated at :func:`lookahead`. Returns new
    (params, state); the inputs are left untouched.
    """
    if set(grads) != set(params.tensors):
        raise ValueError("gradient set does not match parameters")
    for k, g in grads.items():
        if g.shape != params.tensors[k].shape:
            raise ValueError(f"gradient {k} has shape {g.shape}, expected {params.tensors[k].shape}")
        if not np.all(np.isfinite(g)):
            raise DivergedError(f"diverged: non-finite gradient in {k}; step refused")
    mu, lr = state.momentum, state.learning_rate
    velocity = {k: mu * state.velocity[k] - lr * grads[k] for k in grads}
    new_params = params.map(lambda k, v: v + velocity[k])
    return new_params, replace(state, velocity=velocity)


def anneal_lr(state: OptimizerState) -> OptimizerState:
    return replace(state, learning_rate=state.learning_rate * state.anneal_factor, epoch=state.epoch + 1)


def batch_gradient(params: NetworkParams, batch: Minibatch, mode="train", seed=None):
    """Summed CTC gradient over the batch; CTC only sees each utterance's true steps."""
    log_probs, cache = forward_batch(params, batch.features, batch.lengths, mode, seed)
    if not np.all(np.isfinite(log_probs)):
        raise DivergedError("diverged: network produced non-finite posteriors")
    out_len = cache.out_lengths
    dlogits = np.zeros_like(log_probs)
    info = StepInfo()
    for i, label in enumerate(batch.labels):
        steps = out_len[i]
        res = ctc_loss(PosteriorGrid(log_probs[i, :steps].astype(np.float64)), label)
        if not res.feasible:
            log.warning("skipping %s: label of %d symbols does not fit %d output steps",
                        batch.utterance_ids[i], len(label), steps)
            info.skipped.append(batch.utterance_ids[i])
            continue
        dlogits[i, :steps] = res.dL_dlogits
        info.loss_sum += res.loss
        info.used += 1
    if info.used == 0:
        return zero_grads(params), info
    return backward(params, cache, dlogits), info


def shard_indices(n: int, n_workers: int) -> list[np.ndarray]:
    """Contiguous shards; sizes differ by at most one, larger shards first."""
    return np.array_split(np.arange(n), n_workers)


def data_parallel_step(params: NetworkParams, state: OptimizerState, batch: Minibatch, n_workers: int,
                       seed: int = 0, mode: str = "train", threads: bool = False):
    """One synchronous data-parallel Nesterov update.

    Each worker computes the mean gradient over its shard (dropout seed
    ``seed ^ shard_index``); the shard means are combined weighted by the
    number of usable examples, which equals the whole-batch mean.

    Returns (params, state, StepInfo).
    """
    if n_workers < 1:
        raise ConfigError("bad config: n_workers must be >= 1")
    point = lookahead(params, state)
    shards = [(i, idx) for i, idx in enumerate(shard_indices(len(batch), n_workers)) if idx.size]

    def work(item):
        i, idx = item
        grads, info = batch_gradient(point, batch.subset(idx), mode, seed ^ i)
        if info.used:
            grads = {k: v / info.used for k, v in grads.items()}
        return grads, info

    if threads and len(shards) > 1:
        with ThreadPoolExecutor(max_workers=len(shards)) as pool:
            results = list(pool.map(work, shards))
    else:
        results = [work(s) for s in shards]

    total = StepInfo()
    for _, info in results:
        total.loss_sum += info.loss_sum
        total.used += info.used
        total.skipped.extend(info.skipped)
    if total.used == 0:
        return params, state, total
    combined = combine_gradients([(g, info.used) for g, info in results])
    new_params, new_state = nesterov_step(params, state, combined)
    return new_params, new_state, total


def combine_gradients(shards: Sequence[tuple[dict[str, np.ndarray], int]]) -> dict[str, np.ndarray]:
    """Example-count-weighted average of per-shard mean gradients."""
    total = sum(n for _, n in shards)
    if total == 0:
        raise NoDataError("no data: every shard is empty")
    keys = next(g for g, n in shards if n)
    combined = {k: np.zeros_like(v) for k, v in keys.items()}
    for grads, n in shards:
        if n:
            for k in combined:
                combined[k] += (n / total) * grads[k]
    return combined


def _batch_seed(seed: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, index]).generate_state(1)[0])


def train_epoch(params: NetworkParams, state: OptimizerState, dataset: Sequence[Example], config: TrainConfig):
    """One pass over the data followed by learning-rate annealing.

    Returns (params, state, metrics) with metrics keys ``epoch``,
    ``mean_loss``, ``examples``, ``skipped``, ``lr`` and ``wall_seconds``.
    """
    config.validate()
    start = time.perf_counter()
    epoch = state.epoch
    batches = make_minibatches(dataset, config.batch_size, _batch_seed(config.seed, epoch, 0))
    loss_sum = 0.0
    used = 0
    skipped = 0
    for i, batch in enumerate(batches):
        try:
            params, state, info = data_parallel_step(params, state, batch, config.n_workers,
                                                     _batch_seed(config.seed, epoch, i + 1), "train", config.threads)
        except DivergedError as exc:
            raise DivergedError(f"epoch {epoch} aborted at batch {i} ({', '.join(batch.utterance_ids)}): {exc}")
        loss_sum += info.loss_sum
        used += info.used
        skipped += len(info.skipped)
    lr = state.learning_rate
    state = anneal_lr(state)
    metrics = {
        "epoch": epoch,
        "mean_loss": loss_sum / used if used else math.nan,
        "examples": used,
        "skipped": skipped,
        "lr": lr,
        "wall_seconds": time.perf_counter() - start,
    }
    return params, state, metrics
