"""Five-hidden-layer clipped-ReLU network with one bidirectional recurrent layer.

Layer layout (hidden sizes ``h1..h5``)::

    h1 = g(W1 [x_{t-C} .. x_{t+C}] + b1)      stride-s context window
    h2 = g(W2 h1 + b2),  h3 = g(W3 h2 + b3)
    hf_t = g(W4 h3_t + Wf hf_{t-1} + b4)      forward in time
    hb_t = g(W4 h3_t + Wb hb_{t+1} + b4)      backward in time
    h5 = g(W5 (hf + hb) + b5)
    y  = softmax(W6 h5 + b6)

with ``g(z) = min(max(z, 0), 20)``. Every routine works on batches shaped
``(B, T, F)``; per-utterance lengths mask padded steps out of both
recurrences so silence padding never leaks into the real frames.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from dspeech.alphabet import ALPHABET
from dspeech.errors import ConfigError, ShapeError, StaleCacheError

RELU_CLIP = 20.0
OUTPUT_DIM = ALPHABET.size
PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3", "W4", "b4", "Wf", "Wb", "W5", "b5", "W6", "b6")
DTYPES = {"float64": np.float64, "float32": np.float32}


def clipped_relu(z):
    return np.minimum(np.maximum(z, 0.0), RELU_CLIP)


def clipped_relu_grad(z):
    """1 strictly inside (0, 20); 0 elsewhere, including both kinks."""
    z = np.asarray(z)
    return ((z > 0.0) & (z < RELU_CLIP)).astype(z.dtype if z.dtype.kind == "f" else np.float64)


@dataclass(frozen=True)
class NetworkConfig:
    input_dim: int
    context: int = 5
    stride: int = 2
    hidden: tuple[int, int, int, int, int] = (256, 256, 256, 256, 256)
    dropout_rate: float = 0.05
    dropout_layers: tuple[int, ...] = (1, 2, 3, 5)
    dtype: str = "float64"
    output_dim: int = OUTPUT_DIM

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "dropout_layers", tuple(int(l) for l in self.dropout_layers))

    def validate(self):
        if len(self.hidden) != 5 or min(self.hidden) < 1 or self.input_dim < 1:
            raise ConfigError("bad config: five positive hidden sizes and a positive input dim required")
        if self.context < 0:
            raise ConfigError("bad config: context must be >= 0")
        if self.stride not in (1, 2):
            raise ConfigError("bad config: stride must be 1 or 2")
        if not 0.0 <= self.dropout_rate <= 0.5:
            raise ConfigError("bad config: dropout_rate must lie in [0, 0.5]")
        if not set(self.dropout_layers) <= {1, 2, 3, 5}:
            raise ConfigError("bad config: dropout applies only to layers 1, 2, 3, 5")
        if self.dtype not in DTYPES:
            raise ConfigError(f"bad config: dtype must be one of {sorted(DTYPES)}")
        if self.output_dim < 2:
            raise ConfigError("bad config: output_dim must be >= 2")

    @property
    def window_dim(self) -> int:
        return (2 * self.context + 1) * self.input_dim

    def out_steps(self, n_frames: int) -> int:
        return -(-n_frames // self.stride)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        h1, h2, h3, h4, h5 = self.hidden
        return {
            "W1": (h1, self.window_dim), "b1": (h1,),
            "W2": (h2, h1), "b2": (h2,),
            "W3": (h3, h2), "b3": (h3,),
            "W4": (h4, h3), "b4": (h4,),
            "Wf": (h4, h4), "Wb": (h4, h4),
            "W5": (h5, h4), "b5": (h5,),
            "W6": (self.output_dim, h5), "b6": (self.output_dim,),
        }


@dataclass
class NetworkParams:
    config: NetworkConfig
    tensors: dict[str, np.ndarray]

    def __getitem__(self, name):
        return self.tensors[name]

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def map(self, fn) -> "NetworkParams":
        return NetworkParams(self.config, {k: fn(k, v) for k, v in self.tensors.items()})

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.tensors.values())


def init_params(config: NetworkConfig, seed: int) -> NetworkParams:
    """Glorot-uniform weights, zero biases; deterministic in ``seed``."""
    config.validate()
    rng = np.random.default_rng(seed)
    dtype = DTYPES[config.dtype]
    tensors = {}
    for name, shape in config.shapes().items():
        if name.startswith("b"):
            tensors[name] = np.zeros(shape, dtype=dtype)
        else:
            r = np.sqrt(6.0 / (shape[0] + shape[1]))
            tensors[name] = rng.uniform(-r, r, size=shape).astype(dtype)
    return NetworkParams(config, tensors)


@dataclass
class PosteriorGrid:
    """Per-step character distribution; rows are output steps."""

    log_probs: np.ndarray

    @classmethod
    def from_probs(cls, probs) -> "PosteriorGrid":
        with np.errstate(divide="ignore"):
            return cls(np.log(np.asarray(probs, dtype=np.float64)))

    @classmethod
    def from_logits(cls, logits) -> "PosteriorGrid":
        return cls(log_softmax(np.asarray(logits, dtype=np.float64)))

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)

    @property
    def steps(self) -> int:
        return self.log_probs.shape[0]

    @property
    def n_symbols(self) -> int:
        return self.log_probs.shape[1]

    def check(self, tol=1e-9):
        p = self.probs
        if not np.all(np.abs(p.sum(axis=1) - 1.0) <= tol):
            raise ValueError("posterior rows do not sum to 1")


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


@dataclass
class ActivationCache:
    tensors: dict = field(repr=False)
    step_mask: np.ndarray
    x1: np.ndarray
    z: dict
    h: dict
    drop: dict
    log_probs: np.ndarray

    @property
    def out_lengths(self) -> np.ndarray:
        return self.step_mask.sum(axis=1).astype(int)


def context_windows(x: np.ndarray, context: int, stride: int) -> np.ndarray:
    """(B, T, F) -> (B, ceil(T/stride), (2C+1)F), zero-padded at both ends."""
    b, t, f = x.shape
    padded = np.pad(x, ((0, 0), (context, context), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(padded, 2 * context + 1, axis=1)
    win = win[:, ::stride]  # (B, T', F, 2C+1)
    return np.ascontiguousarray(win.transpose(0, 1, 3, 2)).reshape(b, -1, (2 * context + 1) * f)


def dropout_masks(config: NetworkConfig, batch: int, steps: int, seed, mode: str) -> dict:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    masks = {}
    p = config.dropout_rate
    if mode == "eval" or p == 0.0:
        return masks
    rng = np.random.default_rng(seed)
    dtype = DTYPES[config.dtype]
    sizes = {1: config.hidden[0], 2: config.hidden[1], 3: config.hidden[2], 5: config.hidden[4]}
    for layer in (1, 2, 3, 5):
        if layer in config.dropout_layers:
            keep = rng.random((batch, steps, sizes[layer])) >= p
            masks[layer] = (keep / (1.0 - p)).astype(dtype)
    return masks


def _as_batch(features, config: NetworkConfig, lengths=None):
    x = getattr(features, "frames", features)
    x = np.asarray(x, dtype=DTYPES[config.dtype])
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[2] != config.input_dim:
        raise ShapeError(f"shape error: expected (B, T, {config.input_dim}) features, got {x.shape}")
    if x.shape[1] == 0:
        raise ShapeError("shape error: zero-length input")
    if lengths is None:
        lengths = np.full(x.shape[0], x.shape[1], dtype=int)
    lengths = np.asarray(lengths, dtype=int)
    if lengths.shape != (x.shape[0],) or lengths.min() < 1 or lengths.max() > x.shape[1]:
        raise ShapeError("shape error: lengths must be in [1, T] for every batch member")
    return x, lengths


def _step_mask(lengths, steps, stride, dtype):
    out_len = -(-lengths // stride)
    return (np.arange(steps)[None, :] < out_len[:, None]).astype(dtype)


def _affine(h, w, b):
    return h @ w.T + b


def _feed_in(p, x1, drop):
    """Layers 1-3 plus the shared input term of the recurrent layer."""
    z, h = {}, {}
    prev = x1
    for layer in (1, 2, 3):
        z[layer] = _affine(prev, p[f"W{layer}"], p[f"b{layer}"])
        prev = clipped_relu(z[layer])
        if layer in drop:
            prev = prev * drop[layer]
        h[layer] = prev
    u = _affine(prev, p["W4"], p["b4"])
    return z, h, u


def _recur(u, w, mask, h0, reverse):
    """Run one direction of the recurrence over a contiguous block of steps."""
    b, n, k = u.shape
    z = np.empty_like(u)
    h = np.empty_like(u)
    prev = np.zeros((b, k), dtype=u.dtype) if h0 is None else h0
    for t in (range(n - 1, -1, -1) if reverse else range(n)):
        z[:, t] = u[:, t] + prev @ w.T
        h[:, t] = clipped_relu(z[:, t]) * mask[:, t, None]
        prev = h[:, t]
    return z, h


def _feed_out(p, h4, drop):
    z5 = _affine(h4, p["W5"], p["b5"])
    h5 = clipped_relu(z5)
    if 5 in drop:
        h5 = h5 * drop[5]
    return z5, h5, log_softmax(_affine(h5, p["W6"], p["b6"]))


def _outer(dz, h):
    """Sum over batch and time of dz_t h_t^T."""
    return dz.reshape(-1, dz.shape[-1]).T @ h.reshape(-1, h.shape[-1])


def _grad_out(p, g, dlogits, z5, h5, drop):
    g["W6"] += _outer(dlogits, h5)
    g["b6"] += dlogits.sum(axis=(0, 1))
    dz5 = (dlogits @ p["W6"]) * clipped_relu_grad(z5)
    if 5 in drop:
        dz5 = dz5 * drop[5]
    return dz5


def _grad_recur(dh, z, h, w, mask, carry, h_edge, reverse):
    """Back-propagate through one recurrent direction over a block of steps.

    ``carry`` is the gradient arriving from the neighbouring block (the step
    that consumed this block's edge state); ``h_edge`` is the state feeding
    the block's first step, or None for the zero initial state. Returns the
    pre-activation gradients, this block's recurrent-weight gradient and the
    carry to hand to the block upstream.
    """
    b, n, k = dh.shape
    dz = np.empty_like(dh)
    dw = np.zeros_like(w)
    for t in (range(n) if reverse else range(n - 1, -1, -1)):
        dz[:, t] = (dh[:, t] + carry) * clipped_relu_grad(z[:, t]) * mask[:, t, None]
        if reverse:
            prev = h[:, t + 1] if t + 1 < n else h_edge
        else:
            prev = h[:, t - 1] if t > 0 else h_edge
        if prev is not None:
            dw += dz[:, t].T @ prev
        carry = dz[:, t] @ w
    return dz, dw, carry


def _grad_in(p, g, du, x1, z, h, drop):
    g["W4"] += _outer(du, h[3])
    g["b4"] += du.sum(axis=(0, 1))
    dh = du @ p["W4"]
    for layer in (3, 2, 1):
        dz = dh * clipped_relu_grad(z[layer])
        if layer in drop:
            dz = dz * drop[layer]
        below = x1 if layer == 1 else h[layer - 1]
        g[f"W{layer}"] += _outer(dz, below)
        g[f"b{layer}"] += dz.sum(axis=(0, 1))
        if layer > 1:
            dh = dz @ p[f"W{layer}"]


def zero_grads(params: NetworkParams) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.tensors.items()}


def forward_batch(params: NetworkParams, features, lengths=None, mode="eval", seed=None):
    """Batched forward pass.

    Args:
        features: (B, T, F) array, (T, F) array, or a FeatureSequence.
        lengths: true frame counts per batch member; defaults to T.
        mode: "train" applies inverted dropout drawn from ``seed``.

    Returns:
        (log_probs of shape (B, T', K), ActivationCache)
    """
    cfg = params.config
    p = params.tensors
    x, lengths = _as_batch(features, cfg, lengths)
    x1 = context_windows(x, cfg.context, cfg.stride)
    b, steps, _ = x1.shape
    mask = _step_mask(lengths, steps, cfg.stride, x1.dtype)
    drop = dropout_masks(cfg, b, steps, seed, mode)

    z, h, u = _feed_in(p, x1, drop)
    z["f"], h["f"] = _recur(u, p["Wf"], mask, None, reverse=False)
    z["b"], h["b"] = _recur(u, p["Wb"], mask, None, reverse=True)
    h[4] = h["f"] + h["b"]
    z[5], h[5], log_probs = _feed_out(p, h[4], drop)
    cache = ActivationCache(dict(p), mask, x1, z, h, drop, log_probs)
    return log_probs, cache


def forward(params: NetworkParams, features, mode="eval", seed=None):
    """Single-utterance forward pass returning (PosteriorGrid, ActivationCache)."""
    log_probs, cache = forward_batch(params, features, None, mode, seed)
    if log_probs.shape[0] != 1:
        raise ShapeError("shape error: forward() takes one utterance; use forward_batch")
    return PosteriorGrid(log_probs[0].astype(np.float64)), cache


def backward(params: NetworkParams, cache: ActivationCache, dL_dlogits) -> dict[str, np.ndarray]:
    """Exact gradients of every parameter given the loss gradient on the logits."""
    p = params.tensors
    if set(cache.tensors) != set(p) or any(cache.tensors[k] is not p[k] for k in p):
        raise StaleCacheError("stale cache: activations were produced by different parameters")
    d = np.asarray(dL_dlogits, dtype=cache.log_probs.dtype)
    if d.ndim == 2:
        d = d[None]
    if d.shape != cache.log_probs.shape:
        raise ShapeError(f"shape error: gradient {d.shape} does not match outputs {cache.log_probs.shape}")
    d = d * cache.step_mask[:, :, None]

    g = zero_grads(params)
    z, h, drop, mask = cache.z, cache.h, cache.drop, cache.step_mask
    dz5 = _grad_out(p, g, d, z[5], h[5], drop)
    g["W5"] += _outer(dz5, h[4])
    g["b5"] += dz5.sum(axis=(0, 1))
    dh4 = dz5 @ p["W5"]
    zero = np.zeros((d.shape[0], dh4.shape[2]), dtype=d.dtype)
    dzf, g["Wf"], _ = _grad_recur(dh4, z["f"], h["f"], p["Wf"], mask, zero, None, reverse=False)
    dzb, g["Wb"], _ = _grad_recur(dh4, z["b"], h["b"], p["Wb"], mask, zero, None, reverse=True)
    _grad_in(p, g, dzf + dzb, cache.x1, z, h, drop)
    return g


@dataclass
class Exchange:
    phase: str      # "forward" or "backward"
    sender: str
    receiver: str
    quantity: str
    step: int
    vector: np.ndarray = field(repr=False)


class _TimeWorker:
    """One half of the time axis in the two-worker model-parallel schedule."""

    def __init__(self, name, params, lo, hi, x1, drop):
        self.name, self.p, self.lo, self.hi = name, params.tensors, lo, hi
        self.x1 = x1[:, lo:hi]
        self.drop = {k: v[:, lo:hi] for k, v in drop.items()}
        self.mask = np.ones(self.x1.shape[:2], dtype=x1.dtype)
        self.grads = zero_grads(params)
        self.z = self.h = self.u = None
        self.dh4 = None

    def feed_in(self):
        self.z, self.h, self.u = _feed_in(self.p, self.x1, self.drop)

    def recur(self, direction, h0):
        key, w = ("f", self.p["Wf"]) if direction == "f" else ("b", self.p["Wb"])
        self.z[key], self.h[key] = _recur(self.u, w, self.mask, h0, reverse=(direction == "b"))

    def feed_out(self):
        self.h[4] = self.h["f"] + self.h["b"]
        self.z[5], self.h[5], self.log_probs = _feed_out(self.p, self.h[4], self.drop)

    def grad_out(self, dlogits):
        g = self.grads
        dz5 = _grad_out(self.p, g, dlogits, self.z[5], self.h[5], self.drop)
        g["W5"] += _outer(dz5, self.h[4])
        g["b5"] += dz5.sum(axis=(0, 1))
        self.dh4 = dz5 @ self.p["W5"]
        self.dz = {}

    def grad_recur(self, direction, carry, h_edge):
        key, w = ("f", self.p["Wf"]) if direction == "f" else ("b", self.p["Wb"])
        if carry is None:
            carry = np.zeros((self.dh4.shape[0], self.dh4.shape[2]), dtype=self.dh4.dtype)
        dz, dw, out = _grad_recur(self.dh4, self.z[key], self.h[key], w, self.mask, carry,
                                  h_edge, reverse=(direction == "b"))
        self.dz[key] = dz
        self.grads["W" + key] += dw
        return out

    def grad_in(self):
        _grad_in(self.p, self.grads, self.dz["f"] + self.dz["b"], self.x1, self.z, self.h, self.drop)


def forward_backward_timesplit(params: NetworkParams, features, dL_dlogits, mode="eval", seed=None,
                               threads=False):
    """Two-worker time-split forward and backward pass.

    Worker A owns steps ``[0, ceil(T'/2))`` and starts the forward recurrence
    while worker B starts the backward recurrence on the other half. At the
    midpoint they swap one boundary state each and finish the opposite
    direction. The backward pass mirrors this with one swap of recurrent
    gradient carries.

    Args:
        dL_dlogits: (T', K) array, or a callable receiving the assembled
            PosteriorGrid and returning that array (e.g. a CTC gradient).
        threads: run both workers of each phase on real threads.

    Returns:
        (PosteriorGrid, gradients, list of Exchange records)
    """
    cfg = params.config
    x, _ = _as_batch(features, cfg)
    if x.shape[0] != 1:
        raise ShapeError("shape error: time-split runs one utterance at a time")
    x1 = context_windows(x, cfg.context, cfg.stride)
    steps = x1.shape[1]
    if steps < 2:
        raise ValueError("too short to split: need at least 2 output steps")
    mid = -(-steps // 2)
    drop = dropout_masks(cfg, 1, steps, seed, mode)
    a = _TimeWorker("A", params, 0, mid, x1, drop)
    b = _TimeWorker("B", params, mid, steps, x1, drop)
    log: list[Exchange] = []

    pool = ThreadPoolExecutor(max_workers=2) if threads else None

    def phase(fa: Callable, fb: Callable):
        if pool is None:
            return fa(), fb()
        fut_a, fut_b = pool.submit(fa), pool.submit(fb)
        return fut_a.result(), fut_b.result()

    def send(kind, sender, receiver, quantity, step, vec):
        log.append(Exchange(kind, sender, receiver, quantity, step, vec[0].copy()))
        return vec

    try:
        phase(a.feed_in, b.feed_in)
        phase(lambda: a.recur("f", None), lambda: b.recur("b", None))
        hf_edge = send("forward", "A", "B", "h_f", mid - 1, a.h["f"][:, -1])
        hb_edge = send("forward", "B", "A", "h_b", mid, b.h["b"][:, 0])
        phase(lambda: a.recur("b", hb_edge), lambda: b.recur("f", hf_edge))
        phase(a.feed_out, b.feed_out)

        grid = PosteriorGrid(np.concatenate([a.log_probs, b.log_probs], axis=1)[0].astype(np.float64))
        d = dL_dlogits(grid) if callable(dL_dlogits) else dL_dlogits
        d = np.asarray(d, dtype=x1.dtype)
        if d.ndim == 2:
            d = d[None]
        if d.shape[1:] != (steps, cfg.output_dim):
            raise ShapeError(f"shape error: gradient {d.shape} does not match outputs ({steps}, {cfg.output_dim})")

        phase(lambda: a.grad_out(d[:, :mid]), lambda: b.grad_out(d[:, mid:]))
        carry_b, carry_f = phase(lambda: a.grad_recur("b", None, hb_edge),
                                 lambda: b.grad_recur("f", None, hf_edge))
        send("backward", "A", "B", "dh_b", mid, carry_b)
        send("backward", "B", "A", "dh_f", mid - 1, carry_f)
        phase(lambda: a.grad_recur("f", carry_f, None), lambda: b.grad_recur("b", carry_b, None))
        phase(a.grad_in, b.grad_in)
    finally:
        if pool is not None:
            pool.shutdown()

    grads = {k: a.grads[k] + b.grads[k] for k in a.grads}
    return grid, grads, log
