"""Independent reference computations shared by several test modules."""

import numpy as np

from dspeech.ctc import ctc_loss
from dspeech.network import backward, forward


def jitter_biases(params, rng, scale=0.1):
    """Zero biases can park a unit exactly on a ReLU kink, where central differences average two slopes."""
    return params.map(lambda k, v: v + scale * rng.standard_normal(v.shape) if k.startswith("b") else v)


def ctc_objective(params, features, label, mode="eval", seed=None):
    grid, _ = forward(params, features, mode, seed)
    return ctc_loss(grid, label).loss


def gradient_check(params, features, label, eps=1e-5, mode="eval", seed=None):
    """Per-tensor max |analytic - central difference| / max |analytic|."""
    grid, cache = forward(params, features, mode, seed)
    res = ctc_loss(grid, label)
    grads = backward(params, cache, res.dL_dlogits[None])
    errors = {}
    for name, tensor in params.tensors.items():
        numeric = np.zeros_like(tensor)
        for idx in np.ndindex(tensor.shape):
            orig = tensor[idx]
            tensor[idx] = orig + eps
            up = ctc_objective(params, features, label, mode, seed)
            tensor[idx] = orig - eps
            down = ctc_objective(params, features, label, mode, seed)
            tensor[idx] = orig
            numeric[idx] = (up - down) / (2 * eps)
        scale = max(np.max(np.abs(grads[name])), np.max(np.abs(numeric)), 1e-12)
        errors[name] = float(np.max(np.abs(grads[name] - numeric)) / scale)
    return errors


def bostin_fixture():
    """Grid whose greedy reading is "bostin" but where "boston" is close behind,
    plus a small LM that knows "boston" and not "bostin"."""
    from dspeech.alphabet import ALPHABET
    from dspeech.lm import LmTrainConfig, train_ngram
    from dspeech.network import PosteriorGrid

    frames = [("b", {"b": 0.9}), ("o", {"o": 0.9}), ("s", {"s": 0.9}), ("t", {"t": 0.9}),
              ("i", {"i": 0.55, "o": 0.40}), ("n", {"n": 0.9})]
    probs = []
    for _, mass in frames:
        row = np.full(ALPHABET.size, 1e-3)
        for ch, p in mass.items():
            row[ALPHABET.index(ch)] = p
        row[ALPHABET.blank_index] = 0.0
        row[ALPHABET.blank_index] = max(1.0 - row.sum(), 1e-3)
        probs.append(row / row.sum())
    lm = train_ngram(["boston", "weather in boston", "what is the weather like in boston",
                      "the weather", "like it"], LmTrainConfig(order=2))
    return PosteriorGrid.from_probs(np.array(probs)), lm


def one_hot_grid(text, alphabet=None, p=0.97):
    """Each character on its own frame with blanks between repeats."""
    from dspeech.alphabet import ALPHABET
    from dspeech.network import PosteriorGrid

    alphabet = alphabet or ALPHABET
    seq = []
    for ch in text:
        k = alphabet.index(ch)
        if seq and seq[-1] == k:
            seq.append(alphabet.blank_index)
        seq.append(k)
    probs = np.full((len(seq), alphabet.size), (1 - p) / (alphabet.size - 1))
    probs[np.arange(len(seq)), seq] = p
    return PosteriorGrid.from_probs(probs)
