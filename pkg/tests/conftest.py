import numpy as np
import pytest

from dspeech.audio import Utterance
from dspeech.network import NetworkConfig, init_params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(input_dim=3, context=1, stride=1, hidden=(4, 5, 3, 4, 3), dropout=0.0):
    return NetworkConfig(input_dim, context, stride, hidden, dropout)


@pytest.fixture
def tiny_params():
    return init_params(tiny_config(), seed=7)


def random_posteriors(rng, steps, symbols, sharpness=1.0):
    logits = sharpness * rng.standard_normal((steps, symbols))
    logits -= logits.max(axis=1, keepdims=True)
    return logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))


def noise_utterance(rng, n=16000, rate=16000, speaker="s0", uid="u0", scale=0.1):
    return Utterance(scale * rng.standard_normal(n), rate, "a", speaker, uid)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
