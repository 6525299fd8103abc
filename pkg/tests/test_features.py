import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dspeech.audio import Utterance
from dspeech.errors import ConfigError, NoDataError
from dspeech.features import (GLOBAL, LOG_FLOOR, PER_SPEAKER, PER_UTTERANCE, RAW, STD_FLOOR, FeatureConfig,
                              FeatureSequence, GlobalFeatureStats, apply_global_stats, bank_centers,
                              compute_global_stats, featurize, featurize_batch, frame_count, frame_spectrogram,
                              normalize_per_speaker, normalize_per_utterance, read_feature_dump,
                              write_feature_dump)

from conftest import noise_utterance


def test_frame_count_one_second_16k(rng):
    fs = frame_spectrogram(noise_utterance(rng, 16000, 16000), 20, 10, 160)
    assert fs.frames.shape == (99, 161)
    assert fs.frame_count == (16000 - 320) // 160 + 1


def test_frame_count_hand_example():
    # 5 samples, window 2, hop 1 -> windows [0,1] [1,2] [2,3] [3,4]
    assert frame_count(5, 2, 1) == 4
    assert frame_count(5, 2, 2) == 2
    assert frame_count(1, 2, 1) == 0


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 400), st.integers(1, 64), st.integers(1, 64))
def test_frame_count_formula(extra, win, hop):
    n = win + extra - 1
    assert frame_count(n, win, hop) == (n - win) // hop + 1
    assert frame_count(n, win, hop) * hop + win > n


def test_eight_khz_width(rng):
    fs = frame_spectrogram(noise_utterance(rng, 8000, 8000), 20, 10, 80)
    assert fs.dim == 81 and fs.bank_count == 80


def test_zero_audio_hits_log_floor():
    fs = frame_spectrogram(Utterance(np.zeros(1600), 16000), 20, 10, 160)
    assert np.all(fs.frames == math.log(LOG_FLOOR))


def test_errors():
    with pytest.raises(ValueError, match="too short"):
        frame_spectrogram(Utterance(np.ones(100), 16000), 20, 10, 160)
    with pytest.raises(ValueError, match="bad rate"):
        frame_spectrogram(Utterance(np.ones(1000), 11025), 20, 10, 16)


def _dft_oracle_banks(frame, rate, n_banks):
    """Independent reference: explicit DFT sum and loop-built triangles."""
    n = frame.size
    hann = np.array([0.5 - 0.5 * math.cos(2 * math.pi * i / n) for i in range(n)])
    x = frame * hann
    n_bins = n // 2 + 1
    power = np.zeros(n_bins)
    for k in range(n_bins):
        re = sum(x[i] * math.cos(2 * math.pi * k * i / n) for i in range(n))
        im = -sum(x[i] * math.sin(2 * math.pi * k * i / n) for i in range(n))
        power[k] = (re * re + im * im) / n
    step = (rate / 2) / (n_banks + 1)
    banks = np.zeros(n_banks)
    for b in range(n_banks):
        lo, mid, hi = b * step, (b + 1) * step, (b + 2) * step
        for k in range(n_bins):
            f = k * rate / n
            if lo < f <= mid:
                banks[b] += power[k] * (f - lo) / (mid - lo)
            elif mid < f < hi:
                banks[b] += power[k] * (hi - f) / (hi - mid)
    return np.log(np.maximum(banks, LOG_FLOOR)), math.log(max(float(np.sum(x * x)), LOG_FLOOR))


@pytest.mark.parametrize("bank", [1, 3, 6])
def test_sine_at_bank_center_against_direct_dft(bank):
    rate, n_banks = 8000, 8
    freq = bank_centers(n_banks, rate)[bank]
    t = np.arange(400) / rate
    utt = Utterance(0.5 * np.sin(2 * np.pi * freq * t + 0.3), rate)
    fs = frame_spectrogram(utt, 8, 4, n_banks)   # 64-sample frames, hop 32
    for i in range(1, fs.frame_count - 1):
        frame = utt.samples[i * 32:i * 32 + 64]
        banks, energy = _dft_oracle_banks(frame, rate, n_banks)
        assert np.allclose(fs.frames[i, :-1], banks, atol=1e-9)
        assert abs(fs.frames[i, -1] - energy) < 1e-9
        assert int(np.argmax(fs.frames[i, :-1])) == bank


def test_translation_consistency(rng):
    utt = noise_utterance(rng, 4000, 16000)
    hop = 160
    full = frame_spectrogram(utt, 20, 10, 40).frames
    shifted = frame_spectrogram(utt.with_samples(utt.samples[hop:]), 20, 10, 40).frames
    assert np.allclose(shifted, full[1:1 + shifted.shape[0]], atol=1e-9, rtol=0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-1e3, 1e3))
def test_output_finite(seed, offset):
    r = np.random.default_rng(seed)
    x = np.clip(offset * 1e-3 + r.standard_normal(900) * r.uniform(0, 2), -1, 1)
    assert np.all(np.isfinite(frame_spectrogram(Utterance(x, 8000), 20, 10, 20).frames))


def test_per_utterance_gain_invariance(rng):
    utt = noise_utterance(rng, 3200, 16000)
    a = normalize_per_utterance(frame_spectrogram(utt, 20, 10, 160))
    b = normalize_per_utterance(frame_spectrogram(utt.with_samples(2 * utt.samples), 20, 10, 160))
    assert a.normalization == PER_UTTERANCE
    assert np.max(np.abs(a.frames - b.frames)) < 1e-9


def test_per_utterance_audio_mode_gain_invariance(rng):
    utt = noise_utterance(rng, 3200, 16000)
    cfg = FeatureConfig(16000, 20, 10, 160, PER_UTTERANCE, "audio")
    a = featurize(utt, cfg)
    b = featurize(utt.with_samples(0.5 * utt.samples), cfg)
    assert np.max(np.abs(a.frames - b.frames)) < 1e-9


def test_per_utterance_constant_energy_and_double_normalization():
    fs = FeatureSequence(np.hstack([np.ones((4, 2)), np.full((4, 1), 3.0)]), 2)
    out = normalize_per_utterance(fs)
    assert np.all(out.frames[:, -1] == 0.0)
    with pytest.raises(ValueError, match="double normalization"):
        normalize_per_utterance(out)


def test_per_speaker_single_frame_is_zero():
    out = normalize_per_speaker([FeatureSequence(np.array([[1.0, 2.0, 3.0]]), 2, speaker_id="s")])
    assert np.all(out[0].frames == 0.0)


def test_per_speaker_offsets_removed(rng):
    base = rng.standard_normal((6, 4))
    a = FeatureSequence(base + 5.0, 3, speaker_id="a")
    b = FeatureSequence(base - 2.0, 3, speaker_id="b")
    na, nb = normalize_per_speaker([a, b])
    assert np.allclose(na.frames, nb.frames, atol=1e-12)


def test_per_speaker_random_batch(rng):
    batch = [FeatureSequence(rng.standard_normal((int(rng.integers(3, 9)), 5)) * 3 + i % 3, 4,
                             speaker_id=f"s{i % 3}") for i in range(9)]
    out = normalize_per_speaker(batch)
    for spk in ("s0", "s1", "s2"):
        stacked = np.vstack([o.frames for o in out if o.speaker_id == spk])
        assert np.max(np.abs(stacked.mean(axis=0))) < 1e-10
        assert np.allclose(stacked.std(axis=0), 1.0, atol=1e-9)
    assert all(o.normalization == PER_SPEAKER for o in out)


def test_per_speaker_requires_speaker():
    with pytest.raises(ValueError, match="no speaker"):
        normalize_per_speaker([FeatureSequence(np.zeros((2, 2)), 1)])


def test_global_stats_hand_example():
    stats = compute_global_stats([FeatureSequence(np.array([[0.0, 1.0], [2.0, 1.0]]), 1)])
    assert stats.count == 2
    assert stats.mean[0] == 1.0 and stats.std[0] == 1.0
    assert stats.std[1] == STD_FLOOR


def test_global_stats_constant_corpus():
    fs = FeatureSequence(np.full((5, 3), 4.0), 2)
    stats = compute_global_stats([fs])
    assert np.all(stats.std == STD_FLOOR)
    assert np.all(apply_global_stats(fs, stats).frames == 0.0)


def test_global_stats_two_pass_oracle(rng):
    corpus = [FeatureSequence(rng.standard_normal((int(rng.integers(1, 30)), 6)) * 4 + 2, 5) for _ in range(12)]
    stats = compute_global_stats(corpus)
    pooled = np.vstack([c.frames for c in corpus])
    assert np.allclose(stats.mean, pooled.mean(axis=0), atol=1e-12)
    assert np.allclose(stats.variance, pooled.var(axis=0), atol=1e-10)
    normed = np.vstack([apply_global_stats(c, stats).frames for c in corpus])
    assert np.max(np.abs(normed.mean(axis=0))) < 1e-9
    assert np.max(np.abs(normed.std(axis=0) - 1.0)) < 1e-6
    assert all(apply_global_stats(c, stats).normalization == GLOBAL for c in corpus)


def test_global_stats_merge_is_associative(rng):
    parts = [rng.standard_normal((n, 3)) for n in (4, 7, 1)]
    s = [GlobalFeatureStats.empty(3).update(p) for p in parts]
    left = s[0].merge(s[1]).merge(s[2])
    right = s[0].merge(s[1].merge(s[2]))
    assert left.count == right.count == 12
    assert np.allclose(left.mean, right.mean, atol=1e-14) and np.allclose(left.m2, right.m2, atol=1e-12)


def test_global_stats_text_round_trip(rng):
    stats = GlobalFeatureStats.empty(4).update(rng.standard_normal((10, 4)))
    back = GlobalFeatureStats.loads(stats.dumps())
    assert back.count == stats.count
    assert np.array_equal(back.mean, stats.mean) and np.allclose(back.variance, stats.variance, rtol=1e-15)


def test_empty_corpus_is_no_data():
    with pytest.raises(NoDataError, match="no data"):
        compute_global_stats([])


def test_featurize_batch_per_speaker(rng):
    utts = [noise_utterance(rng, 1600, 16000, f"s{i % 2}", f"u{i}") for i in range(4)]
    out = featurize_batch(utts, FeatureConfig(normalization=PER_SPEAKER))
    assert len(out) == 4 and all(o.dim == 161 for o in out)
    with pytest.raises(ConfigError):
        featurize(utts[0], FeatureConfig(normalization=GLOBAL))


def test_feature_config_validation():
    FeatureConfig(8000, 20, 10, 80, RAW).validate()
    with pytest.raises(ConfigError, match="bad rate"):
        FeatureConfig(sample_rate=22050).validate()
    with pytest.raises(ConfigError):
        FeatureConfig(window_ms=5, hop_ms=10).validate()


def test_feature_dump_round_trip(tmp_path, rng):
    fs = frame_spectrogram(noise_utterance(rng, 1600, 8000), 20, 10, 10)
    write_feature_dump(fs, tmp_path / "f.txt")
    assert (tmp_path / "f.txt").read_text().splitlines()[0] == f"{fs.frame_count} 11"
    assert np.array_equal(read_feature_dump(tmp_path / "f.txt"), fs.frames)
