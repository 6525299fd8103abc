import json

import numpy as np
import pytest

from dspeech import checkpoint
from dspeech.cli import main
from dspeech.config import load_config
from dspeech.decoder import DecoderConfig, beam_search
from dspeech.errors import ConfigError, PipelineError, ShapeError
from dspeech.features import FeatureConfig
from dspeech.network import NetworkConfig, forward, init_params
from dspeech.pipeline import (Featurizer, build_report, check_ensemble, ensemble_decode, ensemble_posteriors,
                              run_stats, run_train)
from dspeech.scoring import wer
from dspeech.toy import toy_corpus

FEAT = FeatureConfig(sample_rate=8000, n_banks=20)


def small_model(seed, stride=2):
    return init_params(NetworkConfig(FEAT.dim, 2, stride, (8,) * 5, 0.0), seed)


@pytest.fixture(scope="module")
def utt():
    return toy_corpus()[0]


def test_report_identity_is_zero():
    report = build_report([("a", "the cat", "the cat"), ("b", "sat", "sat")])
    assert report.corpus_wer == 0.0 and report.corpus_cer == 0.0
    assert all(u.wer == 0.0 for u in report.utterances)


def test_report_corpus_rate_recomputes():
    triples = [("a", "the cat sat", "the bat sat"), ("b", "on a mat", "on mat"), ("c", "x", "x y")]
    report = build_report(triples, {"alpha": 1.0})
    edits = sum(u.word_edits for u in report.utterances)
    words = sum(u.ref_words for u in report.utterances)
    assert report.corpus_wer == edits / words == pytest.approx(3 / 7)
    for u, (_, ref, hyp) in zip(report.utterances, triples):
        assert u.wer == wer(ref, hyp)
    body = json.loads(report.to_json())
    assert body["decoding"] == {"alpha": 1.0} and "timing" not in report.to_json()
    assert "corpus WER" in report.summary()


def test_single_model_ensemble_is_plain_decode(utt):
    model = small_model(0)
    feat = Featurizer(FEAT)
    plain = forward(model, feat(utt))[0]
    grid = ensemble_posteriors([model], utt, feat)
    assert np.max(np.abs(grid.log_probs - plain.log_probs)) < 1e-12
    cfg = DecoderConfig(0, 0, 16)
    assert ensemble_decode([model], utt, feat, None, cfg)[0] == beam_search(plain, None, cfg)[0]


def test_duplicate_model_ensemble_matches_single(utt):
    model = small_model(3)
    feat = Featurizer(FEAT)
    one = ensemble_posteriors([model], utt, feat)
    two = ensemble_posteriors([model, model], utt, feat)
    assert np.max(np.abs(one.log_probs - two.log_probs)) < 1e-12


@pytest.mark.parametrize("log_space", [False, True])
def test_ensemble_rows_normalized(utt, log_space):
    grid = ensemble_posteriors([small_model(0), small_model(1)], utt, Featurizer(FEAT), jitter=True,
                               jitter_ms=5.0, log_space=log_space)
    assert np.all(np.abs(np.exp(grid.log_probs).sum(axis=1) - 1.0) < 1e-9)


def test_ensemble_alignment_error(utt):
    with pytest.raises(ShapeError, match="alignment error"):
        ensemble_posteriors([small_model(0, 1), small_model(1, 2)], utt, Featurizer(FEAT))
    with pytest.raises(ConfigError):
        check_ensemble([small_model(0, 1), small_model(1, 2)], FEAT)
    with pytest.raises(ConfigError):
        check_ensemble([small_model(0)], FeatureConfig(sample_rate=8000, n_banks=30))


def toy_setup(tmp_path):
    assert main(["-q", "toy-corpus", str(tmp_path)]) == 0
    return tmp_path / "toy.cfg"


def test_stats_bank_mismatch_fails_before_training(tmp_path):
    cfg = toy_setup(tmp_path)
    run_stats(load_config(cfg))
    mismatched = load_config(cfg, {"feature.n_banks": "40"})
    with pytest.raises(ConfigError, match="bins"):
        run_train(mismatched)
    assert not (tmp_path / "out" / "model.ckpt").exists()
    assert main(["-q", "--config", str(cfg), "--set", "feature.n_banks=40", "train"]) == 2


def test_missing_manifest_is_config_error(tmp_path):
    assert main(["-q", "--set", "paths.train_manifest=" + str(tmp_path / "nope.tsv"), "stats"]) == 2


def test_stage_wraps_module_failures(tmp_path):
    cfg = toy_setup(tmp_path)
    (tmp_path / "manifest.tsv").write_text("bad.wav\thi\ts\n")
    with pytest.raises(PipelineError, match="^manifest: ManifestError"):
        run_stats(load_config(cfg))


def run_toy(directory, *extra):
    cfg = toy_setup(directory)
    base = ["-q", "--config", str(cfg), *extra]
    for command in ("stats", "lm-train", "train", "augment", "evaluate"):
        assert main(base + [command]) == 0, command
    return directory / "out"


def test_cli_end_to_end_is_deterministic(tmp_path, capsys):
    a = run_toy(tmp_path / "a", "--set", "train.epochs=4")
    b = run_toy(tmp_path / "b", "--set", "train.epochs=4")
    assert (a / "model.ckpt").read_bytes() == (b / "model.ckpt").read_bytes()
    report_a = (a / "report.json").read_text()
    assert report_a == (b / "report.json").read_text()
    assert checkpoint.load(a / "model.ckpt").config.stride == 2
    for name in ("metrics.jsonl", "lm.arpa", "augmented.tsv", "report.txt", "error_rates.png", "training_curve.png"):
        assert (a / name).exists(), name
    rows = (a / "augmented.tsv").read_text().splitlines()
    assert len(rows) == 10 and all(len(r.split("\t")) == 6 for r in rows)
    assert "corpus WER" in capsys.readouterr().out


@pytest.mark.slow
def test_cli_toy_run_learns_the_corpus(tmp_path):
    out = run_toy(tmp_path)
    report = json.loads((out / "report.json").read_text())
    assert report["corpus"]["cer"] < 0.05
    assert main(["-q", "--config", str(tmp_path / "toy.cfg"), "--workers", "2", "decode"]) == 0
    assert len((out / "decode.tsv").read_text().splitlines()) == 10
