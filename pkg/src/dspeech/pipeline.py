"""End-to-end runs wiring the modules together: stats, train, augment, LM, decode, evaluate."""

from __future__ import annotations

import contextlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from dspeech import checkpoint
from dspeech.alphabet import ALPHABET
from dspeech.audio import Utterance, load_utterance, write_wav
from dspeech.augmentation import (BandPowerProfile, NoiseClip, accept_noise_clip, band_power_profile,
                                  default_band_edges, jitter_translate, max_offset, mix_noise)
from dspeech.config import PipelineConfig
from dspeech.decoder import DecoderConfig, beam_search
from dspeech.errors import ConfigError, DSpeechError, NoDataError, PipelineError, ShapeError
from dspeech.features import (GLOBAL, PER_SPEAKER, STD_FLOOR, FeatureConfig, GlobalFeatureStats,
                              compute_global_stats, featurize, frame_spectrogram)
from dspeech.lm import NGramModel, load_arpa, save_arpa, train_ngram
from dspeech.manifest import ManifestDataset, ingest_manifest
from dspeech.network import NetworkParams, PosteriorGrid, forward, init_params, log_softmax
from dspeech.plotting import plot_error_rates, plot_posteriors, plot_training_curve
from dspeech.scoring import char_errors, corpus_cer, corpus_wer, word_errors
from dspeech.training import Example, OptimizerState, TrainConfig, train_epoch

log = logging.getLogger(__name__)


@contextlib.contextmanager
def stage(module: str):
    """Re-raise module failures with the stage name attached."""
    try:
        yield
    except PipelineError:
        raise
    except (DSpeechError, ValueError, OSError, FloatingPointError, ZeroDivisionError) as exc:
        raise PipelineError(module, exc) from exc


def _start(name: str, config: PipelineConfig):
    log.info("%s: resolved configuration (seed %d)\n%s", name, config.train.seed, config.echo())


def _out_dir(config: PipelineConfig) -> Path:
    out = Path(config.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(value, key: str) -> Path:
    if not value:
        raise ConfigError(f"bad config: {key} is required for this run")
    path = Path(value)
    if not path.exists():
        raise ConfigError(f"bad config: {key} = {value} does not exist")
    return path


# ---------------------------------------------------------------- features

def read_stats(path, feature: FeatureConfig) -> GlobalFeatureStats:
    """Load a stats dump and check its width against the feature settings."""
    stats = GlobalFeatureStats.loads(Path(path).read_text())
    if stats.dim != feature.dim:
        raise ConfigError(f"bad config: stats file {path} has {stats.dim} bins but "
                          f"feature.n_banks = {feature.n_banks} gives {feature.dim}")
    return stats


@dataclass
class Featurizer:
    """Utterance -> normalized frames, usable on jittered copies as well.

    Per-speaker mean/std are fixed from the unshifted audio so every jitter
    variant is normalized identically.
    """

    config: FeatureConfig
    stats: GlobalFeatureStats | None = None
    speaker_stats: dict = field(default_factory=dict)

    @classmethod
    def for_corpus(cls, config: FeatureConfig, utts: Sequence[Utterance],
                   stats: GlobalFeatureStats | None = None) -> "Featurizer":
        if config.normalization == GLOBAL and stats is None:
            raise ConfigError("bad config: global normalization needs paths.stats (run `stats` first)")
        speaker_stats = {}
        if config.normalization == PER_SPEAKER:
            groups: dict[str, list[np.ndarray]] = {}
            for u in utts:
                if u.speaker_id is None:
                    raise ValueError(f"no speaker: utterance {u.utterance_id!r} has no speaker_id")
                groups.setdefault(u.speaker_id, []).append(
                    frame_spectrogram(u, config.window_ms, config.hop_ms, config.n_banks).frames)
            for spk, frames in groups.items():
                stacked = np.vstack(frames)
                speaker_stats[spk] = (stacked.mean(axis=0), np.maximum(stacked.std(axis=0), STD_FLOOR))
        return cls(config, stats, speaker_stats)

    def __call__(self, utt: Utterance) -> np.ndarray:
        if self.config.normalization == PER_SPEAKER:
            mean, std = self.speaker_stats[utt.speaker_id]
            raw = frame_spectrogram(utt, self.config.window_ms, self.config.hop_ms, self.config.n_banks)
            return (raw.frames - mean) / std
        return featurize(utt, self.config, self.stats).frames


def _load_corpus(config: PipelineConfig, key: str) -> tuple[ManifestDataset, list[Utterance]]:
    path = _require(getattr(config.paths, key), f"paths.{key}")
    with stage("manifest"):
        dataset = ingest_manifest(path, config.feature.sample_rate)
        return dataset, dataset.utterances()


def _featurizer(config: PipelineConfig, utts) -> Featurizer:
    stats = None
    if config.feature.normalization == GLOBAL:
        stats = read_stats(_require(config.paths.stats, "paths.stats"), config.feature)
    with stage("features"):
        return Featurizer.for_corpus(config.feature, utts, stats)


# ------------------------------------------------------------------- stats

def run_stats(config: PipelineConfig) -> Path:
    """Aggregate raw-feature mean/variance over the training manifest."""
    config.validate()
    _start("stats", config)
    _, utts = _load_corpus(config, "train_manifest")
    target = Path(config.paths.stats) if config.paths.stats else _out_dir(config) / "stats.txt"
    with stage("features"):
        stats = compute_global_stats(
            frame_spectrogram(u, config.feature.window_ms, config.feature.hop_ms, config.feature.n_banks)
            for u in utts)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(stats.dumps())
    log.info("stats: %d frames x %d bins -> %s", stats.count, stats.dim, target)
    return target


# ------------------------------------------------------------------- train

def build_examples(utts: Sequence[Utterance], featurizer: Featurizer) -> list[Example]:
    return [Example(u.utterance_id, featurizer(u), tuple(ALPHABET.encode(u.transcript))) for u in utts]


def run_train(config: PipelineConfig) -> Path:
    """Train from scratch; writes the checkpoint, JSON-lines metrics and a loss curve."""
    config.validate()
    net = config.network_config
    if config.feature.normalization == GLOBAL:
        read_stats(_require(config.paths.stats, "paths.stats"), config.feature)
    _start("train", config)
    out = _out_dir(config)
    ckpt_path = Path(config.paths.checkpoints[0]) if config.paths.checkpoints else out / "model.ckpt"
    _, utts = _load_corpus(config, "train_manifest")
    featurizer = _featurizer(config, utts)
    with stage("features"):
        examples = build_examples(utts, featurizer)
    tc: TrainConfig = config.train
    with stage("network"):
        params = init_params(net, tc.seed)
        state = OptimizerState.create(params, tc.learning_rate, tc.momentum, tc.anneal_factor)
    history = []
    metrics_path = out / "metrics.jsonl"
    with open(metrics_path, "w") as sink, stage("training"):
        for _ in range(tc.epochs):
            params, state, m = train_epoch(params, state, examples, tc)
            history.append(m)
            sink.write(json.dumps(m) + "\n")
            sink.flush()
            log.info("epoch %d: mean loss %.4f, lr %.3g, %.2fs", m["epoch"], m["mean_loss"], m["lr"],
                     m["wall_seconds"])
    checkpoint.save(params, ckpt_path)
    if history:
        plot_training_curve(history, out / "training_curve.png")
    log.info("train: checkpoint -> %s", ckpt_path)
    return ckpt_path


# ---------------------------------------------------------------------- LM

def run_lm_train(config: PipelineConfig) -> Path:
    """Train the n-gram model on paths.lm_corpus and write it as ARPA."""
    config.validate()
    _start("lm-train", config)
    corpus = _require(config.paths.lm_corpus, "paths.lm_corpus").read_text().splitlines()
    target = Path(config.paths.lm) if config.paths.lm else _out_dir(config) / "lm.arpa"
    with stage("ngram-lm"):
        model = train_ngram(corpus, config.lm)
    target.parent.mkdir(parents=True, exist_ok=True)
    with open(target, "w") as fh:
        save_arpa(model, fh)
    log.info("lm-train: %s n-grams -> %s", model.ngram_counts(), target)
    return target


# ----------------------------------------------------------------- augment

def _noise_clips(config: PipelineConfig) -> list[NoiseClip]:
    path = _require(config.paths.noise_manifest, "paths.noise_manifest")
    clips = []
    for line in path.read_text().splitlines():
        name = line.split("\t", 1)[0].strip()
        if not name:
            continue
        wav = Path(name) if Path(name).is_absolute() else path.parent / name
        utt = load_utterance(wav, target_rate=config.feature.sample_rate)
        clips.append(NoiseClip(utt.samples, utt.sample_rate_hz, wav.stem))
    if not clips:
        raise NoDataError(f"no data: {path} lists no noise clips")
    return clips


def run_augment(config: PipelineConfig) -> Path:
    """Write noisy copies of the training set plus a manifest with SNR and sources."""
    config.validate()
    _start("augment", config)
    aug = config.augment
    rate = config.feature.sample_rate
    dataset, utts = _load_corpus(config, "train_manifest")
    with stage("augmentation"):
        clips = _noise_clips(config)
        edges = default_band_edges(rate, aug.n_bands)
        if config.paths.noise_reference:
            ref = band_power_profile(load_utterance(config.paths.noise_reference, target_rate=rate), edges)
        else:
            # no reference recording: screen against the pool's mean profile
            profiles = [band_power_profile(c, edges) for c in clips]
            ref = BandPowerProfile(np.mean([p.power for p in profiles], axis=0), edges)
        accepted = []
        for c in clips:
            if accept_noise_clip(c, ref, aug.tolerance_db):
                accepted.append(c)
            else:
                log.info("augment: rejected noise clip %s (band power off by > %g dB)", c.source_id,
                         aug.tolerance_db)
        if not accepted:
            raise NoDataError("no data: every noise clip was rejected")
    out = _out_dir(config) / "augmented"
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    flagged = 0
    for i, utt in enumerate(utts):
        rng = np.random.default_rng([config.train.seed, i])
        usable = [c for c in accepted if _tiles(c, utt)]
        if not usable:
            log.warning("augment: no clip long enough for %s; skipped", utt.utterance_id)
            continue
        k = min(aug.clips_per_utterance, len(usable))
        chosen = [usable[j] for j in sorted(rng.choice(len(usable), size=k, replace=False))]
        target = float(rng.uniform(aug.snr_min_db, aug.snr_max_db))
        with stage("augmentation"):
            res = mix_noise(utt, chosen, target, seed=int(rng.integers(2**32)))
        wav = out / f"{utt.utterance_id}-noisy.wav"
        write_wav(wav, res.utterance.samples, rate)
        flagged += res.flagged
        lines.append("\t".join([str(wav), utt.transcript, utt.speaker_id or "", f"{res.snr_db:.4f}",
                                ",".join(res.sources), "clipped" if res.flagged else "ok"]))
    manifest = _out_dir(config) / "augmented.tsv"
    manifest.write_text("\n".join(lines) + ("\n" if lines else ""))
    log.info("augment: %d utterances (%d flagged for clipping) -> %s", len(lines), flagged, manifest)
    return manifest


def _tiles(clip: NoiseClip, utt: Utterance) -> bool:
    try:
        max_offset(clip, utt.samples.size)
    except ValueError:
        return False
    return True


# ------------------------------------------------------------ decode/eval

def check_ensemble(models: Sequence[NetworkParams], feature: FeatureConfig):
    if not models:
        raise ConfigError("bad config: no checkpoints to decode with")
    first = models[0].config
    for m in models:
        if m.config.input_dim != feature.dim:
            raise ConfigError(f"bad config: checkpoint expects {m.config.input_dim} feature bins, "
                              f"feature settings give {feature.dim}")
        if m.config.output_dim != first.output_dim or m.config.stride != first.stride:
            raise ConfigError("bad config: ensemble members differ in output size or stride")


def ensemble_posteriors(models: Sequence[NetworkParams], utt: Utterance, featurizer: Featurizer,
                        jitter: bool = False, jitter_ms: float = 5.0, log_space: bool = False) -> PosteriorGrid:
    """Frame-wise average over models and (optionally) -j/0/+j ms shifted copies, rows renormalized."""
    variants = [utt]
    if jitter and jitter_ms > 0:
        variants = [jitter_translate(utt, -jitter_ms), utt, jitter_translate(utt, jitter_ms)]
    grids = []
    for v in variants:
        feats = featurizer(v)
        for m in models:
            grids.append(forward(m, feats)[0].log_probs)
    steps = {g.shape[0] for g in grids}
    if len(steps) != 1:
        raise ShapeError(f"alignment error: ensemble grids have output lengths {sorted(steps)}")
    stacked = np.stack(grids)
    if log_space:
        return PosteriorGrid(log_softmax(stacked.mean(axis=0)))
    avg = np.exp(stacked).mean(axis=0)
    with np.errstate(divide="ignore"):
        return PosteriorGrid(np.log(avg / avg.sum(axis=1, keepdims=True)))


def ensemble_decode(models: Sequence[NetworkParams], utt: Utterance, featurizer: Featurizer,
                    lm: NGramModel | None, dconf: DecoderConfig, jitter: bool = False,
                    jitter_ms: float = 5.0, log_space: bool = False):
    """Returns (text, Q, averaged grid)."""
    grid = ensemble_posteriors(models, utt, featurizer, jitter, jitter_ms, log_space)
    text, score = beam_search(grid, lm, dconf)
    return text, score, grid


@dataclass
class Decoded:
    utterance_id: str
    reference: str
    hypothesis: str
    score: float
    grid: PosteriorGrid


def _decode_corpus(config: PipelineConfig) -> tuple[list[Decoded], dict]:
    config.validate()
    paths = config.paths.checkpoints
    if not paths:
        raise ConfigError("bad config: paths.checkpoint is required for this run")
    for p in paths:
        _require(p, "paths.checkpoint")
    with stage("checkpoint"):
        models = [checkpoint.load(p) for p in paths]
    check_ensemble(models, config.feature)
    if config.feature.normalization == GLOBAL:
        read_stats(_require(config.paths.stats, "paths.stats"), config.feature)
    lm = None
    if config.paths.lm:
        with stage("ngram-lm"):
            lm = load_arpa(_require(config.paths.lm, "paths.lm"))
    else:
        log.warning("decode: no paths.lm given; searching without a language model")
    _, utts = _load_corpus(config, "eval_manifest")
    featurizer = _featurizer(config, utts)
    dconf = config.decoder_config
    dec = config.decoder

    def one(utt):
        with stage("decoder"):
            text, score, grid = ensemble_decode(models, utt, featurizer, lm, dconf, dec.jitter,
                                                config.jitter_ms, dec.log_space)
        return Decoded(utt.utterance_id, utt.transcript, text, score, grid)

    workers = max(1, config.train.n_workers)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, utts))
    else:
        results = [one(u) for u in utts]
    echo = {
        "alpha": dconf.alpha, "beta": dconf.beta, "beam_width": dconf.beam_width,
        "prune_threshold": dconf.prune_threshold, "jitter": dec.jitter,
        "jitter_ms": config.jitter_ms if dec.jitter else 0.0, "log_space": dec.log_space,
        "checkpoints": [Path(p).name for p in paths], "lm": Path(config.paths.lm).name if config.paths.lm else None,
        "seed": config.train.seed,
    }
    return results, echo


def run_decode(config: PipelineConfig) -> Path:
    """Writes ``decode.tsv`` (utterance id, hypothesis, Q) and a posterior heat map."""
    _start("decode", config)
    start = time.perf_counter()
    results, _ = _decode_corpus(config)
    out = _out_dir(config)
    target = out / "decode.tsv"
    target.write_text("".join(f"{r.utterance_id}\t{r.hypothesis}\t{r.score:.12g}\n" for r in results))
    plot_posteriors(results[0].grid.log_probs, out / f"posteriors_{results[0].utterance_id}.png",
                    results[0].utterance_id)
    log.info("decode: %d utterances in %.2fs -> %s", len(results), time.perf_counter() - start, target)
    return target


@dataclass
class UtteranceScore:
    utterance_id: str
    reference: str
    hypothesis: str
    wer: float
    cer: float
    word_edits: int
    ref_words: int
    char_edits: int
    ref_chars: int


@dataclass
class EvaluationReport:
    utterances: list[UtteranceScore]
    corpus_wer: float
    corpus_cer: float
    decoding: dict
    timing_seconds: float | None = None   # kept out of the JSON so reports are reproducible

    def to_json(self) -> str:
        body = {
            "decoding": self.decoding,
            "corpus": {"wer": self.corpus_wer, "cer": self.corpus_cer,
                       "utterances": len(self.utterances),
                       "word_edits": sum(u.word_edits for u in self.utterances),
                       "ref_words": sum(u.ref_words for u in self.utterances),
                       "char_edits": sum(u.char_edits for u in self.utterances),
                       "ref_chars": sum(u.ref_chars for u in self.utterances)},
            "utterances": [asdict(u) for u in self.utterances],
        }
        return json.dumps(body, indent=2, sort_keys=True) + "\n"

    def summary(self) -> str:
        width = max([len(u.utterance_id) for u in self.utterances] + [9])
        lines = [f"corpus WER {100 * self.corpus_wer:.2f}%  CER {100 * self.corpus_cer:.2f}%  "
                 f"({len(self.utterances)} utterances)", ""]
        lines.append(f"{'utterance':<{width}}  {'WER':>7}  {'CER':>7}  hypothesis | reference")
        for u in self.utterances:
            lines.append(f"{u.utterance_id:<{width}}  {100 * u.wer:6.2f}%  {100 * u.cer:6.2f}%  "
                         f"{u.hypothesis} | {u.reference}")
        return "\n".join(lines) + "\n"


def build_report(triples: Sequence[tuple[str, str, str]], decoding: dict | None = None) -> EvaluationReport:
    """Score (utterance id, reference, hypothesis) triples."""
    scores = []
    for utt_id, ref, hyp in triples:
        we, nw = word_errors(ref, hyp)
        ce, nc = char_errors(ref, hyp)
        scores.append(UtteranceScore(utt_id, ref, hyp, we / nw if nw else float(we > 0), ce / nc if nc else float(ce > 0),
                                     we, nw, ce, nc))
    pairs = [(r, h) for _, r, h in triples]
    return EvaluationReport(scores, corpus_wer(pairs), corpus_cer(pairs), decoding or {})


def run_evaluate(config: PipelineConfig) -> EvaluationReport:
    """Decode the evaluation manifest and score it; writes JSON, a text summary and a bar chart."""
    _start("evaluate", config)
    start = time.perf_counter()
    results, echo = _decode_corpus(config)
    report = build_report([(r.utterance_id, r.reference, r.hypothesis) for r in results], echo)
    report.timing_seconds = time.perf_counter() - start
    out = _out_dir(config)
    (out / "report.json").write_text(report.to_json())
    (out / "report.txt").write_text(report.summary())
    plot_error_rates([u.utterance_id for u in report.utterances], [u.wer for u in report.utterances],
                     [u.cer for u in report.utterances], out / "error_rates.png")
    log.info("evaluate: WER %.4f CER %.4f in %.2fs -> %s", report.corpus_wer, report.corpus_cer,
             report.timing_seconds, out / "report.json")
    return report
