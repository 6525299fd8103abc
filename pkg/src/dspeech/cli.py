"""Command-line entry point: ``dspeech [--config FILE] [--seed N] [--workers N] <subcommand>``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from dspeech import pipeline
from dspeech.audio import write_wav
from dspeech.config import load_config
from dspeech.errors import DSpeechError
from dspeech.toy import TOY_TRANSCRIPTS, write_toy_corpus

log = logging.getLogger("dspeech")

TOY_CONFIG = """\
# Small configuration that fits the synthetic toy corpus in about a minute.
feature.sample_rate = 8000
feature.n_banks = 80
feature.normalization = global
network.context = 5
network.stride = 2
network.hidden = 64
network.dropout_rate = 0
train.batch_size = 2
train.epochs = 120
train.learning_rate = 1e-4
train.momentum = 0.99
train.anneal_factor = 1.0
decoder.alpha = 0.5
decoder.beta = 1.0
decoder.beam_width = 64
lm.order = 2
paths.train_manifest = manifest.tsv
paths.eval_manifest = manifest.tsv
paths.noise_manifest = noise.tsv
paths.lm_corpus = lm_corpus.txt
paths.stats = out/stats.txt
paths.checkpoint = out/model.ckpt
paths.lm = out/lm.arpa
paths.out_dir = out
"""


def _toy(args) -> Path:
    """Write the synthetic corpus, noise clips, an LM corpus and a matching config."""
    out = Path(args.directory)
    write_toy_corpus(out, sample_rate=8000, seed=args.seed or 0)
    rng = np.random.default_rng(args.seed or 0)
    names = []
    for i in range(4):
        wav = out / "noise" / f"noise{i}.wav"
        write_wav(wav, 0.1 * rng.standard_normal(8000 * 3), 8000)
        names.append(str(wav.relative_to(out)))
    (out / "noise.tsv").write_text("\n".join(names) + "\n")
    (out / "lm_corpus.txt").write_text("\n".join(TOY_TRANSCRIPTS * 3) + "\n")
    cfg = out / "toy.cfg"
    cfg.write_text(TOY_CONFIG)
    return cfg


COMMANDS = {
    "stats": pipeline.run_stats,
    "train": pipeline.run_train,
    "augment": pipeline.run_augment,
    "lm-train": pipeline.run_lm_train,
    "decode": pipeline.run_decode,
    "evaluate": pipeline.run_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dspeech", description="End-to-end speech recognition pipeline")
    parser.add_argument("--config", help="flat section.key = value configuration file")
    parser.add_argument("--seed", type=int, help="overrides train.seed")
    parser.add_argument("--workers", type=int, help="overrides train.n_workers (also the decode pool size)")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration key; repeatable")
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sub.add_parser(name, help=fn.__doc__.splitlines()[0] if fn.__doc__ else name)
    toy = sub.add_parser("toy-corpus", help="write the synthetic 10-utterance corpus and a config")
    toy.add_argument("directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.command == "toy-corpus":
            print(_toy(args))
            return 0
        overrides = {}
        for item in args.set:
            key, sep, value = item.partition("=")
            if not sep:
                raise DSpeechError(f"--set expects KEY=VALUE, got {item!r}")
            overrides[key.strip()] = value.strip()
        config = load_config(args.config, overrides).with_overrides(args.seed, args.workers)
        result = COMMANDS[args.command](config)
    except DSpeechError as exc:
        log.error("%s", exc)
        return 2
    if isinstance(result, pipeline.EvaluationReport):
        sys.stdout.write(result.summary())
    else:
        print(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
