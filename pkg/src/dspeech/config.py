"""Pipeline configuration: flat ``section.key = value`` text files."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from dspeech.alphabet import ALPHABET
from dspeech.augmentation import DEFAULT_BANDS, DEFAULT_TOLERANCE_DB
from dspeech.decoder import DecoderConfig
from dspeech.errors import ConfigError
from dspeech.features import FeatureConfig
from dspeech.lm import LmTrainConfig
from dspeech.network import NetworkConfig
from dspeech.training import TrainConfig


@dataclass(frozen=True)
class NetworkSettings:
    context: int = 5
    stride: int = 2
    hidden: tuple[int, ...] = (256, 256, 256, 256, 256)
    dropout_rate: float = 0.05
    dropout_layers: tuple[int, ...] = (1, 2, 3, 5)
    dtype: str = "float64"

    def build(self, input_dim: int) -> NetworkConfig:
        hidden = self.hidden * 5 if len(self.hidden) == 1 else self.hidden
        return NetworkConfig(input_dim, self.context, self.stride, hidden, self.dropout_rate,
                             self.dropout_layers, self.dtype)


@dataclass(frozen=True)
class DecodeSettings:
    alpha: float = 1.0
    beta: float = 1.0
    beam_width: int = 1024
    prune_threshold: float = 1e-4
    jitter: bool = False
    jitter_ms: float | None = None   # None: half the feature hop
    log_space: bool = False          # average log-probabilities instead (comparison only)

    def build(self) -> DecoderConfig:
        return DecoderConfig(self.alpha, self.beta, self.beam_width, self.prune_threshold)


@dataclass(frozen=True)
class AugmentSettings:
    snr_min_db: float = 2.0
    snr_max_db: float = 6.0
    tolerance_db: float = DEFAULT_TOLERANCE_DB
    n_bands: int = DEFAULT_BANDS
    clips_per_utterance: int = 2

    def validate(self):
        if self.snr_min_db > self.snr_max_db:
            raise ConfigError("bad config: augment.snr_min_db exceeds augment.snr_max_db")
        if self.n_bands < 1 or self.clips_per_utterance < 1:
            raise ConfigError("bad config: augment.n_bands and augment.clips_per_utterance must be >= 1")
        if self.tolerance_db <= 0:
            raise ConfigError("bad config: augment.tolerance_db must be > 0")


@dataclass(frozen=True)
class PathSettings:
    train_manifest: str | None = None
    eval_manifest: str | None = None
    noise_manifest: str | None = None
    noise_reference: str | None = None
    lm_corpus: str | None = None
    stats: str | None = None
    checkpoint: str | None = None        # comma-separated list decodes as an ensemble
    lm: str | None = None
    out_dir: str = "out"

    @property
    def checkpoints(self) -> list[str]:
        return [p.strip() for p in (self.checkpoint or "").split(",") if p.strip()]


SECTIONS = {
    "feature": FeatureConfig,
    "network": NetworkSettings,
    "lm": LmTrainConfig,
    "decoder": DecodeSettings,
    "train": TrainConfig,
    "augment": AugmentSettings,
    "paths": PathSettings,
}


@dataclass(frozen=True)
class PipelineConfig:
    feature: FeatureConfig = field(default_factory=FeatureConfig)
    network: NetworkSettings = field(default_factory=NetworkSettings)
    lm: LmTrainConfig = field(default_factory=LmTrainConfig)
    decoder: DecodeSettings = field(default_factory=DecodeSettings)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentSettings = field(default_factory=AugmentSettings)
    paths: PathSettings = field(default_factory=PathSettings)

    @property
    def network_config(self) -> NetworkConfig:
        return self.network.build(self.feature.dim)

    @property
    def decoder_config(self) -> DecoderConfig:
        return self.decoder.build()

    @property
    def jitter_ms(self) -> float:
        return self.feature.hop_ms / 2.0 if self.decoder.jitter_ms is None else self.decoder.jitter_ms

    def validate(self) -> "PipelineConfig":
        """Check every section and the dimensions shared between modules."""
        self.feature.validate()
        net = self.network_config
        net.validate()
        if net.output_dim != ALPHABET.size:
            raise ConfigError(f"bad config: network emits {net.output_dim} symbols, alphabet has {ALPHABET.size}")
        self.lm.validate()
        self.decoder_config.validate()
        self.train.validate()
        self.augment.validate()
        if self.jitter_ms < 0:
            raise ConfigError("bad config: decoder.jitter_ms must be >= 0")
        return self

    def with_overrides(self, seed: int | None = None, workers: int | None = None) -> "PipelineConfig":
        train = self.train
        if seed is not None:
            train = dataclasses.replace(train, seed=seed)
        if workers is not None:
            train = dataclasses.replace(train, n_workers=workers)
        return dataclasses.replace(self, train=train)

    def items(self) -> list[tuple[str, object]]:
        """Every resolved ``section.key`` with its value, in declaration order."""
        out = []
        for section in SECTIONS:
            obj = getattr(self, section)
            for f in dataclasses.fields(obj):
                out.append((f"{section}.{f.name}", getattr(obj, f.name)))
        return out

    def echo(self) -> str:
        return "\n".join(f"{k} = {_format(v)}" for k, v in self.items())


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if value is None:
        return ""
    return str(value).lower() if isinstance(value, bool) else str(value)


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(kind, text: str, key: str):
    origin = typing.get_origin(kind)
    args = typing.get_args(kind)
    if args and type(None) in args:
        if text == "":
            return None
        kind = next(a for a in args if a is not type(None))
        origin = typing.get_origin(kind)
        args = typing.get_args(kind)
    try:
        if kind is bool:
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if origin is tuple:
            return tuple(args[0](v.strip()) for v in text.split(",") if v.strip())
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"bad config: {key} = {text!r} is not a valid {getattr(kind, '__name__', kind)}") from None


def parse_pairs(text: str, source: str = "<config>") -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"bad config: {source}:{lineno}: expected 'section.key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        pairs[key] = value
    return pairs


def from_pairs(pairs: dict[str, str], base: PipelineConfig | None = None,
               base_dir: Path | None = None) -> PipelineConfig:
    """Apply ``section.key`` string pairs on top of ``base``.

    Relative paths in the ``paths`` section resolve against ``base_dir``.
    """
    base = base or PipelineConfig()
    updates: dict[str, dict] = {}
    for key, value in pairs.items():
        section, _, name = key.partition(".")
        cls = SECTIONS.get(section)
        if cls is None:
            raise ConfigError(f"bad config: unknown section in {key!r}")
        hints = typing.get_type_hints(cls)
        if name not in hints or name not in {f.name for f in dataclasses.fields(cls)}:
            raise ConfigError(f"bad config: unknown key {key!r}")
        parsed = _coerce(hints[name], value, key)
        if section == "paths" and parsed and base_dir is not None:
            parsed = ",".join(str(base_dir / p.strip()) if not Path(p.strip()).is_absolute() else p.strip()
                              for p in parsed.split(","))
        updates.setdefault(section, {})[name] = parsed
    return dataclasses.replace(base, **{s: dataclasses.replace(getattr(base, s), **kv)
                                        for s, kv in updates.items()})


def load_config(path=None, overrides: dict[str, str] | None = None) -> PipelineConfig:
    config = PipelineConfig()
    if path is not None:
        path = Path(path)
        config = from_pairs(parse_pairs(path.read_text(), str(path)), config, path.parent)
    if overrides:
        config = from_pairs(overrides, config, Path.cwd())
    return config


def dumps_config(config: PipelineConfig) -> str:
    return config.echo() + "\n"
