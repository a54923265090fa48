"""Run configuration: one flat ``key = value`` file.

Precedence, lowest first: built-in defaults, the config file, the
``CAPDET_SEED`` environment variable, command-line overrides.  The effective
configuration is written back into every run directory.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, fields, replace
from pathlib import Path

from capdet.lora import LoraError, LoraSpec
from capdet.models import Architecture, ConfigError, ModelConfig
from capdet.training import TrainConfig

SEED_ENV = "CAPDET_SEED"
MODEL_KINDS = ("qbridge-lora", "qbridge", "crossattn", "conv", "patch")
_SECTION = "run"

# key -> one-line description, written as a comment above each key
SCHEMA = {
    "seed": "master seed: corpus, initialisation, adapters, shuffling",
    "corpus_dir": "corpus root (holds manifest.jsonl)",
    "n_train": "train images per class",
    "n_test": "test images per generator and in the shared REAL pool",
    "image_size": "square image side in pixels",
    "model": "one of " + ", ".join(MODEL_KINDS),
    "name": "row label in evaluation tables (default: the model kind)",
    "learning_rate": "Adam step size",
    "epochs": "passes over the train split",
    "batch_size": "mini-batch size",
    "lora_rank": "adapter rank r",
    "lora_alpha": "adapter scale numerator (update is alpha/r * B A)",
    "lora_dropout": "dropout on the adapter input path",
    "lora_targets": "comma-separated projection kinds to adapt",
    "train_bridge": "qbridge-lora only: also train the query bridge",
    "patch_size": "ViT patch side",
    "d_model": "token width",
    "n_heads": "attention heads",
    "encoder_layers": "ViT blocks",
    "decoder_layers": "decoder blocks",
    "n_query_tokens": "query tokens of the bridge",
    "bridge_layers": "bridge blocks",
    "vocab_size": "decoder vocabulary size",
    "max_caption_len": "caption length incl. BOS/EOS/PAD",
}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 42
    corpus_dir: str = "corpus"
    n_train: int = 1000
    n_test: int = 250
    image_size: int = 32
    model: str = "qbridge-lora"
    name: str = ""
    learning_rate: float = 5e-5
    epochs: int = 20
    batch_size: int = 32
    lora_rank: int = 16
    lora_alpha: float = 32.0
    lora_dropout: float = 0.05
    lora_targets: str = "W_q,W_k"
    train_bridge: bool = False
    patch_size: int = 4
    d_model: int = 64
    n_heads: int = 4
    encoder_layers: int = 4
    decoder_layers: int = 2
    n_query_tokens: int = 8
    bridge_layers: int = 2
    vocab_size: int = 40
    max_caption_len: int = 4

    @property
    def run_name(self) -> str:
        return self.name or self.model

    def model_config(self) -> ModelConfig:
        arch = Architecture.CROSS_ATTN if self.model == "crossattn" else Architecture.QUERY_BRIDGE
        return ModelConfig(
            image_size=self.image_size,
            patch_size=self.patch_size,
            d_model=self.d_model,
            n_heads=self.n_heads,
            encoder_layers=self.encoder_layers,
            decoder_layers=self.decoder_layers,
            vocab_size=self.vocab_size,
            max_caption_len=self.max_caption_len,
            n_query_tokens=self.n_query_tokens,
            bridge_layers=self.bridge_layers,
            architecture=arch,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.learning_rate, self.epochs, self.batch_size, self.seed)

    def lora_spec(self) -> LoraSpec:
        targets = tuple(t.strip() for t in self.lora_targets.split(",") if t.strip())
        return LoraSpec(self.lora_rank, self.lora_alpha, self.lora_dropout, targets)

    def validate(self) -> "RunConfig":
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"model must be one of {', '.join(MODEL_KINDS)}; got {self.model!r}")
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigError("n_train and n_test must be positive")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        cfg = self.model_config().validate()
        try:
            self.train_config().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.model == "qbridge-lora":
            try:
                self.lora_spec().validate(cfg.d_model)
            except LoraError as exc:
                raise ConfigError(str(exc)) from exc
        return self

    def to_text(self) -> str:
        lines = ["# capdet run configuration (flat key = value)"]
        for f in fields(self):
            lines.append(f"# {SCHEMA[f.name]}")
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _coerce(key: str, raw: str):
    kinds = {f.name: type(f.default) for f in fields(RunConfig)}
    if key not in kinds:
        raise ConfigError(f"unknown config key {key!r}")
    kind = kinds[key]
    raw = raw.strip()
    try:
        if kind is bool:
            return configparser.ConfigParser.BOOLEAN_STATES[raw.lower()]
        return kind(raw)
    except (KeyError, ValueError):
        raise ConfigError(f"bad value for {key}: {raw!r} (expected {kind.__name__})") from None


def parse_config(text: str) -> dict:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    try:
        parser.read_string(f"[{_SECTION}]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    extra = [s for s in parser.sections() if s != _SECTION]
    if extra:
        raise ConfigError(f"malformed config: the file is flat, found section [{extra[0]}]")
    return {k: _coerce(k, v) for k, v in parser[_SECTION].items()}


def load_config(path=None, overrides: dict | None = None, env=None) -> RunConfig:
    """Defaults <- file <- $CAPDET_SEED <- overrides (raw strings or values)."""
    values: dict = {}
    if path is not None:
        try:
            values.update(parse_config(Path(path).read_text()))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        values["seed"] = _coerce("seed", env[SEED_ENV])
    for key, val in (overrides or {}).items():
        values[key] = _coerce(key, _format(val))
    return replace(RunConfig(), **values).validate()
