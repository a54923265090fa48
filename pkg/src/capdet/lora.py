"""Low-rank adapters on attention projections.

An adapted projection computes ``h = W x + (alpha / r) * B A drop(x)`` with the
base ``W`` frozen, ``A`` (r x d) drawn N(0, 0.02) and ``B`` (d x r) starting at
zero, so a freshly injected model is the base model exactly.

Injection sites: every *self*-attention layer of the stacks listed in
``LoraSpec.sites`` (encoder and decoder by default; the query bridge has only
cross-attention).  With the defaults that is

    adapters = (encoder_layers + decoder_layers) * len(target_kinds)

e.g. (4 + 2) * 2 = 12 adapters on the default model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from capdet import tensor as T
from capdet.models import CaptionerModel, attention_layers
from capdet.rng import Rng
from capdet.tensor import ShapeError, Tensor
from capdet.tensorio import read_tensors, write_tensors

ATTENTION_KINDS = ("W_q", "W_k", "W_v", "W_o")
INIT_STD = 0.02


class LoraError(ValueError):
    pass


@dataclass(frozen=True)
class LoraSpec:
    rank: int = 16
    alpha: float = 32.0
    dropout: float = 0.05
    target_kinds: tuple[str, ...] = ("W_q", "W_k")
    sites: tuple[str, ...] = ("encoder", "decoder")

    def validate(self, d_model: int) -> "LoraSpec":
        if self.rank < 1:
            raise LoraError(f"rank must be positive, got {self.rank}")
        if self.rank > d_model:
            raise LoraError(f"rank {self.rank} exceeds d_model {d_model}")
        if self.alpha <= 0:
            raise LoraError(f"alpha must be positive, got {self.alpha}")
        if not 0.0 <= self.dropout < 1.0:
            raise LoraError(f"dropout must be in [0, 1), got {self.dropout}")
        unknown = set(self.target_kinds) - set(ATTENTION_KINDS)
        if unknown or not self.target_kinds:
            raise LoraError(f"unknown target kinds {sorted(unknown)}; choose from {ATTENTION_KINDS}")
        return self

    def to_dict(self) -> dict:
        return {
            "rank": self.rank,
            "alpha": self.alpha,
            "dropout": self.dropout,
            "target_kinds": list(self.target_kinds),
            "sites": list(self.sites),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LoraSpec":
        return cls(
            rank=int(d["rank"]),
            alpha=float(d["alpha"]),
            dropout=float(d["dropout"]),
            target_kinds=tuple(d["target_kinds"]),
            sites=tuple(d.get("sites", ("encoder", "decoder"))),
        )


@dataclass
class LoraLayer:
    name: str
    W: Tensor
    A: Tensor
    B: Tensor
    rank: int
    alpha: float
    dropout: float = 0.0

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


def make_layer(name: str, W: Tensor, rank: int, alpha: float, dropout: float, rng: Rng) -> LoraLayer:
    d_out, d_in = W.shape
    A = Tensor(rng.normal((rank, d_in), INIT_STD), requires_grad=True)
    B = Tensor(np.zeros((d_out, rank), np.float32), requires_grad=True)
    return LoraLayer(name, W, A, B, rank, alpha, dropout)


def lora_forward(layer: LoraLayer, x: Tensor, mode: str = "eval", rng: Rng | None = None) -> Tensor:
    if x.shape[-1] != layer.W.shape[1]:
        raise ShapeError(f"lora_forward: input {x.shape} does not match weight {layer.W.shape}")
    base = T.linear(x, layer.W)
    xin = x
    if mode == "train" and layer.dropout > 0:
        if rng is None:
            raise ValueError("train mode with dropout needs an rng")
        xin = T.dropout(x, layer.dropout, rng)
    elif mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    delta = T.linear(T.linear(xin, layer.A), layer.B)
    return T.add(base, T.mul(delta, np.float32(layer.scale)))


def merge(layer: LoraLayer) -> np.ndarray:
    """Dense ``W + (alpha/r) B A``; the layer is left untouched."""
    delta = layer.B.data @ layer.A.data
    return (layer.W.data + np.float32(layer.scale) * delta).astype(np.float32)


@dataclass
class AdaptedModel:
    base: CaptionerModel
    adapters: dict[str, LoraLayer]
    spec: LoraSpec
    seed: int = 0
    mode: str = "eval"
    rng: Rng | None = field(default=None, repr=False)

    @property
    def config(self):
        return self.base.config

    @property
    def params(self) -> dict[str, Tensor]:
        return self.base.params

    def project(self, name: str, x: Tensor) -> Tensor:
        layer = self.adapters.get(name)
        if layer is None:
            return self.base.project(name, x)
        return lora_forward(layer, x, self.mode, self.rng)

    def train(self, rng: Rng) -> None:
        self.mode = "train"
        self.rng = rng

    def eval(self) -> None:
        self.mode = "eval"
        self.rng = None

    def adapter_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, layer in self.adapters.items():
            out[f"{name}.lora.A"] = layer.A.data
            out[f"{name}.lora.B"] = layer.B.data
        return out

    def trainable_parameters(self) -> dict[str, Tensor]:
        out = {}
        for name, layer in self.adapters.items():
            out[f"{name}.lora.A"] = layer.A
            out[f"{name}.lora.B"] = layer.B
        out.update(self.base.trainable_parameters())
        return out

    def encoder_is_static(self) -> bool:
        return self.base.encoder_is_static() and not any(n.startswith("encoder.") for n in self.adapters)

    def num_parameters(self) -> int:
        return self.base.num_parameters() + sum(a.size for a in self.adapter_arrays().values())

    def merged(self) -> CaptionerModel:
        """Plain model with every adapter folded into its base weight."""
        m = self.base.copy()
        for name, layer in self.adapters.items():
            m.params[name] = Tensor(merge(layer))
        m.freeze_all()
        return m


def target_names(model: CaptionerModel, spec: LoraSpec) -> list[str]:
    names = []
    for layer in attention_layers(model.config):
        stack = layer.location[1].split(".", 1)[0]
        if layer.layer_kind != "SelfAttn" or stack not in spec.sites:
            continue
        names.extend(layer.name_of(kind) for kind in ATTENTION_KINDS if kind in spec.target_kinds)
    return names


def inject(model: CaptionerModel, spec: LoraSpec | None = None, seed: int = 0, keep_base_trainables: bool = False) -> AdaptedModel:
    """Wrap ``model`` with adapters; the base weights are shared, never copied.

    By default every base parameter is frozen.  ``keep_base_trainables`` keeps
    whatever the architecture marked trainable (e.g. the query bridge).
    """
    spec = (spec or LoraSpec()).validate(model.config.d_model)
    params = {k: Tensor(p.data) for k, p in model.params.items()}
    mask = {k: (keep_base_trainables and model.trainable[k]) for k in params}
    base = CaptionerModel(model.config, params, model.seed, mask)
    rng = Rng(seed, "lora")
    adapters = {
        name: make_layer(name, base.params[name], spec.rank, spec.alpha, spec.dropout, rng.stream(name))
        for name in target_names(base, spec)
    }
    return AdaptedModel(base, adapters, spec, seed)


def trainable_parameters(adapted: AdaptedModel) -> dict[str, Tensor]:
    return adapted.trainable_parameters()


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def save_adapter(adapted: AdaptedModel, path) -> None:
    """Write A/B tensors to ``path`` and a JSON header next to it (.json)."""
    path = Path(path)
    write_tensors(path, adapted.adapter_arrays())
    header = {
        "format": "CAPDET-LORA v1",
        "spec": adapted.spec.to_dict(),
        "base_config_hash": adapted.config.config_hash(),
        "seed": adapted.seed,
        "keep_base_trainables": any(adapted.base.trainable.values()),
        "adapters": list(adapted.adapters),
    }
    _sidecar(path).write_text(json.dumps(header, indent=2) + "\n")


def load_adapter(model: CaptionerModel, path) -> AdaptedModel:
    path = Path(path)
    try:
        header = json.loads(_sidecar(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise LoraError(f"cannot read adapter header {_sidecar(path)}: {exc}") from exc
    if header["base_config_hash"] != model.config.config_hash():
        raise LoraError(f"adapter {path} was trained on a different base model configuration")
    spec = LoraSpec.from_dict(header["spec"])
    adapted = inject(model, spec, header["seed"], header.get("keep_base_trainables", False))
    arrays = read_tensors(path)
    if set(arrays) != set(adapted.adapter_arrays()):
        raise LoraError(f"adapter {path} does not match the injection sites of this model")
    for name, layer in adapted.adapters.items():
        layer.A.data = arrays[f"{name}.lora.A"]
        layer.B.data = arrays[f"{name}.lora.B"]
    return adapted
