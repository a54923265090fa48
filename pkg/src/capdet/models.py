"""Tiny captioner: ViT-style encoder, fusion bridge, GPT-style decoder.

Two fusion architectures are supported:

* ``CrossAttnFusion`` (ViTGPT2-like): encoder tokens go straight into the
  decoder's cross-attention blocks, and only those cross-attention blocks
  train.
* ``QueryBridge`` (BLIP-2-lite): a small set of learnable query tokens
  cross-attends to the frozen encoder output through ``bridge_layers``
  blocks; the bridge trains, encoder and decoder stay frozen.

All weights are stored ``(out_features, in_features)`` and applied as
``x @ W.T`` to row-major token matrices, i.e. ``h = W x`` per token.
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from capdet import tensor as T
from capdet.rng import Rng
from capdet.tensor import ShapeError, Tensor

PAD, BOS, EOS, REAL, FAKE = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ["[PAD]", "[BOS]", "[EOS]", "real", "fake"]
INIT_STD = 0.02


def vocabulary(vocab_size: int) -> list[str]:
    """Word-level table; ids past the label words are unused filler."""
    return SPECIAL_TOKENS + [f"[unused{i}]" for i in range(len(SPECIAL_TOKENS), vocab_size)]


class Architecture(str, enum.Enum):
    CROSS_ATTN = "CrossAttnFusion"
    QUERY_BRIDGE = "QueryBridge"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    channels: int = 3
    patch_size: int = 4
    d_model: int = 64
    n_heads: int = 4
    encoder_layers: int = 4
    decoder_layers: int = 2
    vocab_size: int = 40
    max_caption_len: int = 4
    n_query_tokens: int = 8
    bridge_layers: int = 2
    architecture: Architecture = Architecture.QUERY_BRIDGE

    def __post_init__(self):
        object.__setattr__(self, "architecture", Architecture(self.architecture))

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size**2

    def validate(self) -> "ModelConfig":
        problems = []
        for name in ("image_size", "channels", "patch_size", "d_model", "n_heads", "vocab_size"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be positive")
        for name in ("encoder_layers", "decoder_layers", "bridge_layers"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be non-negative")
        if self.patch_size > 0 and self.image_size % self.patch_size:
            problems.append(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.n_heads > 0 and self.d_model % self.n_heads:
            problems.append(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.max_caption_len < 3:
            problems.append("max_caption_len must be >= 3 (BOS + label + EOS)")
        if self.vocab_size < len(SPECIAL_TOKENS):
            problems.append(f"vocab_size must be >= {len(SPECIAL_TOKENS)}")
        if self.architecture is Architecture.QUERY_BRIDGE and self.n_query_tokens < 1:
            problems.append("n_query_tokens must be >= 1 for QueryBridge")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["architecture"] = self.architecture.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass(frozen=True)
class AttentionWeights:
    """Names of the four projections of one attention layer."""

    W_q: str
    W_k: str
    W_v: str
    W_o: str
    layer_kind: str  # "SelfAttn" | "CrossAttn"
    location: tuple[int, str]  # (block index, component prefix)

    def name_of(self, kind: str) -> str:
        return getattr(self, kind)


@dataclass
class CaptionerModel:
    config: ModelConfig
    params: dict[str, Tensor]
    seed: int = 0
    trainable: dict[str, bool] = field(default_factory=dict)

    def __post_init__(self):
        if not self.trainable:
            self.trainable = {k: p.requires_grad for k, p in self.params.items()}
        self.set_trainable(self.trainable)

    def set_trainable(self, mask: dict[str, bool]) -> None:
        if set(mask) != set(self.params):
            raise ValueError("trainability mask must cover exactly the parameter set")
        self.trainable = dict(mask)
        for k, p in self.params.items():
            p.requires_grad = self.trainable[k]

    def freeze_all(self) -> None:
        self.set_trainable({k: False for k in self.params})

    def project(self, name: str, x: Tensor) -> Tensor:
        return T.linear(x, self.params[name])

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {k: p for k, p in self.params.items() if self.trainable[k]}

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def copy(self) -> "CaptionerModel":
        params = {k: Tensor(p.data.copy()) for k, p in self.params.items()}
        return CaptionerModel(self.config, params, self.seed, dict(self.trainable))

    def encoder_is_static(self) -> bool:
        return not any(self.trainable[k] for k in self.params if k.startswith("encoder."))

    # hooks the LoRA wrapper overrides
    @property
    def base(self) -> "CaptionerModel":
        return self


# ---------------------------------------------------------------- parameters


def _attn_shapes(prefix: str, d: int) -> dict[str, tuple[int, ...]]:
    return {f"{prefix}.{w}": (d, d) for w in ("W_q", "W_k", "W_v", "W_o")}


def _ln_shapes(prefix: str, d: int) -> dict[str, tuple[int, ...]]:
    return {f"{prefix}.g": (d,), f"{prefix}.b": (d,)}


def _mlp_shapes(prefix: str, d: int) -> dict[str, tuple[int, ...]]:
    return {
        f"{prefix}.W1": (4 * d, d),
        f"{prefix}.b1": (4 * d,),
        f"{prefix}.W2": (d, 4 * d),
        f"{prefix}.b2": (d,),
    }


def encoder_shapes(cfg: ModelConfig, prefix: str = "encoder") -> dict[str, tuple[int, ...]]:
    d = cfg.d_model
    shapes = {
        f"{prefix}.patch_embed.W": (d, cfg.patch_dim),
        f"{prefix}.patch_embed.b": (d,),
        f"{prefix}.pos_embed": (cfg.n_patches, d),
    }
    for i in range(cfg.encoder_layers):
        b = f"{prefix}.blocks.{i}"
        shapes |= _ln_shapes(f"{b}.ln1", d) | _attn_shapes(f"{b}.attn", d)
        shapes |= _ln_shapes(f"{b}.ln2", d) | _mlp_shapes(f"{b}.mlp", d)
    shapes |= _ln_shapes(f"{prefix}.ln_f", d)
    return shapes


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.d_model
    shapes = encoder_shapes(cfg)
    if cfg.architecture is Architecture.QUERY_BRIDGE:
        shapes["bridge.queries"] = (cfg.n_query_tokens, d)
        for i in range(cfg.bridge_layers):
            b = f"bridge.blocks.{i}"
            shapes |= _ln_shapes(f"{b}.ln_q", d) | _ln_shapes(f"{b}.ln_kv", d)
            shapes |= _attn_shapes(f"{b}.cross_attn", d)
            shapes |= _ln_shapes(f"{b}.ln2", d) | _mlp_shapes(f"{b}.mlp", d)
        shapes |= _ln_shapes("bridge.ln_f", d)
        shapes |= {"bridge.proj.W": (d, d), "bridge.proj.b": (d,)}
    shapes["decoder.tok_embed"] = (cfg.vocab_size, d)
    shapes["decoder.pos_embed"] = (cfg.max_caption_len, d)
    for i in range(cfg.decoder_layers):
        b = f"decoder.blocks.{i}"
        shapes |= _ln_shapes(f"{b}.ln1", d) | _attn_shapes(f"{b}.attn", d)
        shapes |= _ln_shapes(f"{b}.ln_x", d) | _attn_shapes(f"{b}.cross_attn", d)
        shapes |= _ln_shapes(f"{b}.ln2", d) | _mlp_shapes(f"{b}.mlp", d)
    shapes |= _ln_shapes("decoder.ln_f", d)
    return shapes


def init_param(name: str, shape: tuple[int, ...], rng: Rng) -> np.ndarray:
    """N(0, 0.02) weights, zero biases, unit layer-norm gains."""
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "g":
        return np.ones(shape, np.float32)
    if leaf.startswith("b") and len(shape) == 1:
        return np.zeros(shape, np.float32)
    return rng.stream(name).normal(shape, INIT_STD)


def is_initially_trainable(cfg: ModelConfig, name: str) -> bool:
    if cfg.architecture is Architecture.CROSS_ATTN:
        return name.startswith("decoder.blocks.") and (".cross_attn." in name or ".ln_x." in name)
    return name.startswith("bridge.")


def init_model(config: ModelConfig, seed: int) -> CaptionerModel:
    config.validate()
    rng = Rng(seed, "init")
    params = {}
    mask = {}
    for name, shape in parameter_shapes(config).items():
        params[name] = Tensor(init_param(name, shape, rng))
        mask[name] = is_initially_trainable(config, name)
    return CaptionerModel(config, params, seed, mask)


def attention_layers(cfg: ModelConfig) -> list[AttentionWeights]:
    """Every attention layer with its hierarchical weight names."""
    layers = []

    def add(prefix, kind, idx):
        layers.append(AttentionWeights(*(f"{prefix}.{w}" for w in ("W_q", "W_k", "W_v", "W_o")), kind, (idx, prefix)))

    for i in range(cfg.encoder_layers):
        add(f"encoder.blocks.{i}.attn", "SelfAttn", i)
    if cfg.architecture is Architecture.QUERY_BRIDGE:
        for i in range(cfg.bridge_layers):
            add(f"bridge.blocks.{i}.cross_attn", "CrossAttn", i)
    for i in range(cfg.decoder_layers):
        add(f"decoder.blocks.{i}.attn", "SelfAttn", i)
        add(f"decoder.blocks.{i}.cross_attn", "CrossAttn", i)
    return layers


# ---------------------------------------------------------------- blocks


def _ln(model, prefix: str, x: Tensor) -> Tensor:
    p = model.params
    return T.layer_norm(x, p[f"{prefix}.g"], p[f"{prefix}.b"])


def _mlp(model, prefix: str, x: Tensor) -> Tensor:
    p = model.params
    h = T.gelu(T.linear(x, p[f"{prefix}.W1"], p[f"{prefix}.b1"]))
    return T.linear(h, p[f"{prefix}.W2"], p[f"{prefix}.b2"])


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    B, L, d = x.shape
    return T.transpose(x.reshape(B, L, n_heads, d // n_heads), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    B, h, L, dh = x.shape
    return T.transpose(x, (0, 2, 1, 3)).reshape(B, L, h * dh)


def causal_mask(n: int, dtype=np.float32) -> np.ndarray:
    m = np.zeros((n, n), dtype=dtype)
    m[np.triu_indices(n, 1)] = -np.inf
    return m


def attention(model, prefix: str, xq: Tensor, xkv: Tensor, causal: bool = False) -> Tensor:
    """Multi-head attention of ``xq`` rows over ``xkv`` rows (both batched)."""
    h = model.config.n_heads
    q = _split_heads(model.project(f"{prefix}.W_q", xq), h)
    k = _split_heads(model.project(f"{prefix}.W_k", xkv), h)
    v = _split_heads(model.project(f"{prefix}.W_v", xkv), h)
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = T.mul(T.matmul(q, T.swapaxes(k, -1, -2)), scale)
    if causal:
        scores = T.add(scores, Tensor(causal_mask(scores.shape[-1], scores.dtype)))
    att = T.softmax_stable(scores, axis=-1)
    out = _merge_heads(T.matmul(att, v))
    return model.project(f"{prefix}.W_o", out)


def encoder_block(model, prefix: str, x: Tensor) -> Tensor:
    a = _ln(model, f"{prefix}.ln1", x)
    x = T.add(x, attention(model, f"{prefix}.attn", a, a))
    return T.add(x, _mlp(model, f"{prefix}.mlp", _ln(model, f"{prefix}.ln2", x)))


# ---------------------------------------------------------------- forward passes


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, C, H, W) -> (B, n_patches, C*patch*patch), raster patch order."""
    B, C, H, W = images.shape
    x = images.reshape(B, C, H // patch, patch, W // patch, patch)
    return x.transpose(0, 2, 4, 1, 3, 5).reshape(B, (H // patch) * (W // patch), C * patch * patch)


def _as_image_batch(cfg: ModelConfig, image) -> tuple[np.ndarray, bool]:
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float32)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    want = (cfg.channels, cfg.image_size, cfg.image_size)
    if arr.ndim != 4 or arr.shape[1:] != want:
        raise ShapeError(f"image shape {tuple(arr.shape)} does not match expected {want}")
    return arr.astype(np.float32, copy=False), single


def embed_patches(model, images: np.ndarray, prefix: str = "encoder", positional: bool = True) -> Tensor:
    cfg = model.config
    p = model.params
    x = T.linear(Tensor(patchify(images, cfg.patch_size)), p[f"{prefix}.patch_embed.W"], p[f"{prefix}.patch_embed.b"])
    if positional:
        x = T.add(x, p[f"{prefix}.pos_embed"])
    return x


def encoder_stack(model, x: Tensor, prefix: str = "encoder") -> Tensor:
    for i in range(model.config.encoder_layers):
        x = encoder_block(model, f"{prefix}.blocks.{i}", x)
    return _ln(model, f"{prefix}.ln_f", x)


def encode_image(model, image) -> Tensor:
    """(3, d, d) -> (n_patches, d_model); a leading batch axis is passed through."""
    imgs, single = _as_image_batch(model.config, image)
    out = encoder_stack(model, embed_patches(model, imgs))
    return out[0] if single else out


def bridge(model, enc_tokens: Tensor) -> Tensor:
    cfg = model.config
    if cfg.architecture is Architecture.CROSS_ATTN:
        return enc_tokens
    single = enc_tokens.ndim == 2
    enc = enc_tokens.reshape(1, *enc_tokens.shape) if single else enc_tokens
    if enc.shape[-1] != cfg.d_model:
        raise ShapeError(f"bridge: encoder tokens {enc.shape} do not have width {cfg.d_model}")
    B = enc.shape[0]
    q = T.broadcast_to(model.params["bridge.queries"], (B, cfg.n_query_tokens, cfg.d_model))
    for i in range(cfg.bridge_layers):
        b = f"bridge.blocks.{i}"
        kv = _ln(model, f"{b}.ln_kv", enc)
        q = T.add(q, attention(model, f"{b}.cross_attn", _ln(model, f"{b}.ln_q", q), kv))
        q = T.add(q, _mlp(model, f"{b}.mlp", _ln(model, f"{b}.ln2", q)))
    q = _ln(model, "bridge.ln_f", q)
    out = T.linear(q, model.params["bridge.proj.W"], model.params["bridge.proj.b"])
    return out[0] if single else out


def decode_logits(model, ctx_tokens: Tensor, prefix) -> Tensor:
    """Teacher-forced logits (len(prefix), vocab) for ``prefix`` given context.

    Accepts a single example or a batch (ctx (B, n, d), prefix (B, L)).
    """
    cfg = model.config
    ids = np.asarray(prefix, dtype=np.int64)
    single = ids.ndim == 1
    if single:
        ids = ids[None]
        ctx = ctx_tokens.reshape(1, *ctx_tokens.shape)
    else:
        ctx = ctx_tokens
    if ctx.ndim != 3 or ctx.shape[1] == 0:
        raise ShapeError(f"decoder needs a non-empty context, got shape {ctx_tokens.shape}")
    if ctx.shape[0] != ids.shape[0]:
        raise ShapeError(f"context batch {ctx.shape} does not match prefix batch {ids.shape}")
    L = ids.shape[1]
    if L == 0 or L > cfg.max_caption_len:
        raise ValueError(f"prefix length {L} outside 1..{cfg.max_caption_len}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ValueError(f"token id outside vocabulary of {cfg.vocab_size}")
    p = model.params
    x = T.add(T.embedding(p["decoder.tok_embed"], ids), p["decoder.pos_embed"][:L])
    for i in range(cfg.decoder_layers):
        b = f"decoder.blocks.{i}"
        a = _ln(model, f"{b}.ln1", x)
        x = T.add(x, attention(model, f"{b}.attn", a, a, causal=True))
        x = T.add(x, attention(model, f"{b}.cross_attn", _ln(model, f"{b}.ln_x", x), ctx))
        x = T.add(x, _mlp(model, f"{b}.mlp", _ln(model, f"{b}.ln2", x)))
    x = _ln(model, "decoder.ln_f", x)
    logits = T.linear(x, p["decoder.tok_embed"])
    return logits[0] if single else logits


def context_tokens(model, images) -> Tensor:
    """encode_image followed by bridge."""
    return bridge(model, encode_image(model, images))


def with_config(cfg: ModelConfig, **changes) -> ModelConfig:
    return replace(cfg, **changes).validate()
