"""Detection as captioning: labels become one-word captions.

A label maps to the canonical caption ``[BOS] real|fake [EOS]`` padded to
``max_caption_len``.  Training minimises teacher-forced token cross-entropy;
classification scores both canonical captions under the model and returns
the likelier one (ties go to FAKE), so every image receives a label.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from capdet import models
from capdet import tensor as T
from capdet.dataset import Manifest
from capdet.labels import Label
from capdet.models import BOS, EOS, FAKE, PAD, REAL
from capdet.rng import Rng
from capdet.tensor import Tensor, no_grad
from capdet.training import History, TrainConfig, run_epochs

TIE_EPS = 1e-9
_LABEL_TOKEN = {Label.REAL: REAL, Label.FAKE: FAKE}


@dataclass(frozen=True)
class Caption:
    tokens: tuple[int, ...]

    @property
    def text(self) -> str:
        words = models.vocabulary(max(self.tokens) + 1)
        return " ".join(words[t] for t in self.tokens if t not in (PAD, BOS, EOS))

    @property
    def inputs(self) -> np.ndarray:
        return np.array(self.tokens[:-1], dtype=np.int64)

    @property
    def targets(self) -> np.ndarray:
        return np.array(self.tokens[1:], dtype=np.int64)


def caption_of(label: Label, max_len: int = 4) -> Caption:
    body = [BOS, _LABEL_TOKEN[Label(label)], EOS]
    return Caption(tuple(body + [PAD] * (max_len - len(body))))


def label_of(caption: Caption) -> Label:
    for label, tok in _LABEL_TOKEN.items():
        if caption.tokens[:3] == (BOS, tok, EOS) and all(t == PAD for t in caption.tokens[3:]):
            return label
    raise ValueError(f"not a canonical caption: {caption.tokens}")


def caption_batch(labels, max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Teacher-forcing (inputs, targets) arrays for a batch of labels."""
    toks = np.array([caption_of(Label(int(y)), max_len).tokens for y in labels], dtype=np.int64)
    return toks[:, :-1], toks[:, 1:]


def caption_loss(logits: Tensor, target) -> Tensor:
    """Token cross-entropy with PAD ignored.

    ``target`` is a Caption (single example) or a (B, L) array of target ids;
    a batch loss is the mean of the per-example mean token losses.
    """
    tgt = target.targets if isinstance(target, Caption) else np.asarray(target, dtype=np.int64)
    if tgt.ndim == 1:
        return T.cross_entropy_logits(logits, tgt, PAD)
    keep = tgt != PAD
    per_example = keep.sum(axis=1, keepdims=True)
    if (per_example == 0).any():
        raise ValueError("empty loss")
    weights = keep / per_example / tgt.shape[0]
    return T.cross_entropy_logits(logits, tgt, PAD, weights=weights)


def sequence_loglik(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Sum of log-probabilities of non-PAD targets, float64, per row."""
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    tok = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    return (tok * (targets != PAD)).sum(axis=-1)


def _both_caption_scores(model, ctx: Tensor) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Decode both canonical captions for every context row.

    Returns (logits for [real-block; fake-block], ll_real, ll_fake).
    """
    B = ctx.shape[0]
    L = model.config.max_caption_len
    inputs = np.concatenate([caption_batch([Label.REAL] * B, L)[0], caption_batch([Label.FAKE] * B, L)[0]])
    targets = np.concatenate([caption_batch([Label.REAL] * B, L)[1], caption_batch([Label.FAKE] * B, L)[1]])
    ctx2 = T.concat([ctx, ctx], axis=0)
    logits = models.decode_logits(model, ctx2, inputs)
    ll = sequence_loglik(logits.data, targets)
    return logits, ll[:B], ll[B:]


def decide(ll_real: np.ndarray, ll_fake: np.ndarray) -> np.ndarray:
    """1 (FAKE) unless REAL is likelier by more than the tie margin."""
    return np.where(ll_real - ll_fake > TIE_EPS, int(Label.REAL), int(Label.FAKE))


@dataclass
class Classification:
    label: Label
    ll_real: float
    ll_fake: float


def score_batch(model, images: np.ndarray, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """(ll_real, ll_fake) for a stack of images."""
    images = np.asarray(images, dtype=np.float32)
    lr, lf = [], []
    with no_grad():
        for s in range(0, len(images), batch_size):
            ctx = models.context_tokens(model, images[s : s + batch_size])
            _, a, b = _both_caption_scores(model, ctx)
            lr.append(a)
            lf.append(b)
    if not lr:
        return np.zeros(0), np.zeros(0)
    return np.concatenate(lr), np.concatenate(lf)


def classify(model, image) -> Classification:
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float32)
    ll_r, ll_f = score_batch(model, arr[None])
    return Classification(Label(int(decide(ll_r, ll_f)[0])), float(ll_r[0]), float(ll_f[0]))


def predict(model, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    return decide(*score_batch(model, images, batch_size))


def greedy_decode(model, image) -> list[int]:
    """Free-running argmax decoding, kept as a diagnostic."""
    cfg = model.config
    with no_grad():
        ctx = models.context_tokens(model, image)
        toks = [BOS]
        while len(toks) < cfg.max_caption_len:
            logits = models.decode_logits(model, ctx, np.array(toks))
            nxt = int(np.argmax(logits.data[-1]))
            toks.append(nxt)
            if nxt == EOS:
                break
    return toks


@dataclass
class FitResult:
    model: object
    history: History


def encoder_cache(model, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    with no_grad():
        parts = [models.encode_image(model, images[s : s + batch_size]).data for s in range(0, len(images), batch_size)]
    return np.concatenate(parts)


def fit(model, manifest: Manifest, cfg: TrainConfig, on_epoch=None) -> FitResult:
    """Minimise caption loss over the train split with Adam.

    Frozen encoders are run once up front and their outputs reused; this is
    exact because a frozen encoder is a pure function of the image.
    """
    train = manifest.filter("train")
    if len(train) == 0:
        raise ValueError("training manifest is empty")
    images = train.load_images()
    labels = train.labels()
    if images.shape[-1] != model.config.image_size:
        raise ValueError(f"corpus image size {images.shape[-1]} != model image size {model.config.image_size}")
    cached = encoder_cache(model, images) if model.encoder_is_static() else None
    L = model.config.max_caption_len
    if hasattr(model, "train"):
        model.train(Rng(cfg.seed, "dropout"))

    def step(idx):
        if cached is not None:
            enc = Tensor(cached[idx])
        else:
            enc = models.encode_image(model, images[idx])
        ctx = models.bridge(model, enc)
        logits, ll_r, ll_f = _both_caption_scores(model, ctx)
        B = len(idx)
        y = labels[idx]
        # target rows: real block for REAL images, fake block for FAKE images
        rows = np.where(y == int(Label.FAKE), np.arange(B) + B, np.arange(B))
        tgt = caption_batch(y, L)[1]
        loss = caption_loss(T.getitem(logits, rows), tgt)
        correct = int((decide(ll_r, ll_f) == y).sum())
        return loss, correct

    try:
        hist = run_epochs(model.trainable_parameters(), len(train), cfg, step, on_epoch)
    finally:
        if hasattr(model, "eval"):
            model.eval()
    return FitResult(model, hist)
