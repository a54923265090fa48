"""Conventional single-logit detectors used as the comparison arm.

``conv`` is a small ResNet-like CNN; ``patch_transformer`` reuses the model
zoo's ViT encoder blocks (same parameter names under ``encoder.``).  Both end
in mean pooling and one affine unit: p_fake = sigmoid(w . feat + b).
Everything trains (see the README on why the backbone is not frozen).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from capdet import models
from capdet import tensor as T
from capdet.dataset import Manifest
from capdet.labels import Label
from capdet.models import ConfigError, ModelConfig
from capdet.rng import Rng
from capdet.tensor import Tensor, no_grad
from capdet.training import History, TrainConfig, run_epochs

KINDS = ("conv", "patch_transformer")
CONV_WIDTHS = (16, 32)


@dataclass
class BaselineClassifier:
    kind: str
    config: ModelConfig
    params: dict[str, Tensor]
    seed: int = 0
    trainable: dict[str, bool] = field(default_factory=dict)

    def __post_init__(self):
        if not self.trainable:
            self.trainable = {k: True for k in self.params}
        for k, p in self.params.items():
            p.requires_grad = self.trainable[k]

    @property
    def feature_dim(self) -> int:
        return self.params["head.W"].shape[1]

    def project(self, name: str, x: Tensor) -> Tensor:
        return T.linear(x, self.params[name])

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {k: p for k, p in self.params.items() if self.trainable[k]}

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}


def _conv_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    c1, c2 = CONV_WIDTHS
    return {
        "conv.stem.W": (c1, cfg.channels, 3, 3),
        "conv.stem.b": (c1,),
        "conv.down1.W": (c2, c1, 3, 3),
        "conv.down1.b": (c2,),
        "conv.res.conv1.W": (c2, c2, 3, 3),
        "conv.res.conv1.b": (c2,),
        "conv.res.conv2.W": (c2, c2, 3, 3),
        "conv.res.conv2.b": (c2,),
        "conv.down2.W": (c2, c2, 3, 3),
        "conv.down2.b": (c2,),
    }


def _he_or_default(name: str, shape, rng: Rng) -> np.ndarray:
    if len(shape) == 4:
        fan_in = shape[1] * shape[2] * shape[3]
        return rng.stream(name).normal(shape, float(np.sqrt(2.0 / fan_in)))
    return models.init_param(name, shape, rng)


def build_baseline(kind: str, config: ModelConfig | None = None, seed: int = 0) -> BaselineClassifier:
    if kind not in KINDS:
        raise ConfigError(f"unknown baseline kind {kind!r}; choose from {KINDS}")
    cfg = (config or ModelConfig()).validate()
    rng = Rng(seed, "init")
    if kind == "conv":
        shapes = _conv_shapes(cfg)
        feat = CONV_WIDTHS[-1]
    else:
        shapes = models.encoder_shapes(cfg, "encoder")
        feat = cfg.d_model
    shapes |= {"head.W": (1, feat), "head.b": (1,)}
    params = {name: Tensor(_he_or_default(name, shape, rng)) for name, shape in shapes.items()}
    return BaselineClassifier(kind, cfg, params, seed)


def features(clf: BaselineClassifier, images: np.ndarray) -> Tensor:
    p = clf.params
    if clf.kind == "conv":
        x = Tensor(images)
        x = T.relu(T.conv2d(x, p["conv.stem.W"], p["conv.stem.b"], 1, 1))
        x = T.relu(T.conv2d(x, p["conv.down1.W"], p["conv.down1.b"], 2, 1))
        r = T.relu(T.conv2d(x, p["conv.res.conv1.W"], p["conv.res.conv1.b"], 1, 1))
        r = T.conv2d(r, p["conv.res.conv2.W"], p["conv.res.conv2.b"], 1, 1)
        x = T.relu(T.add(x, r))
        x = T.relu(T.conv2d(x, p["conv.down2.W"], p["conv.down2.b"], 2, 1))
        return T.mean(x, axis=(2, 3))
    tokens = models.encoder_stack(clf, models.embed_patches(clf, images))
    return T.mean(tokens, axis=1)


def logits(clf: BaselineClassifier, images) -> Tensor:
    imgs, single = models._as_image_batch(clf.config, images)
    feat = features(clf, imgs)
    # a unit token axis keeps the head on the per-example GEMM path of linear
    feat = feat.reshape(feat.shape[0], 1, feat.shape[1])
    z = T.linear(feat, clf.params["head.W"], clf.params["head.b"]).reshape(-1)
    return z[0] if single else z


@dataclass
class BinaryPrediction:
    label: Label
    p_fake: float


def label_from_logit(z) -> np.ndarray:
    """FAKE iff logit >= 0, i.e. p_fake >= 0.5."""
    return (np.asarray(z) >= 0).astype(np.int64)


def classify_binary(clf: BaselineClassifier, image) -> BinaryPrediction:
    with no_grad():
        z = float(logits(clf, image).data)
    p = float(T._sigmoid(np.array([z], dtype=np.float64))[0])
    return BinaryPrediction(Label(int(label_from_logit(z))), p)


def predict(clf: BaselineClassifier, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    out = []
    with no_grad():
        for s in range(0, len(images), batch_size):
            out.append(logits(clf, np.asarray(images[s : s + batch_size])).data)
    return label_from_logit(np.concatenate(out)) if out else np.zeros(0, np.int64)


def fit_baseline(clf: BaselineClassifier, manifest: Manifest, cfg: TrainConfig, on_epoch=None):
    train = manifest.filter("train")
    if len(train) == 0:
        raise ValueError("training manifest is empty")
    images = train.load_images()
    y = train.labels()

    def step(idx):
        z = logits(clf, images[idx])
        loss = T.bce_with_logits(z, y[idx])
        return loss, int((label_from_logit(z.data) == y[idx]).sum())

    hist = run_epochs(clf.trainable_parameters(), len(train), cfg, step, on_epoch)
    return clf, hist


def fit_arrays(clf: BaselineClassifier, images: np.ndarray, y: np.ndarray, cfg: TrainConfig) -> History:
    """Like fit_baseline but on in-memory arrays."""

    def step(idx):
        z = logits(clf, images[idx])
        return T.bce_with_logits(z, y[idx]), int((label_from_logit(z.data) == y[idx]).sum())

    return run_epochs(clf.trainable_parameters(), len(images), cfg, step)
