"""Shared mini-batch training loop."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from capdet.optim import Adam
from capdet.rng import Rng
from capdet.tensor import Tensor, backward

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    learning_rate: float = 5e-5
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self) -> "TrainConfig":
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0 or self.eps <= 0:
            raise ValueError(f"invalid training configuration {self}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        return self


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    train_acc: float
    seconds: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class History:
    epochs: list[EpochRecord] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)

    def to_jsonl(self, timings: bool = True) -> str:
        """One JSON object per epoch; ``timings=False`` drops wall-clock time
        so the file is reproducible byte for byte."""
        lines = []
        for rec in self.epochs:
            d = asdict(rec)
            if not timings:
                del d["seconds"]
            lines.append(json.dumps(d, sort_keys=True))
        return "".join(line + "\n" for line in lines)


StepFn = Callable[[np.ndarray], tuple[Tensor, int]]


def run_epochs(
    params: dict[str, Tensor],
    n: int,
    cfg: TrainConfig,
    step_fn: StepFn,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> History:
    """Adam over shuffled mini-batches.

    ``step_fn(indices)`` returns (scalar loss tensor, number correct); only
    tensors in ``params`` are updated.  Shuffles come from the stream
    ``fit/shuffle/<epoch>`` of ``cfg.seed``.
    """
    cfg.validate()
    if n < 1:
        raise ValueError("training set is empty")
    opt = Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    hist = History()
    root = Rng(cfg.seed, "fit")
    step = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = root.stream(f"shuffle/{epoch}").permutation(n)
        total, correct = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            opt.zero_grad()
            loss, ok = step_fn(idx)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericError(step, value)
            backward(loss)
            opt.step()
            hist.step_losses.append(value)
            total += value * len(idx)
            correct += ok
            step += 1
        rec = EpochRecord(epoch + 1, total / n, correct / n, time.perf_counter() - t0)
        hist.epochs.append(rec)
        log.info("epoch %d loss %.4f acc %.4f (%.1fs)", rec.epoch, rec.mean_loss, rec.train_acc, rec.seconds)
        if on_epoch is not None:
            on_epoch(rec)
    opt.zero_grad()
    return hist
