"""Accuracy / F1 (FAKE positive), the generator matrix and agreement codes."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from capdet.dataset import FAKE_GENERATORS, REAL_TAG, Manifest
from capdet.labels import Label

Predictor = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion(preds: Sequence, golds: Sequence) -> Confusion:
    p = np.asarray([int(x) for x in preds], dtype=np.int64)
    g = np.asarray([int(x) for x in golds], dtype=np.int64)
    if len(p) != len(g):
        raise ValueError(f"length mismatch: {len(p)} predictions vs {len(g)} labels")
    if len(p) == 0:
        raise ValueError("empty input")
    pos = int(Label.FAKE)
    return Confusion(
        tp=int(((p == pos) & (g == pos)).sum()),
        fp=int(((p == pos) & (g != pos)).sum()),
        tn=int(((p != pos) & (g != pos)).sum()),
        fn=int(((p != pos) & (g == pos)).sum()),
    )


def accuracy(c: Confusion) -> float:
    if c.total == 0:
        raise ValueError("empty confusion")
    return (c.tp + c.tn) / c.total


def precision(c: Confusion) -> float:
    return c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0


def recall(c: Confusion) -> float:
    return c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0


def f1(c: Confusion) -> float:
    """Harmonic mean of precision and recall; 0 when both are 0."""
    if c.total == 0:
        raise ValueError("empty confusion")
    p, r = precision(c), recall(c)
    return 2 * p * r / (p + r) if p + r else 0.0


@dataclass
class EvalMatrix:
    rows: list[str]
    cols: list[str]
    acc: dict[str, dict[str, float]]
    f1: dict[str, dict[str, float]]
    corpus_seed: int | None = None
    meta: dict = field(default_factory=dict)

    def avg(self, row: str) -> tuple[float, float]:
        a = float(np.mean([self.acc[row][c] for c in self.cols]))
        f = float(np.mean([self.f1[row][c] for c in self.cols]))
        return a, f

    def to_dict(self) -> dict:
        cells = {
            r: {c: {"acc": self.acc[r][c], "f1": self.f1[r][c]} for c in self.cols}
            for r in self.rows
        }
        avg = {r: dict(zip(("acc", "f1"), self.avg(r))) for r in self.rows}
        return {
            "rows": self.rows,
            "cols": self.cols,
            "cells": cells,
            "avg": avg,
            "corpus_seed": self.corpus_seed,
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalMatrix":
        acc = {r: {c: d["cells"][r][c]["acc"] for c in d["cols"]} for r in d["rows"]}
        f = {r: {c: d["cells"][r][c]["f1"] for c in d["cols"]} for r in d["rows"]}
        return cls(list(d["rows"]), list(d["cols"]), acc, f, d.get("corpus_seed"), d.get("meta", {}))

    def to_text(self, bold: Mapping[str, set[str]] | None = None) -> str:
        """Aligned table with ``ACC / F1`` percentages per cell and an Avg column.

        Cells named in ``bold`` (column -> rows) are wrapped in asterisks.
        """
        bold = bold or {}
        header = ["Method"] + self.cols + ["Avg"]
        body = []
        for r in self.rows:
            line = [r]
            for c in self.cols + ["Avg"]:
                a, f = self.avg(r) if c == "Avg" else (self.acc[r][c], self.f1[r][c])
                cell = f"{100 * a:.2f} / {100 * f:.2f}"
                if r in bold.get(c, ()):
                    cell = f"*{cell}*"
                line.append(cell)
            body.append(line)
        widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
        fmt = lambda row: "  ".join(s.ljust(w) if i == 0 else s.rjust(w) for i, (s, w) in enumerate(zip(row, widths)))
        lines = ["ACC (%) / F1 (%)", fmt(header), "  ".join("-" * w for w in widths)]
        lines += [fmt(row) for row in body]
        return "\n".join(lines) + "\n"


def evaluate_matrix(models: Mapping[str, Predictor], manifest: Manifest, generators: Sequence[str] = FAKE_GENERATORS) -> EvalMatrix:
    """One row per model, one column per fake generator.

    Each cell scores the generator's test fakes together with the shared REAL
    test pool; the pool is predicted once per model and reused.
    """
    real = manifest.filter("test", REAL_TAG)
    if len(real) == 0:
        raise ValueError("test split has no REAL pool")
    real_imgs = real.load_images()
    fake_imgs = {}
    for g in generators:
        sub = manifest.filter("test", g)
        if len(sub) == 0:
            raise ValueError(f"empty test subset for {g}")
        fake_imgs[g] = sub.load_images()
    acc: dict[str, dict[str, float]] = {}
    f1s: dict[str, dict[str, float]] = {}
    for name, predict in models.items():
        real_pred = np.asarray(predict(real_imgs))
        acc[name], f1s[name] = {}, {}
        for g in generators:
            pred = np.concatenate([np.asarray(predict(fake_imgs[g])), real_pred])
            gold = np.concatenate([np.ones(len(fake_imgs[g]), np.int64), np.zeros(len(real_pred), np.int64)])
            c = confusion(pred, gold)
            acc[name][g] = accuracy(c)
            f1s[name][g] = f1(c)
    return EvalMatrix(list(models), list(generators), acc, f1s, manifest.seed)


@dataclass(frozen=True)
class AgreementCode:
    path: str
    bits: tuple[int, ...]

    @property
    def code(self) -> str:
        return "".join(str(b) for b in self.bits)


def agreement_codes(models: Mapping[str, Predictor], manifest: Manifest) -> list[AgreementCode]:
    """Per-image verdict bits (0 real, 1 fake), in the mapping's model order."""
    if not models:
        raise ValueError("need at least one model")
    images = manifest.load_images()
    preds = [np.asarray(predict(images)) for predict in models.values()]
    return [
        AgreementCode(rec.path, tuple(int(p[i]) for p in preds))
        for i, rec in enumerate(manifest.records)
    ]


def codes_to_csv(codes: Sequence[AgreementCode], model_names: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["path", "code"])
    for c in codes:
        w.writerow([c.path, c.code])
    return f"# model order: {'|'.join(model_names)}\n" + buf.getvalue()
