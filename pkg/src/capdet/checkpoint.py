"""Model checkpoints: a CAPDET-TENSORS file plus a JSON sidecar.

The sidecar (same stem, ``.json``) records what is needed to rebuild the
object around the tensors: kind, ModelConfig, trainability mask, vocabulary
and the master seed.  LoRA adapters are stored separately by
``lora.save_adapter`` so the base checkpoint stays adapter-free.
"""

from __future__ import annotations

import json
from pathlib import Path

from capdet import baselines
from capdet.baselines import BaselineClassifier
from capdet.lora import AdaptedModel
from capdet.models import CaptionerModel, ModelConfig, vocabulary
from capdet.tensor import Tensor
from capdet.tensorio import TensorFileError, read_tensors, write_tensors

FORMAT = "CAPDET-CHECKPOINT v1"


class CheckpointError(ValueError):
    pass


def sidecar(path) -> Path:
    return Path(path).with_suffix(".json")


def _kind(model) -> str:
    if isinstance(model, BaselineClassifier):
        return f"baseline/{model.kind}"
    if isinstance(model, CaptionerModel):
        return "captioner"
    raise CheckpointError(f"cannot checkpoint {type(model).__name__}")


def save_checkpoint(model, path, master_seed: int | None = None) -> None:
    if isinstance(model, AdaptedModel):
        model = model.base
    path = Path(path)
    header = {
        "format": FORMAT,
        "kind": _kind(model),
        "config": model.config.to_dict(),
        "config_hash": model.config.config_hash(),
        "trainable": {k: bool(model.trainable[k]) for k in sorted(model.params)},
        "vocabulary": vocabulary(model.config.vocab_size),
        "seed": model.seed,
        "master_seed": master_seed,
    }
    write_tensors(path, model.state_arrays())
    sidecar(path).write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")


def read_header(path) -> dict:
    side = sidecar(path)
    try:
        header = json.loads(side.read_text())
    except FileNotFoundError as exc:
        raise CheckpointError(f"missing checkpoint header {side}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt checkpoint header {side}: {exc}") from exc
    if header.get("format") != FORMAT:
        raise CheckpointError(f"{side} is not a {FORMAT} header")
    return header


def load_checkpoint(path):
    """Rebuild a CaptionerModel or BaselineClassifier from disk."""
    path = Path(path)
    header = read_header(path)
    try:
        arrays = read_tensors(path)
    except FileNotFoundError as exc:
        raise CheckpointError(f"missing checkpoint {path}") from exc
    except TensorFileError as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    config = ModelConfig.from_dict(header["config"])
    if config.config_hash() != header["config_hash"]:
        raise CheckpointError(f"{path}: config does not match its recorded hash")
    mask = header["trainable"]
    if set(mask) != set(arrays):
        raise CheckpointError(f"{path}: trainability mask does not cover the stored tensors")
    params = {k: Tensor(v) for k, v in arrays.items()}
    kind = header["kind"]
    if kind == "captioner":
        return CaptionerModel(config, params, header["seed"], mask)
    if kind.startswith("baseline/"):
        name = kind.split("/", 1)[1]
        if name not in baselines.KINDS:
            raise CheckpointError(f"{path}: unknown baseline kind {name!r}")
        return BaselineClassifier(name, config, params, header["seed"], mask)
    raise CheckpointError(f"{path}: unknown checkpoint kind {kind!r}")
