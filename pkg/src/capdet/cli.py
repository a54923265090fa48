"""``capdet`` command line: gen-data, train, eval, report.

Exit codes: 0 success, 1 usage or configuration error, 2 data error
(missing/corrupt corpus, checkpoint or unwritable path), 3 numeric failure.
"""

from __future__ import annotations

import argparse
import filecmp
import json
import logging
import platform
import sys
import tempfile
from pathlib import Path

import numpy as np

import capdet
from capdet import baselines, captioning, dataset, lora, metrics, models
from capdet.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from capdet.config import MODEL_KINDS, RunConfig, load_config
from capdet.models import ConfigError
from capdet.tensorio import TensorFileError, digest
from capdet.training import NumericError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

CHECKPOINT = "checkpoint.bin"
ADAPTER = "adapter.bin"
HISTORY = "history.jsonl"
CONFIG_COPY = "config.ini"
RUN_INFO = "run.json"
FROZEN = "frozen_digest.json"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 means "data error" here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _overrides(args) -> dict:
    out = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    for key in ("seed", "model", "name", "epochs", "corpus_dir"):
        val = getattr(args, key, None)
        if val is not None:
            out[key] = str(val)
    if getattr(args, "lr", None) is not None:
        out["learning_rate"] = str(args.lr)
    return out


def _config(args) -> RunConfig:
    return load_config(args.config, _overrides(args))


def _write(path: Path, text: str) -> None:
    try:
        path.write_text(text)
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc.strerror or exc}") from exc


def _mkdir(path: Path) -> None:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create directory {path}: {exc.strerror or exc}") from exc


def _load_manifest(corpus_dir) -> dataset.Manifest:
    path = Path(corpus_dir) / "manifest.jsonl"
    if not path.exists():
        raise DataError(f"no corpus at {corpus_dir} (missing {path}); run `capdet gen-data` first")
    try:
        return dataset.load_manifest(path)
    except (dataset.ManifestError, ValueError) as exc:
        raise DataError(f"bad manifest {path}: {exc}") from exc


def _counts_table(manifest: dataset.Manifest) -> str:
    counts = manifest.counts()
    lines = [f"{'split':<6} {'generator':<8} {'images':>6}"]
    for (split, gen), n in sorted(counts.items()):
        lines.append(f"{split:<6} {gen:<8} {n:>6}")
    return "\n".join(lines)


# ---------------------------------------------------------------- gen-data


def _same_tree(a: Path, b: Path) -> list[str]:
    """Relative paths that differ between two corpus trees."""
    files_a = {p.relative_to(a) for p in a.rglob("*") if p.is_file()}
    files_b = {p.relative_to(b) for p in b.rglob("*") if p.is_file()}
    diff = sorted(str(p) for p in files_a ^ files_b)
    for rel in sorted(files_a & files_b):
        if not filecmp.cmp(a / rel, b / rel, shallow=False):
            diff.append(str(rel))
    return diff


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = Path(args.out or cfg.corpus_dir)
    if args.check:
        if not (out / "manifest.jsonl").exists():
            raise DataError(f"--check needs an existing corpus at {out}")
        with tempfile.TemporaryDirectory() as tmp:
            dataset.generate_corpus(tmp, cfg.n_train, cfg.n_test, cfg.seed, cfg.image_size)
            diff = _same_tree(out, Path(tmp))
        if diff:
            print(f"corpus at {out} differs from a fresh generation in {len(diff)} file(s), e.g. {diff[0]}")
            return EXIT_DATA
        print(f"corpus at {out} is byte-identical to a fresh generation (seed {cfg.seed})")
        return EXIT_OK
    _mkdir(out)
    try:
        manifest = dataset.generate_corpus(out, cfg.n_train, cfg.n_test, cfg.seed, cfg.image_size)
    except OSError as exc:
        raise DataError(f"cannot write corpus under {out}: {exc.strerror or exc}") from exc
    print(f"corpus written to {out} (seed {cfg.seed}, {len(manifest)} images)")
    print(_counts_table(manifest))
    return EXIT_OK


# ---------------------------------------------------------------- train


def build_model(cfg: RunConfig):
    mcfg = cfg.model_config()
    if cfg.model == "conv":
        return baselines.build_baseline("conv", mcfg, cfg.seed)
    if cfg.model == "patch":
        return baselines.build_baseline("patch_transformer", mcfg, cfg.seed)
    base = models.init_model(mcfg, cfg.seed)
    if cfg.model == "qbridge-lora":
        return lora.inject(base, cfg.lora_spec(), cfg.seed, keep_base_trainables=cfg.train_bridge)
    return base


def frozen_arrays(model) -> dict[str, np.ndarray]:
    base = model.base if isinstance(model, lora.AdaptedModel) else model
    return {k: p.data for k, p in base.params.items() if not base.trainable[k]}


def parameter_report(model) -> dict:
    trainable = sum(p.data.size for p in model.trainable_parameters().values())
    total = model.num_parameters()
    report = {"trainable": trainable, "total": total, "ratio": trainable / total}
    if isinstance(model, lora.AdaptedModel):
        report["adapters"] = len(model.adapters)
        report["adapter_parameters"] = sum(a.size for a in model.adapter_arrays().values())
    return report


def _fit(model, manifest, cfg: RunConfig):
    # per-epoch progress goes to the log (stderr)
    if isinstance(model, baselines.BaselineClassifier):
        return baselines.fit_baseline(model, manifest, cfg.train_config())[1]
    return captioning.fit(model, manifest, cfg.train_config()).history


def cmd_train(args) -> int:
    cfg = _config(args)
    run_dir = Path(args.out or f"runs/{cfg.run_name}")
    manifest = _load_manifest(cfg.corpus_dir)
    if manifest.image_size != cfg.image_size:
        raise ConfigError(f"corpus image size {manifest.image_size} != configured image_size {cfg.image_size}")
    _mkdir(run_dir)
    _write(run_dir / CONFIG_COPY, cfg.to_text())

    model = build_model(cfg)
    counts = parameter_report(model)
    print(f"model {cfg.model} ({cfg.run_name}), seed {cfg.seed}")
    print(f"trainable parameters: {counts['trainable']:,} of {counts['total']:,} ({100 * counts['ratio']:.2f}%)")
    if "adapters" in counts:
        print(f"adapter parameters: {counts['adapter_parameters']:,} in {counts['adapters']} adapters")
    before = digest(frozen_arrays(model))

    try:
        history = _fit(model, manifest, cfg)
    except NumericError as exc:
        _write(run_dir / "failure.json", json.dumps({"error": str(exc), "step": exc.step}, indent=2) + "\n")
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_NUMERIC

    after = digest(frozen_arrays(model))
    status = "pass" if before == after else "fail"
    _write(run_dir / FROZEN, json.dumps({"before": before, "after": after, "status": status}, indent=2) + "\n")
    print(f"frozen-weights digest {before[:16]} -> {after[:16]}: {status}")

    try:
        save_checkpoint(model, run_dir / CHECKPOINT, cfg.seed)
        if isinstance(model, lora.AdaptedModel):
            lora.save_adapter(model, run_dir / ADAPTER)
    except OSError as exc:
        raise DataError(f"cannot write checkpoint in {run_dir}: {exc.strerror or exc}") from exc
    _write(run_dir / HISTORY, history.to_jsonl(timings=False))
    info = {
        "name": cfg.run_name,
        "model": cfg.model,
        "master_seed": cfg.seed,
        "corpus_seed": manifest.seed,
        "parameters": counts,
        "versions": {"capdet": capdet.__version__, "numpy": np.__version__, "python": platform.python_version()},
    }
    _write(run_dir / RUN_INFO, json.dumps(info, indent=2, sort_keys=True) + "\n")
    if history.epochs:
        print(f"final train accuracy {history.epochs[-1].train_acc:.4f}")
    print(f"run written to {run_dir}")
    return EXIT_OK if status == "pass" else EXIT_NUMERIC


# ---------------------------------------------------------------- eval


def load_run(run_dir):
    """(name, model) for a trained run directory."""
    run_dir = Path(run_dir)
    ckpt = run_dir / CHECKPOINT
    if not ckpt.exists():
        raise DataError(f"missing checkpoint {ckpt}")
    try:
        info = json.loads((run_dir / RUN_INFO).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read {run_dir / RUN_INFO}: {exc}") from exc
    try:
        model = load_checkpoint(ckpt)
        if info["model"] == "qbridge-lora":
            model = lora.load_adapter(model, run_dir / ADAPTER)
    except (CheckpointError, TensorFileError, lora.LoraError, OSError) as exc:
        raise DataError(str(exc)) from exc
    return info["name"], model


def predictor(model):
    if isinstance(model, baselines.BaselineClassifier):
        return lambda images: baselines.predict(model, images)
    return lambda images: captioning.predict(model, images)


def cmd_eval(args) -> int:
    runs = [load_run(r) for r in args.runs]
    names = [n for n, _ in runs]
    if len(set(names)) != len(names):
        raise UsageError(f"run names must be unique, got {names}")
    corpus = args.corpus
    if corpus is None:
        corpus = load_config(Path(args.runs[0]) / CONFIG_COPY, env={}).corpus_dir
    manifest = _load_manifest(corpus)
    for name, model in runs:
        if model.config.image_size != manifest.image_size:
            raise ConfigError(f"run {name} expects {model.config.image_size}px images, corpus has {manifest.image_size}px")
    preds = {name: predictor(model) for name, model in runs}
    matrix = metrics.evaluate_matrix(preds, manifest)
    matrix.meta = {"models": names}
    codes = metrics.agreement_codes(preds, manifest.filter("test"))
    out = Path(args.out)
    _mkdir(out)
    _write(out / "matrix.json", matrix.to_json())
    _write(out / "matrix.txt", matrix.to_text())
    _write(out / "agreement.csv", metrics.codes_to_csv(codes, names))
    print(matrix.to_text(), end="")
    print(f"evaluation written to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- report


def merge_matrices(matrices: list[metrics.EvalMatrix]) -> metrics.EvalMatrix:
    seeds = {m.corpus_seed for m in matrices}
    if len(seeds) > 1:
        raise DataError(f"refusing to compare runs over different corpora (corpus seeds {sorted(seeds, key=str)})")
    cols = matrices[0].cols
    if any(m.cols != cols for m in matrices):
        raise DataError("evaluation tables have different generator columns")
    acc, f1 = {}, {}
    for m in matrices:
        for r in m.rows:
            if r in acc:
                raise DataError(f"model {r!r} appears in more than one evaluation")
            acc[r], f1[r] = m.acc[r], m.f1[r]
    merged = metrics.EvalMatrix(list(acc), list(cols), acc, f1, matrices[0].corpus_seed)
    merged.rows.sort(key=lambda r: -merged.avg(r)[0])
    return merged


def best_cells(matrix: metrics.EvalMatrix) -> dict[str, set[str]]:
    """Column -> rows holding that column's best accuracy."""
    best = {}
    for c in matrix.cols + ["Avg"]:
        score = {r: matrix.avg(r)[0] if c == "Avg" else matrix.acc[r][c] for r in matrix.rows}
        top = max(score.values())
        best[c] = {r for r, s in score.items() if s == top}
    return best


def cmd_report(args) -> int:
    matrices = []
    for d in args.evals:
        path = Path(d) / "matrix.json" if Path(d).is_dir() else Path(d)
        try:
            matrices.append(metrics.EvalMatrix.from_dict(json.loads(path.read_text())))
        except (OSError, json.JSONDecodeError, KeyError) as exc:
            raise DataError(f"cannot read evaluation {path}: {exc}") from exc
    merged = merge_matrices(matrices)
    text = merged.to_text(best_cells(merged)) + "best accuracy per column marked *...*\n"
    print(text, end="")
    if args.out:
        out = Path(args.out)
        _mkdir(out.parent)
        _write(out, text)
    return EXIT_OK


# ---------------------------------------------------------------- entry


def _add_config_args(p, with_model: bool = False):
    p.add_argument("-c", "--config", help="flat key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, help="master seed (beats $CAPDET_SEED)")
    p.add_argument("--corpus-dir", dest="corpus_dir", help="corpus root")
    if with_model:
        p.add_argument("--model", choices=MODEL_KINDS)
        p.add_argument("--name", help="row label used by eval/report")
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float, help="learning rate")


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="capdet", description="Synthetic-image detection as captioning.")
    parser.add_argument("--version", action="version", version=f"capdet {capdet.__version__}")
    parser.add_argument("-q", "--quiet", action="store_true", help="less logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="render the procedural corpus")
    _add_config_args(p)
    p.add_argument("--out", help="corpus directory (default: corpus_dir from the config)")
    p.add_argument("--check", action="store_true", help="verify an existing corpus regenerates byte for byte")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model into a run directory")
    _add_config_args(p, with_model=True)
    p.add_argument("--out", help="run directory (default: runs/<name>)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate trained runs on every generator")
    p.add_argument("runs", nargs="+", help="run directories, in agreement-code bit order")
    p.add_argument("--corpus", help="corpus root (default: from the first run's config)")
    p.add_argument("--out", default="eval", help="output directory (default: eval)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="merge evaluations into one ranked table")
    p.add_argument("evals", nargs="+", help="eval directories or matrix.json files")
    p.add_argument("--out", help="also write the table to this file")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("config", help="print the effective configuration")
    _add_config_args(p, with_model=True)
    p.set_defaults(func=lambda a: print(_config(a).to_text(), end="") or EXIT_OK)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, ConfigError, lora.LoraError) as exc:
        print(f"capdet: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"capdet: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"capdet: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
