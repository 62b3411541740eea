"""Command-line front end: ``caid gen-data | pretrain | finetune | analyze``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import jsonschema
from threadpoolctl import threadpool_limits

from . import analysis
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .data import DataError, SyntheticConfig, generate_synthetic, load_dataset, write_dataset
from .networks import METHODS, Encoder, EncoderSpec, extract_all_features
from .pretrain import RunConfig, pretrain
from .rng import Stream
from .transfer import (
    DownstreamTask, EvalResult, KINDS, TransferError, _load_prefix, finetune, read_results_csv,
    split, write_results_csv, write_significance_csv,
)

log = logging.getLogger("caid")


class UsageError(Exception):
    pass


def _object(props: dict) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False}


_INT = {"type": "integer"}
_NONNEG = {"type": "integer", "minimum": 0}
_POS = {"type": "integer", "minimum": 1}
_NUM = {"type": "number"}
_FRACTION = {"type": "number", "exclusiveMinimum": 0, "maximum": 1}

MANIFEST_SCHEMA = _object({
    "synthetic": _object({
        "n": _POS, "size": _POS, "n_classes": _POS, "noise": {"type": "number", "minimum": 0},
        "jitter": _NONNEG, "patch_radius": {"type": "number", "exclusiveMinimum": 0},
        "contrast": _NUM, "seed": _INT,
    }),
    "run": _object({
        "method": {"enum": list(METHODS)},
        "epochs_warmup": _NONNEG, "epochs_joint": _NONNEG, "batch_size": _POS,
        "lambda_ca": {"type": "number", "minimum": 0},
        "tau": {"type": "number", "exclusiveMinimum": 0},
        "lambda_bt": {"type": "number", "exclusiveMinimum": 0},
        "ema_m": {"type": "number", "minimum": 0, "maximum": 1},
        "queue_size": _POS, "optimizer": {"enum": ["sgd"]},
        "lr": {"type": "number", "exclusiveMinimum": 0}, "momentum": {"type": "number", "minimum": 0},
        "weight_decay": {"type": "number", "minimum": 0}, "schedule": {"enum": ["cosine", "constant"]},
        "data_seed": _INT, "init_seed": _INT, "augment_seed": _INT,
        "val_fraction": {"type": "number", "minimum": 0, "exclusiveMaximum": 1}, "crop_size": _POS,
    }),
    "downstream": _object({
        "kind": {"enum": list(KINDS)}, "fraction": _FRACTION, "epochs": _POS, "batch_size": _POS,
        "lr": {"type": "number", "exclusiveMinimum": 0}, "plateau_patience": _POS,
        "early_stop_patience": _POS, "val_fraction": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "test_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "split_seed": _INT, "seeds": {"type": "array", "items": _INT, "minItems": 1},
    }),
    "outputs": _object({
        "best_checkpoint": {"type": "string"}, "last_checkpoint": {"type": "string"},
        "metrics": {"type": "string"},
    }),
})

DEFAULT_OUTPUTS = {"best_checkpoint": "best.caid", "last_checkpoint": "last.caid", "metrics": "metrics.csv"}


def load_manifest(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"schema error: {path} is not valid JSON ({exc})") from None
    try:
        jsonschema.validate(doc, MANIFEST_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise UsageError(f"schema error at {where}: {exc.message}") from None
    return doc


def prepare_out(out: str, force: bool) -> Path:
    path = Path(out)
    if path.exists() and not path.is_dir():
        raise UsageError(f"--out {out} exists and is not a directory")
    if path.exists() and any(path.iterdir()) and not force:
        raise UsageError(f"--out {out} is not empty; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_data(path: str):
    if not Path(path).is_file():
        raise UsageError(f"dataset manifest not found: {path}")
    return load_dataset(path)


def _write_rows(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    manifest = load_manifest(args.config)
    section = dict(manifest.get("synthetic", {}))
    seed = section.pop("seed", 0)
    config = SyntheticConfig(**section)
    out = prepare_out(args.out, args.force)
    write_dataset(generate_synthetic(config, seed), out)
    print(f"wrote {config.n} images to {out}")
    return 0


def cmd_pretrain(args) -> int:
    manifest = load_manifest(args.config)
    run = dict(manifest.get("run", {}))
    if args.method is not None:
        run["method"] = args.method
    if args.lambda_ca is not None:
        run["lambda_ca"] = args.lambda_ca
    try:
        config = RunConfig.from_dict(run)
    except ValueError as exc:
        raise UsageError(f"schema error: {exc}") from None
    dataset = _load_data(args.data)
    out = prepare_out(args.out, args.force)
    outputs = {**DEFAULT_OUTPUTS, **manifest.get("outputs", {})}
    result = pretrain(config, dataset)
    save_checkpoint(result.best, out / outputs["best_checkpoint"])
    save_checkpoint(result.last, out / outputs["last_checkpoint"])
    _write_rows(out / outputs["metrics"], ["epoch", "phase", "train_loss", "val_loss", "lr"],
                [(h.epoch, h.phase, h.train_loss, h.val_loss, h.lr) for h in result.history])
    _write_rows(out / "step_losses.csv", ["step", "l_id"], enumerate(result.step_id_losses))
    (out / "run_config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"best epoch {result.best.epoch} val_loss {result.best.val_loss:.6f}")
    return 0


def _parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds must be comma-separated integers, got {text!r}") from None
    if not seeds:
        raise UsageError("--seeds is empty")
    return seeds


def cmd_finetune(args) -> int:
    manifest = load_manifest(args.config)
    section = dict(manifest.get("downstream", {}))
    seeds = section.pop("seeds", [0, 1, 2])
    if args.seeds is not None:
        seeds = _parse_seeds(args.seeds)
    if args.task is not None:
        section["kind"] = args.task
    if args.fraction is not None:
        section["fraction"] = args.fraction
    if args.epochs is not None:
        section["epochs"] = args.epochs
    try:
        task = DownstreamTask(**section)
    except TransferError as exc:
        raise UsageError(str(exc)) from None
    if args.init == "random":
        init, arm = None, "random"
    else:
        if not Path(args.init).is_file():
            raise UsageError(f"init checkpoint not found: {args.init}")
        init, arm = load_checkpoint(args.init), Path(args.init).stem
    arm = args.arm or arm
    dataset = _load_data(args.data)
    out = prepare_out(args.out, args.force)
    train, test = split(dataset, task.test_fraction, task.split_seed, "test-split")
    result = EvalResult(arm, "auc" if task.kind == "classification" else "dice")
    models = out / "models"
    models.mkdir(exist_ok=True)
    for seed in seeds:
        outcome = finetune(init, task, train, test, seed)
        result.add(seed, outcome.test_metric)
        save_checkpoint(Checkpoint(outcome.model.state_dict(), outcome.best_epoch, outcome.best_val_loss),
                        models / f"{arm}_seed{seed}.caid")
        print(f"{arm} seed {seed}: {result.metric} = {outcome.test_metric:.4f}")
    write_results_csv([result], out / "results.csv")
    print(f"{arm}: mean {result.metric} {result.mean:.4f} std {result.std:.4f}")
    return 0


def _encoder_from(path: str, probe_shape) -> Encoder:
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    enc = Encoder(EncoderSpec(image_size=probe_shape[-1]), Stream(0, "placeholder"))
    if not _load_prefix(enc, load_checkpoint(path), "encoder"):
        raise TransferError(f"{path} holds no encoder tensors")
    return enc


def _features(path: str, images) -> analysis.FeatureMatrix:
    """Layer-5 features from a feature CSV or a checkpoint evaluated on ``images``."""
    if path.endswith(".csv"):
        if not Path(path).is_file():
            raise UsageError(f"feature file not found: {path}")
        return analysis.read_features_csv(path)
    if images is None:
        raise UsageError("--data is required when analysing checkpoints")
    enc = _encoder_from(path, images.shape)
    return analysis.FeatureMatrix(extract_all_features(enc, images)[-1], 5, Path(path).stem)


def cmd_analyze(args) -> int:
    inputs = [p for p in args.inputs.split(",") if p]
    if len(inputs) != 2:
        raise UsageError("--inputs takes exactly two comma-separated paths")
    dataset = _load_data(args.data) if args.data else None
    images = dataset.images() if dataset is not None else None
    if args.mode == "ttest":
        for p in inputs:
            if not Path(p).is_file():
                raise UsageError(f"result file not found: {p}")
        a, b = (read_results_csv(p) for p in inputs)
        if len(a) != 1 or len(b) != 1:
            raise UsageError("each ttest input must hold exactly one arm")
        out = prepare_out(args.out, args.force)
        t, p = a[0].ttest(b[0])
        write_significance_csv([(a[0].arm, b[0].arm, t, p)], out / "significance.csv")
        print(f"{a[0].arm} vs {b[0].arm}: t = {t:.4f}, p = {p:.4g}")
        return 0
    if args.mode == "cka":
        if images is None:
            raise UsageError("--data is required for cka mode")
        before, after = (_encoder_from(p, images.shape) for p in inputs)
        out = prepare_out(args.out, args.force)
        table = analysis.cka_reuse_table(before, after, images)
        _write_rows(out / "cka.csv", ["layer", "cka"], table)
        for layer, score in table:
            print(f"layer {layer}: {score:.4f}")
        return 0
    feats = [_features(p, images) for p in inputs]
    out = prepare_out(args.out, args.force)
    reports = [analysis.distance_report(f) for f in feats]
    names = [f.model_id or f"model{i}" for i, f in enumerate(feats)]
    if names[0] == names[1]:
        names = [f"{names[0]}_a", f"{names[1]}_b"]
    kde_rows = [(n, float(x), float(d)) for n, r in zip(names, reports) for x, d in zip(r.grid, r.density)]
    _write_rows(out / "kde.csv", ["model", "distance", "density"], kde_rows)
    _write_rows(out / "distance_summary.csv", ["model", "mean_distance", "bandwidth", "n_pairs"],
                [(n, r.mean, r.bandwidth, len(r.distances)) for n, r in zip(names, reports)])
    gain = analysis.distance_gain(reports[0], reports[1])
    _write_rows(out / "distance_gain.csv", ["model", "baseline", "gain_percent"], [(names[0], names[1], gain)])
    for f, n in zip(feats, names):
        analysis.write_features_csv(f, out / f"features_{n}.csv")
    print(f"mean distance {names[0]} {reports[0].mean:.4f} vs {names[1]} {reports[1].mean:.4f}: {gain:+.2f}%")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="caid", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=False):
        p.add_argument("--config", required=config_required, help="experiment manifest (JSON)")
        p.add_argument("--out", required=True, help="output directory (must be empty unless --force)")
        p.add_argument("--force", action="store_true", help="allow writing into a non-empty --out")

    p = sub.add_parser("gen-data", help="write a synthetic dataset (PGM + manifest CSV)")
    common(p, config_required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="warm-up then joint pretraining")
    common(p, config_required=True)
    p.add_argument("--data", required=True, help="dataset manifest CSV")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--lambda-ca", type=float, dest="lambda_ca")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune on a downstream task over several seeds")
    common(p)
    p.add_argument("--task", choices=KINDS)
    p.add_argument("--init", required=True, help="checkpoint path or 'random'")
    p.add_argument("--fraction", type=float)
    p.add_argument("--seeds", help="comma-separated run seeds, e.g. 1,2,3")
    p.add_argument("--epochs", type=int)
    p.add_argument("--arm", help="arm name for the results CSV")
    p.add_argument("--data", required=True, help="dataset manifest CSV")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("analyze", help="distances, CKA or t-test reports")
    common(p)
    p.add_argument("--mode", choices=("distances", "cka", "ttest"), required=True)
    p.add_argument("--inputs", required=True, help="two comma-separated checkpoints, feature CSVs or result CSVs")
    p.add_argument("--data", help="dataset manifest CSV used as the probe set")
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        threads = int(os.environ.get("CAID_THREADS", "1") or 1)
    except ValueError:
        print("caid: error: CAID_THREADS must be an integer", file=sys.stderr)
        return 2
    try:
        with threadpool_limits(limits=max(1, threads)):
            return args.func(args)
    except UsageError as exc:
        print(f"caid: error: {exc}", file=sys.stderr)
        return 2
    except (DataError, CheckpointError, TransferError, analysis.AnalysisError, ValueError, OSError) as exc:
        print(f"caid: runtime failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
