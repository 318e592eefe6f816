"""Command-line entry point.

Usage:
    qpvm train --config run.json [--resume ckpt] [--workers N]
    qpvm eval --checkpoint ckpt --dataset {train,test,<spec.json>,<inline json>}
    qpvm grad-check --config run.json [--tol 1e-4]
    qpvm inspect --checkpoint ckpt --index N [--dataset ...] [--out DIR]

Exit codes: 0 ok, 1 validation error, 2 runtime error, 3 check failed.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from qpvm.checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from qpvm.config import RunConfig, load_dataset_spec, parse_dataset_arg
from qpvm.data import DataError, Dataset
from qpvm.encoding import EncodingError, encode_and_run, pad_features, signed_to_unit
from qpvm.model import ConfigError, PVMClassifier, forward_stages, predict
from qpvm.simulator import SimulatorError, dump_state_csv
from qpvm.training import (
    OptimizerState,
    TrainingError,
    evaluate,
    finite_diff_grad,
    model_loss_fn,
    parameter_shift_grad,
    train_epoch,
)

log = logging.getLogger("qpvm")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_CHECK_FAILED = 0, 1, 2, 3
METRICS_FIELDS = [
    "epoch", "train_loss", "bce", "par", "train_acc", "test_acc", "unused_mass_mean",
    "wall_seconds",
]
GRAD_CHECK_MAX_PARAMS = 200
GRAD_CHECK_SAMPLES = 4
# relative-error denominators are floored here; at tol=1e-4 this is an absolute floor of 1e-7
GRAD_CHECK_DENOM_FLOOR = 1e-3

_VALIDATION_ERRORS = (ConfigError, DataError, EncodingError, SimulatorError, CheckpointError)


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def _read_metrics(path: Path) -> list[dict]:
    if not path.exists():
        return []
    with path.open(newline="") as f:
        return list(csv.DictReader(f))


def _write_metrics(path: Path, rows: list[dict]) -> None:
    with path.open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=METRICS_FIELDS)
        writer.writeheader()
        writer.writerows(rows)


def _append_metrics(path: Path, row: dict) -> None:
    new = not path.exists()
    with path.open("a", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=METRICS_FIELDS)
        if new:
            writer.writeheader()
        writer.writerow(row)


def cmd_train(config_path, resume=None, workers: int = 1) -> int:
    config = RunConfig.load(config_path)
    train, test = config.load_datasets()
    model_config = config.model_config(train)
    model = PVMClassifier(model_config)
    out = config.output_path
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config.raw, indent=2, sort_keys=True))

    seed = config.seed
    opt_cfg = config.optimizer
    metrics_path = out / "metrics.csv"
    if resume:
        ckpt = load_checkpoint(resume)
        if ckpt.model_config != model_config:
            raise ConfigError("checkpoint model does not match the config's model")
        store, opt, start = ckpt.store, ckpt.optimizer, ckpt.epoch
        rows = [r for r in _read_metrics(metrics_path) if int(r["epoch"]) <= start]
        if metrics_path.exists():
            _write_metrics(metrics_path, rows)
    else:
        store = model.init_parameters(seed)
        opt = OptimizerState(opt_cfg["kind"], opt_cfg["learning_rate"])
        start = 0
        if metrics_path.exists():
            metrics_path.unlink()

    regularize = config.regularizer
    snapshot = {**config.raw, "_base_dir": str(config.base_dir.resolve())}
    for epoch in range(start, config.epochs):
        store, opt, running = train_epoch(
            model, store, train, config.batch_size, opt, epoch, seed, regularize,
            config.grad_fraction, workers,
        )
        on_train = evaluate(model, store, train, regularize, workers)
        if not np.isfinite(on_train.loss):
            raise TrainingError(f"non-finite training loss after epoch {epoch + 1}")
        on_test = evaluate(model, store, test, regularize, workers) if test is not None else None
        row = {
            "epoch": epoch + 1,
            "train_loss": _fmt(on_train.loss),
            "bce": _fmt(on_train.bce),
            "par": _fmt(on_train.par),
            "train_acc": _fmt(on_train.accuracy),
            "test_acc": _fmt(on_test.accuracy if on_test else None),
            "unused_mass_mean": _fmt(on_train.unused_mass_mean),
            "wall_seconds": _fmt(running.wall_seconds),
        }
        _append_metrics(metrics_path, row)
        ckpt = Checkpoint(
            snapshot, model_config, store, opt, epoch + 1,
            {"seed": seed, "next_epoch": epoch + 1},
        )
        save_checkpoint(ckpt_dir / f"epoch_{epoch + 1:03d}.ckpt", ckpt)
        save_checkpoint(ckpt_dir / "last.ckpt", ckpt)
        log.info(
            "epoch %d loss %.5f train_acc %.4f test_acc %s (%.1fs)",
            epoch + 1, on_train.loss, on_train.accuracy,
            f"{on_test.accuracy:.4f}" if on_test else "-", running.wall_seconds,
        )
    if config.epochs > start:
        save_checkpoint(ckpt_dir / "final.ckpt", ckpt)
    return EXIT_OK


def _dataset_for_checkpoint(ckpt: Checkpoint, which: str) -> Dataset:
    base = Path(ckpt.run_config.get("_base_dir", "."))
    if which in ("train", "test"):
        train, test = load_dataset_spec(ckpt.run_config["dataset"], base)
        ds = train if which == "train" else test
        if ds is None:
            raise ConfigError("dataset: the checkpoint's config has no test split")
        return ds
    train, _ = load_dataset_spec(parse_dataset_arg(which), Path.cwd())
    return train


def cmd_eval(checkpoint, dataset: str = "test", out=None, workers: int = 1) -> dict:
    ckpt = load_checkpoint(checkpoint)
    ds = _dataset_for_checkpoint(ckpt, dataset)
    if len(ds) == 0:
        raise ConfigError("dataset: empty dataset")
    if ds.image_shape != ckpt.model_config.input_shape or ds.num_classes != ckpt.model_config.num_classes:
        raise ConfigError(
            f"dataset: shape {ds.image_shape} / {ds.num_classes} classes does not match "
            f"model {ckpt.model_config.input_shape} / {ckpt.model_config.num_classes}"
        )
    model = PVMClassifier(ckpt.model_config)
    result = evaluate(model, ckpt.store, ds, ckpt.run_config.get("regularizer", True), workers)
    report = {"checkpoint": str(checkpoint), "epoch": ckpt.epoch, "samples": len(ds), **result.to_dict()}
    text = json.dumps(report, indent=2)
    print(text)
    out = Path(out) if out else Path(checkpoint).with_suffix(".eval.json")
    out.write_text(text)
    return report


def cmd_grad_check(config_path, tol: float = 1e-4, workers: int = 1) -> tuple[bool, dict]:
    config = RunConfig.load(config_path)
    train, _ = config.load_datasets()
    model = PVMClassifier(config.model_config(train))
    if model.num_params > GRAD_CHECK_MAX_PARAMS:
        raise ConfigError(
            f"model: grad-check refuses {model.num_params} parameters "
            f"(limit {GRAD_CHECK_MAX_PARAMS})"
        )
    store = model.init_parameters(config.seed)
    rng = np.random.default_rng(config.seed)
    idx = rng.permutation(len(train))[:GRAD_CHECK_SAMPLES]
    images, labels = train.images[idx], train.labels[idx]
    ps = parameter_shift_grad(model, store, images, labels, regularize=config.regularizer, workers=workers)
    fd = finite_diff_grad(model_loss_fn(model, store, images, labels, config.regularizer), store.theta, 1e-5)
    abs_err = np.abs(ps - fd)
    rel_err = abs_err / np.maximum(np.abs(fd), GRAD_CHECK_DENOM_FLOOR)
    report = {
        "num_params": model.num_params,
        "samples": int(idx.size),
        "max_abs_error": float(abs_err.max()),
        "max_rel_error": float(rel_err.max()),
        "worst_index": int(rel_err.argmax()),
        "tolerance": tol,
    }
    ok = bool(report["max_rel_error"] <= tol)
    report["passed"] = ok
    print(json.dumps(report, indent=2))
    return ok, report


def cmd_inspect(checkpoint, index: int, dataset: str = "test", out=None) -> dict:
    ckpt = load_checkpoint(checkpoint)
    ds = _dataset_for_checkpoint(ckpt, dataset)
    if not 0 <= index < len(ds):
        raise ConfigError(f"index: {index} outside dataset of {len(ds)} samples")
    model = PVMClassifier(ckpt.model_config)
    config = ckpt.model_config
    image = ds.images[index]
    probs, unused, maps = forward_stages(image, model, ckpt.store)
    out = Path(out) if out else Path(checkpoint).parent / f"inspect_{index}"
    out.mkdir(parents=True, exist_ok=True)
    for s, fmap in enumerate(maps):
        with (out / f"stage_{s}.csv").open("w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["w", "h", "c", "value"])
            for (w, h, c), v in np.ndenumerate(fmap):
                writer.writerow([w, h, c, repr(float(v))])
    head = model.blocks[-1]
    features = maps[-1].reshape(-1)
    if config.conv_layers:
        features = signed_to_unit(features)
    theta = ckpt.store.theta[head.start : head.stop]
    state = encode_and_run(
        head.spec, pad_features(features, head.spec.num_qubits),
        theta[: head.spec.num_enc_params], theta[head.spec.num_enc_params :],
    )
    with (out / "state.csv").open("w", newline="") as f:
        dump_state_csv(state, f)
    prediction = int(predict(probs))
    summary = {
        "index": index,
        "label": int(ds.labels[index]),
        "prediction": prediction,
        "class_probabilities": probs.tolist(),
        "unused_mass": float(np.sum(unused)),
        "stage_shapes": [list(m.shape) for m in maps],
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary, indent=2))
    return summary


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qpvm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    default_workers = os.cpu_count() or 1

    p = sub.add_parser("train", help="train a model from a JSON run config")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--workers", type=int, default=default_workers)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", default="test",
                   help="'train', 'test', a dataset spec JSON file or inline JSON")
    p.add_argument("--out", help="report path (default: <checkpoint>.eval.json)")
    p.add_argument("--workers", type=int, default=default_workers)

    p = sub.add_parser("grad-check", help="parameter-shift vs finite-difference gradient")
    p.add_argument("--config", required=True)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--workers", type=int, default=default_workers)

    p = sub.add_parser("inspect", help="dump per-stage feature maps for one sample")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--dataset", default="test")
    p.add_argument("--out")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(message)s",
    )
    try:
        if args.command == "train":
            return cmd_train(args.config, args.resume, args.workers)
        if args.command == "eval":
            cmd_eval(args.checkpoint, args.dataset, args.out, args.workers)
            return EXIT_OK
        if args.command == "grad-check":
            ok, _ = cmd_grad_check(args.config, args.tol, args.workers)
            return EXIT_OK if ok else EXIT_CHECK_FAILED
        if args.command == "inspect":
            cmd_inspect(args.checkpoint, args.index, args.dataset, args.out)
            return EXIT_OK
    except _VALIDATION_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except (TrainingError, OSError, RuntimeError) as err:
        print(f"runtime error: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
