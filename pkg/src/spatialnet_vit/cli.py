"""Command-line entry point: train, eval, gradcheck, metrics, synth.

Exit codes: 0 success, 1 usage or validation error, 2 runtime failure
(divergence, corrupt files, failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import metrics as M
from .checkpoint import load_checkpoint, save_checkpoint
from .data import SyntheticSpec, load_dataset, load_manifest, write_synthetic
from .encoder import preset_config, with_preset
from .errors import (
    ConfigMismatchError,
    CorruptCheckpointError,
    DivergedError,
    ImageFormatError,
    SpatialNetError,
)
from .gradcheck import gradcheck
from .heads import TaskSet, TaskSpec, final_loss
from .model import SpatialNetViT
from .trainer import TrainConfig, evaluate, train

log = logging.getLogger("spatialnet_vit")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="spatialnet-vit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train on a manifest's train split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--preset", choices=("paper", "desk"),
                   help="override the manifest's encoder sizes")
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--reg", type=float, default=0.01, help="L2 weight")
    p.add_argument("--checkpoint-out")
    p.add_argument("--json")

    p = sub.add_parser("eval", help="score a checkpoint on a manifest split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--preset", choices=("paper", "desk"))
    p.add_argument("--json")

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    p.add_argument("--preset", choices=("paper", "desk"), default="desk")
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--eps", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--json")

    p = sub.add_parser("metrics", help="caption or VQA metrics from JSON lines")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--captions")
    group.add_argument("--vqa")
    p.add_argument("--json")

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--count-max", type=int, default=3)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--n-train", type=int, default=300)
    p.add_argument("--n-test", type=int, default=60)
    p.add_argument("--out", required=True)
    return parser


def _emit(report: dict, table: str, json_path: str | None) -> None:
    print(table)
    if json_path:
        Path(json_path).write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")


def _kv_table(values: dict) -> str:
    width = max((len(k) for k in values), default=6)
    return "\n".join(f"{k:<{width}}  {v:.6g}" if isinstance(v, float) else f"{k:<{width}}  {v}"
                     for k, v in values.items())


def cmd_train(args) -> int:
    manifest = load_manifest(args.manifest)
    config = with_preset(manifest.encoder, args.preset) if args.preset else manifest.encoder
    counts = manifest.split_counts()
    train_set = load_dataset(manifest, "train")
    eval_split = "val" if counts["val"] else "test" if counts["test"] else None
    eval_set = load_dataset(manifest, eval_split) if eval_split else None
    model = SpatialNetViT(config, manifest.tasks, seed=args.seed)
    tc = TrainConfig(lr=args.lr, batch_size=args.batch, epochs=args.epochs, seed=args.seed,
                     optimizer=args.optimizer, preset=args.preset, reg_weight=args.reg)
    result = train(model, train_set, tc, eval_set=eval_set)
    if args.checkpoint_out:
        save_checkpoint(model, args.checkpoint_out, result.optimizer_state, args.seed, result.steps)
    last = result.epochs[-1]
    report = {"eval_split": eval_split, **result.to_dict()}
    _emit(report, _kv_table({"epochs": last.epoch, "steps": result.steps,
                             **{f"loss/{k}": v for k, v in last.losses.items()},
                             **last.metrics}), args.json)
    return 0


def cmd_eval(args) -> int:
    manifest = load_manifest(args.manifest)
    expect = with_preset(manifest.encoder, args.preset) if args.preset else None
    model = load_checkpoint(args.checkpoint, expect=expect, tasks=manifest.tasks)
    if model.config.image_shape != manifest.encoder.image_shape:
        raise ConfigMismatchError(
            f"checkpoint expects images {model.config.image_shape}, "
            f"manifest has {manifest.encoder.image_shape}")
    data = load_dataset(manifest, args.split)
    values = evaluate(model, data)
    report = {"split": args.split, "samples": len(data), "metrics": values}
    table = _kv_table(values)

    categories = [t for t in model.tasks.ids if t in M.CATEGORIES]
    if categories:
        preds = model.predict(data.images)
        records = [
            M.VqaRecord(f"{sid}:{t}", t, str(preds[t][i]), str(int(data.targets[t][i])))
            for t in categories for i, sid in enumerate(data.ids)
            if not np.isnan(data.targets[t][i])
        ]
        vqa = M.vqa_accuracy(records)
        report["vqa"] = vqa.to_dict()
        table += "\n" + vqa.table()
    _emit(report, table, args.json)
    return 0


def desk_gradcheck_problem(preset: str = "desk", seed: int = 0, batch: int = 4):
    """Model, batch and loss closure used by ``gradcheck``: one 3-class
    classification task plus one regression task."""
    config = preset_config(preset)
    tasks = TaskSet([TaskSpec("class", "classification", 3), TaskSpec("count", "regression")])
    model = SpatialNetViT(config, tasks, seed=seed)
    rng = np.random.default_rng(seed)
    images = rng.uniform(size=(batch,) + config.image_shape)
    targets = {"class": rng.integers(3, size=batch).astype(float),
               "count": rng.integers(0, 4, size=batch).astype(float)}

    def loss_fn():
        return final_loss(model(images), targets, tasks, 0.01, model.params).final

    return model, loss_fn


def cmd_gradcheck(args) -> int:
    model, loss_fn = desk_gradcheck_problem(args.preset, args.seed, args.batch)
    report = gradcheck(model.params, loss_fn, eps=args.eps, tol=args.tol, seed=args.seed)
    _emit(report.to_dict(), _kv_table({"passed": report.passed, "tolerance": report.tolerance,
                                       "max_error": report.max_error,
                                       "checked": report.checked,
                                       "kink_retries": report.kink_retries}), args.json)
    if not report.passed:
        log.error("gradient check failed: max relative error %.3g > %.3g",
                  report.max_error, report.tolerance)
        return 2
    return 0


def cmd_metrics(args) -> int:
    if args.captions:
        report = M.caption_report(M.caption_examples(M.read_jsonl(args.captions)))
    else:
        report = M.vqa_accuracy(M.vqa_records(M.read_jsonl(args.vqa)))
    _emit(report.to_dict(), report.table(), args.json)
    return 0


def cmd_synth(args) -> int:
    spec = SyntheticSpec(seed=args.seed, classes=args.classes, count_range=(0, args.count_max),
                         noise=args.noise, n_train=args.n_train, n_test=args.n_test)
    manifest = write_synthetic(spec, args.out)
    print(_kv_table({"manifest": str(Path(args.out) / "manifest.json"),
                     **manifest.split_counts()}))
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "metrics": cmd_metrics,
    "synth": cmd_synth,
}


def _thread_limit():
    n = int(os.environ.get("SNVT_THREADS", "0") or 0)
    if n <= 0:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return COMMANDS[args.command](args)
    except (DivergedError, CorruptCheckpointError, ImageFormatError, OSError) as exc:
        log.error("%s", exc)
        return 2
    except (SpatialNetError, ValueError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
