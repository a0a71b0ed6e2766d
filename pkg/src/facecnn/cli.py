"""Command-line entry point: ``facecnn <command> [options]``.

Exit codes: 0 success, 2 I/O or parse failure, 3 empty result, 4 invalid
arguments, 5 training divergence, 6 every grid-search cell failed.

Option values resolve as flags > ``--config`` JSON file > defaults, and
each command writes the resolved values to ``<output>.config.json``.
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import data as D
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .errors import CheckpointError, ContractError, DomainError, ImageDecodeError, TrainingDivergedError
from .evaluate import evaluate
from .model import Task, bundled_spec, forward, load_spec
from .train import GridSearchExhausted, TrainConfig, default_grid, grid_search, metric_name, results_csv, train

EXIT_OK = 0
EXIT_IO = 2
EXIT_EMPTY = 3
EXIT_ARGS = 4
EXIT_DIVERGED = 5
EXIT_EXHAUSTED = 6

log = logging.getLogger("facecnn")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ARGS, f"{self.prog}: error: {message}\n")


# Defaults live here rather than in argparse so a config file can sit between them and the flags.
DEFAULTS = {
    "synth": {"n": 32, "seed": 0, "size": D.IMAGE_SIZE},
    "prepare": {"keep_frac": 0.2, "age_low": 1, "age_high": 4, "seed": 0},
    "split": {"train_frac": 0.7, "seed": 0},
    "train": {"spec": "default", **TrainConfig().to_dict()},
    "evaluate": {"batch_size": 32},
    "predict": {},
    "gridsearch": {"spec": "default", **TrainConfig().to_dict()},
}

_TRAIN_FLAGS = [
    ("--lr", "learning_rate", float),
    ("--beta1", "beta1", float),
    ("--beta2", "beta2", float),
    ("--epsilon", "epsilon", float),
    ("--epochs", "max_epochs", int),
    ("--batch-size", "batch_size", int),
    ("--seed", "seed", int),
]


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    for flag, dest, typ in _TRAIN_FLAGS:
        p.add_argument(flag, dest=dest, type=typ, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="facecnn", description="Age regression and gender classification CNN toolkit.")
    parser.add_argument("--threads", type=int, default=1, help="BLAS threads; 1 gives the strict deterministic mode")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="JSON file of option defaults")
        return p

    p = command("synth", "write a synthetic UTK-style image set with planted labels")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--manifest", default=None, help="also write the generated manifest here")
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--size", type=int, default=None)

    p = command("prepare", "ingest a directory, drop gender-3 images, rebalance ages 1-4")
    p.add_argument("--input-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--keep-frac", dest="keep_frac", type=float, default=None)
    p.add_argument("--age-low", dest="age_low", type=int, default=None)
    p.add_argument("--age-high", dest="age_high", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)

    p = command("split", "seeded train/test holdout split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--train-frac", dest="train_frac", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-train", required=True)
    p.add_argument("--out-test", required=True)

    p = command("train", "train one model and write a checkpoint")
    p.add_argument("--task", required=True, choices=[t.value for t in Task])
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--spec", default=None, help="'default' or a model spec JSON file")
    p.add_argument("--out", required=True)
    p.add_argument("--log", default=None, help="per-epoch CSV log")
    _add_train_flags(p)

    p = command("evaluate", "score a checkpoint on a manifest")
    p.add_argument("--task", required=True, choices=[t.value for t in Task])
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)

    p = command("predict", "predict age and gender for one image")
    p.add_argument("--image", required=True)
    p.add_argument("--age-checkpoint", required=True)
    p.add_argument("--gender-checkpoint", required=True)

    p = command("gridsearch", "train every config of a grid and pick the best")
    p.add_argument("--task", required=True, choices=[t.value for t in Task])
    p.add_argument("--grid", default=None, help="JSON list of configs or {field: [values]} product")
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--spec", default=None)
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, the optional config file and explicit flags."""
    eff = dict(DEFAULTS[args.command])
    if args.config:
        try:
            file_cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(EXIT_IO, f"cannot read config {args.config!r}: {exc}")
        if not isinstance(file_cfg, dict):
            raise CliError(EXIT_ARGS, f"config {args.config!r} must be a JSON object")
        eff.update(file_cfg)
    for key, value in vars(args).items():
        if key in ("config", "command", "threads", "verbose"):
            continue
        if value is not None:
            eff[key] = value
    return eff


def write_effective(path, command: str, eff: dict) -> None:
    Path(f"{path}.config.json").write_text(
        json.dumps({"command": command, **eff}, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _train_config(eff: dict) -> TrainConfig:
    names = {f.name for f in fields(TrainConfig)}
    try:
        return TrainConfig.from_dict({k: v for k, v in eff.items() if k in names}).validate()
    except (DomainError, ValueError, TypeError) as exc:
        raise CliError(EXIT_ARGS, f"invalid training config: {exc}")


def _load_manifest(path) -> D.Manifest:
    try:
        return D.load_manifest(path)
    except (OSError, DomainError) as exc:
        raise CliError(EXIT_IO, f"cannot load manifest {path!r}: {exc}")


def _load_spec(value, task: Task):
    try:
        spec = bundled_spec(task) if value in (None, "default") else load_spec(value)
    except (OSError, DomainError, json.JSONDecodeError) as exc:
        raise CliError(EXIT_IO, f"cannot load model spec {value!r}: {exc}")
    if spec.task is not task:
        got = spec.task.value if spec.task else None
        raise CliError(EXIT_IO, f"spec {value!r} is for task {got!r} but --task is {task.value!r}")
    return spec


def _load_ckpt(path) -> Checkpoint:
    try:
        return load_checkpoint(path)
    except CheckpointError as exc:
        raise CliError(EXIT_IO, str(exc))


def _text_hist(counts: dict, label: str, width: int = 40) -> str:
    if not counts:
        return f"  {label}: (none)\n"
    top = max(counts.values()) or 1
    lines = [f"  {label}:"]
    for k, v in counts.items():
        lines.append(f"    {str(k):>8} {v:>7d} {'#' * max(1 if v else 0, round(width * v / top))}")
    return "\n".join(lines) + "\n"


# -- commands ------------------------------------------------------------------


def cmd_synth(args, eff) -> int:
    try:
        m = D.generate_synthetic(eff["seed"], eff["n"], args.out_dir, size=eff["size"])
    except DomainError as exc:
        raise CliError(EXIT_ARGS, str(exc))
    except OSError as exc:
        raise CliError(EXIT_IO, str(exc))
    if args.manifest:
        D.save_manifest(m, args.manifest)
        write_effective(args.manifest, "synth", eff)
    print(f"wrote {len(m)} images to {args.out_dir}")
    return EXIT_OK


def cmd_prepare(args, eff) -> int:
    try:
        m0 = D.ingest_directory(args.input_dir, seed=eff["seed"])
    except OSError as exc:
        raise CliError(EXIT_IO, str(exc))
    m1 = D.filter_invalid_gender(m0)
    try:
        m2 = D.rebalance_age(m1, eff["age_low"], eff["age_high"], eff["keep_frac"], eff["seed"])
    except DomainError as exc:
        raise CliError(EXIT_ARGS, str(exc))
    for step in m2.steps:
        print(f"{step.name:<22} {step.in_count:>7d} -> {step.out_count:>7d}")
    print(_text_hist(D.gender_counts(m0), "gender before filtering"), end="")
    print(_text_hist(D.age_histogram(m1), "age before rebalancing"), end="")
    print(_text_hist(D.age_histogram(m2), "age after rebalancing"), end="")
    if len(m2) == 0:
        print("no records left after preparation", file=sys.stderr)
        return EXIT_EMPTY
    try:
        D.save_manifest(m2, args.out)
        write_effective(args.out, "prepare", eff)
    except OSError as exc:
        raise CliError(EXIT_IO, str(exc))
    return EXIT_OK


def cmd_split(args, eff) -> int:
    m = _load_manifest(args.manifest)
    if len(m) == 0:
        print("manifest is empty", file=sys.stderr)
        return EXIT_EMPTY
    try:
        train_m, test_m = D.holdout_split(m, eff["train_frac"], eff["seed"])
    except DomainError as exc:
        raise CliError(EXIT_ARGS, str(exc))
    if len(train_m) == 0 or len(test_m) == 0:
        raise CliError(EXIT_ARGS, f"split {len(train_m)}/{len(test_m)} leaves an empty part; adjust --train-frac")
    try:
        D.save_manifest(train_m, args.out_train)
        D.save_manifest(test_m, args.out_test)
        write_effective(args.out_train, "split", eff)
    except OSError as exc:
        raise CliError(EXIT_IO, str(exc))
    print(f"train {len(train_m)} / test {len(test_m)}")
    return EXIT_OK


def cmd_train(args, eff) -> int:
    task = Task.parse(args.task)
    cfg = _train_config(eff)
    spec = _load_spec(eff.get("spec"), task)
    train_m = _load_manifest(args.train)
    val_m = _load_manifest(args.val)
    if len(train_m) == 0 or len(val_m) == 0:
        print("training and validation manifests must be non-empty", file=sys.stderr)
        return EXIT_EMPTY
    try:
        params, tlog = train(task, spec, train_m, val_m, cfg)
    except TrainingDivergedError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_DIVERGED
    except ImageDecodeError as exc:
        raise CliError(EXIT_IO, str(exc))
    ckpt = Checkpoint(spec, params, cfg, epoch=cfg.max_epochs, seed=train_m.seed)
    try:
        save_checkpoint(ckpt, args.out)
        if args.log:
            tlog.write_csv(args.log)
        write_effective(args.out, "train", eff)
    except OSError as exc:
        raise CliError(EXIT_IO, str(exc))
    print(f"final validation {metric_name(task)} {tlog.final_metric:.4f}")
    return EXIT_OK


def cmd_evaluate(args, eff) -> int:
    task = Task.parse(args.task)
    ckpt = _load_ckpt(args.checkpoint)
    m = _load_manifest(args.manifest)
    try:
        report = evaluate(task, ckpt, m, batch_size=eff["batch_size"])
    except ContractError as exc:
        raise CliError(EXIT_IO, str(exc))
    except DomainError as exc:
        raise CliError(EXIT_EMPTY, str(exc))
    except ImageDecodeError as exc:
        raise CliError(EXIT_IO, str(exc))
    try:
        report.write(args.report)
        write_effective(args.report, "evaluate", eff)
    except OSError as exc:
        raise CliError(EXIT_IO, str(exc))
    print(report.render(), end="")
    return EXIT_OK


def predict_line(image_path, age_ckpt: Checkpoint, gender_ckpt: Checkpoint) -> str:
    if age_ckpt.task is not Task.AGE or gender_ckpt.task is not Task.GENDER:
        raise ContractError("predict needs an age checkpoint and a gender checkpoint")
    x = D.normalize(D.load_image(image_path))[None]
    age = float(forward(age_ckpt.spec, age_ckpt.params, x).data[0, 0])
    probs = forward(gender_ckpt.spec, gender_ckpt.params, x).data[0]
    label = int(probs.argmax())
    return f"age {age:.1f}, gender {label}, p {float(probs[label]):.3f}"


def cmd_predict(args, eff) -> int:
    age_ckpt = _load_ckpt(args.age_checkpoint)
    gender_ckpt = _load_ckpt(args.gender_checkpoint)
    try:
        print(predict_line(args.image, age_ckpt, gender_ckpt))
    except (ImageDecodeError, ContractError) as exc:
        raise CliError(EXIT_IO, str(exc))
    return EXIT_OK


def parse_grid(path, base: TrainConfig) -> list[TrainConfig]:
    """A JSON list of partial configs, or an object mapping fields to value lists."""
    if path is None:
        return default_grid(base)
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(EXIT_IO, f"cannot read grid {path!r}: {exc}")
    if isinstance(obj, dict):
        keys = list(obj)
        cells = [dict(zip(keys, combo)) for combo in itertools.product(*(obj[k] for k in keys))]
    elif isinstance(obj, list):
        cells = obj
    else:
        raise CliError(EXIT_IO, f"grid {path!r} must be a list or an object")
    base_d = base.to_dict()
    try:
        grid = [TrainConfig.from_dict({**base_d, **cell}) for cell in cells]
    except (DomainError, ValueError, TypeError) as exc:
        raise CliError(EXIT_IO, f"bad grid cell in {path!r}: {exc}")
    if not grid:
        raise CliError(EXIT_IO, f"grid {path!r} has no cells")
    return grid


def cmd_gridsearch(args, eff) -> int:
    task = Task.parse(args.task)
    names = {f.name for f in fields(TrainConfig)}
    try:
        base = TrainConfig.from_dict({k: v for k, v in eff.items() if k in names})
    except (DomainError, ValueError, TypeError) as exc:
        raise CliError(EXIT_ARGS, f"invalid training config: {exc}")
    grid = parse_grid(args.grid, base)
    spec = _load_spec(eff.get("spec"), task)
    train_m = _load_manifest(args.train)
    val_m = _load_manifest(args.val)
    try:
        best, results = grid_search(task, spec, train_m, val_m, grid)
    except GridSearchExhausted as exc:
        Path(args.out).write_text(results_csv(getattr(exc, "results", []), task), encoding="utf-8")
        print(str(exc), file=sys.stderr)
        return EXIT_EXHAUSTED
    except ImageDecodeError as exc:
        raise CliError(EXIT_IO, str(exc))
    try:
        Path(args.out).write_text(results_csv(results, task), encoding="utf-8")
        write_effective(args.out, "gridsearch", {**eff, "grid_cells": [c.to_dict() for c in grid]})
    except OSError as exc:
        raise CliError(EXIT_IO, str(exc))
    winner = next(r for r in results if r.config == best and r.ok)
    print(f"best cell {winner.index}: {json.dumps(best.to_dict(), sort_keys=True)} {metric_name(task)} {winner.metric:.4f}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "prepare": cmd_prepare,
    "split": cmd_split,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "gridsearch": cmd_gridsearch,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        eff = resolve(args)
        print(f"config: {json.dumps({'command': args.command, **eff}, sort_keys=True)}", file=sys.stderr)
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](args, eff)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
