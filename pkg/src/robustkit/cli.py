"""Command line interface.

Subcommands cover the full workflow: train models, evaluate them under
attack suites, sweep budgets, run transfer (black-box) evaluations, check
embedding quality with a k-NN readout, export embeddings, and render or
verify run reports. Budgets on the command line are in 1/255 units, so
``--eps 8`` means 8/255.
"""

from __future__ import annotations

import argparse
import os
import sys

from .attacks import AttackConfig, named_attack, table1_suite
from .data import CorruptDataError
from .evaluation import (RobustnessReport, black_box, clean_accuracy,
                         evaluate_suite, export_embeddings, knn_accuracy,
                         knn_from_dumps, robust_accuracy)
from .experiment import (DatasetSpec, ExperimentConfig, register_artifact,
                         resolve_out_dir, verify_manifest)
from .losses import LossWeights
from .models import CheckpointError, load_checkpoint
from .training import TrainConfig, train
from .validation import InvalidInputError

_USER_ERRORS = (InvalidInputError, CorruptDataError, CheckpointError,
                FileNotFoundError, LookupError, ValueError)


def _add_data_args(p: argparse.ArgumentParser, split_default="train") -> None:
    p.add_argument("--data", required=True, help="dataset path")
    p.add_argument("--format", required=True,
                   choices=["cifar10-binary", "synthetic-spec"])
    p.add_argument("--split", default=split_default,
                   choices=["train", "test"])
    p.add_argument("--subset", type=int, default=None,
                   help="use only the first N samples")


def _dataset_from_args(args, split=None):
    spec = DatasetSpec(path=args.data, format=args.format,
                       split=split or args.split, subset=args.subset)
    return spec.load()


def _model_from_checkpoint(path: str):
    payload = load_checkpoint(path)
    return payload["model"]


def _parse_int_list(text: str) -> list:
    return [int(v) for v in text.replace(",", " ").split()]


def _emit_report(report: RobustnessReport, out: str | None) -> None:
    sys.stdout.write(report.to_table())
    if out:
        report.write(out)
        register_artifact(os.path.dirname(os.path.abspath(out)), out)
        print(f"wrote {out}")


def cmd_train(args) -> int:
    if args.config:
        exp = ExperimentConfig.load(args.config)
        if args.seed is not None:
            exp.train.seed = args.seed
    else:
        weights = LossWeights(margin=args.margin,
                              lambda_triplet=args.lambda_triplet,
                              lambda_norm=args.lambda_norm,
                              smoothing=args.smoothing)
        cfg = TrainConfig(
            mode=args.mode, epochs=args.epochs, batch_size=args.batch_size,
            lr=args.lr, decay_epochs=_parse_int_list(args.decay_epochs),
            decay_factor=args.decay_factor, eps=args.eps,
            attack_steps=args.attack_steps,
            attack_step_size=args.attack_step_size,
            attack_random_start=not args.no_random_start, weights=weights,
            arch=args.arch, width=args.width, depth=args.depth,
            augment=args.augment, ce_samples=args.ce_samples,
            seed=args.seed if args.seed is not None else 0,
            checkpoint_every=args.checkpoint_every)
        exp = ExperimentConfig(
            dataset=DatasetSpec(path=args.data, format=args.format,
                                split=args.split, subset=args.subset),
            train=cfg, teacher_checkpoint=args.teacher,
            name=args.out or "run")

    dataset = exp.dataset.load()
    teacher = None
    if exp.train.mode in ("agkd", "agkd-bml"):
        if not exp.teacher_checkpoint:
            raise InvalidInputError(
                f"mode {exp.train.mode!r} needs --teacher (train one with "
                f"--mode standard first)")
        teacher = _model_from_checkpoint(exp.teacher_checkpoint)

    out_dir = resolve_out_dir(args.out or exp.name)
    os.makedirs(out_dir, exist_ok=True)
    config_path = exp.save(os.path.join(out_dir, "config.json"))
    register_artifact(out_dir, config_path)

    result = train(exp.train, dataset, teacher, out_dir=out_dir,
                   resume=args.resume)
    for path in result.checkpoints:
        register_artifact(out_dir, path)
    log_path = os.path.join(out_dir, "train_log.jsonl")
    if os.path.isfile(log_path):
        register_artifact(out_dir, log_path)

    last = result.log[-1]
    print(f"trained mode={exp.train.mode} epochs={exp.train.epochs} "
          f"final_loss={last.total:.4f}")
    print(f"config_digest {result.config_digest}")
    print(f"checkpoint {result.final_checkpoint}")
    return 0


def cmd_eval(args) -> int:
    model = _model_from_checkpoint(args.checkpoint)
    dataset = _dataset_from_args(args)
    if args.suite:
        if args.suite != "table1":
            raise InvalidInputError(f"unknown suite {args.suite!r}")
        suite = table1_suite(args.eps)
    elif args.attack:
        suite = [(name, named_attack(name, args.eps)) for name in args.attack]
    else:
        suite = []
    report = evaluate_suite(model, dataset, suite, seed=args.seed,
                            batch_size=args.batch_size,
                            checkpoint=args.checkpoint)
    _emit_report(report, args.out)
    return 0


def cmd_sweep(args) -> int:
    model = _model_from_checkpoint(args.checkpoint)
    dataset = _dataset_from_args(args)
    base = named_attack(args.attack, args.eps)
    report = RobustnessReport()
    res = clean_accuracy(model, dataset, args.batch_size)
    report.add("clean", AttackConfig(eps=0.0, steps=0, random_start=False),
               res, args.checkpoint, args.seed)
    for eps in _parse_int_list(args.eps_list):
        cfg = base.replace(eps=float(eps))
        res = robust_accuracy(model, dataset, cfg, seed=args.seed,
                              batch_size=args.batch_size)
        report.add(args.attack, cfg, res, args.checkpoint, args.seed)
    _emit_report(report, args.out)
    return 0


def cmd_blackbox(args) -> int:
    source = _model_from_checkpoint(args.source_checkpoint)
    target = _model_from_checkpoint(args.checkpoint)
    dataset = _dataset_from_args(args)
    cfg = named_attack(args.attack, args.eps)
    report = RobustnessReport()
    res = black_box(source, target, dataset, cfg, seed=args.seed,
                    batch_size=args.batch_size)
    report.add(f"{args.attack}+transfer", cfg, res, args.checkpoint,
               args.seed)
    _emit_report(report, args.out)
    return 0


def cmd_knn(args) -> int:
    if args.from_dumps:
        if args.num_classes is None:
            raise InvalidInputError("--from-dumps needs --num-classes")
        res = knn_from_dumps(args.from_dumps[0], args.from_dumps[1],
                             args.k, args.num_classes)
        print(f"knn k={args.k} accuracy {res.accuracy:.4f} n={res.n}")
        return 0
    if not (args.checkpoint and args.data and args.format):
        raise InvalidInputError(
            "knn needs --checkpoint, --data and --format (or --from-dumps)")
    model = _model_from_checkpoint(args.checkpoint)
    train_set = _dataset_from_args(args, split=args.train_split)
    test_set = _dataset_from_args(args, split=args.test_split)
    res = knn_accuracy(model, train_set, test_set, k=args.k,
                       batch_size=args.batch_size)
    soft = clean_accuracy(model, test_set, args.batch_size)
    print(f"knn k={args.k} accuracy {res.accuracy:.4f} n={res.n}")
    print(f"softmax accuracy {soft.accuracy:.4f} n={soft.n}")
    return 0


def cmd_export_embeddings(args) -> int:
    model = _model_from_checkpoint(args.checkpoint)
    dataset = _dataset_from_args(args)
    cfg = named_attack(args.attack, args.eps) if args.attack else None
    path = export_embeddings(model, dataset, args.out, attack_cfg=cfg,
                             seed=args.seed, batch_size=args.batch_size)
    register_artifact(os.path.dirname(os.path.abspath(path)), path)
    print(f"wrote {path}")
    return 0


def cmd_report(args) -> int:
    run_dir = args.run_dir
    if not os.path.isdir(run_dir):
        raise FileNotFoundError(f"run directory {run_dir} does not exist")
    found = False
    for name in sorted(os.listdir(run_dir)):
        if name.endswith(".csv"):
            found = True
            print(f"# {name}")
            with open(os.path.join(run_dir, name), "r", encoding="utf-8") as fh:
                sys.stdout.write(fh.read())
    if not found:
        print("# no report tables in run directory")
    if args.check:
        status = verify_manifest(run_dir)
        if not status["clean"]:
            parts = []
            for kind in ("missing", "changed", "orphans"):
                if status[kind]:
                    parts.append(f"{kind}: {', '.join(status[kind])}")
            print(f"error: manifest check failed ({'; '.join(parts)})",
                  file=sys.stderr)
            return 1
        print("manifest clean")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="robustkit",
        description="Adversarial robustness toolkit: defense training, "
                    "attack evaluation, and reporting.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model in one of the modes")
    p.add_argument("--config", help="experiment config JSON")
    _add_data_args_optional(p)
    p.add_argument("--mode", default="agkd-bml",
                   choices=["standard", "at", "bml", "agkd", "agkd-bml"])
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--decay-epochs", default="100,150")
    p.add_argument("--decay-factor", type=float, default=0.1)
    p.add_argument("--eps", type=float, default=8.0,
                   help="training budget in 1/255 units")
    p.add_argument("--attack-steps", type=int, default=2)
    p.add_argument("--attack-step-size", type=float, default=None)
    p.add_argument("--no-random-start", action="store_true")
    p.add_argument("--margin", type=float, default=0.03)
    p.add_argument("--lambda-triplet", type=float, default=2.0)
    p.add_argument("--lambda-norm", type=float, default=0.001)
    p.add_argument("--smoothing", type=float, default=0.5)
    p.add_argument("--arch", default="small-cnn",
                   choices=["small-cnn", "wrn-lite", "linear"])
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--depth", type=int, default=1)
    p.add_argument("--augment", action="store_true")
    p.add_argument("--ce-samples", default="both",
                   choices=["both", "forward"])
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--teacher", help="teacher checkpoint for distillation")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--out", help="run name or directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy under an attack suite")
    p.add_argument("--checkpoint", required=True)
    _add_data_args(p, split_default="test")
    p.add_argument("--suite", help="named suite: table1")
    p.add_argument("--attack", action="append",
                   help="attack name like pgd-20 (repeatable)")
    p.add_argument("--eps", type=float, default=8.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--out", help="write the table to this CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="robust accuracy across budgets")
    p.add_argument("--checkpoint", required=True)
    _add_data_args(p, split_default="test")
    p.add_argument("--attack", default="pgd-20")
    p.add_argument("--eps", type=float, default=8.0,
                   help="base budget (unused rows keep per-eps values)")
    p.add_argument("--eps-list", default="0,2,4,8,12,16,20")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("blackbox", help="transfer attack from source model")
    p.add_argument("--source-checkpoint", required=True,
                   help="model the attack is crafted against")
    p.add_argument("--checkpoint", required=True, help="model under test")
    _add_data_args(p, split_default="test")
    p.add_argument("--attack", default="pgd-20")
    p.add_argument("--eps", type=float, default=8.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--out")
    p.set_defaults(func=cmd_blackbox)

    p = sub.add_parser("knn", help="k-NN readout on penultimate embeddings")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--format", choices=["cifar10-binary", "synthetic-spec"])
    p.add_argument("--train-split", default="train")
    p.add_argument("--test-split", default="test")
    p.add_argument("--subset", type=int, default=None)
    p.add_argument("--k", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--from-dumps", nargs=2,
                   metavar=("TRAIN_CSV", "TEST_CSV"),
                   help="compute from two embedding dumps instead")
    p.add_argument("--num-classes", type=int, default=None)
    p.set_defaults(func=cmd_knn)

    p = sub.add_parser("export-embeddings", help="dump embeddings to CSV")
    p.add_argument("--checkpoint", required=True)
    _add_data_args(p, split_default="test")
    p.add_argument("--attack", help="also dump adversarial rows (e.g. pgd-20)")
    p.add_argument("--eps", type=float, default=8.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_embeddings)

    p = sub.add_parser("report", help="print run reports, verify manifest")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--check", action="store_true",
                   help="fail if the manifest does not match the directory")
    p.set_defaults(func=cmd_report)

    return parser


def _add_data_args_optional(p: argparse.ArgumentParser) -> None:
    # train can take data from --config instead, so these stay optional
    p.add_argument("--data")
    p.add_argument("--format", choices=["cifar10-binary", "synthetic-spec"])
    p.add_argument("--split", default="train", choices=["train", "test"])
    p.add_argument("--subset", type=int, default=None)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "train" and not args.config:
        if not args.data or not args.format:
            parser.error("train needs --data and --format (or --config)")
    try:
        return args.func(args)
    except _USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
