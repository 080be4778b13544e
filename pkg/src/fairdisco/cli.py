"""Command-line entry point: ``fairdisco <command> [options]``.

Exit codes: 0 on success, 1 on a runtime failure, 2 on a usage or
validation error. Inputs are parsed and validated before any output file
is written.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import yaml

from .core import DataError
from .data import DatasetManifest, SplitSpec, load_manifest, make_split, read_split_file, write_split_files
from .metrics import fairness_report, rate_curves_csv, read_prediction_log, write_prediction_log
from .model import load_checkpoint, save_checkpoint
from .synth import SynthSpec, linear_probe, write_synth
from .train import TrainConfig, check_vocabularies, evaluate, extract_representations, sweep, train

logger = logging.getLogger("fairdisco")

# flags that map one-to-one onto TrainConfig fields
TRAIN_FLAGS = {
    "method": str, "alpha": float, "beta": float, "tau": float, "lr": float, "lr_step": int, "lr_gamma": float,
    "batch_size": int, "epochs": int, "sampler": str, "backbone": str, "dim": int, "image_size": int,
    "weights_path": str,
}


class UsageError(Exception):
    """Bad arguments or inputs, reported with exit code 2."""


def _load_config(path: Optional[str]) -> Dict:
    if not path:
        return {}
    try:
        values = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if values is None:
        return {}
    if not isinstance(values, dict):
        raise UsageError(f"config {path} must be a mapping of option names to values")
    return values


def train_config(args: argparse.Namespace) -> TrainConfig:
    """Config file values, overridden by explicit flags, then ``--seed``."""
    values = _load_config(args.config)
    for name in TRAIN_FLAGS:
        if getattr(args, name, None) is not None:
            values[name] = getattr(args, name)
    if getattr(args, "no_augment", False):
        values["augment"] = False
    if getattr(args, "literal_scopes", False):
        values["literal_scopes"] = True
    if args.seed is not None:
        values["seed"] = args.seed
    return TrainConfig.from_mapping(values)


def _seed(args: argparse.Namespace) -> int:
    if args.seed is not None:
        return args.seed
    return int(_load_config(args.config).get("seed", 0))


def _manifest(args: argparse.Namespace, ids_path: Optional[str] = None) -> DatasetManifest:
    manifest = load_manifest(args.manifest, grouped=args.grouped, data_dir=args.data_dir)
    return read_split_file(manifest, ids_path) if ids_path else manifest


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def cmd_prepare(args: argparse.Namespace) -> None:
    manifest = _manifest(args)
    spec = SplitSpec(args.split, args.ratio, _seed(args), args.stratify)
    train_set, test_set = make_split(manifest, spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_split_files(train_set, test_set, out)
    print(manifest.summary_table())
    print(f"\n{spec.kind.value}: {len(train_set)} train / {len(test_set)} test")


def cmd_synth(args: argparse.Namespace) -> None:
    spec = SynthSpec(n_samples=args.n, image_size=args.size, n_classes=args.classes, n_types=args.types,
                     rho=args.rho, noise=args.noise, contrast=args.contrast, seed=_seed(args))
    path = write_synth(spec, args.out)
    print(f"wrote {spec.n_samples} images and {path}")


def cmd_train(args: argparse.Namespace) -> None:
    config = train_config(args)
    manifest = _manifest(args, args.ids)
    bundle, state = train(config, manifest)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(bundle, out, {"conditions": list(manifest.conditions.names),
                                  "skin_types": list(manifest.skin_types.names), "config": config.to_dict()})
    history = [dict(epoch=e, lr=lr, **vars(r)) for e, (lr, r) in enumerate(zip(state.lr_history, state.epoch_history))]
    _write_text(out.with_suffix(".history.json"), json.dumps(history, indent=2) + "\n")
    print(f"saved {out}")


def _load_for_inference(args: argparse.Namespace):
    bundle, meta = load_checkpoint(args.checkpoint)
    manifest = _manifest(args, args.ids)
    check_vocabularies(meta, manifest)
    config = TrainConfig.from_mapping(meta["config"]) if "config" in meta else TrainConfig()
    return bundle, manifest, config


def cmd_evaluate(args: argparse.Namespace) -> None:
    bundle, manifest, config = _load_for_inference(args)
    log = evaluate(bundle, manifest, config=config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_prediction_log(log, out)
    print(f"wrote {len(log.sample_ids)} predictions to {out}")


def cmd_report(args: argparse.Namespace) -> None:
    report = fairness_report(read_prediction_log(args.log))
    out = Path(args.out_dir)
    name = args.name or Path(args.log).stem
    _write_text(out / f"{name}.json", report.to_json() + "\n")
    _write_text(out / f"{name}.md", report.to_markdown(name))
    _write_text(out / f"{name}_rates.csv", rate_curves_csv(report))
    print(f"accuracy {100 * report.accuracy:.2f}")
    print(f"PQD {100 * report.pqd:.2f}")
    print(f"DPM {100 * report.dpm:.2f}")
    print(f"EOM {100 * report.eom:.2f}")


def cmd_probe(args: argparse.Namespace) -> None:
    bundle, manifest, config = _load_for_inference(args)
    z = extract_representations(bundle, manifest, config=config)
    log = evaluate(bundle, manifest, config=config)
    class_acc = float((log.pred == log.true).mean())
    result = linear_probe(z, manifest.skin_array(), seed=_seed(args), class_accuracy=class_acc)
    text = json.dumps(vars(result), indent=2, sort_keys=True) + "\n"
    _write_text(Path(args.out), text)
    print(text, end="")


def _grid(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"bad grid {text!r}: expected comma-separated numbers") from exc


def cmd_sweep(args: argparse.Namespace) -> None:
    config = train_config(args)
    grid = _grid(args.grid)
    manifest = _manifest(args)
    train_set = read_split_file(manifest, args.train_ids)
    test_set = read_split_file(manifest, args.test_ids)
    rows = sweep(config, args.parameter, grid, train_set, test_set)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows({k: repr(v) for k, v in row.items()} for row in rows)
    for row in rows:
        print(f"{args.parameter}={row[args.parameter]:g} accuracy {100 * row['accuracy']:.2f} "
              f"PQD {100 * row['pqd']:.2f} DPM {100 * row['dpm']:.2f} EOM {100 * row['eom']:.2f}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="seed for every random choice (default 0)")
    common.add_argument("--config", help="YAML file of option names to values; flags take precedence")
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("manifest", help="CSV with id,image_path,condition,fitzpatrick,source")
    data.add_argument("--data-dir", help="image root (default: $FAIRDISCO_DATA_DIR, then the manifest's folder)")
    data.add_argument("--grouped", action="store_true", help="use the three paired skin-type groups")

    training = argparse.ArgumentParser(add_help=False)
    training.add_argument("--method", choices=["base", "resm", "rewt", "atrb", "fdc_no_cl", "fdc"])
    for flag in ("alpha", "beta", "tau", "lr", "lr_gamma"):
        training.add_argument(f"--{flag.replace('_', '-')}", dest=flag, type=float)
    for flag in ("lr_step", "batch_size", "epochs", "dim", "image_size"):
        training.add_argument(f"--{flag.replace('_', '-')}", dest=flag, type=int)
    training.add_argument("--sampler", choices=["auto", "uniform", "class_balanced", "group_balanced"])
    training.add_argument("--backbone", choices=["tiny", "resnet18"])
    training.add_argument("--weights", dest="weights_path", help="pretrained ResNet-18 state dict")
    training.add_argument("--no-augment", action="store_true")
    training.add_argument("--literal-scopes", action="store_true",
                          help="let the confusion loss also update the skin-type head")

    parser = argparse.ArgumentParser(prog="fairdisco", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", parents=[common, data], help="split a manifest and print its summary")
    p.add_argument("--split", default="in-domain",
                   choices=["in-domain", "out-domain-a", "out-domain-b", "out-domain-c"])
    p.add_argument("--ratio", type=float, default=0.8)
    p.add_argument("--stratify", action="store_true")
    p.add_argument("--out", default=".", help="directory for train_ids.txt and test_ids.txt")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic biased dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=6000)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--types", type=int, default=3)
    p.add_argument("--rho", type=float, default=0.8)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--contrast", type=float, default=0.3)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common, data, training], help="train one model")
    p.add_argument("--ids", help="restrict to the ids listed in this file")
    p.add_argument("--out", required=True, help="checkpoint path (.zip)")
    p.set_defaults(func=cmd_train)

    for name, func, default_out in (("evaluate", cmd_evaluate, "predictions.csv"), ("probe", cmd_probe, "probe.json")):
        p = sub.add_parser(name, parents=[common, data])
        p.add_argument("checkpoint")
        p.add_argument("--ids", help="restrict to the ids listed in this file")
        p.add_argument("--out", default=default_out)
        p.set_defaults(func=func)
    sub.choices["evaluate"].description = "write a prediction log"
    sub.choices["probe"].description = "linear skin-type probe on frozen features"

    p = sub.add_parser("report", parents=[common], help="fairness report from a prediction log")
    p.add_argument("log")
    p.add_argument("--out-dir", default=".")
    p.add_argument("--name", help="report name (default: log file stem)")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("sweep", parents=[common, data, training], help="train over a grid of alpha or beta")
    p.add_argument("--train-ids", required=True)
    p.add_argument("--test-ids", required=True)
    p.add_argument("--parameter", choices=["alpha", "beta"], required=True)
    p.add_argument("--grid", required=True, help="comma-separated values, e.g. 0,0.5,1")
    p.add_argument("--out", default="sweep.csv")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (UsageError, DataError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        logger.debug("runtime failure", exc_info=True)
        print(f"runtime error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
