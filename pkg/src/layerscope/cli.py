"""Command-line entry point: ``layerscope train|exposure|partition|replay``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric divergence
(or failed --verify), 5 budget infeasible.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

from layerscope import __version__
from layerscope.data import DataError, load_descriptor, split_private
from layerscope.enclave.memory import DEFAULT_BUDGET, BudgetError, PartitionPlan, validate_plan
from layerscope.enclave.protocol import BoundaryError
from layerscope.enclave.runner import cost_csv, run_partitioned_training, sweep_cuts
from layerscope.exposure import ExposureConfig, measure_all, measure_dataset
from layerscope.model import (
    VGG7_DROPOUT, ArchParseError, CheckpointError, DivergenceError, TrainConfig, evaluate, init_model,
    load_checkpoint, parse_arch, save_checkpoint, train,
)

log = logging.getLogger("layerscope")

# base / fine-tune epochs per dataset name
EPOCH_SCHEDULE = {"mnist": (20, 10), "fashion-mnist": (40, 20), "cifar10": (60, 30)}
DEFAULT_SCHEDULE = (20, 10)

EXIT_USAGE, EXIT_DATA, EXIT_DIVERGENCE, EXIT_BUDGET = 2, 3, 4, 5


class VerifyError(RuntimeError):
    pass


def _schedule(name: str):
    return EPOCH_SCHEDULE.get(name.lower(), DEFAULT_SCHEDULE)


def _descriptor(path):
    """Descriptor JSON with paths made absolute, so a manifest can carry it inline."""
    if isinstance(path, dict):
        return path
    p = Path(path)
    desc = json.loads(p.read_text())
    base = p.resolve().parent
    for key in ("images", "labels"):
        if key in desc:
            desc[key] = str(base / desc[key])
    if "paths" in desc:
        desc["paths"] = [str(base / q) for q in desc["paths"]]
    if isinstance(desc.get("test"), dict):
        for key in ("images", "labels"):
            if key in desc["test"]:
                desc["test"][key] = str(base / desc["test"][key])
        if "paths" in desc["test"]:
            desc["test"]["paths"] = [str(base / q) for q in desc["test"]["paths"]]
    return desc


def _write(out: Path, name: str, text: str, written: list):
    (out / name).write_text(text)
    written.append(name)


def _manifest(out: Path, command: str, config: dict, written: list, started: float):
    manifest = {
        "command": command,
        "config": config,
        "outputs": sorted(written),
        "version": __version__,
        "wall_time_s": time.time() - started,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def resolve(args) -> dict:
    """Every setting a command depends on, with defaults materialized."""
    cfg = {"dataset": _descriptor(args.dataset) if args.dataset else None,
           "arch": args.arch, "checkpoint": str(Path(args.checkpoint).resolve()) if args.checkpoint else None,
           "batch": args.batch, "lr": args.lr, "ft_lr": args.ft_lr, "momentum": args.momentum}
    name = (cfg["dataset"] or {}).get("name", "")
    base_ep, ft_ep = _schedule(name)
    cfg["epochs"] = base_ep if args.epochs is None else args.epochs
    cfg["ft_epochs"] = ft_ep if args.ft_epochs is None else args.ft_epochs
    if args.command == "exposure":
        seeds = args.seeds if args.seeds is not None else list(range(args.seed, args.seed + args.repeats))
        cfg["seeds"] = [int(s) for s in seeds]
        cfg["repeats"] = len(cfg["seeds"])
    else:
        cfg["seed"] = args.seed
    if args.command == "partition":
        cfg["budget_bytes"] = args.budget_bytes
        cfg["verify"] = args.verify
        cfg["cut"] = args.cut
        cfg["sweep_repeats"] = args.sweep_repeats
        if args.epochs is None:
            cfg["epochs"] = 1
    return cfg


def cmd_train(cfg: dict, out: Path, written: list):
    X = load_descriptor(cfg["dataset"])
    seed = cfg["seed"]
    split = split_private(X, seed)
    model = init_model(parse_arch(cfg["arch"]), X.image_shape, seed)
    tc = TrainConfig(cfg["epochs"], cfg["batch"], cfg["lr"], cfg["momentum"], seed)
    trained, history = train(model, split.S, tc)
    save_checkpoint(trained, out / "model.ckpt")
    written.append("model.ckpt")
    result = {"history": history, "accuracy_S": evaluate(trained, split.S)[0], "accuracy_T": evaluate(trained, split.T)[0]}
    if isinstance(cfg["dataset"].get("test"), dict):
        test = load_descriptor(cfg["dataset"]["test"])
        result["accuracy_test"], result["cost_test"] = evaluate(trained, test)
    _write(out, "train.json", json.dumps(result, indent=2, sort_keys=True) + "\n", written)
    for key in ("accuracy_S", "accuracy_T", "accuracy_test"):
        if key in result:
            print(f"{key}: {result[key]:.4f}")


def cmd_exposure(cfg: dict, out: Path, written: list):
    X = load_descriptor(cfg["dataset"])
    ecfg = ExposureConfig(
        TrainConfig(cfg["epochs"], cfg["batch"], cfg["lr"], cfg["momentum"]),
        TrainConfig(cfg["ft_epochs"], cfg["batch"], cfg["ft_lr"], cfg["momentum"]),
        repeats=cfg["repeats"], seeds=cfg["seeds"])
    if cfg["checkpoint"]:
        model = load_checkpoint(cfg["checkpoint"])
        report = measure_all(model, split_private(X, model.seed), ecfg)
    else:
        report = measure_dataset(parse_arch(cfg["arch"]), X, ecfg)
    _write(out, "exposure.json", report.to_json(), written)
    _write(out, "exposure.csv", report.to_csv(), written)
    if not report.ci_defined:
        log.warning("single repeat: confidence intervals are reported with zero width")
    print(report.to_csv(), end="")


def cmd_partition(cfg: dict, out: Path, written: list):
    X = load_descriptor(cfg["dataset"])
    if cfg["checkpoint"]:
        model = load_checkpoint(cfg["checkpoint"])
    else:
        model = init_model(parse_arch(cfg["arch"]), X.image_shape, cfg["seed"])
    tc = TrainConfig(cfg["epochs"], cfg["batch"], cfg["ft_lr"], cfg["momentum"], cfg["seed"])
    if cfg["cut"] is not None:
        plan = PartitionPlan(cfg["cut"], cfg["budget_bytes"], tc.batch_size)
        validate_plan(model, plan)
        reports = [run_partitioned_training(model, plan, X, tc)[1]]
    else:
        reports = sweep_cuts(model, X, tc, cfg["budget_bytes"], repeats=cfg["sweep_repeats"])
    ran = [r for r in reports if not r.skipped]
    if not ran:
        log.warning("no cut fits in %d bytes; every cut skipped", cfg["budget_bytes"])
    if cfg["verify"]:
        bad = [r.cut_label for r in ran if r.max_param_diff is None or r.max_param_diff > 1e-12]
        if bad:
            raise VerifyError(f"partitioned parameters differ from monolithic training at cuts {bad}")
    _write(out, "partition.csv", cost_csv(reports), written)
    rows = [{
        "cut_index": r.cut_index, "cut_label": r.cut_label, "param_layers_secure": r.param_layers_secure,
        "secure_bytes": r.secure_bytes, "copied_front_bytes": r.copied_front_bytes,
        "memory": {"layers": [asdict(m) for m in r.memory_account.layers],
                   "copied_front_layers": r.memory_account.copied_front_layers,
                   "boundary_bytes": r.memory_account.boundary_bytes},
        "boundary_bytes_per_batch": r.boundary_bytes_per_batch, "crossings_per_batch": r.crossings_per_batch,
        "measured_boundary_bytes": r.measured_boundary_bytes, "batches": r.batches,
        "max_param_diff": r.max_param_diff, "skipped": r.skipped, "reason": r.reason,
    } for r in reports]
    _write(out, "partition.json", json.dumps(rows, indent=2, sort_keys=True) + "\n", written)
    print(cost_csv(reports), end="")


COMMANDS = {"train": cmd_train, "exposure": cmd_exposure, "partition": cmd_partition}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="layerscope", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--dataset", help="dataset descriptor JSON")
    common.add_argument("--arch", default=VGG7_DROPOUT)
    common.add_argument("--checkpoint")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--epochs", type=int, help="base training epochs (default: per-dataset schedule)")
    common.add_argument("--ft-epochs", type=int, help="fine-tuning epochs (default: per-dataset schedule)")
    common.add_argument("--lr", type=float, default=0.01)
    common.add_argument("--ft-lr", type=float, default=0.001)
    common.add_argument("--momentum", type=float, default=0.9)
    common.add_argument("--batch", type=int, default=128)
    common.add_argument("--out", required=True)

    sub.add_parser("train", parents=[common], help="train the base model on the private half S")
    p = sub.add_parser("exposure", parents=[common], help="per-layer exposure report (JSON + CSV)")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seeds", type=int, nargs="+")
    p = sub.add_parser("partition", parents=[common], help="sweep secure-region cuts and report costs")
    p.add_argument("--budget-bytes", type=int, default=DEFAULT_BUDGET)
    p.add_argument("--cut", type=int, help="run a single cut (stack position) instead of a sweep")
    p.add_argument("--sweep-repeats", type=int, default=1)
    p.add_argument("--verify", action="store_true", help="require partitioned == monolithic parameters")
    p = sub.add_parser("replay", help="re-run a command from its manifest")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    return parser


def run(command: str, cfg: dict, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    started = time.time()
    COMMANDS[command](cfg, out, written)
    _manifest(out, command, cfg, written, started)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "replay":
            manifest = json.loads(Path(args.manifest).read_text())
            command, cfg = manifest["command"], manifest["config"]
        else:
            command = args.command
            if args.dataset is None:
                parser.error("--dataset is required")
            cfg = resolve(args)
            if not cfg["checkpoint"]:
                parse_arch(cfg["arch"])
        run(command, cfg, args.out)
    except ArchParseError as err:
        print(f"error: architecture: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError, KeyError, json.JSONDecodeError) as err:
        print(f"error: data: {err}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceError, VerifyError) as err:
        print(f"error: numeric: {err}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except BudgetError as err:
        print(f"error: budget: {err}", file=sys.stderr)
        return EXIT_BUDGET
    except BoundaryError as err:
        print(f"error: secure worker: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
