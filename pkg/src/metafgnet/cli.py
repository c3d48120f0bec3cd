"""Command-line entry point.

Subcommands mirror the experiment phases so that partial re-runs are possible::

    metafgnet generate --seed 0 --out runs/s0
    metafgnet train    --seed 0 --out runs/s0 --method metafgnet
    metafgnet select   --seed 0 --out runs/s0 --method metafgnet --select-ratio 0.5
    metafgnet finetune --seed 0 --out runs/s0 --method metafgnet [--selected]
    metafgnet evaluate --seed 0 --out runs/s0 --method metafgnet [--selected]
    metafgnet report   --out runs
    metafgnet run      --config bench.cfg --out runs   # everything, every seed

The step-by-step pipeline uses the same per-seed random streams as ``run``,
so both paths produce the same checkpoints.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path

from .data import generate_task, load_dataset, save_dataset, write_indices
from .harness import (
    MAIN_METHODS,
    ExperimentConfig,
    PhaseError,
    ResultTable,
    dump_config,
    emit_reports,
    finetune_phase,
    last_epoch_mean,
    load_config,
    main_phase,
    run_experiment,
    seed_streams,
    select_phase,
    warmup_phase,
)
from .model import evaluate, load_params, save_params
from .selection import write_scores_csv

log = logging.getLogger("metafgnet")

DATA_FILES = {"target_train": "target_train.bin", "target_test": "target_test.bin", "aux": "aux.bin"}


def _overrides(items: list[str]) -> list[tuple[str, str]]:
    out = []
    for item in items:
        if "=" not in item:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        key, val = item.split("=", 1)
        out.append((key.strip(), val.strip()))
    return out


def _config(args) -> ExperimentConfig:
    pairs = _overrides(args.set)
    if args.select_ratio is not None:
        pairs.append(("keep_ratio", repr(args.select_ratio)))
    if getattr(args, "method", None) and args.command == "run":
        pairs.append(("methods", args.method))
        if args.method not in ("joint", "metafgnet"):
            pairs.append(("select_methods", ""))
    cfg = load_config(args.config, pairs)
    if args.command == "run" and args.seed is not None:
        cfg = dataclasses.replace(cfg, seeds=(args.seed,))
    return cfg


def _seed(args) -> int:
    return 0 if args.seed is None else args.seed


def _data(args):
    d = Path(args.data) if args.data else Path(args.out) / "data"
    try:
        return tuple(load_dataset(d / DATA_FILES[k]) for k in ("target_train", "target_test", "aux"))
    except (OSError, ValueError) as exc:
        raise PhaseError("load-data", _seed(args), exc) from exc


def _load(path: Path, phase: str, seed: int):
    try:
        return load_params(path)
    except (OSError, ValueError) as exc:
        raise PhaseError(phase, seed, exc) from exc


def _tag(args) -> str:
    return f"{args.method}_sel" if getattr(args, "selected", False) else args.method


# -- subcommands ------------------------------------------------------------------


def cmd_generate(args, cfg: ExperimentConfig) -> int:
    seed = _seed(args)
    spec = dataclasses.replace(cfg.task, seed=seed_streams(seed)["task"])
    try:
        task = generate_task(spec)
        d = Path(args.data) if args.data else Path(args.out) / "data"
        d.mkdir(parents=True, exist_ok=True)
        for key, ds in zip(("target_train", "target_test", "aux"), task):
            save_dataset(ds, d / DATA_FILES[key])
    except (OSError, ValueError) as exc:
        raise PhaseError("generate", seed, exc) from exc
    print(f"wrote {len(task.target_train)}/{len(task.target_test)}/{len(task.auxiliary)} examples to {d}")
    return 0


def cmd_train(args, cfg: ExperimentConfig) -> int:
    seed, out = _seed(args), Path(args.out)
    target, _, aux = _data(args)
    warm_path = out / "warmup.ckpt"
    if warm_path.exists():
        warm = _load(warm_path, "warmup", seed)
    else:
        warm, report = warmup_phase(cfg, aux, seed)
        save_params(warm, warm_path)
        report.to_csv(out / "warmup.csv")
    params, report = main_phase(cfg, args.method, warm, target, aux, seed)
    save_params(params, out / f"{args.method}_main.ckpt")
    report.to_csv(out / f"{args.method}_main.csv")
    print(
        f"{args.method}: last-epoch target loss {report.final_loss():.6f}, "
        f"auxiliary loss {last_epoch_mean(report, 'reg_loss'):.6f}"
    )
    return 0


def cmd_select(args, cfg: ExperimentConfig) -> int:
    seed, out = _seed(args), Path(args.out)
    target, _, aux = _data(args)
    trained = _load(out / f"{args.method}_main.ckpt", "select", seed)
    outcome = select_phase(cfg, args.method, trained, target, aux, seed)
    write_scores_csv(outcome.scores, outcome.chosen, out / f"scores_{args.method}.csv")
    write_indices(sorted(outcome.chosen), out / f"selected_{args.method}.txt")
    save_params(outcome.params, out / f"{args.method}_sel_main.ckpt")
    outcome.report.to_csv(out / f"{args.method}_sel_main.csv")
    msg = f"kept {len(outcome.chosen)} of {len(aux)} auxiliary samples"
    if outcome.precision == outcome.precision:
        msg += f", related precision {outcome.precision:.4f}"
    print(msg)
    return 0


def cmd_finetune(args, cfg: ExperimentConfig) -> int:
    seed, out, tag = _seed(args), Path(args.out), _tag(args)
    target, _, _ = _data(args)
    params = _load(out / f"{tag}_main.ckpt", "finetune", seed)
    tuned, report = finetune_phase(cfg, params, target, seed)
    save_params(tuned, out / f"{tag}.ckpt")
    report.to_csv(out / f"{tag}_finetune.csv")
    print(f"{tag}: final fine-tune loss {report.final_loss():.6f}")
    return 0


def cmd_evaluate(args, cfg: ExperimentConfig) -> int:
    seed, out = _seed(args), Path(args.out)
    _, test, _ = _data(args)
    path = Path(args.checkpoint) if args.checkpoint else out / f"{_tag(args)}.ckpt"
    params = _load(path, "evaluate", seed)
    try:
        acc = evaluate(params, test)
    except ValueError as exc:
        raise PhaseError("evaluate", seed, exc) from exc
    print(f"accuracy {acc:.6f}")
    return 0


def cmd_report(args, cfg: ExperimentConfig) -> int:
    out = Path(args.out)
    try:
        table = ResultTable.from_csv(out / "results.csv")
    except (OSError, ValueError) as exc:
        raise PhaseError("report", None, exc) from exc
    emit_reports(table, out)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["method", "selection", "n_seeds", "accuracy_mean", "accuracy_std", "finetune_loss_mean"])
    for row in table.summary():
        w.writerow([row["method"], row["selection"], row["n_seeds"]] + [f"{row[k]:.4f}" for k in list(row)[3:]])
    return 0


def cmd_run(args, cfg: ExperimentConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(cfg))
    run_experiment(cfg, out)
    return cmd_report(args, cfg)


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "select": cmd_select,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
    "run": cmd_run,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--seed", type=int, help="run seed (default 0; for run: a single seed)")
    common.add_argument("--select-ratio", type=float, help="fraction of auxiliary samples kept")
    common.add_argument("--out", default="runs", help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="metafgnet", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name not in ("report", "run"):
            p.add_argument("--data", help="dataset directory (default OUT/data)")
        if name in ("train", "select", "finetune", "evaluate", "run"):
            p.add_argument("--method", choices=MAIN_METHODS, required=name != "run")
        if name in ("finetune", "evaluate"):
            p.add_argument("--selected", action="store_true", help="use the selection re-trained model")
        if name == "evaluate":
            p.add_argument("--checkpoint", help="explicit checkpoint path")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = _config(args)
    except (OSError, ValueError) as exc:
        print(f"error: [config] {exc}", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](args, cfg)
    except PhaseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
