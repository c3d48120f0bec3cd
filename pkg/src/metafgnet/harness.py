"""Experiment protocol: warm-up, main phase, optional selection, fine-tune, evaluate.

Per seed, every method starts from the same warm-up checkpoint (the
pre-training analog: base and source head trained on the auxiliary set only)
and is fine-tuned from the same re-initialized target head, so methods differ
only in their main phase.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .data import LabeledDataset, TaskSpec, generate_task, subset_by_indices, write_indices
from .metatrain import TrainConfig, TrainReport, train_loop
from .model import ModelConfig, TwoHeadParams, evaluate, init_params, reinit_target_head, save_params
from .selection import SelectionConfig, rank_and_select, score_dataset, selection_precision, write_scores_csv

log = logging.getLogger(__name__)

MAIN_METHODS = ("finetune", "joint", "metafgnet")


class PhaseError(RuntimeError):
    """A failure tagged with the protocol phase it happened in."""

    def __init__(self, phase: str, seed: int | None, cause: BaseException):
        self.phase = phase
        self.seed = seed
        where = f"[{phase}]" if seed is None else f"[{phase} seed={seed}]"
        super().__init__(f"{where} {type(cause).__name__}: {cause}")


@dataclass(frozen=True)
class ExperimentConfig:
    task: TaskSpec = TaskSpec()
    hidden: tuple[int, ...] = (64, 64)
    warmup: TrainConfig = TrainConfig(lr=0.05, epochs=10, lr_steps=(7,))
    main: TrainConfig = TrainConfig(lr=0.02, meta_lr=0.5, epochs=5)
    retrain: TrainConfig = TrainConfig(lr=0.02, meta_lr=0.5, epochs=5)
    # plain SGD at a modest rate: the fine-tune budget should not erase what the
    # main phase learned, otherwise every method converges to the same solution
    finetune: TrainConfig = TrainConfig(lr=0.01, epochs=50, momentum=0.0)
    methods: tuple[str, ...] = MAIN_METHODS
    select_methods: tuple[str, ...] = ("metafgnet",)
    keep_ratio: float = 0.5
    seeds: tuple[int, ...] = (0,)
    out_dir: str = "runs"

    def __post_init__(self) -> None:
        if not self.methods:
            raise ValueError("at least one method is required")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        bad = [m for m in self.methods if m not in MAIN_METHODS]
        if bad:
            raise ValueError(f"unknown methods {bad}; choose from {MAIN_METHODS}")
        bad = [m for m in self.select_methods if m not in ("joint", "metafgnet")]
        if bad:
            raise ValueError(f"selection applies to joint/metafgnet only, got {bad}")
        SelectionConfig(self.keep_ratio)

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.task.input_dim, self.task.n_t, self.task.n_s, self.hidden)


@dataclass(frozen=True)
class ResultRow:
    method: str
    selection: int
    seed: int
    accuracy: float
    main_loss: float
    reg_loss: float
    finetune_loss: float
    precision: float


RESULT_COLUMNS = [f.name for f in dataclasses.fields(ResultRow)]


@dataclass
class ResultTable:
    rows: list[ResultRow] = field(default_factory=list)

    def mean(self, column: str, method: str, selection: int = 0) -> float:
        vals = [getattr(r, column) for r in self.rows if r.method == method and r.selection == selection]
        return float(np.mean(vals)) if vals else float("nan")

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(RESULT_COLUMNS)
            for r in self.rows:
                w.writerow([r.method, r.selection, r.seed] + [repr(getattr(r, c)) for c in RESULT_COLUMNS[3:]])

    @classmethod
    def from_csv(cls, path: str | Path) -> ResultTable:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0] != RESULT_COLUMNS:
            raise ValueError(f"{path}: unexpected header")
        return cls(
            [ResultRow(r[0], int(r[1]), int(r[2]), *(float(x) for x in r[3:])) for r in rows[1:]]
        )

    def summary(self) -> list[dict[str, Any]]:
        keys = sorted({(r.method, r.selection) for r in self.rows}, key=lambda k: (MAIN_METHODS.index(k[0]), k[1]))
        out = []
        for method, sel in keys:
            sub = [r for r in self.rows if r.method == method and r.selection == sel]
            out.append(
                {
                    "method": method,
                    "selection": sel,
                    "n_seeds": len(sub),
                    "accuracy_mean": float(np.mean([r.accuracy for r in sub])),
                    "accuracy_std": float(np.std([r.accuracy for r in sub])),
                    "finetune_loss_mean": float(np.mean([r.finetune_loss for r in sub])),
                }
            )
        return out


def seed_streams(seed: int) -> dict[str, int]:
    """Independent integer seeds for each phase, derived from one run seed."""
    names = ["task", "init", "warmup", "main", "retrain", "reinit", "finetune"]
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: int(c.generate_state(1)[0]) for n, c in zip(names, children)}


def _phase(name: str, seed: int | None, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except PhaseError:
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with the phase tag
        raise PhaseError(name, seed, exc) from exc


def warmup_phase(cfg: ExperimentConfig, aux: LabeledDataset, seed: int) -> tuple[TwoHeadParams, TrainReport]:
    """Pre-training analog: base and source head trained on the auxiliary set."""
    streams = seed_streams(seed)
    params0 = init_params(cfg.model_config(), streams["init"])
    warm_cfg = dataclasses.replace(cfg.warmup, seed=streams["warmup"])
    return _phase("warmup", seed, train_loop, "pretrain", params0, None, aux, warm_cfg)


def main_phase(
    cfg: ExperimentConfig, method: str, warm: TwoHeadParams, target: LabeledDataset, aux: LabeledDataset, seed: int
) -> tuple[TwoHeadParams, TrainReport]:
    if method not in MAIN_METHODS:
        raise PhaseError(f"train:{method}", seed, ValueError(f"unknown method {method!r}"))
    main_cfg = dataclasses.replace(cfg.main, seed=seed_streams(seed)["main"])
    # the fine-tuning baseline spends the same auxiliary budget on pre-training only
    phase_method = "pretrain" if method == "finetune" else method
    return _phase(f"train:{method}", seed, train_loop, phase_method, warm, target, aux, main_cfg)


@dataclass
class SelectionOutcome:
    scores: list
    chosen: list[int]
    precision: float
    params: TwoHeadParams
    report: TrainReport


def select_phase(
    cfg: ExperimentConfig, method: str, trained: TwoHeadParams, target: LabeledDataset, aux: LabeledDataset, seed: int
) -> SelectionOutcome:
    """Score and keep the top auxiliary samples, then re-train from ``trained``."""
    if method not in ("joint", "metafgnet"):
        raise PhaseError("select", seed, ValueError(f"selection applies to joint/metafgnet, got {method!r}"))
    scores = _phase("select", seed, score_dataset, trained, aux)
    chosen = _phase("select", seed, rank_and_select, scores, SelectionConfig(cfg.keep_ratio))
    precision = selection_precision(chosen, aux.flags) if aux.flags is not None else float("nan")
    reduced = _phase("select", seed, subset_by_indices, aux, chosen)
    re_cfg = dataclasses.replace(cfg.retrain, seed=seed_streams(seed)["retrain"])
    params, report = _phase(f"retrain:{method}", seed, train_loop, method, trained, target, reduced, re_cfg)
    return SelectionOutcome(scores, chosen, precision, params, report)


def finetune_phase(
    cfg: ExperimentConfig, params: TwoHeadParams, target: LabeledDataset, seed: int
) -> tuple[TwoHeadParams, TrainReport]:
    """Re-initialize the target head (same draw for every method) and fine-tune on T."""
    streams = seed_streams(seed)
    start = _phase("finetune", seed, reinit_target_head, params, streams["reinit"])
    ft_cfg = dataclasses.replace(cfg.finetune, seed=streams["finetune"])
    return _phase("finetune", seed, train_loop, "finetune", start, target, None, ft_cfg)


def last_epoch_mean(report: TrainReport, column: str) -> float:
    if not report.records:
        return float("nan")
    last = report.records[-1].epoch
    return float(np.mean([getattr(r, column) for r in report.records if r.epoch == last]))


def run_seed(cfg: ExperimentConfig, seed: int, out_dir: Path | None = None) -> list[ResultRow]:
    """Full protocol for one seed; writes artifacts under ``out_dir`` if given."""
    spec = dataclasses.replace(cfg.task, seed=seed_streams(seed)["task"])
    task = _phase("generate", seed, generate_task, spec)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    warm, warm_report = warmup_phase(cfg, task.auxiliary, seed)
    if out_dir is not None:
        warm_report.to_csv(out_dir / "warmup.csv")

    rows = []

    def record(tag, method, sel, main_params, main_report, precision):
        tuned, ft_report = finetune_phase(cfg, main_params, task.target_train, seed)
        acc = _phase("evaluate", seed, evaluate, tuned, task.target_test)
        if out_dir is not None:
            main_report.to_csv(out_dir / f"{tag}_main.csv")
            ft_report.to_csv(out_dir / f"{tag}_finetune.csv")
            save_params(main_params, out_dir / f"{tag}_main.ckpt")
            save_params(tuned, out_dir / f"{tag}.ckpt")
        rows.append(
            ResultRow(
                method,
                sel,
                seed,
                acc,
                last_epoch_mean(main_report, "meta_loss"),
                last_epoch_mean(main_report, "reg_loss"),
                ft_report.final_loss(),
                precision,
            )
        )
        log.info("seed %d %s selection=%d accuracy=%.4f", seed, method, sel, acc)

    for method in cfg.methods:
        trained, report = main_phase(cfg, method, warm, task.target_train, task.auxiliary, seed)
        record(method, method, 0, trained, report, float("nan"))
        if method in cfg.select_methods:
            outcome = select_phase(cfg, method, trained, task.target_train, task.auxiliary, seed)
            if out_dir is not None:
                write_scores_csv(outcome.scores, outcome.chosen, out_dir / f"scores_{method}.csv")
                write_indices(sorted(outcome.chosen), out_dir / f"selected_{method}.txt")
            record(f"{method}_sel", method, 1, outcome.params, outcome.report, outcome.precision)
    return rows


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None, write: bool = True) -> ResultTable:
    """Run every seed and, if ``write``, emit the result table and per-run artifacts."""
    root = Path(cfg.out_dir if out_dir is None else out_dir)
    table = ResultTable()
    for seed in cfg.seeds:
        t0 = time.perf_counter()
        table.rows.extend(run_seed(cfg, seed, root / f"seed_{seed}" if write else None))
        log.info("seed %d done in %.1fs", seed, time.perf_counter() - t0)
    if write:
        emit_reports(table, root)
    return table


def emit_reports(table: ResultTable, out_dir: str | Path) -> None:
    if not table.rows:
        raise ValueError("no result rows to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table.to_csv(out / "results.csv")
    summary = table.summary()
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(summary[0]))
        w.writeheader()
        for row in summary:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


# -- key=value config files -------------------------------------------------------

_SECTIONS = {"task": TaskSpec, "warmup": TrainConfig, "main": TrainConfig, "retrain": TrainConfig, "finetune": TrainConfig}


def _coerce(raw: str, default: Any, name: str) -> Any:
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() not in ("1", "0", "true", "false", "yes", "no"):
            raise ValueError(f"{name}: expected a boolean, got {raw!r}")
        return raw.lower() in ("1", "true", "yes")
    if isinstance(default, tuple):
        items = [x for x in raw.replace(" ", "").split(",") if x]
        if name in ("methods", "select_methods"):
            return tuple(items)
        return tuple(int(x) for x in items)
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if default is None:
        return None if raw.lower() in ("", "none") else int(raw)
    return raw


def parse_config_text(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Apply ``key=value`` lines (``#`` comments allowed) on top of ``base``.

    Section keys use a dotted prefix, e.g. ``main.lr=0.05`` or ``task.n_t=8``.
    """
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, val = line.split("=", 1)
        pairs.append((key.strip(), val.strip()))
    return apply_overrides(base or ExperimentConfig(), pairs)


def apply_overrides(cfg: ExperimentConfig, pairs: Sequence[tuple[str, str]]) -> ExperimentConfig:
    top: dict[str, Any] = {}
    sections: dict[str, dict[str, Any]] = {}
    for key, raw in pairs:
        if "." in key:
            sec, name = key.split(".", 1)
            if sec not in _SECTIONS:
                raise ValueError(f"unknown config section {sec!r}")
            current = getattr(cfg, sec)
            if name not in {f.name for f in dataclasses.fields(current)}:
                raise ValueError(f"unknown key {key!r}")
            sections.setdefault(sec, {})[name] = _coerce(raw, getattr(current, name), key)
        else:
            if key not in {f.name for f in dataclasses.fields(cfg)} or key in _SECTIONS:
                raise ValueError(f"unknown key {key!r}")
            top[key] = _coerce(raw, getattr(cfg, key), key)
    for sec, vals in sections.items():
        top[sec] = dataclasses.replace(getattr(cfg, sec), **vals)
    return dataclasses.replace(cfg, **top)


def load_config(path: str | Path | None, overrides: Sequence[tuple[str, str]] = ()) -> ExperimentConfig:
    cfg = ExperimentConfig() if path is None else parse_config_text(Path(path).read_text())
    return apply_overrides(cfg, overrides)


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        val = getattr(cfg, f.name)
        if f.name in _SECTIONS:
            for g in dataclasses.fields(val):
                lines.append(f"{f.name}.{g.name}={_fmt(getattr(val, g.name))}")
        else:
            lines.append(f"{f.name}={_fmt(val)}")
    return "\n".join(lines) + "\n"


def _fmt(v: Any) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if v is None:
        return "none"
    return str(v)


def load_task_datasets(data_dir: str | Path) -> tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    from .data import load_dataset

    d = Path(data_dir)
    return load_dataset(d / "target_train.bin"), load_dataset(d / "target_test.bin"), load_dataset(d / "aux.bin")
