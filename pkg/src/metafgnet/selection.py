"""Relatedness scores for auxiliary samples, ranking and top-ratio selection.

A sample's score is the sum of the target-head part of the L2-normalized,
rectified concatenation ``[source logits ; target logits]``. Samples the
target head responds to strongly, relative to the source head, score high.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import LabeledDataset, Relatedness
from .model import TwoHeadParams, forward_both


@dataclass(frozen=True)
class ScoredSample:
    sample_index: int
    score: float
    related: int | None = None  # Relatedness code, synthetic data only


@dataclass(frozen=True)
class SelectionConfig:
    keep_ratio: float = 0.5

    def __post_init__(self) -> None:
        if not 0.0 < self.keep_ratio <= 1.0:
            raise ValueError("keep_ratio must lie in (0, 1]")

    def n_keep(self, n: int) -> int:
        # guard against ratios like 0.2 * 1000 landing a hair above 200
        return max(1, math.ceil(round(self.keep_ratio * n, 9)))


def score_logits(z_s: np.ndarray, z_t: np.ndarray) -> np.ndarray:
    """Scores for logit rows (or single vectors). An all-non-positive row scores 0."""
    zs = np.maximum(np.atleast_2d(np.asarray(z_s, dtype=np.float64)), 0.0)
    zt = np.maximum(np.atleast_2d(np.asarray(z_t, dtype=np.float64)), 0.0)
    norm = np.sqrt((zs * zs).sum(axis=1) + (zt * zt).sum(axis=1))
    tsum = zt.sum(axis=1)
    out = np.zeros_like(norm)
    nz = norm > 0
    out[nz] = tsum[nz] / norm[nz]
    return out if np.ndim(z_t) > 1 else out[0]


def score_sample(params: TwoHeadParams, x: np.ndarray, index: int = 0, related: int | None = None) -> ScoredSample:
    z_s, z_t = forward_both(params, x)
    return ScoredSample(index, float(score_logits(z_s, z_t)), related)


def score_dataset(params: TwoHeadParams, aux: LabeledDataset) -> list[ScoredSample]:
    z_s, z_t = forward_both(params, aux.features)
    scores = score_logits(z_s, z_t)
    flags = aux.flags if aux.flags is not None else [None] * len(aux)
    return [
        ScoredSample(i, float(s), None if f is None else int(f))
        for i, (s, f) in enumerate(zip(scores, flags))
    ]


def rank_and_select(scores: Sequence[ScoredSample], cfg: SelectionConfig) -> list[int]:
    """Indices of the top ``ceil(keep_ratio * N)`` scores, ties to the lower index.

    Returned in ranking order (best first).
    """
    if not scores:
        raise ValueError("cannot select from an empty score list")
    ranked = sorted(scores, key=lambda s: (-s.score, s.sample_index))
    return [s.sample_index for s in ranked[: cfg.n_keep(len(scores))]]


def selection_precision(selected: Iterable[int], flags: Sequence[int] | np.ndarray) -> float:
    """Fraction of selected samples whose ground-truth flag is RELATED."""
    sel = list(selected)
    if not sel:
        raise ValueError("nothing selected")
    flags = np.asarray(flags)
    return float(np.mean(flags[sel] == int(Relatedness.RELATED)))


def write_scores_csv(scores: Sequence[ScoredSample], selected: Iterable[int], path: str | Path) -> None:
    chosen = set(selected)
    with_flags = any(s.related is not None for s in scores)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_index", "score", "selected"] + (["related_flag"] if with_flags else []))
        for s in scores:
            row = [s.sample_index, repr(s.score), int(s.sample_index in chosen)]
            if with_flags:
                row.append("" if s.related is None else s.related)
            w.writerow(row)


def read_scores_csv(path: str | Path) -> tuple[list[ScoredSample], list[int]]:
    scores, selected = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            flag = row.get("related_flag")
            idx = int(row["sample_index"])
            scores.append(ScoredSample(idx, float(row["score"]), int(flag) if flag else None))
            if row["selected"] == "1":
                selected.append(idx)
    return scores, selected
