"""Acceptance suite: one test and one printed PASS/FAIL line per criterion.

Run alone with ``pytest tests/test_acceptance.py -s`` (or ``python3
tests/test_acceptance.py``) to see the summary lines inline.
"""

from __future__ import annotations

import dataclasses
import filecmp
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from metafgnet import autodiff as ad
from metafgnet.autodiff import Layout, ParamVector, ScalarFn
from metafgnet.harness import ExperimentConfig, ResultTable, run_experiment
from metafgnet.metatrain import TrainReport, meta_gradient, meta_objective
from metafgnet.model import ModelConfig, full_layout, loss_target_fn
from metafgnet.selection import ScoredSample, SelectionConfig, rank_and_select, score_logits

sys.path.insert(0, str(Path(__file__).parent))
from conftest import kink_safe_instance  # noqa: E402
from oracles import central_difference, rel_err  # noqa: E402

N_INSTANCES = 20
BENCH_SEEDS = tuple(range(10))
SELECTION_SEEDS = tuple(range(5))
NET = ModelConfig(input_dim=6, n_t=4, n_s=4, hidden=(8, 8))  # 200 parameters in total


@pytest.fixture
def emit(capsys):
    def _emit(number: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\nACCEPTANCE {number}: {'PASS' if ok else 'FAIL'}  {detail}", flush=True)

    return _emit


def _instances(eta=None):
    """Seeded kink-safe (params, T_i, T_j) instances; seeds are spaced far apart."""
    out = []
    for k in range(N_INSTANCES):
        _, params, (t_i, t_j) = kink_safe_instance(NET, 10_000 * k, n_batch=4, n_batches=2, eta=eta)
        out.append((params, t_i, t_j))
    return out


def test_1_meta_gradient_matches_finite_differences(emit):
    assert full_layout(NET).size <= 500
    t0 = time.perf_counter()
    worst = 0.0
    for k, (params, t_i, t_j) in enumerate(_instances(eta=0.3)):
        eta = 0.1 + 0.2 * (k % 3)
        g = meta_gradient(params, t_i, t_j, eta).values
        phi = lambda th: meta_objective(params.with_theta_t(th), t_i, t_j, eta)  # noqa: E731
        fd = central_difference(phi, params.theta_t.values.copy(), 1e-5)
        worst = max(worst, float(rel_err(g, fd).max()))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-4 and elapsed <= 60
    emit(1, ok, f"max per-coordinate relative error {worst:.2e} (<= 1e-4) over {N_INSTANCES} instances in {elapsed:.1f}s (<= 60s)")
    assert worst <= 1e-4
    assert elapsed <= 60


def test_2_zero_step_reduces_to_plain_gradient(emit):
    worst = 0.0
    f = loss_target_fn(NET)
    for params, t_i, t_j in _instances():
        g = meta_gradient(params, t_i, t_j, 0.0).values
        plain = ad.grad(f, params.theta_t, t_j).values
        worst = max(worst, float(np.abs(g - plain).max()))
    ok = worst <= 1e-12
    emit(2, ok, f"max |meta_gradient(eta=0) - grad L(T_j)| = {worst:.1e} (<= 1e-12) over {N_INSTANCES} instances")
    assert ok


def test_3_hvp_backends_agree(emit):
    f = loss_target_fn(NET)
    worst = 0.0
    for k, (params, t_i, _) in enumerate(_instances()):
        rng = np.random.default_rng(k)
        v = rng.standard_normal(params.theta_t.values.size)
        v = ParamVector(v / np.linalg.norm(v), params.theta_t.layout)
        exact = ad.hvp(f, params.theta_t, t_i, v, backend="exact").values
        fd = ad.hvp(f, params.theta_t, t_i, v, backend="finite-difference").values
        worst = max(worst, float(np.linalg.norm(exact - fd) / np.linalg.norm(exact)))

    quad_worst = 0.0
    rng = np.random.default_rng(123)
    for _ in range(N_INSTANCES):
        n = int(rng.integers(2, 30))
        m = rng.standard_normal((n, n))
        a = m + m.T
        lay = Layout.from_shapes([("p", (n,))])

        def quad(p, _batch, a=a, n=n):
            col = ad.reshape(p, (n, 1))
            return ad.scale(ad.total(ad.mul(col, ad.matmul(ad.constant(a), col))), 0.5)

        p, v = ParamVector(rng.standard_normal(n), lay), ParamVector(rng.standard_normal(n), lay)
        hv = ad.hvp(ScalarFn(quad, lay), p, None, v).values
        quad_worst = max(quad_worst, float(np.abs(hv - a @ v.values).max()))
    ok = worst <= 1e-5 and quad_worst <= 1e-10
    emit(3, ok, f"exact vs finite-difference relative error {worst:.1e} (<= 1e-5); quadratic |Hv - Av| {quad_worst:.1e} (<= 1e-10)")
    assert worst <= 1e-5
    assert quad_worst <= 1e-10


def _sort_oracle(vals, ratio):
    k = max(1, math.ceil(round(ratio * len(vals), 9)))
    return sorted(range(len(vals)), key=lambda i: (-vals[i], i))[:k]


def test_4_score_invariants(emit):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        zs = rng.standard_normal(int(rng.integers(1, 20))) * 5
        zt = rng.standard_normal(int(rng.integers(1, 20))) * 5
        c = float(np.exp(rng.uniform(-6, 6)))
        worst = max(worst, abs(score_logits(c * zs, c * zt) - score_logits(zs, zt)))
    degenerate = [
        score_logits(-np.abs(rng.standard_normal(5)), -np.abs(rng.standard_normal(3))) for _ in range(100)
    ] + [score_logits(np.zeros(4), np.zeros(4))]
    mismatches = 0
    for _ in range(100):
        n = int(rng.integers(1, 80))
        vals = (rng.integers(0, 10, size=n) / 9.0).tolist()
        ratio = float(rng.uniform(0.01, 1.0))
        scored = [ScoredSample(i, v) for i, v in enumerate(vals)]
        rng.shuffle(scored)
        mismatches += rank_and_select(scored, SelectionConfig(ratio)) != _sort_oracle(vals, ratio)
    ok = worst <= 1e-9 and all(d == 0.0 for d in degenerate) and mismatches == 0
    emit(
        4,
        ok,
        f"scale-invariance error {worst:.1e} (<= 1e-9) on 1000 pairs; degenerate scores all exactly 0: "
        f"{all(d == 0.0 for d in degenerate)}; top-k mismatches vs sort oracle {mismatches}/100",
    )
    assert ok


# -- end-to-end benchmark (criteria 5 to 8) ---------------------------------------


@pytest.fixture(scope="module")
def benchmark(tmp_path_factory):
    out = tmp_path_factory.mktemp("bench")
    cfg = dataclasses.replace(ExperimentConfig(), seeds=BENCH_SEEDS)
    t0 = time.perf_counter()
    table = run_experiment(cfg, out)
    return cfg, table, out, time.perf_counter() - t0


@pytest.mark.slow
def test_5_selection_precision(emit, benchmark):
    _, table, _, _ = benchmark
    precs = [r.precision for r in table.rows if r.selection == 1 and r.method == "metafgnet" and r.seed in SELECTION_SEEDS]
    assert len(precs) == len(SELECTION_SEEDS)
    mean = float(np.mean(precs))
    ok = mean >= 0.90
    emit(5, ok, f"mean related precision {mean:.4f} (>= 0.90) over seeds {list(SELECTION_SEEDS)}: {np.round(precs, 3).tolist()}")
    assert ok


@pytest.mark.slow
def test_6_method_ordering(emit, benchmark):
    _, table, _, elapsed = benchmark
    ft, jt = table.mean("accuracy", "finetune"), table.mean("accuracy", "joint")
    mf, ms = table.mean("accuracy", "metafgnet"), table.mean("accuracy", "metafgnet", 1)
    ok = ft <= jt <= mf <= ms and elapsed <= 15 * 60
    emit(
        6,
        ok,
        f"mean accuracy over {len(BENCH_SEEDS)} seeds: finetune {ft:.4f} <= joint {jt:.4f} <= metafgnet {mf:.4f} "
        f"<= metafgnet+selection {ms:.4f}; benchmark time {elapsed:.0f}s (<= 900s)",
    )
    assert ft <= jt <= mf <= ms
    assert elapsed <= 15 * 60


@pytest.mark.slow
def test_7_finetune_loss(emit, benchmark):
    cfg, table, out, _ = benchmark
    jl, ml = table.mean("finetune_loss", "joint"), table.mean("finetune_loss", "metafgnet")
    curves = all((out / f"seed_{s}" / f"{m}_finetune.csv").exists() for s in cfg.seeds for m in ("joint", "metafgnet"))
    # the table value must be what the emitted curve says
    rep = TrainReport.from_csv(out / "seed_0" / "metafgnet_finetune.csv")
    row = [r for r in table.rows if r.seed == 0 and r.method == "metafgnet" and r.selection == 0][0]
    consistent = rep.final_loss() == row.finetune_loss
    ok = ml <= jl and curves and consistent
    emit(7, ok, f"mean final fine-tune loss metafgnet {ml:.4f} <= joint {jl:.4f}; loss-curve CSVs present: {curves}")
    assert ok


@pytest.mark.slow
def test_8_determinism(emit, benchmark, tmp_path):
    cfg, table, out, _ = benchmark
    again = run_experiment(dataclasses.replace(cfg, seeds=(0,)), tmp_path)
    first = ResultTable([r for r in table.rows if r.seed == 0])
    first.to_csv(tmp_path / "first.csv")
    same_table = (tmp_path / "first.csv").read_bytes() == (tmp_path / "results.csv").read_bytes()
    files = sorted(p.name for p in (out / "seed_0").iterdir())
    differing = [n for n in files if not filecmp.cmp(out / "seed_0" / n, tmp_path / "seed_0" / n, shallow=False)]
    ok = same_table and not differing and len(again.rows) == len(first.rows)
    emit(8, ok, f"re-run of seed 0: result table identical {same_table}; {len(files) - len(differing)}/{len(files)} artifact files bit-identical")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-s", "-q"]))
