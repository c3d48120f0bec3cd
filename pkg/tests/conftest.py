import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from metafgnet.data import Batch  # noqa: E402
from metafgnet.model import ModelConfig, init_params  # noqa: E402
from oracles import preactivations  # noqa: E402


def random_batch(rng, n, input_dim, n_classes):
    return Batch(rng.standard_normal((n, input_dim)), rng.integers(n_classes, size=n).astype(np.int64))


def kink_margin(params, *batches) -> float:
    """Smallest |pre-activation| over the given batches (distance to a ReLU kink)."""
    cfg = params.config
    theta = params.theta_t.values
    vals = [
        np.abs(a).min()
        for b in batches
        for a in preactivations(theta, b.features, cfg.input_dim, cfg.hidden, cfg.n_t)
    ]
    return float(min(vals)) if vals else np.inf


def kink_safe_instance(cfg, start, n_batch=4, n_batches=1, margin=0.01, eta=None, limit=2000):
    """First seed >= ``start`` whose params and batches keep every pre-activation
    at least ``margin`` from zero, so finite differences never cross a ReLU kink.

    With ``eta`` the second batch must also be safe at the parameters reached by
    one inner step on the first.
    """
    from metafgnet.metatrain import inner_step

    for seed in range(start, start + limit):
        params = init_params(cfg, seed)
        rng = np.random.default_rng(seed)
        batches = [random_batch(rng, n_batch, cfg.input_dim, cfg.n_t) for _ in range(n_batches)]
        if kink_margin(params, *batches) < margin:
            continue
        if eta is not None:
            adapted = params.with_theta_t(inner_step(params, batches[0], eta).values)
            if kink_margin(adapted, batches[1]) < margin:
                continue
        return seed, params, batches
    raise RuntimeError("no kink-safe instance found")


@pytest.fixture
def small_cfg():
    return ModelConfig(input_dim=5, n_t=3, n_s=4, hidden=(6, 5))


@pytest.fixture
def small_params(small_cfg):
    return init_params(small_cfg, 7)
