"""Two-head classifier: a shared rectifier base with target and source heads.

The flat parameter buffer is laid out as ``[target head | base | source head]``
so that both the target parameters (target head + base) and the source
parameters (base + source head) are contiguous numpy views of one array. A
write to the base through either view is seen by the other.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Layout, ParamVector, ScalarFn, Tensor


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    n_t: int
    n_s: int
    hidden: tuple[int, ...] = (64, 64)

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim <= 0 or any(h <= 0 for h in self.hidden):
            raise ValueError("layer widths must be positive")
        if self.n_t < 2 or self.n_s < 2:
            raise ValueError("both heads need at least two classes")

    @property
    def feature_dim(self) -> int:
        return self.hidden[-1] if self.hidden else self.input_dim


def _base_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    shapes = []
    fan_in = cfg.input_dim
    for i, width in enumerate(cfg.hidden):
        shapes.append((f"base.{i}.W", (fan_in, width)))
        shapes.append((f"base.{i}.b", (width,)))
        fan_in = width
    return shapes


def _head_shapes(prefix: str, cfg: ModelConfig, n_out: int) -> list[tuple[str, tuple[int, ...]]]:
    return [(f"{prefix}.W", (cfg.feature_dim, n_out)), (f"{prefix}.b", (n_out,))]


def full_layout(cfg: ModelConfig) -> Layout:
    return Layout.from_shapes(
        _head_shapes("target", cfg, cfg.n_t) + _base_shapes(cfg) + _head_shapes("source", cfg, cfg.n_s)
    )


def target_layout(cfg: ModelConfig) -> Layout:
    return Layout.from_shapes(_head_shapes("target", cfg, cfg.n_t) + _base_shapes(cfg))


def source_layout(cfg: ModelConfig) -> Layout:
    return Layout.from_shapes(_base_shapes(cfg) + _head_shapes("source", cfg, cfg.n_s))


@dataclass
class TwoHeadParams:
    """Parameters (base, target head, source head) in one flat buffer."""

    config: ModelConfig
    flat: np.ndarray
    layout: Layout = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.layout = full_layout(self.config)
        self.flat = np.asarray(self.flat, dtype=np.float64)
        if self.flat.shape != (self.layout.size,):
            raise ad.LayoutError(
                f"expected {self.layout.size} parameters, got array of shape {self.flat.shape}"
            )

    @property
    def n_target_head(self) -> int:
        return self.layout["target.b"].stop

    @property
    def n_base(self) -> int:
        return sum(self.layout[n].size for n in self.layout.names if n.startswith("base."))

    @property
    def theta_t(self) -> ParamVector:
        """(target head, base) as a view onto the shared buffer."""
        return ParamVector(self.flat[: self.n_target_head + self.n_base], target_layout(self.config))

    @property
    def theta_s(self) -> ParamVector:
        """(base, source head) as a view onto the shared buffer."""
        return ParamVector(self.flat[self.n_target_head :], source_layout(self.config))

    @property
    def base(self) -> np.ndarray:
        return self.flat[self.n_target_head : self.n_target_head + self.n_base]

    @property
    def target_head(self) -> np.ndarray:
        return self.flat[: self.n_target_head]

    @property
    def source_head(self) -> np.ndarray:
        return self.flat[self.n_target_head + self.n_base :]

    def segment(self, name: str) -> np.ndarray:
        seg = self.layout[name]
        return self.flat[seg.offset : seg.stop].reshape(seg.shape)

    def copy(self) -> TwoHeadParams:
        return TwoHeadParams(self.config, self.flat.copy())

    def with_theta_t(self, values: np.ndarray) -> TwoHeadParams:
        out = self.copy()
        out.theta_t.values[:] = values
        return out


def _init_segments(params: TwoHeadParams, names: Sequence[str], rng: np.random.Generator) -> None:
    # Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases alike.
    for name in names:
        seg = params.layout[name]
        fan_in = seg.shape[0] if name.endswith(".W") else params.layout[name[:-1] + "W"].shape[0]
        bound = 1.0 / math.sqrt(fan_in)
        params.flat[seg.offset : seg.stop] = rng.uniform(-bound, bound, seg.size)


def init_params(cfg: ModelConfig, seed: int) -> TwoHeadParams:
    params = TwoHeadParams(cfg, np.zeros(full_layout(cfg).size))
    _init_segments(params, params.layout.names, np.random.default_rng(seed))
    return params


def reinit_target_head(params: TwoHeadParams, seed: int) -> TwoHeadParams:
    out = params.copy()
    _init_segments(out, ["target.W", "target.b"], np.random.default_rng(seed))
    return out


# -- forward passes -----------------------------------------------------------


def _base_forward(pieces: dict[str, Tensor], x: Tensor, cfg: ModelConfig) -> Tensor:
    h = x
    for i in range(len(cfg.hidden)):
        h = ad.relu(ad.add_rows(ad.matmul(h, pieces[f"base.{i}.W"]), pieces[f"base.{i}.b"]))
    return h


def _head_forward(pieces: dict[str, Tensor], h: Tensor, prefix: str) -> Tensor:
    return ad.add_rows(ad.matmul(h, pieces[f"{prefix}.W"]), pieces[f"{prefix}.b"])


def _as_matrix(x: np.ndarray, cfg: ModelConfig) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != cfg.input_dim:
        raise ValueError(f"expected inputs with {cfg.input_dim} features, got shape {x.shape}")
    return x, single


def _forward(params: TwoHeadParams, x: np.ndarray, heads: Sequence[str]) -> list[np.ndarray]:
    cfg = params.config
    xm, single = _as_matrix(x, cfg)
    with ad.no_record():
        pieces = ad.unflatten(ad.constant(params.flat), params.layout)
        h = _base_forward(pieces, ad.constant(xm), cfg)
        outs = [_head_forward(pieces, h, head).data for head in heads]
    return [o[0] if single else o for o in outs]


def forward_target(params: TwoHeadParams, x: np.ndarray) -> np.ndarray:
    """Pre-softmax target logits for one feature vector or a row matrix."""
    return _forward(params, x, ["target"])[0]


def forward_source(params: TwoHeadParams, x: np.ndarray) -> np.ndarray:
    return _forward(params, x, ["source"])[0]


def forward_both(params: TwoHeadParams, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(source logits, target logits) from a single base pass."""
    zs, zt = _forward(params, x, ["source", "target"])
    return zs, zt


# -- losses ---------------------------------------------------------------------


def _check_batch(batch, cfg: ModelConfig, n_classes: int) -> None:
    if batch.features.shape[0] == 0:
        raise ValueError("empty batch")
    if batch.features.ndim != 2 or batch.features.shape[1] != cfg.input_dim:
        raise ValueError(f"batch features have shape {batch.features.shape}")
    if batch.labels.min() < 0 or batch.labels.max() >= n_classes:
        raise ValueError(f"label out of range [0, {n_classes})")


def loss_target_fn(cfg: ModelConfig) -> ScalarFn:
    """Mean cross-entropy of the target head, as a function of theta_t."""
    layout = target_layout(cfg)

    def fn(p: Tensor, batch) -> Tensor:
        _check_batch(batch, cfg, cfg.n_t)
        pieces = ad.unflatten(p, layout)
        h = _base_forward(pieces, ad.constant(batch.features), cfg)
        return ad.softmax_cross_entropy(_head_forward(pieces, h, "target"), batch.labels)

    return ScalarFn(fn, layout, name="loss_target")


def loss_source_fn(cfg: ModelConfig) -> ScalarFn:
    """Mean cross-entropy of the source head, as a function of theta_s."""
    layout = source_layout(cfg)

    def fn(p: Tensor, batch) -> Tensor:
        _check_batch(batch, cfg, cfg.n_s)
        pieces = ad.unflatten(p, layout)
        h = _base_forward(pieces, ad.constant(batch.features), cfg)
        return ad.softmax_cross_entropy(_head_forward(pieces, h, "source"), batch.labels)

    return ScalarFn(fn, layout, name="loss_source")


def loss_target(params: TwoHeadParams, batch) -> float:
    return ad.value(loss_target_fn(params.config), params.theta_t, batch)


def loss_source(params: TwoHeadParams, batch) -> float:
    return ad.value(loss_source_fn(params.config), params.theta_s, batch)


# -- checkpoints ----------------------------------------------------------------

_CKPT_MAGIC = "metafgnet-params 1"


class CheckpointError(ValueError):
    pass


def save_params(params: TwoHeadParams, path: str | Path) -> None:
    """Text header (config + segment table) followed by raw little-endian f64."""
    cfg = params.config
    lines = [
        _CKPT_MAGIC,
        f"input_dim {cfg.input_dim}",
        f"hidden {' '.join(str(h) for h in cfg.hidden) or '-'}",
        f"n_t {cfg.n_t}",
        f"n_s {cfg.n_s}",
        f"segments {len(params.layout.segments)}",
    ]
    for seg in params.layout.segments:
        lines.append(f"{seg.name} {seg.offset} {seg.size}")
    lines.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        fh.write(params.flat.astype("<f8").tobytes())


def load_params(path: str | Path) -> TwoHeadParams:
    raw = Path(path).read_bytes()
    stream = io.BytesIO(raw)

    def line() -> list[str]:
        text = stream.readline()
        if not text.endswith(b"\n"):
            raise CheckpointError(f"{path}: truncated header")
        return text.decode("ascii").split()

    try:
        if " ".join(line()) != _CKPT_MAGIC:
            raise CheckpointError(f"{path}: not a parameter checkpoint")
        fields = {}
        for key in ("input_dim", "hidden", "n_t", "n_s", "segments"):
            parts = line()
            if not parts or parts[0] != key:
                raise CheckpointError(f"{path}: expected header field {key!r}")
            fields[key] = parts[1:]
        hidden = () if fields["hidden"] == ["-"] else tuple(int(h) for h in fields["hidden"])
        cfg = ModelConfig(int(fields["input_dim"][0]), int(fields["n_t"][0]), int(fields["n_s"][0]), hidden)
        expected = full_layout(cfg)
        n_seg = int(fields["segments"][0])
        if n_seg != len(expected.segments):
            raise CheckpointError(f"{path}: segment count {n_seg} does not match config")
        for seg in expected.segments:
            parts = line()
            if parts != [seg.name, str(seg.offset), str(seg.size)]:
                raise CheckpointError(f"{path}: unexpected segment entry {parts}")
        if line() != ["end"]:
            raise CheckpointError(f"{path}: missing end of header")
    except (ValueError, IndexError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: malformed header ({exc})") from exc
    body = stream.read()
    if len(body) != 8 * expected.size:
        raise CheckpointError(f"{path}: expected {8 * expected.size} payload bytes, found {len(body)}")
    return TwoHeadParams(cfg, np.frombuffer(body, dtype="<f8").astype(np.float64))


def predict(params: TwoHeadParams, x: np.ndarray) -> np.ndarray:
    """Target-head argmax; ties go to the lowest class index."""
    return np.argmax(forward_target(params, np.atleast_2d(x)), axis=1)


def evaluate(params: TwoHeadParams, dataset) -> float:
    """Fraction of examples whose target-head argmax equals the label."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty set")
    return float(np.mean(predict(params, dataset.features) == dataset.labels))
