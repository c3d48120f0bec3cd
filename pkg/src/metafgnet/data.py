"""Synthetic fine-grained tasks, dataset files and mini-batch sampling.

Target classes are Gaussian clusters inside a low-dimensional "semantic"
subspace of the input space. Related auxiliary classes are further clusters
in that same subspace; unrelated auxiliary classes live in its orthogonal
complement; noise samples are wide isotropic draws with random auxiliary
labels.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Sequence

import numpy as np


class Relatedness(IntEnum):
    NONE = -1  # target data, or auxiliary data without ground truth
    UNRELATED = 0
    RELATED = 1
    NOISE = 2


@dataclass(frozen=True)
class Batch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features and labels have different row counts")

    def __len__(self) -> int:
        return int(self.labels.shape[0])


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray  # (n, input_dim) float64
    labels: np.ndarray  # (n,) int64
    n_classes: int
    flags: np.ndarray | None = None  # (n,) int8 Relatedness codes

    def __post_init__(self) -> None:
        n = self.labels.shape[0]
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise ValueError("features must be an (n, d) matrix matching the labels")
        if self.flags is not None and self.flags.shape != (n,):
            raise ValueError("flags must have one entry per example")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.features.shape[1])

    def as_batch(self) -> Batch:
        return Batch(self.features, self.labels)


@dataclass(frozen=True)
class TaskSpec:
    input_dim: int = 32
    subspace_dim: int = 8
    n_t: int = 10
    shots: int = 3
    test_per_class: int = 50
    n_s: int = 40
    aux_per_class: int = 40
    related_fraction: float = 0.5
    noise_fraction: float = 0.1
    center_scale: float = 1.0
    unrelated_scale: float = 1.0
    spread: float = 0.6
    related_offset: float = 0.5
    isotropic_noise: float = 0.1
    noise_scale: float = 2.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.related_fraction <= 1.0 or not 0.0 <= self.noise_fraction <= 1.0:
            raise ValueError("fractions must lie in [0, 1]")
        if self.shots < 1 or self.test_per_class < 1 or self.aux_per_class < 1:
            raise ValueError("per-class counts must be at least 1")
        if self.n_t < 2 or self.n_s < 2:
            raise ValueError("need at least two classes per task")
        if not 1 <= self.subspace_dim < self.input_dim:
            raise ValueError("subspace_dim must be in [1, input_dim)")


@dataclass(frozen=True)
class SyntheticTask:
    target_train: LabeledDataset
    target_test: LabeledDataset
    auxiliary: LabeledDataset
    semantic_basis: np.ndarray  # (input_dim, subspace_dim)
    complement_basis: np.ndarray  # (input_dim, input_dim - subspace_dim)
    aux_clean: np.ndarray  # auxiliary features before isotropic noise

    def __iter__(self):
        return iter((self.target_train, self.target_test, self.auxiliary))


def _cluster_samples(rng, center, basis, spread, n):
    coords = rng.standard_normal((n, basis.shape[1])) * spread
    return center[None, :] + coords @ basis.T


def generate_task(spec: TaskSpec) -> SyntheticTask:
    """Build (target train, target test, auxiliary) as a pure function of ``spec``."""
    rng = np.random.default_rng(spec.seed)
    d, k = spec.input_dim, spec.subspace_dim
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    sem, comp = q[:, :k], q[:, k:]

    # target class centres inside the semantic subspace
    t_coords = rng.standard_normal((spec.n_t, k)) * spec.center_scale
    t_centers = t_coords @ sem.T

    def target_split(per_class: int) -> LabeledDataset:
        xs, ys = [], []
        for c in range(spec.n_t):
            pts = _cluster_samples(rng, t_centers[c], sem, spec.spread, per_class)
            xs.append(pts + spec.isotropic_noise * rng.standard_normal(pts.shape))
            ys.append(np.full(per_class, c))
        return LabeledDataset(np.concatenate(xs), np.concatenate(ys).astype(np.int64), spec.n_t)

    train = target_split(spec.shots)
    test = target_split(spec.test_per_class)

    n_related = int(round(spec.related_fraction * spec.n_s))
    clean, labels, flags = [], [], []
    for c in range(spec.n_s):
        if c < n_related:
            # near a random target class: a sibling category in the same subspace
            anchor = t_coords[rng.integers(spec.n_t)]
            coords = anchor + spec.related_offset * rng.standard_normal(k) * spec.center_scale
            center, basis, flag = coords @ sem.T, sem, Relatedness.RELATED
        else:
            coords = rng.standard_normal(d - k) * spec.unrelated_scale
            center, basis, flag = coords @ comp.T, comp, Relatedness.UNRELATED
        clean.append(_cluster_samples(rng, center, basis, spec.spread, spec.aux_per_class))
        labels.append(np.full(spec.aux_per_class, c))
        flags.append(np.full(spec.aux_per_class, int(flag)))
    clean_x = np.concatenate(clean)
    aux_x = clean_x + spec.isotropic_noise * rng.standard_normal(clean_x.shape)
    aux_y = np.concatenate(labels)
    aux_f = np.concatenate(flags)

    n_noise = int(round(spec.noise_fraction * len(aux_y)))
    if n_noise:
        noise_x = spec.noise_scale * rng.standard_normal((n_noise, d))
        aux_x = np.concatenate([aux_x, noise_x])
        clean_x = np.concatenate([clean_x, np.full((n_noise, d), np.nan)])
        aux_y = np.concatenate([aux_y, rng.integers(spec.n_s, size=n_noise)])
        aux_f = np.concatenate([aux_f, np.full(n_noise, int(Relatedness.NOISE))])

    # interleave so that auxiliary order carries no class or flag information
    order = rng.permutation(len(aux_y))
    aux = LabeledDataset(aux_x[order], aux_y[order].astype(np.int64), spec.n_s, aux_f[order].astype(np.int8))
    return SyntheticTask(train, test, aux, sem, comp, clean_x[order])


def sample_batch(dataset: LabeledDataset, size: int, rng: np.random.Generator) -> Batch:
    """Uniform draw of ``size`` distinct examples."""
    n = len(dataset)
    if size < 1 or size > n:
        raise ValueError(f"batch size {size} outside [1, {n}]")
    idx = rng.choice(n, size=size, replace=False)
    return Batch(dataset.features[idx], dataset.labels[idx])


def subset_by_indices(dataset: LabeledDataset, indices: Sequence[int]) -> LabeledDataset:
    """Order-preserving subset; indices must be unique and in range."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("empty index list: the auxiliary set must stay non-empty")
    if idx.min() < 0 or idx.max() >= len(dataset):
        raise IndexError(f"index out of range [0, {len(dataset)})")
    idx = np.sort(idx)
    if np.any(idx[1:] == idx[:-1]):
        raise ValueError("duplicate indices")
    flags = None if dataset.flags is None else dataset.flags[idx]
    return LabeledDataset(dataset.features[idx], dataset.labels[idx], dataset.n_classes, flags)


# -- files ------------------------------------------------------------------------

_MAGIC = "metafgnet-dataset 1"


class DatasetFormatError(ValueError):
    pass


def save_dataset(dataset: LabeledDataset, path: str | Path) -> None:
    """Header lines, then features (<f8), labels (<i8) and optional flags (i1)."""
    header = (
        f"{_MAGIC}\n"
        f"n_examples {len(dataset)}\n"
        f"input_dim {dataset.input_dim}\n"
        f"n_classes {dataset.n_classes}\n"
        f"flags {int(dataset.flags is not None)}\n"
        "end\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(dataset.features, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(dataset.labels, dtype="<i8").tobytes())
        if dataset.flags is not None:
            fh.write(np.ascontiguousarray(dataset.flags, dtype="i1").tobytes())


def load_dataset(path: str | Path) -> LabeledDataset:
    stream = io.BytesIO(Path(path).read_bytes())
    fields: dict[str, int] = {}
    try:
        if stream.readline() != (_MAGIC + "\n").encode():
            raise DatasetFormatError(f"{path}: not a dataset file")
        for key in ("n_examples", "input_dim", "n_classes", "flags"):
            raw = stream.readline()
            if not raw.endswith(b"\n"):
                raise DatasetFormatError(f"{path}: truncated header")
            name, val = raw.decode("ascii").split()
            if name != key:
                raise DatasetFormatError(f"{path}: expected {key!r}, found {name!r}")
            fields[key] = int(val)
        if stream.readline() != b"end\n":
            raise DatasetFormatError(f"{path}: missing end of header")
    except (ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, DatasetFormatError):
            raise
        raise DatasetFormatError(f"{path}: malformed header ({exc})") from exc

    n, d = fields["n_examples"], fields["input_dim"]
    if n < 0 or d < 0 or fields["n_classes"] < 1:
        raise DatasetFormatError(f"{path}: invalid header counts")
    body = stream.read()
    expected = 8 * n * d + 8 * n + (n if fields["flags"] else 0)
    if len(body) != expected:
        raise DatasetFormatError(f"{path}: expected {expected} payload bytes, found {len(body)}")
    feats = np.frombuffer(body, dtype="<f8", count=n * d).astype(np.float64).reshape(n, d)
    labels = np.frombuffer(body, dtype="<i8", count=n, offset=8 * n * d).astype(np.int64)
    flags = None
    if fields["flags"]:
        flags = np.frombuffer(body, dtype="i1", count=n, offset=8 * n * d + 8 * n).astype(np.int8)
    return LabeledDataset(feats, labels, fields["n_classes"], flags)


def write_indices(indices: Sequence[int], path: str | Path) -> None:
    Path(path).write_text("".join(f"{int(i)}\n" for i in indices))


def read_indices(path: str | Path) -> list[int]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if not line.isdigit():
            raise ValueError(f"{path}:{lineno}: not a decimal index: {line!r}")
        out.append(int(line))
    return out
