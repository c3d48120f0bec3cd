"""Reverse-mode differentiation over dense float64 arrays.

Every primitive records a vector-Jacobian product written in terms of other
traced primitives, so the backward pass can itself be recorded and
differentiated again (double backprop). Each node carries ``order``, the
highest derivative order its primitive supports; the fused softmax
cross-entropy supports two, its gradient one, and the softmax Jacobian
product none.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Any, Callable, Iterator, Sequence

import numpy as np

INF_ORDER = math.inf

_local = threading.local()


def is_recording() -> bool:
    return getattr(_local, "recording", True)


@contextmanager
def no_record() -> Iterator[None]:
    """Evaluate without building a trace (per thread)."""
    prev = is_recording()
    _local.recording = False
    try:
        yield
    finally:
        _local.recording = prev


class DifferentiationError(RuntimeError):
    """Raised when a trace needs a derivative that no primitive registers."""


class LayoutError(ValueError):
    pass


class Tensor:
    """A node in the trace: an f64 array plus how it was produced."""

    __slots__ = ("data", "parents", "vjp", "order", "name", "requires_grad")

    def __init__(
        self,
        data: Any,
        parents: tuple[Tensor, ...] = (),
        vjp: Callable[[Tensor], Sequence[Tensor | None]] | None = None,
        order: float = INF_ORDER,
        name: str = "leaf",
        requires_grad: bool = False,
    ) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.parents = parents
        self.vjp = vjp
        self.order = order
        self.name = name
        self.requires_grad = requires_grad or bool(parents)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor({self.name}, shape={self.shape})"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        return mul(self, other)

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)


def constant(data: Any) -> Tensor:
    return Tensor(data, name="const")


def variable(data: Any) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), name="var", requires_grad=True)


def _node(
    data: np.ndarray,
    parents: tuple[Tensor, ...],
    vjp: Callable[[Tensor], Sequence[Tensor | None]],
    name: str,
    order: float = INF_ORDER,
) -> Tensor:
    if is_recording() and any(p.requires_grad for p in parents):
        return Tensor(data, parents, vjp, order, name)
    return Tensor(data, name=name)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- primitives ---------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return _node(a.data - b.data, (a, b), lambda g: (g, scale(g, -1.0)), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    return _node(a.data * b.data, (a, b), lambda g: (mul(g, b), mul(g, a)), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (scale(g, c),), "scale")


def mul_scalar(s: Tensor, a: Tensor) -> Tensor:
    """Scale ``a`` by the traced 0-d tensor ``s``."""
    if s.shape != ():
        raise ValueError(f"mul_scalar: expected 0-d scale, got {s.shape}")
    return _node(
        s.data * a.data,
        (s, a),
        lambda g: (total(mul(g, a)), mul_scalar(s, g)),
        "mul_scalar",
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return _node(
        a.data @ b.data,
        (a, b),
        lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)),
        "matmul",
    )


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ValueError("transpose expects a matrix")
    return _node(a.data.T, (a,), lambda g: (transpose(g),), "transpose")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (reshape(g, old),), "reshape")


def total(a: Tensor) -> Tensor:
    """Sum of all entries, as a 0-d tensor."""
    shape = a.shape
    return _node(np.asarray(a.data.sum()), (a,), lambda g: (fill(g, shape),), "total")


def fill(s: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Broadcast a 0-d tensor to ``shape``."""
    if s.shape != ():
        raise ValueError("fill expects a 0-d tensor")
    return _node(np.full(shape, float(s.data)), (s,), lambda g: (total(g),), "fill")


def add_rows(m: Tensor, v: Tensor) -> Tensor:
    """Add the vector ``v`` to every row of the matrix ``m``."""
    if m.data.ndim != 2 or v.shape != (m.shape[1],):
        raise ValueError(f"add_rows: incompatible shapes {m.shape} + {v.shape}")
    return _node(m.data + v.data, (m, v), lambda g: (g, sum_rows(g)), "add_rows")


def sum_rows(m: Tensor) -> Tensor:
    n = m.shape[0]
    return _node(m.data.sum(axis=0), (m,), lambda g: (repeat_rows(g, n),), "sum_rows")


def repeat_rows(v: Tensor, n: int) -> Tensor:
    return _node(
        np.broadcast_to(v.data, (n, v.shape[0])).copy(),
        (v,),
        lambda g: (sum_rows(g),),
        "repeat_rows",
    )


def take(a: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice ``a[start:stop]`` of a flat vector."""
    n = a.shape[0]
    return _node(a.data[start:stop], (a,), lambda g: (pad(g, start, n),), "take")


def pad(a: Tensor, start: int, length: int) -> Tensor:
    """Embed ``a`` into a zero vector of ``length`` at offset ``start``."""
    out = np.zeros(length)
    stop = start + a.shape[0]
    out[start:stop] = a.data
    return _node(out, (a,), lambda g: (take(g, start, stop),), "pad")


def relu(a: Tensor) -> Tensor:
    # Subgradient at 0 is 0; the mask is piecewise constant so the rule is
    # exact to every order away from the kink.
    mask = constant((a.data > 0).astype(np.float64))
    return _node(a.data * mask.data, (a,), lambda g: (mul(g, mask),), "relu")


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def _check_labels(z: Tensor, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if z.data.ndim != 2 or labels.shape != (z.shape[0],):
        raise ValueError(f"cross-entropy: logits {z.shape} vs labels {labels.shape}")
    if z.shape[0] == 0:
        raise ValueError("cross-entropy over an empty batch")
    if labels.min() < 0 or labels.max() >= z.shape[1]:
        raise ValueError(f"label out of range [0, {z.shape[1]})")
    return labels.astype(np.intp)


def softmax_cross_entropy(z: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of logits ``z`` (N x C) against ``labels``.

    Per-example losses are sorted before pairwise summation, so the value is
    bit-identical under any permutation of the batch.
    """
    labels = _check_labels(z, labels)
    n = z.shape[0]
    per_example = -log_softmax(z.data)[np.arange(n), labels]
    value = np.asarray(np.sort(per_example).sum() / n)
    return _node(
        value,
        (z,),
        lambda g: (mul_scalar(g, cross_entropy_grad(z, labels)),),
        "softmax_cross_entropy",
        order=2,
    )


def cross_entropy_grad(z: Tensor, labels: np.ndarray) -> Tensor:
    """Gradient of the mean cross-entropy wrt ``z``: (softmax(z) - onehot) / N."""
    n = z.shape[0]
    out = softmax(z.data)
    out[np.arange(n), labels] -= 1.0
    out /= n
    return _node(
        out,
        (z,),
        lambda g: (scale(softmax_jacobian_product(z, g), 1.0 / n),),
        "cross_entropy_grad",
        order=1,
    )


def softmax_jacobian_product(z: Tensor, u: Tensor) -> Tensor:
    """Row-wise J_softmax(z) @ u, i.e. s*u - s*(s.u). No derivatives registered."""
    s = softmax(z.data)
    su = s * u.data
    out = su - s * su.sum(axis=1, keepdims=True)
    return _node(out, (z, u), None, "softmax_jacobian_product", order=0)  # type: ignore[arg-type]


# -- differentiation ------------------------------------------------------------


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def trace_order(root: Tensor) -> float:
    """Lowest derivative order supported by any primitive in the trace."""
    return min((n.order for n in _topological(root) if n.parents), default=INF_ORDER)


def backward(root: Tensor, wrt: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of the scalar ``root`` with respect to each tensor in ``wrt``.

    With ``create_graph`` the returned gradients are themselves traced and can
    be differentiated again.
    """
    if root.shape != ():
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    grads: dict[int, Tensor] = {id(root): constant(1.0)}
    nodes = _topological(root)
    ctx = _nullcontext() if create_graph else no_record()
    with ctx:
        for node in reversed(nodes):
            g = grads.get(id(node))
            if g is None or not node.parents:
                continue
            if node.vjp is None:
                raise DifferentiationError(f"no derivative registered for '{node.name}'")
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else add(prev, pg)
    return [grads.get(id(t), constant(np.zeros(t.shape))) for t in wrt]


@contextmanager
def _nullcontext() -> Iterator[None]:
    yield


# -- flat parameter vectors -------------------------------------------------------


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def stop(self) -> int:
        return self.offset + self.size


@dataclass(frozen=True)
class Layout:
    """Named, disjoint segments that tile a flat vector exactly."""

    segments: tuple[Segment, ...]

    def __post_init__(self) -> None:
        pos = 0
        names = set()
        for seg in self.segments:
            if seg.offset != pos or seg.size <= 0:
                raise LayoutError(f"segment {seg.name!r} does not tile the vector")
            if seg.name in names:
                raise LayoutError(f"duplicate segment {seg.name!r}")
            names.add(seg.name)
            pos = seg.stop

    @classmethod
    def from_shapes(cls, shapes: Sequence[tuple[str, tuple[int, ...]]]) -> Layout:
        segs = []
        pos = 0
        for name, shape in shapes:
            seg = Segment(name, pos, tuple(int(d) for d in shape))
            segs.append(seg)
            pos = seg.stop
        return cls(tuple(segs))

    @property
    def size(self) -> int:
        return self.segments[-1].stop if self.segments else 0

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.segments]

    def __getitem__(self, name: str) -> Segment:
        for seg in self.segments:
            if seg.name == name:
                return seg
        raise KeyError(name)

    def __contains__(self, name: object) -> bool:
        return any(s.name == name for s in self.segments)


@dataclass
class ParamVector:
    values: np.ndarray
    layout: Layout

    def __post_init__(self) -> None:
        if self.values.ndim != 1 or self.values.shape[0] != self.layout.size:
            raise LayoutError(
                f"vector of shape {self.values.shape} does not match layout size {self.layout.size}"
            )

    def segment(self, name: str) -> np.ndarray:
        seg = self.layout[name]
        return self.values[seg.offset : seg.stop].reshape(seg.shape)

    def _combinable(self, other: ParamVector) -> None:
        if other.layout != self.layout:
            raise LayoutError("parameter vectors have different layouts")

    def __add__(self, other: ParamVector) -> ParamVector:
        self._combinable(other)
        return ParamVector(self.values + other.values, self.layout)

    def __sub__(self, other: ParamVector) -> ParamVector:
        self._combinable(other)
        return ParamVector(self.values - other.values, self.layout)

    def __mul__(self, c: float) -> ParamVector:
        return ParamVector(self.values * c, self.layout)

    __rmul__ = __mul__

    def dot(self, other: ParamVector) -> float:
        self._combinable(other)
        return float(self.values @ other.values)

    def copy(self) -> ParamVector:
        return ParamVector(self.values.copy(), self.layout)

    @classmethod
    def zeros(cls, layout: Layout) -> ParamVector:
        return cls(np.zeros(layout.size), layout)


def unflatten(p: Tensor, layout: Layout) -> dict[str, Tensor]:
    """Traced views of each segment of a flat parameter tensor."""
    out = {}
    for seg in layout.segments:
        piece = take(p, seg.offset, seg.stop)
        out[seg.name] = piece if len(seg.shape) == 1 else reshape(piece, seg.shape)
    return out


class ScalarFn:
    """A scalar loss of a flat parameter vector and a batch.

    ``fn`` receives the parameter vector as a traced :class:`Tensor` plus the
    batch, and must return a 0-d Tensor built from the primitives above.
    """

    def __init__(self, fn: Callable[[Tensor, Any], Tensor], layout: Layout, name: str = "f"):
        self.fn = fn
        self.layout = layout
        self.name = name

    def _check(self, p: ParamVector) -> None:
        if p.layout != self.layout:
            raise LayoutError(
                f"{self.name}: parameter layout {p.layout.names} does not match "
                f"expected {self.layout.names}"
            )

    def trace(self, p: ParamVector, batch: Any) -> tuple[Tensor, Tensor]:
        self._check(p)
        leaf = variable(p.values)
        out = self.fn(leaf, batch)
        if out.shape != ():
            raise ValueError(f"{self.name} returned shape {out.shape}, expected a scalar")
        return leaf, out


def value(f: ScalarFn, p: ParamVector, batch: Any = None) -> float:
    f._check(p)
    with no_record():
        out = f.fn(constant(p.values), batch)
    return out.item()


def grad(f: ScalarFn, p: ParamVector, batch: Any = None) -> ParamVector:
    leaf, out = f.trace(p, batch)
    (g,) = backward(out, [leaf])
    return ParamVector(g.data.copy(), p.layout)


def value_and_grad(f: ScalarFn, p: ParamVector, batch: Any = None) -> tuple[float, ParamVector]:
    leaf, out = f.trace(p, batch)
    (g,) = backward(out, [leaf])
    return out.item(), ParamVector(g.data.copy(), p.layout)


def default_fd_eps(p: ParamVector) -> float:
    return 1e-4 * (1.0 + float(np.max(np.abs(p.values), initial=0.0)))


def hvp(
    f: ScalarFn,
    p: ParamVector,
    batch: Any,
    v: ParamVector,
    backend: str = "exact",
    eps: float | None = None,
) -> ParamVector:
    """Hessian-vector product H(p) @ v without forming H.

    ``backend="exact"`` differentiates the recorded gradient computation;
    ``backend="finite-difference"`` uses central differences of gradients.
    """
    if v.layout != p.layout:
        raise LayoutError("direction vector layout differs from parameter layout")
    if backend == "exact":
        leaf, out = f.trace(p, batch)
        if trace_order(out) < 2:
            bad = sorted({n.name for n in _topological(out) if n.parents and n.order < 2})
            raise DifferentiationError(f"no second derivative registered for {bad}")
        (g,) = backward(out, [leaf], create_graph=True)
        gv = total(mul(g, constant(v.values)))
        if not gv.requires_grad:
            return ParamVector.zeros(p.layout)
        (hv,) = backward(gv, [leaf])
        return ParamVector(hv.data.copy(), p.layout)
    if backend in ("finite-difference", "fd"):
        h = default_fd_eps(p) if eps is None else float(eps)
        plus = grad(f, ParamVector(p.values + h * v.values, p.layout), batch)
        minus = grad(f, ParamVector(p.values - h * v.values, p.layout), batch)
        return ParamVector((plus.values - minus.values) / (2.0 * h), p.layout)
    raise ValueError(f"unknown hvp backend {backend!r}")
