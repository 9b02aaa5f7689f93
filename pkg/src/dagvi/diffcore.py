"""Dense reverse-mode differentiation on top of numpy.

Operations are recorded define-by-run onto the innermost active :class:`Tape`.
Recording order is a topological order by construction, so the backward
pass is a single reversed sweep over the tape.

    >>> w = Tensor([0.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sigmoid(w).sum()
    >>> tape.backward(loss, [w])[0]
    array([0.25])
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "make_op",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "einsum",
    "sigmoid",
    "relu",
    "exp",
    "log",
    "softplus",
    "softmax",
    "square",
    "sum",
    "mean",
    "transpose",
    "reshape",
    "broadcast_to",
    "mask_rows",
    "mask_columns",
    "straight_through",
    "Adam",
    "FDReport",
    "finite_difference_check",
]


class ShapeError(ValueError):
    """Raised when the operand shapes of a primitive are incompatible."""


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def _current_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A float64 array that can take part in a recorded computation."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class TapeNode:
    name: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; every primitive evaluated inside the block whose
    inputs require gradients is appended to ``nodes``.
    """

    nodes: list[TapeNode] = field(default_factory=list)

    def __enter__(self) -> Tape:
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        stack.remove(self)

    def record(self, node: TapeNode) -> None:
        self.nodes.append(node)

    def backward(self, loss: Tensor, params: Iterable[Tensor] | None = None) -> list[np.ndarray]:
        """Accumulate d(loss)/d(leaf) into ``.grad`` and return grads for ``params``.

        Parameters that are not connected to ``loss`` get a zero gradient.
        """
        if loss.data.size != 1:
            raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
        if not self.nodes:
            raise ValueError("backward: tape is empty")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced = {id(node.output) for node in self.nodes}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        # whatever is left belongs to leaves
        for node in self.nodes:
            for inp in node.inputs:
                key = id(inp)
                if key in grads and key not in produced:
                    g = grads.pop(key)
                    inp.grad = g if inp.grad is None else inp.grad + g
        if params is None:
            return []
        out = []
        for p in params:
            out.append(np.zeros_like(p.data) if p.grad is None else p.grad)
        return out


def make_op(name: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    """Wrap ``out_data`` as the result of a primitive and record it if needed.

    ``backward(g)`` must return one gradient (or None) per input, each shaped
    like that input.
    """
    if not np.all(np.isfinite(out_data)):
        raise FloatingPointError(f"{name}: produced non-finite values")
    needs = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = needs
    out.grad = None
    out.name = None
    if needs:
        tape = _current_tape()
        if tape is not None:
            tape.record(TapeNode(name, tuple(inputs), out, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(name: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


# --- elementwise binary -----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)
    return make_op(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)
    return make_op(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)
    return make_op(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        ),
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return make_op(
        "div",
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None,
        ),
    )


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return make_op("neg", -a.data, (a,), lambda g: (-g,))


# --- linear algebra ---------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return make_op(
        "matmul",
        a.data @ b.data,
        (a, b),
        lambda g: (
            g @ b.data.T if a.requires_grad else None,
            a.data.T @ g if b.requires_grad else None,
        ),
    )


def einsum(subscripts: str, *operands) -> Tensor:
    """Explicit-output einsum (``"ij,jk->ik"``) without repeated indices per operand."""
    ops = [_as_tensor(o) for o in operands]
    if "->" not in subscripts:
        raise ValueError("einsum: explicit output subscripts are required")
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    in_subs = lhs.split(",")
    if len(in_subs) != len(ops):
        raise ValueError(f"einsum: {len(in_subs)} subscripts for {len(ops)} operands")
    try:
        out = np.einsum(subscripts, *[o.data for o in ops], optimize=True)
    except ValueError as exc:
        shapes = " and ".join(str(o.shape) for o in ops)
        raise ShapeError(f"einsum '{subscripts}': incompatible shapes {shapes}") from exc

    def backward(g):
        grads = []
        for k, op in enumerate(ops):
            if not op.requires_grad:
                grads.append(None)
                continue
            others = [s for j, s in enumerate(in_subs) if j != k]
            datas = [o.data for j, o in enumerate(ops) if j != k]
            spec = ",".join([out_sub, *others]) + "->" + in_subs[k]
            gk = np.einsum(spec, g, *datas, optimize=True)
            grads.append(np.broadcast_to(gk, op.shape).copy() if gk.shape != op.shape else gk)
        return grads

    return make_op("einsum", np.asarray(out, dtype=np.float64), ops, backward)


# --- elementwise unary ------------------------------------------------------


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = expit(a.data)
    return make_op("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    pos = a.data > 0
    return make_op("relu", np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return make_op("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return make_op("log", out, (a,), lambda g: (g / a.data,))


def softplus(a) -> Tensor:
    """log(1 + exp(a)), evaluated without overflow."""
    a = _as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    return make_op("softplus", out, (a,), lambda g: (g * expit(a.data),))


def square(a) -> Tensor:
    a = _as_tensor(a)
    return make_op("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_op("softmax", out, (a,), backward)


# --- reductions and shape ---------------------------------------------------


def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = _as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis), dtype=np.float64)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_op("sum", out, (a,), backward)


def mean(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    out = np.asarray(a.data.mean(axis=axis), dtype=np.float64)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return make_op("mean", out, (a,), backward)


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return make_op("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view shape {a.shape} as {tuple(shape)}") from None
    return make_op("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def broadcast_to(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: incompatible shapes {a.shape} and {tuple(shape)}") from None
    return make_op("broadcast_to", out, (a,), lambda g: (_unbroadcast(g, a.shape),))


def mask_rows(a, keep) -> Tensor:
    """Zero every row ``i`` of a matrix where ``keep[i]`` is false."""
    a = _as_tensor(a)
    keep = np.asarray(keep, dtype=np.float64)
    if a.ndim != 2 or keep.shape != (a.shape[0],):
        raise ShapeError(f"mask_rows: incompatible shapes {a.shape} and {keep.shape}")
    m = keep[:, None]
    return make_op("mask_rows", a.data * m, (a,), lambda g: (g * m,))


def mask_columns(a, keep) -> Tensor:
    """Zero every column ``j`` of a matrix where ``keep[j]`` is false."""
    a = _as_tensor(a)
    keep = np.asarray(keep, dtype=np.float64)
    if a.ndim != 2 or keep.shape != (a.shape[1],):
        raise ShapeError(f"mask_columns: incompatible shapes {a.shape} and {keep.shape}")
    m = keep[None, :]
    return make_op("mask_columns", a.data * m, (a,), lambda g: (g * m,))


def straight_through(hard, soft) -> Tensor:
    """Forward value ``hard``; gradient passed unchanged to ``soft``."""
    soft = _as_tensor(soft)
    hard = np.asarray(hard, dtype=np.float64)
    if hard.shape != soft.shape:
        raise ShapeError(f"straight_through: incompatible shapes {hard.shape} and {soft.shape}")
    return make_op("straight_through", hard, (soft,), lambda g: (g,))


# --- optimisation -----------------------------------------------------------


class Adam:
    """Adam with decoupled weight decay.

    ``params`` maps a name to a leaf tensor; names show up in diagnostics when
    a gradient goes non-finite.
    """

    def __init__(
        self,
        params: Mapping[str, Tensor],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = dict(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if name not in self.params:
                raise KeyError(f"Adam: unknown parameter {name!r}")
            if g.shape != self.params[name].shape:
                raise ShapeError(
                    f"Adam: gradient for {name!r} has shape {g.shape}, "
                    f"parameter has {self.params[name].shape}"
                )
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"Adam: non-finite gradient for parameter {name!r}")
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            if self.weight_decay:
                p.data = p.data * (1.0 - self.lr * self.weight_decay)
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        return {
            "step": self.step_count,
            "lr": self.lr,
            "betas": self.betas,
            "eps": self.eps,
            "weight_decay": self.weight_decay,
        }


# --- gradient checking ------------------------------------------------------


@dataclass
class FDReport:
    max_rel_error: float
    worst_param: str | None
    worst_index: tuple[int, ...] | None
    analytic: float
    numeric: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def finite_difference_check(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    epsilon: float = 1e-6,
    tolerance: float = 1e-6,
    floor: float = 1e-8,
) -> FDReport:
    """Compare tape gradients with central differences, element by element.

    The relative error of an element is ``|a - n| / max(|a|, |n|, floor)``.
    ``loss_fn`` must be deterministic; it is re-evaluated twice per element.
    """
    if not 1e-6 <= epsilon <= 1e-4:
        raise ValueError(f"epsilon {epsilon} outside the supported range")
    for p in params.values():
        p.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    analytic = dict(zip(params, tape.backward(loss, params.values())))

    worst = FDReport(0.0, None, None, 0.0, 0.0, tolerance)
    for name, p in params.items():
        p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + epsilon
            up = float(loss_fn().data)
            flat[k] = orig - epsilon
            down = float(loss_fn().data)
            flat[k] = orig
            numeric = (up - down) / (2.0 * epsilon)
            a = float(analytic[name].reshape(-1)[k])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            if err > worst.max_rel_error or worst.worst_param is None:
                idx = np.unravel_index(k, p.shape) if p.shape else ()
                worst = FDReport(err, name, tuple(int(i) for i in idx), a, numeric, tolerance)
    return worst
