"""
Tensor arithmetic with reverse-mode automatic differentiation.

A Tensor wraps a C-contiguous numpy array in single (float32) or double
(float64) precision. Operations executed inside an active ``Tape`` are recorded
in topological order; ``backward`` walks the tape once in reverse and fills the
``grad`` of every leaf that requires it. Outside a tape every operation runs in
inference mode and records nothing.

Usage:
    from tensor_autograd import Tape, Tensor, backward

    w = Tensor([1.0, 2.0], requires_grad=True)
    with Tape():
        loss = (w * w).sum()
        backward(loss)
    w.grad  # -> [2., 4.]
"""

import logging
import math
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

PRECISIONS = {"single": np.float32, "double": np.float64}
DEFAULT_PRECISION = "single"

# sqrt(2/pi) for the tanh form of GELU
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class MaskError(ValueError):
    """An additive attention mask is malformed or hides every entry of a row."""


class BackwardError(ValueError):
    """backward() was called on something that cannot be differentiated."""


_local = threading.local()


def _tape_stack() -> List["Tape"]:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = []
        _local.tapes = stack
    return stack


def active_tape() -> Optional["Tape"]:
    """Return the innermost tape open on this thread, if any."""
    stack = _tape_stack()
    return stack[-1] if stack else None


@dataclass
class Node:
    op: str
    inputs: Tuple["Tensor", ...]
    output: "Tensor"
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """
    Ordered record of the operations executed while the tape is open.

    Tapes are confined to the thread that opened them. With ``record_all`` every
    operation is recorded even when no input requires grad, which lets callers
    read gradients of interior activations of an otherwise frozen graph.
    """

    def __init__(self, record_all: bool = False):
        self.nodes: List[Node] = []
        self.record_all = record_all

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: Tuple["Tensor", ...], output: "Tensor",
               backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> None:
        output.node_id = len(self.nodes)
        output._tape = self
        self.nodes.append(Node(op, inputs, output, backward_fn))


def _resolve_dtype(data: Any, precision: Optional[str]) -> np.dtype:
    if precision is not None:
        if precision not in PRECISIONS:
            raise ValueError(f"Unknown precision '{precision}'. Expected one of {sorted(PRECISIONS)}")
        return np.dtype(PRECISIONS[precision])
    dtype = getattr(data, "dtype", None)
    if dtype is not None and dtype in (np.float32, np.float64):
        return np.dtype(dtype)
    return np.dtype(PRECISIONS[DEFAULT_PRECISION])


class Tensor:
    """N-dimensional array with an optional gradient buffer."""

    # make ndarray <op> Tensor defer to the Tensor's reflected operators
    __array_priority__ = 1000

    def __init__(self, data: Any, requires_grad: bool = False, precision: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        dtype = _resolve_dtype(data, precision)
        self.data: np.ndarray = np.ascontiguousarray(data, dtype=dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node_id: Optional[int] = None
        self._tape: Optional[Tape] = None

    # ---- metadata ----

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def precision(self) -> str:
        return "double" if self.data.dtype == np.float64 else "single"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a one-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, precision={self.precision}{flag})"

    # ---- operators ----

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

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

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)


TensorLike = Union[Tensor, np.ndarray, float, int]


def as_tensor(value: TensorLike, like: Optional[Tensor] = None) -> Tensor:
    """Wrap constants as non-differentiable tensors in the precision of ``like``."""
    if isinstance(value, Tensor):
        return value
    if like is not None:
        return Tensor(np.asarray(value, dtype=like.data.dtype))
    return Tensor(value)


def zeros(*shape: int, precision: str = DEFAULT_PRECISION, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=PRECISIONS[precision]), requires_grad=requires_grad)


def ones(*shape: int, precision: str = DEFAULT_PRECISION, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=PRECISIONS[precision]), requires_grad=requires_grad)


def _emit(op: str, data: np.ndarray, inputs: Tuple[Tensor, ...],
          backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and (tape.record_all or any(t.requires_grad or t._tape is tape for t in inputs)):
        tape.record(op, inputs, out, backward_fn)
    return out


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum out broadcast dimensions so ``grad`` matches ``shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable")


# ---- elementwise arithmetic ----

def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "add")
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "sub")
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data
    return _emit("div", ad / bd, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)))


def neg(a: Tensor) -> Tensor:
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def _pair(a: TensorLike, b: TensorLike) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _emit("log", np.log(ad), (a,), lambda g: (g / ad,))


def relu(a: Tensor) -> Tensor:
    ad = a.data
    return _emit("relu", np.maximum(ad, 0).astype(ad.dtype), (a,), lambda g: (g * (ad > 0),))


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + _GELU_K * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward_fn(g):
        d_inner = _GELU_C * (1.0 + 3.0 * _GELU_K * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return _emit("gelu", out.astype(x.dtype), (a,), backward_fn)


def silu(a: Tensor) -> Tensor:
    x = a.data
    sig = 1.0 / (1.0 + np.exp(-x))
    out = x * sig
    return _emit("silu", out.astype(x.dtype), (a,), lambda g: (g * sig * (1.0 + x * (1.0 - sig)),))


# ---- shape manipulation ----

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view shape {a.shape} as {shape}")
    src = a.shape
    return _emit("reshape", out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(int(ax) % a.ndim for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} are not a permutation for shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def swap_last(a: Tensor) -> Tensor:
    """Exchange the two trailing axes."""
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def getitem(a: Tensor, index: Any) -> Tensor:
    out = a.data[index]
    src_shape, dtype = a.shape, a.data.dtype

    def backward_fn(g):
        full = np.zeros(src_shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _emit("getitem", np.ascontiguousarray(out), (a,), backward_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat: no tensors given")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} disagree off axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _emit("concat", out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: {a.shape} cannot broadcast to {shape}")
    return _emit("broadcast_to", out, (a,), lambda g: (g,))


# ---- reductions ----

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.data.dtype)
    src_shape = a.shape

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src_shape),)

    return _emit("sum", out, (a,), backward_fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return div(tsum(a, axis=axis, keepdims=keepdims), float(count))


# ---- linear algebra ----

def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ for shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch extents of {a.shape} and {b.shape} are not broadcastable")
    ad, bd = a.data, b.data

    def backward_fn(g):
        return (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g)

    return _emit("matmul", np.matmul(ad, bd), (a, b), backward_fn)


# ---- normalisation and probability ----

def softmax_lastdim(t: Tensor, mask: Optional[TensorLike] = None) -> Tensor:
    """
    Softmax over the last axis with an optional additive mask.

    Mask entries must be 0 (keep) or -inf (drop) and broadcast to ``t``.
    Dropped entries come out as exact zeros. A row with every entry dropped
    has no defined distribution and is rejected.
    """
    z = t.data
    if mask is not None:
        m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
        try:
            target = np.broadcast_shapes(z.shape, m.shape)
        except ValueError:
            raise ShapeError(f"softmax mask shape {m.shape} does not broadcast to {z.shape}")
        if target != z.shape:
            raise ShapeError(f"softmax mask shape {m.shape} does not broadcast to {z.shape}")
        if not np.all((m == 0) | np.isneginf(m)):
            raise MaskError("softmax mask entries must be 0 (keep) or -inf (drop)")
        z = z + m.astype(z.dtype)
    row_max = z.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(row_max)):
        raise MaskError("softmax row has every entry masked; uniform over nothing is undefined")
    e = np.exp(z - row_max)
    s = (e / e.sum(axis=-1, keepdims=True)).astype(t.data.dtype)

    def backward_fn(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", s, (t,), backward_fn)


def _check_norm_params(op: str, t: Tensor, *params: Tensor) -> None:
    for p in params:
        if p.shape != (t.shape[-1],):
            raise ShapeError(f"{op}: parameter shape {p.shape} does not match last extent of {t.shape}")


def layernorm(t: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    _check_norm_params("layernorm", t, weight, bias)
    x = t.data
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * rstd
    w = weight.data
    out = (xhat * w + bias.data).astype(x.dtype)

    def backward_fn(g):
        dxhat = g * w
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return (dx, g * xhat, g)

    return _emit("layernorm", out, (t, weight, bias), backward_fn)


def rmsnorm(t: Tensor, weight: Tensor, eps: float = 1e-5) -> Tensor:
    _check_norm_params("rmsnorm", t, weight)
    x = t.data
    r = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)
    w = weight.data
    out = (x * r * w).astype(x.dtype)

    def backward_fn(g):
        dxn = g * w
        dx = r * (dxn - x * (r * r) * (dxn * x).mean(axis=-1, keepdims=True))
        return (dx, g * x * r)

    return _emit("rmsnorm", out, (t, weight), backward_fn)


def cross_entropy(logits: Tensor, labels: Any) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(``logits``)."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects logits [B, K], got {logits.shape}")
    labels = np.asarray(labels).reshape(-1)
    batch, k = logits.shape
    if labels.shape[0] != batch:
        raise ShapeError(f"cross_entropy: {labels.shape[0]} labels for {batch} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"cross_entropy: labels must lie in [0, {k}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    labels = labels.astype(np.int64)
    z = logits.data
    shifted = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    rows = np.arange(batch)
    loss = np.asarray((lse - shifted[rows, labels]).mean(), dtype=z.dtype)

    def backward_fn(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, labels] -= 1.0
        return (g * p / batch,)

    return _emit("cross_entropy", loss, (logits,), backward_fn)


# ---- reverse pass ----

def backward(loss: Tensor, retain: Sequence[Tensor] = ()) -> None:
    """
    Propagate d(loss)/d(x) to every requires_grad leaf reachable from ``loss``.

    Gradients add into existing ``grad`` buffers, so call ``zero_grad`` between
    steps. Tensors listed in ``retain`` (interior activations) also get their
    gradient stored.
    """
    if loss.ndim != 0:
        raise BackwardError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None or loss.node_id is None:
        raise BackwardError("loss was not produced on a recording tape")

    retained = {id(t): t for t in retain}
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: Dict[int, Tensor] = {}

    for node in reversed(tape.nodes[: loss.node_id + 1]):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        if id(node.output) in retained:
            node.output.grad = np.array(g, dtype=node.output.data.dtype)
        for inp, ig in zip(node.inputs, node.backward_fn(g)):
            if ig is None:
                continue
            on_tape = inp._tape is tape and inp.node_id is not None
            if not (on_tape or inp.requires_grad or id(inp) in retained):
                continue
            ig = unbroadcast(np.asarray(ig), inp.shape)
            key = id(inp)
            grads[key] = grads[key] + ig if key in grads else ig
            if not on_tape:
                leaves[key] = inp

    for key, leaf in leaves.items():
        g = np.array(grads[key], dtype=leaf.data.dtype)
        if leaf.requires_grad or key in retained:
            leaf.grad = g if leaf.grad is None else leaf.grad + g


# ---- verification harness ----

@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    coordinates: int
    per_tensor: Dict[str, float] = field(default_factory=dict)


def _rel_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1.0, abs(numeric))


def grad_check(f: Callable[[Tensor], Tensor], x0: TensorLike, h: float = 1e-4,
               tol: float = 1e-5) -> GradCheckReport:
    """
    Compare the tape gradient of scalar ``f`` at ``x0`` with central differences.

    Runs in double precision. The reported error for each coordinate is
    |analytic - numeric| / max(1, |numeric|).
    """
    base = np.array(x0.data if isinstance(x0, Tensor) else x0, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True, precision="double")
    with Tape():
        y = f(x)
        if y.ndim != 0:
            raise BackwardError(f"grad_check needs a scalar-valued function, got shape {y.shape}")
        if y.node_id is not None:
            backward(y)
    analytic = x.grad if x.grad is not None else np.zeros_like(base)

    worst = 0.0
    for i in range(base.size):
        plus = base.copy()
        plus.flat[i] += h
        minus = base.copy()
        minus.flat[i] -= h
        numeric = (f(Tensor(plus, precision="double")).item()
                   - f(Tensor(minus, precision="double")).item()) / (2.0 * h)
        worst = max(worst, _rel_error(float(analytic.flat[i]), numeric))
    return GradCheckReport(max_rel_error=worst, passed=worst <= tol, coordinates=base.size)


def grad_check_many(loss_fn: Callable[[], Tensor], tensors: Dict[str, Tensor], h: float = 1e-4,
                    tol: float = 1e-5, max_coords: Optional[int] = None,
                    seed: int = 0) -> GradCheckReport:
    """
    Gradient-check a zero-argument loss against several leaf tensors at once.

    The tensors must be double precision and require grad; ``loss_fn`` must
    read them by reference. With ``max_coords`` only that many coordinates per
    tensor, chosen by ``seed``, are perturbed.
    """
    for name, t in tensors.items():
        if t.data.dtype != np.float64:
            raise ValueError(f"grad_check_many needs double precision, '{name}' is {t.precision}")
        t.grad = None
    with Tape():
        loss = loss_fn()
        if loss.ndim != 0:
            raise BackwardError(f"grad_check_many needs a scalar loss, got shape {loss.shape}")
        if loss.node_id is not None:
            backward(loss)

    chooser = np.random.default_rng(seed)
    report = GradCheckReport(max_rel_error=0.0, passed=True, coordinates=0)
    for name, t in tensors.items():
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        coords = np.arange(t.size)
        if max_coords is not None and t.size > max_coords:
            coords = np.sort(chooser.choice(t.size, size=max_coords, replace=False))
        worst = 0.0
        for i in coords:
            original = t.data.flat[i]
            t.data.flat[i] = original + h
            plus = loss_fn().item()
            t.data.flat[i] = original - h
            minus = loss_fn().item()
            t.data.flat[i] = original
            numeric = (plus - minus) / (2.0 * h)
            worst = max(worst, _rel_error(float(analytic.flat[i]), numeric))
        report.per_tensor[name] = worst
        report.coordinates += len(coords)
        report.max_rel_error = max(report.max_rel_error, worst)
    report.passed = report.max_rel_error <= tol
    logger.debug(f"grad_check_many: {report.coordinates} coordinates, max rel error {report.max_rel_error:.3e}")
    return report
