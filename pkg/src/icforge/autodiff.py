"""Reverse-mode automatic differentiation on dense float64 arrays.

A ``Tape`` records every differentiable operation applied to ``Tensor``
values while it is active (innermost context manager wins). ``backward``
replays the recording once, accumulating gradients into the ``grad``
field of every leaf tensor that has ``requires_grad`` set. Repeated
backward passes without a reset keep accumulating, which is what a
gradient-accumulation training loop wants.

Broadcasting is deliberately narrow: binary elementwise ops accept equal
shapes, a scalar on either side, or a rank-1 vector combined with a
matrix row-wise (vector length equals the matrix column count). Anything
else raises ``DimensionError`` instead of silently broadcasting.

The only non-smooth special case is ``minmax_normalize``, which treats
its min and max as stop-gradient constants. Finite-difference checks of
graphs containing it must either exclude the coordinates that realize
the min or max, or freeze the bounds via the ``bounds`` argument.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_LOCAL = threading.local()


def _tape_stack() -> list:
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = []
        _LOCAL.stack = stack
    return stack


def active_tape():
    """Return the innermost active tape, or None outside any context."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A float64 array plus gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # Operator sugar; the free functions do the real work.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class Node:
    """One recorded operation: inputs, output, and a vjp closure."""

    __slots__ = ("op", "inputs", "output", "vjp")

    def __init__(self, op: str, inputs: tuple, output: Tensor, vjp: Callable):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


class Tape:
    """Ordered record of operations; also a context manager."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise ContractError("tape context exited out of order")
        stack.pop()

    def backward(self, root: Tensor) -> None:
        backward(self, root)


def _record(op: str, inputs: tuple, output: Tensor, vjp: Callable) -> Tensor:
    output.requires_grad = any(t.requires_grad for t in inputs)
    tape = active_tape()
    if tape is not None and output.requires_grad:
        tape.nodes.append(Node(op, inputs, output, vjp))
    return output


def backward(tape: Tape, root: Tensor) -> None:
    """Accumulate d root / d leaf into every requires_grad leaf's grad."""
    if root.data.size != 1:
        raise ContractError(
            f"backward root must be a scalar, got shape {root.data.shape}"
        )
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    produced = {id(node.output) for node in tape.nodes}
    leaves: dict[int, Tensor] = {}
    if root.requires_grad and id(root) not in produced:
        leaves[id(root)] = root
    for node in reversed(tape.nodes):
        gout = grads.get(id(node.output))
        if gout is None:
            continue
        input_grads = node.vjp(gout)
        for tensor, gin in zip(node.inputs, input_grads):
            if gin is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            held = grads.get(key)
            grads[key] = gin if held is None else held + gin
            if key not in produced:
                leaves[key] = tensor
    for key, tensor in leaves.items():
        gained = grads[key]
        tensor.grad = gained.copy() if tensor.grad is None else tensor.grad + gained


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for tensor in tensors:
        tensor.grad = None


# ---------------------------------------------------------------------------
# broadcasting helpers
# ---------------------------------------------------------------------------

def _broadcast_mode(a: Tensor, b: Tensor, op: str) -> str:
    if a.data.shape == b.data.shape:
        return "same"
    if b.data.size == 1:
        return "scalar_b"
    if a.data.size == 1:
        return "scalar_a"
    if a.data.ndim == 2 and b.data.ndim == 1 and b.data.shape[0] == a.data.shape[1]:
        return "rows_b"
    if b.data.ndim == 2 and a.data.ndim == 1 and a.data.shape[0] == b.data.shape[1]:
        return "rows_a"
    raise DimensionError(
        f"{op}: unsupported shapes {a.data.shape} and {b.data.shape}; "
        "allowed are equal shapes, a scalar, or a rank-1 vector over matrix rows"
    )


def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if grad.shape == shape:
        return grad
    if shape == () or int(np.prod(shape)) == 1:
        return grad.sum().reshape(shape)
    # rank-1 operand broadcast over the rows of a matrix
    return grad.sum(axis=0).reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and linear-algebra ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_mode(a, b, "add")
    out = Tensor(a.data + b.data)

    def vjp(g):
        return _reduce_to(g, a.data.shape), _reduce_to(g, b.data.shape)

    return _record("add", (a, b), out, vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_mode(a, b, "sub")
    out = Tensor(a.data - b.data)

    def vjp(g):
        return _reduce_to(g, a.data.shape), _reduce_to(-g, b.data.shape)

    return _record("sub", (a, b), out, vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_mode(a, b, "mul")
    out = Tensor(a.data * b.data)

    def vjp(g):
        return _reduce_to(g * b.data, a.data.shape), _reduce_to(g * a.data, b.data.shape)

    return _record("mul", (a, b), out, vjp)


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    out = Tensor(a.data * factor)

    def vjp(g):
        return (g * factor,)

    return _record("scale", (a,), out, vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(
            f"matmul expects 2-D operands, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul inner dimensions differ: {a.data.shape} vs {b.data.shape}"
        )
    out = Tensor(a.data @ b.data)

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _record("matmul", (a, b), out, vjp)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got {a.data.shape}")
    out = Tensor(a.data.T.copy())

    def vjp(g):
        return (g.T.copy(),)

    return _record("transpose", (a,), out, vjp)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    if int(np.prod(shape)) != a.data.size:
        raise DimensionError(f"cannot reshape {a.data.shape} into {shape}")
    out = Tensor(a.data.reshape(shape).copy())

    def vjp(g):
        return (g.reshape(a.data.shape),)

    return _record("reshape", (a,), out, vjp)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise DimensionError("concat needs at least one tensor")
    ndim = parts[0].data.ndim
    for p in parts:
        if p.data.ndim != ndim:
            raise DimensionError("concat operands must share rank")
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.data.shape[axis] for p in parts]

    def vjp(g):
        grads = []
        offset = 0
        for size in sizes:
            index = [slice(None)] * ndim
            index[axis] = slice(offset, offset + size)
            grads.append(g[tuple(index)])
            offset += size
        return tuple(grads)

    return _record("concat", parts, out, vjp)


def slice_along(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    if axis >= a.data.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {a.data.shape}")
    extent = a.data.shape[axis]
    if not (0 <= start <= stop <= extent):
        raise DimensionError(
            f"slice [{start}:{stop}] out of range for axis {axis} of {a.data.shape}"
        )
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = Tensor(a.data[index].copy())

    def vjp(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _record("slice", (a,), out, vjp)


def gather_rows(table: Tensor, ids: Sequence[int]) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise DimensionError(f"gather_rows expects a matrix, got {table.data.shape}")
    if ids.ndim != 1:
        raise DimensionError("gather_rows expects a flat id list")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise DimensionError("gather_rows id out of vocabulary range")
    out = Tensor(table.data[ids])

    def vjp(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _record("gather_rows", (table,), out, vjp)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum_all(a: Tensor) -> Tensor:
    out = Tensor(np.array(a.data.sum()))

    def vjp(g):
        return (np.full(a.data.shape, float(g)),)

    return _record("sum_all", (a,), out, vjp)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = Tensor(np.array(a.data.mean()))

    def vjp(g):
        return (np.full(a.data.shape, float(g) / n),)

    return _record("mean_all", (a,), out, vjp)


def meansq(a: Tensor) -> Tensor:
    """Mean of squared entries; the reduction used by every loss here."""
    n = a.data.size
    out = Tensor(np.array(np.mean(a.data * a.data)))

    def vjp(g):
        return (g * 2.0 * a.data / n,)

    return _record("meansq", (a,), out, vjp)


def mse(a: Tensor, b: Tensor) -> Tensor:
    return meansq(sub(a, b))


# ---------------------------------------------------------------------------
# nonlinearities and normalizers
# ---------------------------------------------------------------------------

def softmax_rows(x: Tensor, allowed: np.ndarray | None = None) -> Tensor:
    """Row softmax of a matrix; `allowed` masks keys out of the distribution."""
    if x.data.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got {x.data.shape}")
    logits = x.data
    if allowed is not None:
        allowed = np.asarray(allowed, dtype=bool)
        if allowed.shape != (x.data.shape[1],):
            raise DimensionError("allowed mask length must equal the column count")
        if not allowed.any():
            raise DimensionError("softmax mask excludes every key")
        logits = np.where(allowed, logits, -np.inf)
    shifted = logits - logits.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    probs = expd / expd.sum(axis=1, keepdims=True)
    out = Tensor(probs)

    def vjp(g):
        inner = (g * probs).sum(axis=1, keepdims=True)
        return (probs * (g - inner),)

    return _record("softmax_rows", (x,), out, vjp)


def minmax_normalize(x: Tensor, bounds: tuple[float, float] | None = None) -> Tensor:
    """Map values onto [0, 1] using stop-gradient min and max.

    A constant input (max == min) maps to all zeros with zero gradient.
    ``bounds`` substitutes externally frozen (min, max); finite-difference
    oracles use it so the smooth surrogate matches the stop-gradient rule.
    """
    if bounds is None:
        lo = float(x.data.min())
        hi = float(x.data.max())
    else:
        lo, hi = float(bounds[0]), float(bounds[1])
    span = hi - lo
    if span == 0.0:
        out = Tensor(np.zeros_like(x.data))

        def vjp_flat(g):
            return (np.zeros_like(x.data),)

        return _record("minmax_normalize", (x,), out, vjp_flat)
    out = Tensor((x.data - lo) / span)

    def vjp(g):
        return (g / span,)

    return _record("minmax_normalize", (x,), out, vjp)


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    c = math.sqrt(2.0 / math.pi)
    inner = c * (x.data + 0.044715 * x.data ** 3)
    th = np.tanh(inner)
    out = Tensor(0.5 * x.data * (1.0 + th))

    def vjp(g):
        sech2 = 1.0 - th * th
        local = 0.5 * (1.0 + th) + 0.5 * x.data * sech2 * c * (
            1.0 + 3.0 * 0.044715 * x.data ** 2
        )
        return (g * local,)

    return _record("gelu", (x,), out, vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row of a matrix, then apply a learned affine."""
    if x.data.ndim != 2:
        raise DimensionError(f"layer_norm expects a matrix, got {x.data.shape}")
    d = x.data.shape[1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise DimensionError("layer_norm affine parameters must be rank-1 of width d")
    mu = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = Tensor(xhat * gamma.data + beta.data)

    def vjp(g):
        dgamma = (g * xhat).sum(axis=0)
        dbeta = g.sum(axis=0)
        dxhat = g * gamma.data
        dx = (
            dxhat
            - dxhat.mean(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        ) * inv
        return dx, dgamma, dbeta

    return _record("layer_norm", (x, gamma, beta), out, vjp)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return add(matmul(x, w), b)


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

def _scalar_value(fn, arg=None) -> float:
    out = fn() if arg is None else fn(arg)
    data = out.data if isinstance(out, Tensor) else np.asarray(out)
    if data.size != 1:
        raise ContractError("grad_check target must return a scalar")
    value = float(data.reshape(()))
    if not np.isfinite(value):
        raise NumericError("grad_check target produced a non-finite value")
    return value


def _relative_error(a: float, fd: float) -> float:
    # the 1e-6 floor keeps roundoff on near-zero gradients from
    # registering as a relative disagreement
    return abs(a - fd) / max(abs(a), abs(fd), 1e-6)


def grad_check(
    fn: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    exclude: Iterable[int] = (),
) -> float:
    """Compare analytic gradients of fn(x) against central differences.

    Returns the maximum relative error over the checked coordinates.
    ``exclude`` lists flat indices to skip, e.g. coordinates that realize
    a min or max inside ``minmax_normalize``.
    """
    x.grad = None
    with Tape() as tape:
        out = fn(x)
        if out.data.size != 1:
            raise ContractError("grad_check target must return a scalar")
        if not np.isfinite(out.data).all():
            raise NumericError("grad_check target produced a non-finite value")
    backward(tape, out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    skip = set(int(i) for i in exclude)
    worst = 0.0
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        if i in skip:
            continue
        bumped = flat.copy()
        bumped[i] += eps
        hi = _scalar_value(fn, Tensor(bumped.reshape(x.data.shape)))
        bumped[i] -= 2.0 * eps
        lo = _scalar_value(fn, Tensor(bumped.reshape(x.data.shape)))
        fd = (hi - lo) / (2.0 * eps)
        worst = max(worst, _relative_error(float(analytic.reshape(-1)[i]), fd))
    return worst


def grad_check_params(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    eps: float = 1e-5,
    per_param: int = 4,
    rng: np.random.Generator | None = None,
) -> float:
    """Finite-difference check of a full model objective.

    ``loss_fn`` must be deterministic and close over the parameters, which
    are perturbed in place. A few coordinates per tensor are sampled; the
    return value is the worst relative error seen.
    """
    rng = rng or np.random.default_rng(0)
    for p in params.values():
        p.grad = None
    with Tape() as tape:
        out = loss_fn()
    if out.data.size != 1:
        raise ContractError("grad_check target must return a scalar")
    backward(tape, out)
    worst = 0.0
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        count = min(per_param, flat.size)
        picks = rng.choice(flat.size, size=count, replace=False)
        for i in picks:
            old = flat[i]
            flat[i] = old + eps
            hi = _scalar_value(loss_fn)
            flat[i] = old - eps
            lo = _scalar_value(loss_fn)
            flat[i] = old
            fd = (hi - lo) / (2.0 * eps)
            worst = max(worst, _relative_error(float(analytic.reshape(-1)[i]), fd))
    return worst
