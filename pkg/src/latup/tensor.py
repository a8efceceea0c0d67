"""Reverse-mode automatic differentiation over dense numpy arrays.

The computation graph is implicit (a tape): every tensor produced by an
operation keeps references to its parent tensors and a closure that routes
the output gradient back to them.  ``backward`` walks that tape in reverse
topological order.  Tensors whose ancestors do not require gradients carry
no tape at all, so inference graphs stay cheap.

Conventions:

* Arrays are single precision by default; pass ``dtype=numpy.float64`` to
  any constructor for the verification mode used by the gradient tests.
* Every stochastic constructor takes an explicit seed; identical seeds and
  op order give bit-identical values on the same platform.
* Any forward operation that produces NaN or infinity from finite inputs
  raises :class:`~latup.errors.NumericError` instead of propagating the
  value silently.
* Gradients are reset at the start of every ``backward`` call; repeated
  calls therefore do not accumulate across calls.  Within a single call a
  tensor used several times accumulates the sum of its uses, as usual.
* Tensors are treated as immutable once they enter a graph.  Mutating
  ``.data`` of a parameter between steps (as the optimizer does) is fine;
  mutating it while a tape referencing it is still alive is not.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import GraphError, NumericError, ShapeError

DEFAULT_DTYPE = np.float32


class Tensor:
    """Dense n-dimensional array with optional gradient tracking.

    Attributes:
        data: the numpy array holding the values (row-major).
        requires_grad: whether ``backward`` should fill ``grad``.
        grad: gradient array of identical shape, or None.
        name: optional label (layer parameters are named for diagnostics).
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        if not np.isfinite(arr).all():
            raise NumericError("tensor constructed from non-finite values")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Copy of this tensor cut off from the tape."""
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    # Scalar-friendly arithmetic; heavy lifting is in the module functions.
    def __add__(self, other):
        return add(self, _lift(other, self.dtype))

    def __radd__(self, other):
        return add(_lift(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self.dtype))

    def __rsub__(self, other):
        return sub(_lift(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _lift(other, self.dtype))

    def __rmul__(self, other):
        return mul(_lift(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _lift(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_lift(other, self.dtype), self)

    def __neg__(self):
        return mul(self, _lift(-1.0, self.dtype))


def _lift(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def from_op(
    data: np.ndarray,
    parents: tuple[Tensor, ...],
    backward_fn: Callable[[np.ndarray], None] | None,
    op: str,
) -> Tensor:
    """Wrap an op result, enforcing the finite-values invariant.

    The tape (parents + closure) is only retained when some parent requires
    gradients, so inference passes never build one.
    """
    if not np.isfinite(data).all():
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    out.name = None
    if out.requires_grad:
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def accumulate_grad(t: Tensor, g: np.ndarray) -> None:
    """Add ``g`` into ``t.grad`` (allocating it on first use)."""
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape``, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


# ---------------------------------------------------------------------------
# Constructors


def make_tensor(
    shape: Sequence[int],
    init: str = "zeros",
    *,
    value: float = 0.0,
    low: float = 0.0,
    high: float = 1.0,
    seed: int = 0,
    fan_in: int | None = None,
    dtype=DEFAULT_DTYPE,
    requires_grad: bool = False,
    name: str | None = None,
) -> Tensor:
    """Create a tensor with one of the supported initializers.

    ``init`` is one of ``zeros``, ``constant`` (uses ``value``), ``uniform``
    (uses ``low``/``high``/``seed``) or ``he_normal`` (uses ``seed`` and
    ``fan_in``; when ``fan_in`` is None it defaults to the product of all
    extents but the last, which is the fan-in of conv kernels laid out as
    (k,k,k,Cin,Cout) and of dense weights laid out as (Cin,Cout)).
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0:
        raise ShapeError("make_tensor: shape must be non-empty")
    if any(s < 1 for s in shape):
        raise ShapeError(f"make_tensor: all extents must be >= 1, got {shape}")
    if init == "zeros":
        data = np.zeros(shape, dtype=dtype)
    elif init == "constant":
        data = np.full(shape, value, dtype=dtype)
    elif init == "uniform":
        rng = np.random.Generator(np.random.PCG64(seed))
        data = rng.uniform(low, high, size=shape).astype(dtype)
    elif init == "he_normal":
        if fan_in is None:
            fan_in = int(np.prod(shape[:-1])) if len(shape) > 1 else shape[0]
        rng = np.random.Generator(np.random.PCG64(seed))
        std = np.sqrt(2.0 / fan_in)
        data = (rng.standard_normal(shape) * std).astype(dtype)
    else:
        raise ValueError(f"make_tensor: unknown init {init!r}")
    return Tensor(data, requires_grad=requires_grad, name=name)


# ---------------------------------------------------------------------------
# Elementwise ops (with channel-style broadcasting)


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "add")
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        out_data = a.data + b.data

    def backward(g):
        accumulate_grad(a, _unbroadcast(g, a.shape))
        accumulate_grad(b, _unbroadcast(g, b.shape))

    return from_op(out_data, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "sub")
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        out_data = a.data - b.data

    def backward(g):
        accumulate_grad(a, _unbroadcast(g, a.shape))
        accumulate_grad(b, _unbroadcast(-g, b.shape))

    return from_op(out_data, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "mul")
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        out_data = a.data * b.data

    def backward(g):
        accumulate_grad(a, _unbroadcast(g * b.data, a.shape))
        accumulate_grad(b, _unbroadcast(g * a.data, b.shape))

    return from_op(out_data, (a, b), backward, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "div")
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        out_data = a.data / b.data

    def backward(g):
        accumulate_grad(a, _unbroadcast(g / b.data, a.shape))
        accumulate_grad(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return from_op(out_data, (a, b), backward, "div")


def elementwise_max(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise maximum; on ties the gradient is routed to ``a``."""
    _broadcast_shape(a, b, "max")
    out_data = np.maximum(a.data, b.data)

    def backward(g):
        take_a = a.data >= b.data
        accumulate_grad(a, _unbroadcast(np.where(take_a, g, 0.0), a.shape))
        accumulate_grad(b, _unbroadcast(np.where(take_a, 0.0, g), b.shape))

    return from_op(out_data, (a, b), backward, "max")


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "div": div, "max": elementwise_max}


def elementwise(op: str, a: Tensor, b: Tensor) -> Tensor:
    """Dispatch an elementwise binary op by name (add|sub|mul|div|max)."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"elementwise: unknown op {op!r}") from None
    return fn(a, b)


# ---------------------------------------------------------------------------
# Reductions


def _normalize_axes(axes, ndim: int) -> tuple[int, ...]:
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(int(ax) for ax in axes)
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"reduce: axis {ax} invalid for {ndim}-d tensor")
    return tuple(sorted(ax % ndim for ax in axes))


def reduce_sum(a: Tensor, axes: Iterable[int] | int | None = None) -> Tensor:
    """Sum over ``axes`` (kept as extent-1 axes); ``axes=None`` gives a scalar."""
    if axes is None:
        out_data = a.data.sum(dtype=a.dtype)

        def backward(g):
            accumulate_grad(a, np.broadcast_to(g, a.shape).astype(a.dtype, copy=False))

        return from_op(np.asarray(out_data), (a,), backward, "sum")

    axs = _normalize_axes(axes, a.data.ndim)
    out_data = a.data.sum(axis=axs, keepdims=True)

    def backward_axes(g):
        accumulate_grad(a, np.broadcast_to(g, a.shape).astype(a.dtype, copy=False))

    return from_op(out_data, (a,), backward_axes, "sum")


def reduce_mean(a: Tensor, axes: Iterable[int] | int | None = None) -> Tensor:
    """Mean over ``axes``; backward divides by the reduced element count."""
    if axes is None:
        count = a.data.size
        out_data = np.asarray(a.data.mean(dtype=a.dtype))
    else:
        axs = _normalize_axes(axes, a.data.ndim)
        count = int(np.prod([a.shape[ax] for ax in axs]))
        out_data = a.data.mean(axis=axs, keepdims=True)

    def backward(g):
        accumulate_grad(a, (np.broadcast_to(g, a.shape) / count).astype(a.dtype, copy=False))

    return from_op(out_data, (a,), backward, "mean")


_REDUCE = {"sum": reduce_sum, "mean": reduce_mean}


def reduce(op: str, a: Tensor, axes=None) -> Tensor:
    """Dispatch a reduction by name (sum|mean)."""
    try:
        fn = _REDUCE[op]
    except KeyError:
        raise ValueError(f"reduce: unknown op {op!r}") from None
    return fn(a, axes)


def take_channel(a: Tensor, index: int) -> Tensor:
    """Select one channel from the trailing axis (kept as extent 1)."""
    c = a.shape[-1]
    if not -c <= index < c:
        raise ShapeError(f"take_channel: index {index} out of range for {c} channels")
    index = index % c
    out_data = a.data[..., index:index + 1]

    def backward(g):
        gx = np.zeros_like(a.data)
        gx[..., index:index + 1] = g
        accumulate_grad(a, gx)

    return from_op(out_data.copy(), (a,), backward, "take_channel")


def matmul(a: Tensor, w: Tensor) -> Tensor:
    """Contract the last axis of ``a`` with the first of 2-d ``w``."""
    if w.data.ndim != 2 or a.shape[-1] != w.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {w.shape} invalid")
    out_data = a.data @ w.data

    def backward(g):
        accumulate_grad(a, g @ w.data.T)
        a2 = a.data.reshape(-1, a.shape[-1])
        g2 = g.reshape(-1, w.shape[1])
        accumulate_grad(w, a2.T @ g2)

    return from_op(out_data, (a, w), backward, "matmul")


# ---------------------------------------------------------------------------
# Backward pass


def topological_order(root: Tensor) -> list[Tensor]:
    """Parents-before-children ordering of the tape reachable from ``root``."""
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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Fill ``.grad`` of every tensor reachable from the scalar ``loss``.

    Gradients of reachable tensors are cleared first, so calling backward
    twice recomputes rather than accumulates.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward: loss must be scalar, got shape {loss.shape}")
    order = topological_order(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# Verification


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float | Sequence[float] = 1e-4,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Per coordinate the error is ``|analytic - numeric| / max(1e-8,
    |analytic| + |numeric|)``.  ``max_coords`` caps how many coordinates are
    perturbed (a seeded sample without replacement); None checks all of
    them.  Run in double precision: central differences at ``h=1e-4`` lose
    too many bits in single precision to certify 1e-4 accuracy.

    ``h`` may be a sequence of step sizes; each coordinate then scores its
    best step.  That sweeps past the step-size tradeoff (large steps cross
    activation kinks, small steps amplify rounding on near-zero gradients)
    while still exposing wrong analytic gradients, which match the
    difference quotient at no step.
    """
    steps = (h,) if isinstance(h, (int, float)) else tuple(h)
    if not steps or any(s <= 0 for s in steps):
        raise ValueError(f"finite_diff_check: invalid steps {steps}")
    if not x.requires_grad:
        x.requires_grad = True
    y = f(x)
    if y.data.size != 1:
        raise GraphError("finite_diff_check: f must be scalar-valued")
    if not np.isfinite(y.data).all():
        raise NumericError("finite_diff_check: f(x) is not finite")
    backward(y)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    n = x.data.size
    if max_coords is not None and max_coords < n:
        rng = np.random.Generator(np.random.PCG64(seed))
        coords = rng.choice(n, size=max_coords, replace=False)
    else:
        coords = np.arange(n)

    flat = x.data.reshape(-1)
    worst = 0.0
    for idx in coords:
        orig = flat[idx]
        ana = float(analytic.reshape(-1)[idx])
        best = np.inf
        for step in steps:
            flat[idx] = orig + step
            f_plus = float(f(x).data)
            flat[idx] = orig - step
            f_minus = float(f(x).data)
            flat[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            err = abs(ana - numeric) / max(1e-8, abs(ana) + abs(numeric))
            best = min(best, err)
        worst = max(worst, best)
    return worst
