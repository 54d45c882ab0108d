"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a :class:`numpy.ndarray`. Primitive operations are plain
functions (:func:`conv4d`, :func:`relu`, :func:`group_norm`, …). When a
:class:`Tape` is active and any input has :attr:`~Tensor.requires_grad` set, each
primitive appends a record to the tape holding its inputs, its output and a closure
over the values saved for the backward pass. :meth:`Tape.backward` replays the
records in reverse order.

.. code-block:: python

   with Tape() as tape:
       loss = sum(square(conv4d(x, w)))
   tape.backward(loss)
   w.grad  # gradient of `loss` with respect to `w`

New tensors are 32-bit unless created within :func:`float64_mode`, which exists for
gradient checking. Every primitive output is checked for NaN/Inf; non-finite values
raise :class:`.NonFiniteError`.
"""

import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from math import gcd
from typing import (
    Callable,
    Dict,
    Iterator,
    List,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np

from . import kernels
from .common import GraphError, NonFiniteError, ShapeError

log = logging.getLogger(__name__)

#: Default group count for :func:`group_norm`.
GROUPS = 8

#: Default epsilon for :func:`group_norm`.
GN_EPS = 1e-5

#: Supported kernel extents per axis for :func:`conv4d`.
KERNEL_EXTENTS = {(3, 3, 3, 3), (3, 3, 3, 1), (1, 1, 1, 1)}

_dtype_stack: List[np.dtype] = [np.dtype(np.float32)]

_tape_stack: List["Tape"] = []

ArrayLike = Union[np.ndarray, Sequence, float]


def default_dtype() -> np.dtype:
    """Return the dtype used for new tensors."""
    return _dtype_stack[-1]


@contextmanager
def float64_mode() -> Iterator[None]:
    """Create 64-bit tensors within the context."""
    _dtype_stack.append(np.dtype(np.float64))
    try:
        yield
    finally:
        _dtype_stack.pop()


class Tensor:
    """Dense real-valued array participating in automatic differentiation."""

    #: Values, C-contiguous.
    data: np.ndarray

    #: Record gradients for this tensor while a :class:`Tape` is active.
    requires_grad: bool

    #: Gradient with the same shape as :attr:`data`, populated by
    #: :meth:`Tape.backward`.
    grad: Optional[np.ndarray]

    #: Optional name, e.g. a parameter path.
    name: Optional[str]

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        dtype=None,
        name: Optional[str] = None,
    ):
        arr = np.ascontiguousarray(data, dtype=dtype or default_dtype())
        if any(s <= 0 for s in arr.shape):
            raise ShapeError(f"Tensor extents must be positive; got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._op: Optional[str] = None

    @classmethod
    def _result(cls, data: np.ndarray, op: str) -> "Tensor":
        result = cls.__new__(cls)
        result.data = np.ascontiguousarray(data)
        result.requires_grad = False
        result.grad = None
        result.name = None
        result._op = op
        return result

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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        """:obj:`True` if the tensor was not produced by a primitive."""
        return self._op is None

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() of a tensor with shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        name = f" {self.name!r}" if self.name else ""
        op = f" op={self._op}" if self._op else ""
        grad = " requires_grad" if self.requires_grad else ""
        return f"<Tensor{name} {self.shape} {self.dtype}{op}{grad}>"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __neg__(self) -> "Tensor":
        return neg(self)


GradFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Record:
    """One primitive application on a :class:`Tape`."""

    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    #: Map the gradient of :attr:`output` to gradients of :attr:`inputs`.
    backward: GradFn


@dataclass
class Tape:
    """Ordered record of primitive applications, for the backward pass.

    A tape is active inside its ``with`` block. Tapes nest; primitives record on the
    innermost active tape.
    """

    records: List[Record] = field(default_factory=list)

    _consumed: bool = False

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def reset(self) -> None:
        """Discard all records so the tape can be reused."""
        self.records.clear()
        self._consumed = False

    def backward(self, loss: Tensor) -> Dict[Tensor, np.ndarray]:
        """Compute gradients of the scalar `loss`.

        Gradients are accumulated additively into :attr:`Tensor.grad` of every leaf
        tensor with :attr:`~Tensor.requires_grad`; call :meth:`Tensor.zero_grad`
        between steps.

        Returns
        -------
        dict
            Mapping from each leaf tensor reached to its gradient.

        Raises
        ------
        GraphError
            if `loss` is not a scalar, was not recorded on this tape, or if backward
            was already run on this tape without :meth:`reset`.
        """
        if self._consumed:
            raise GraphError("backward() already run on this tape; call reset()")
        if loss.size != 1:
            raise GraphError(f"loss must be scalar; got shape {loss.shape}")

        last = next(
            (i for i in reversed(range(len(self.records))) if self.records[i].output is loss),
            None,
        )
        if last is None:
            raise GraphError("loss is detached from this tape")

        self._consumed = True

        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: Dict[int, Tensor] = {}

        for record in reversed(self.records[: last + 1]):
            g_out = grads.pop(id(record.output), None)
            if g_out is None:
                continue
            for t, g in zip(record.inputs, record.backward(g_out)):
                if g is None or not t.requires_grad:
                    continue
                key = id(t)
                grads[key] = grads[key] + g if key in grads else g
                if t.is_leaf:
                    leaves[key] = t

        result = {}
        for key, t in leaves.items():
            g = grads[key]
            t.grad = g if t.grad is None else t.grad + g
            result[t] = g
        return result


def active_tape() -> Optional[Tape]:
    return _tape_stack[-1] if _tape_stack else None


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")


def _record(
    op: str, out: np.ndarray, inputs: Sequence[Tensor], backward: GradFn
) -> Tensor:
    _check_finite(out, f"output of {op}")
    result = Tensor._result(out, op)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        tape.records.append(Record(op, tuple(inputs), result, backward))
    return result


def _same_shape(op: str, x: Tensor, y: Tensor) -> None:
    if x.shape != y.shape:
        raise ShapeError(f"{op}: shapes {x.shape} and {y.shape} differ")


def _as_tensor(value: Union[Tensor, ArrayLike], like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=like.dtype)


# Elementwise and reduction primitives


def add(x: Tensor, y: Tensor) -> Tensor:
    """Elementwise sum of same-shape tensors."""
    _same_shape("add", x, y)
    return _record("add", x.data + y.data, (x, y), lambda g: (g, g))


def sub(x: Tensor, y: Tensor) -> Tensor:
    """Elementwise difference of same-shape tensors."""
    _same_shape("sub", x, y)
    return _record("sub", x.data - y.data, (x, y), lambda g: (g, -g))


def mul(x: Tensor, y: Union[Tensor, ArrayLike]) -> Tensor:
    """Elementwise product of same-shape tensors."""
    y = _as_tensor(y, x)
    _same_shape("mul", x, y)
    xd, yd = x.data, y.data
    return _record("mul", xd * yd, (x, y), lambda g: (g * yd, g * xd))


def div(x: Tensor, y: Tensor) -> Tensor:
    """Elementwise quotient of same-shape tensors."""
    _same_shape("div", x, y)
    xd, yd = x.data, y.data
    return _record("div", xd / yd, (x, y), lambda g: (g / yd, -g * xd / (yd * yd)))


def neg(x: Tensor) -> Tensor:
    return _record("neg", -x.data, (x,), lambda g: (-g,))


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by the constant `c`."""
    c = x.dtype.type(c)
    return _record("scale", x.data * c, (x,), lambda g: (g * c,))


def add_scalar(x: Tensor, c: float) -> Tensor:
    """Add the constant `c`."""
    c = x.dtype.type(c)
    return _record("add_scalar", x.data + c, (x,), lambda g: (g,))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _record("square", xd * xd, (x,), lambda g: (2 * g * xd,))


def sum(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    shape = x.shape
    return _record(
        "sum", np.asarray(x.data.sum(), dtype=x.dtype), (x,),
        lambda g: (np.broadcast_to(g, shape).copy(),),
    )


def mean(x: Tensor) -> Tensor:
    """Mean of all elements, as a scalar tensor."""
    return scale(sum(x), 1.0 / x.size)


def relu(x: Tensor) -> Tensor:
    """Elementwise ``max(0, x)``. The gradient at exactly 0 is 0."""
    mask = x.data > 0
    return _record("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,),
                   lambda g: (g * mask,))


def take(x: Tensor, axis: int, indices: Sequence[int]) -> Tensor:
    """Select `indices` along `axis`, keeping the axis."""
    idx = np.asarray(indices, dtype=np.intp)
    shape, dtype = x.shape, x.dtype

    def backward(g):
        result = np.zeros(shape, dtype=dtype)
        np.add.at(result, (slice(None),) * (axis % len(shape)) + (idx,), g)
        return (result,)

    return _record("take", np.take(x.data, idx, axis=axis), (x,), backward)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice ``start:start + length`` along `axis`."""
    axis = axis % x.ndim
    if not (0 <= start and length > 0 and start + length <= x.shape[axis]):
        raise ShapeError(f"narrow({start}, {length}) on axis of extent {x.shape[axis]}")
    index = (slice(None),) * axis + (slice(start, start + length),)
    shape, dtype = x.shape, x.dtype

    def backward(g):
        result = np.zeros(shape, dtype=dtype)
        result[index] = g
        return (result,)

    return _record("narrow", x.data[index], (x,), backward)


# Network primitives


def _tuple4(value: Union[int, Sequence[int]], what: str) -> Tuple[int, int, int, int]:
    result = (value,) * 4 if isinstance(value, int) else tuple(value)
    if len(result) != 4 or any(s not in (1, 2) for s in result):
        raise ShapeError(f"{what} must be 1 or 2 per axis; got {value!r}")
    return result  # type: ignore [return-value]


def conv_output_shape(
    in_shape: Sequence[int], kernel_shape: Sequence[int], stride=1
) -> Tuple[int, ...]:
    """Output shape of :func:`conv4d` under zero padding of ``extent // 2``.

    With extent 3 or 1 each output extent is ``ceil(L / stride)``.
    """
    stride = _tuple4(stride, "stride")
    spatial = tuple(
        (L + 2 * (k // 2) - k) // s + 1
        for L, k, s in zip(in_shape[2:], kernel_shape[2:], stride)
    )
    return (in_shape[0], kernel_shape[0]) + spatial


def conv4d(
    x: Tensor,
    kernel: Tensor,
    bias: Optional[Tensor] = None,
    stride: Union[int, Sequence[int]] = 1,
    impl: str = "temporal",
) -> Tensor:
    """True (non-separable) 4D convolution with zero padding.

    Parameters
    ----------
    x :
        Input of shape (N, Cin, X, Y, Z, T).
    kernel :
        Weights of shape (Cout, Cin, 3, 3, 3, 3). Extents (3, 3, 3, 1), a 3D kernel
        applied per frame, and (1, 1, 1, 1) are also accepted.
    bias :
        Optional (Cout,) bias.
    stride :
        1 or 2, for all axes or per axis.
    impl :
        Forward kernel; one of the keys of :data:`.kernels.FORWARD`.

    Raises
    ------
    ShapeError
        on mismatched ranks, channels or unsupported kernel extents.
    NonFiniteError
        if `x` contains NaN or Inf.
    """
    if x.ndim != 6 or kernel.ndim != 6:
        raise ShapeError(f"conv4d: need 6-D input and kernel; got {x.shape}, {kernel.shape}")
    if kernel.shape[1] != x.shape[1]:
        raise ShapeError(
            f"conv4d: kernel expects {kernel.shape[1]} input channels; got {x.shape[1]}"
        )
    if kernel.shape[2:] not in KERNEL_EXTENTS:
        raise ShapeError(f"conv4d: unsupported kernel extents {kernel.shape[2:]}")
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise ShapeError(f"conv4d: bias shape {bias.shape} for {kernel.shape[0]} outputs")
    if x.dtype != kernel.dtype:
        raise ShapeError(f"conv4d: dtypes {x.dtype} and {kernel.dtype} differ")
    _check_finite(x.data, "conv4d input")

    strides = _tuple4(stride, "stride")
    out = np.empty(conv_output_shape(x.shape, kernel.shape, strides), dtype=x.dtype)
    b = bias.data if bias is not None else np.zeros(kernel.shape[0], dtype=x.dtype)
    kernels.FORWARD[impl](x.data, kernel.data, b, out, *strides)

    xd, wd = x.data, kernel.data

    def backward(g):
        g = np.ascontiguousarray(g)
        gx = np.zeros_like(xd)
        kernels.conv4d_grad_input(g, wd, gx, *strides)
        gw = np.empty_like(wd)
        kernels.conv4d_grad_kernel(g, xd, gw, *strides)
        gb = g.sum(axis=(0, 2, 3, 4, 5)) if bias is not None else None
        return (gx, gw, gb)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _record("conv4d", out, inputs, backward)


def conv_pointwise(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Per-voxel linear channel mixing by a (Cout, Cin, 1, 1, 1, 1) kernel."""
    if kernel.ndim != x.ndim or any(k != 1 for k in kernel.shape[2:]):
        raise ShapeError(f"conv_pointwise: kernel shape {kernel.shape} for {x.shape}")
    if kernel.shape[1] != x.shape[1]:
        raise ShapeError(
            f"conv_pointwise: kernel expects {kernel.shape[1]} channels; got {x.shape[1]}"
        )
    N, C = x.shape[:2]
    Cout = kernel.shape[0]
    w2 = kernel.data.reshape(Cout, C)
    x3 = x.data.reshape(N, C, -1)
    out = np.einsum("oc,ncs->nos", w2, x3)
    if bias is not None:
        out += bias.data.reshape(1, Cout, 1)

    def backward(g):
        g3 = g.reshape(N, Cout, -1)
        gx = np.einsum("oc,nos->ncs", w2, g3).reshape(x.shape)
        gw = np.einsum("nos,ncs->oc", g3, x3).reshape(kernel.shape)
        gb = g3.sum(axis=(0, 2)) if bias is not None else None
        return (gx, gw, gb)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _record("conv_pointwise", out.reshape((N, Cout) + x.shape[2:]), inputs, backward)


def resolve_groups(channels: int, groups: int = GROUPS, fallback: bool = True) -> int:
    """Group count for :func:`group_norm` on `channels`.

    If `channels` is not divisible by `groups` and `fallback` is set, use
    ``gcd(channels, groups)``.
    """
    if channels % groups == 0:
        return groups
    elif fallback:
        return gcd(channels, groups)
    raise ShapeError(f"{channels} channels not divisible into {groups} groups")


def group_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    groups: int = GROUPS,
    eps: float = GN_EPS,
    fallback: bool = True,
) -> Tensor:
    """Group normalization over channel groups of each sample, with per-channel affine.

    Raises
    ------
    ShapeError
        if `gamma` or `beta` do not have one value per channel, or if the channel
        count is not divisible by `groups` and `fallback` is :obj:`False`.
    """
    N, C = x.shape[:2]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"group_norm: gamma/beta {gamma.shape}/{beta.shape} for {C} channels")
    G = resolve_groups(C, groups, fallback)

    xr = x.data.reshape(N, G, -1)
    mu = xr.mean(axis=2, keepdims=True)
    var = xr.var(axis=2, keepdims=True)
    inv_std = 1 / np.sqrt(var + x.dtype.type(eps))
    xhat = (xr - mu) * inv_std

    bshape = (1, C) + (1,) * (x.ndim - 2)
    gd = gamma.data.reshape(bshape)
    out = xhat.reshape(x.shape) * gd + beta.data.reshape(bshape)
    reduce_axes = (0,) + tuple(range(2, x.ndim))

    def backward(g):
        g_gamma = (g * xhat.reshape(x.shape)).sum(axis=reduce_axes)
        g_beta = g.sum(axis=reduce_axes)
        dxhat = (g * gd).reshape(N, G, -1)
        M = dxhat.shape[2]
        gx = (inv_std / M) * (
            M * dxhat
            - dxhat.sum(axis=2, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=2, keepdims=True)
        )
        return (gx.reshape(x.shape), g_gamma, g_beta)

    return _record("group_norm", out, (x, gamma, beta), backward)


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax over axis 1, stabilized by subtracting the per-voxel maximum."""
    e = np.exp(x.data - x.data.max(axis=1, keepdims=True))
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _record("softmax_channels", s, (x,), backward)


def upsample_nearest4d(
    x: Tensor, factor: Union[int, Sequence[int]] = 2
) -> Tensor:
    """Replicate each voxel into a block of `factor` per spatial/temporal axis."""
    factors = (factor,) * (x.ndim - 2) if isinstance(factor, int) else tuple(factor)
    if len(factors) != x.ndim - 2:
        raise ShapeError(f"upsample factor {factor!r} for shape {x.shape}")

    out = x.data
    for axis, f in enumerate(factors, start=2):
        out = np.repeat(out, f, axis=axis)

    def backward(g):
        split: List[int] = list(x.shape[:2])
        for L, f in zip(x.shape[2:], factors):
            split.extend([L, f])
        sum_axes = tuple(range(3, 2 + 2 * len(factors), 2))
        return (g.reshape(split).sum(axis=sum_axes),)

    return _record("upsample_nearest4d", out, (x,), backward)


def backward(loss: Tensor, tape: Tape) -> Dict[Tensor, np.ndarray]:
    """Run :meth:`Tape.backward` for `loss`."""
    return tape.backward(loss)


# Verification harness


@dataclass
class GradCheckReport:
    """Result of :func:`grad_check`."""

    #: Maximum relative error per checked input, keyed by name or position.
    errors: Dict[str, float]

    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    tolerance: float = 1e-3,
    step: float = 1e-4,
    sample: Optional[int] = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare tape gradients of `f` against central differences.

    `f` is called as ``f(*inputs)``. A non-scalar output is projected onto a fixed
    random direction, so every output element contributes. For each input element
    checked, the error is ``|analytic − numeric| / max(1, |numeric|)``.

    Parameters
    ----------
    sample :
        If given, check this many randomly chosen elements of each input instead of
        all elements.

    Raises
    ------
    ValueError
        if any input is not 64-bit.
    """
    if any(t.dtype != np.float64 for t in inputs):
        raise ValueError("grad_check requires 64-bit inputs; use float64_mode()")

    rng = np.random.default_rng(seed)
    for t in inputs:
        t.requires_grad = True
        t.grad = None

    with Tape() as tape:
        out = f(*inputs)
        direction = rng.standard_normal(out.shape)
        loss = sum(mul(out, Tensor(direction, dtype=np.float64)))
    tape.backward(loss)

    def objective() -> float:
        return float(np.sum(f(*inputs).data * direction))

    errors = {}
    for pos, t in enumerate(inputs):
        analytic = (t.grad if t.grad is not None else np.zeros_like(t.data)).reshape(-1)
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if sample is not None and sample < flat.size:
            idx = np.sort(rng.choice(flat.size, sample, replace=False))

        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            f_plus = objective()
            flat[i] = orig - step
            f_minus = objective()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2 * step)
            worst = max(worst, abs(analytic[i] - numeric) / max(1.0, abs(numeric)))
        errors[t.name or str(pos)] = worst

    return GradCheckReport(errors, tolerance)
