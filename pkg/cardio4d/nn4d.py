"""Network layers with owned parameters.

A network is described by a *layer plan*: an ordered sequence of :class:`LayerSpec`.
:func:`init_params` turns a plan into :class:`LayerParams`, a flat mapping from
parameter path to :class:`.Tensor`. Layer functions receive the parameters of one
layer through :meth:`LayerParams.scope`, which also carries the layer's spec.

Parameter paths have the form ``<layer>.<sub-layer>.<weight|bias|gamma|beta>``, for
example ``enc1.block0.conv1.weight``. They are the keys of the checkpoint format.
"""

import logging
from dataclasses import dataclass, field
from math import ceil, prod, sqrt
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .common import ShapeError
from .tensor_engine import (
    GN_EPS,
    GROUPS,
    Tensor,
    add,
    conv4d,
    default_dtype,
    conv_pointwise,
    group_norm,
    relu,
    upsample_nearest4d,
)

log = logging.getLogger(__name__)

#: Layer kinds and the sub-layers (conv or group norm) each owns.
KINDS: Dict[str, Tuple[str, ...]] = {
    "conv": ("",),
    "res_block": ("gn1", "conv1", "gn2", "conv2"),
    "down": ("",),
    "up": ("",),
    "end": ("",),
}

Shape = Tuple[int, ...]


@dataclass(frozen=True)
class LayerSpec:
    """Configuration of one layer in a plan."""

    #: Path prefix of the layer's parameters, e.g. "enc1.block0".
    name: str

    #: One of the keys of :data:`KINDS`.
    kind: str

    c_in: int
    c_out: int

    #: Convolution kernel extents. For "up" and "end" layers the pointwise kernel is
    #: always used.
    kernel: Tuple[int, int, int, int] = (3, 3, 3, 3)

    #: Stride of a "down" layer, or the upsampling factor of an "up" layer.
    stride: Tuple[int, int, int, int] = (1, 1, 1, 1)

    #: Group count for group normalization.
    groups: int = GROUPS

    eps: float = GN_EPS

    #: Label of the network-structure row this layer's output corresponds to, if any.
    row: Optional[str] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"Unknown layer kind {self.kind!r}")
        if self.kind == "res_block" and self.c_in != self.c_out:
            raise ShapeError(
                f"{self.name}: residual block must preserve channels; "
                f"{self.c_in} → {self.c_out}"
            )

    def param_shapes(self) -> Dict[str, Shape]:
        """Shapes of the layer's parameters, keyed by path relative to :attr:`name`."""
        if self.kind == "res_block":
            c, k = self.c_in, self.kernel
            return {
                "gn1.gamma": (c,),
                "gn1.beta": (c,),
                "conv1.weight": (c, c) + k,
                "conv1.bias": (c,),
                "gn2.gamma": (c,),
                "gn2.beta": (c,),
                "conv2.weight": (c, c) + k,
                "conv2.bias": (c,),
            }
        kernel = (1, 1, 1, 1) if self.kind in ("up", "end") else self.kernel
        return {
            "weight": (self.c_out, self.c_in) + kernel,
            "bias": (self.c_out,),
        }

    def output_shape(self, shape: Shape) -> Shape:
        """Output shape (C, X, Y, Z, T) for an input of shape `shape`, without batch."""
        if shape[0] != self.c_in:
            raise ShapeError(f"{self.name}: expected {self.c_in} channels; got {shape[0]}")
        extents = shape[1:]
        if self.kind == "down":
            for L, s in zip(extents, self.stride):
                if s > 1 and L == 1:
                    raise ShapeError(f"{self.name}: cannot downsample an axis of extent 1")
            extents = tuple(ceil(L / s) for L, s in zip(extents, self.stride))
        elif self.kind == "up":
            extents = tuple(L * f for L, f in zip(extents, self.stride))
        return (self.c_out,) + tuple(extents)


class LayerParams(Mapping[str, Tensor]):
    """Named parameters of a network, or a view of those of a single layer.

    Keys are parameter paths; every path is unique. A view created by :meth:`scope`
    shares tensors with its parent and strips the layer prefix from keys.
    """

    def __init__(
        self,
        tensors: Dict[str, Tensor],
        specs: Sequence[LayerSpec] = (),
        prefix: str = "",
    ):
        self._tensors = tensors
        self._specs = {s.name: s for s in specs} if not isinstance(specs, dict) else specs
        self._prefix = prefix

    def __getitem__(self, key: str) -> Tensor:
        return self._tensors[self._prefix + key]

    def __iter__(self) -> Iterator[str]:
        n = len(self._prefix)
        return (k[n:] for k in self._tensors if k.startswith(self._prefix))

    def __len__(self) -> int:
        return sum(1 for _ in self)

    def __repr__(self) -> str:
        where = f" {self._prefix[:-1]!r}" if self._prefix else ""
        return f"<LayerParams{where}: {len(self)} tensors, {self.count()} values>"

    @property
    def specs(self) -> List[LayerSpec]:
        return list(self._specs.values())

    @property
    def spec(self) -> LayerSpec:
        """Spec of the layer this view is scoped to."""
        try:
            return self._specs[self._prefix.rstrip(".")]
        except KeyError:
            raise ShapeError(f"no layer named {self._prefix.rstrip('.')!r}") from None

    def scope(self, name: str) -> "LayerParams":
        """View of the parameters below `name`."""
        return LayerParams(self._tensors, self._specs, f"{self._prefix}{name}.")

    def count(self) -> int:
        """Total number of scalar parameters."""
        return sum(t.size for t in self.values())

    def zero_grad(self) -> None:
        for t in self.values():
            t.zero_grad()

    def astype(self, dtype) -> "LayerParams":
        """Copy with every tensor converted to `dtype`."""
        return LayerParams(
            {
                k: Tensor(t.data, requires_grad=t.requires_grad, dtype=dtype, name=k)
                for k, t in self._tensors.items()
            },
            self._specs,
            self._prefix,
        )


@dataclass
class _Init:
    rng: np.random.Generator
    dtype: np.dtype
    tensors: Dict[str, Tensor] = field(default_factory=dict)

    def add(self, path: str, shape: Shape) -> None:
        leaf = path.rsplit(".", 1)[-1]
        if leaf == "weight":
            fan_in = shape[1] * prod(shape[2:])
            data = self.rng.standard_normal(shape) * sqrt(2.0 / fan_in)
        elif leaf == "gamma":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        self.tensors[path] = Tensor(data, requires_grad=True, dtype=self.dtype, name=path)


def init_params(plan: Sequence[LayerSpec], seed: int, dtype=None) -> LayerParams:
    """Initialize parameters for every layer of `plan`.

    Convolution weights are drawn from a normal distribution with standard deviation
    ``sqrt(2 / fan_in)``, where ``fan_in`` is the number of input channels times the
    number of kernel taps. Biases and group-norm shifts (``beta``) are zero;
    group-norm scales (``gamma``) are one. The result is a pure function of `plan`
    and `seed`.
    """
    init = _Init(np.random.default_rng(seed), np.dtype(dtype or default_dtype()))
    for spec in plan:
        for rel, shape in spec.param_shapes().items():
            path = f"{spec.name}.{rel}"
            if path in init.tensors:
                raise ShapeError(f"duplicate parameter path {path!r}")
            init.add(path, shape)
    log.debug(f"Initialized {len(init.tensors)} parameter tensors with seed {seed}")
    return LayerParams(init.tensors, plan)


def _gn(x: Tensor, params: LayerParams, name: str, spec: LayerSpec) -> Tensor:
    return group_norm(
        x, params[f"{name}.gamma"], params[f"{name}.beta"], groups=spec.groups, eps=spec.eps
    )


def conv(x: Tensor, params: LayerParams, impl: str = "temporal") -> Tensor:
    """Convolution layer with bias; also used for strided down-convolution."""
    spec = params.spec
    return conv4d(x, params["weight"], params["bias"], stride=spec.stride, impl=impl)


def res_block(x: Tensor, params: LayerParams, impl: str = "temporal") -> Tensor:
    """Residual block: GN, ReLU, Conv, GN, ReLU, Conv, then add the identity."""
    spec = params.spec
    if x.shape[1] != spec.c_in:
        raise ShapeError(f"{spec.name}: expected {spec.c_in} channels; got {x.shape[1]}")
    y = relu(_gn(x, params, "gn1", spec))
    y = conv4d(y, params["conv1.weight"], params["conv1.bias"], impl=impl)
    y = relu(_gn(y, params, "gn2", spec))
    y = conv4d(y, params["conv2.weight"], params["conv2.bias"], impl=impl)
    return add(y, x)


def down_conv(x: Tensor, params: LayerParams, impl: str = "temporal") -> Tensor:
    """Strided convolution halving each strided extent (rounding up).

    Raises
    ------
    ShapeError
        if a strided axis has extent 1.
    """
    spec = params.spec
    spec.output_shape(x.shape[1:])
    return conv(x, params, impl=impl)


def decoder_up(x: Tensor, skip: Tensor, params: LayerParams) -> Tensor:
    """Pointwise convolution, nearest-neighbour upsampling, then add `skip`.

    Raises
    ------
    ShapeError
        if the upsampled shape differs from that of `skip`.
    """
    spec = params.spec
    y = conv_pointwise(x, params["weight"], params["bias"])
    y = upsample_nearest4d(y, spec.stride)
    if y.shape != skip.shape:
        raise ShapeError(f"{spec.name}: upsampled {y.shape} ≠ skip {skip.shape}")
    return add(y, skip)


def end_conv(x: Tensor, params: LayerParams) -> Tensor:
    """Pointwise convolution to class logits."""
    return conv_pointwise(x, params["weight"], params["bias"])
