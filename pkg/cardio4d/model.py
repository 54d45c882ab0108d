"""The segmentation network and its 3D baseline.

The network is an encoder–decoder with residual blocks and additive skip connections.
An initial convolution maps the single-channel input to `base_filters` channels. Each
encoder level after the first starts with a stride-2 convolution that halves every
extent and doubles the channels, followed by that level's residual blocks. Each
decoder level halves the channels with a pointwise convolution, upsamples by nearest
neighbour, adds the encoder output of the same level and applies one residual block.
A pointwise convolution and a channel softmax give the class probabilities.

The layers whose outputs are reported by :func:`shape_audit` are named Input,
InitConv, EncoderBlock<level>, EncoderDown<level>, DecoderUp<level>,
DecoderBlock<level> and DecoderEnd. For :meth:`NetConfig.full` the bottleneck
(EncoderBlock2) has shape 32x24x24x16x4.

In "seg3d" mode the same code builds the 3D baseline: kernels are 3x3x3 (temporal
extent 1), the time axis is never strided, and each frame is processed separately.
"""

import json
import logging
import struct
from dataclasses import asdict, dataclass, field, replace
from hashlib import blake2s
from itertools import product
from pathlib import Path
from typing import TYPE_CHECKING, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import kernels
from .common import (
    BadMagicError,
    ConfigError,
    DataError,
    FormatError,
    Reader,
    ShapeError,
    check_dims,
)
from .nn4d import (
    LayerParams,
    LayerSpec,
    conv,
    decoder_up,
    down_conv,
    end_conv,
    init_params,
    res_block,
)
from .tensor_engine import Tensor, softmax_channels

if TYPE_CHECKING:
    from .data import Volume4DSequence

log = logging.getLogger(__name__)

MODES = ("seg4d", "seg3d")

#: Class indices of the network output channels.
CLASSES = {"background": 0, "lv": 1, "lvm": 2}

CKPT_MAGIC = b"CKPT"
CKPT_VERSION = 1


@dataclass
class NetConfig:
    """Network configuration.

    The defaults give the desk-scale 4D network. Use :meth:`full` for the full-size
    4D network and :meth:`full_3d` for the full-size 3D baseline.
    """

    #: "seg4d" or "seg3d".
    mode: str = "seg4d"

    #: Number of filters of the initial convolution; doubled at every level.
    base_filters: int = 4

    #: Number of resolution levels.
    levels: int = 3

    #: Number of residual blocks per encoder level.
    blocks_per_level: Tuple[int, ...] = (1, 2, 4)

    #: Input crop (X, Y, Z, T) for "seg4d", (X, Y, Z) for "seg3d".
    crop_shape: Tuple[int, ...] = (32, 32, 24, 8)

    num_classes: int = 3

    #: Group count for group normalization.
    groups: int = 8

    eps: float = 1e-5

    #: Forward convolution kernel; see :data:`.kernels.FORWARD`.
    conv_impl: str = "temporal"

    def __post_init__(self):
        self.blocks_per_level = tuple(self.blocks_per_level)
        self.crop_shape = tuple(self.crop_shape)

        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}; got {self.mode!r}")
        if self.conv_impl not in kernels.FORWARD:
            raise ConfigError(f"Unknown convolution implementation {self.conv_impl!r}")
        if self.levels < 1 or len(self.blocks_per_level) != self.levels or min(
            self.blocks_per_level
        ) < 1:
            raise ConfigError(
                f"blocks_per_level {self.blocks_per_level} for {self.levels} levels"
            )
        if self.base_filters < 1 or self.num_classes < 2:
            raise ConfigError("base_filters must be ≥ 1 and num_classes ≥ 2")

        n_axes = 4 if self.mode == "seg4d" else 3
        if len(self.crop_shape) != n_axes:
            raise ConfigError(f"{self.mode} needs a crop of {n_axes} extents")
        factor = 2 ** (self.levels - 1)
        for L, s in zip(self.input_extents, self.strides):
            if L < 1 or (s > 1 and L % factor):
                raise ConfigError(
                    f"crop {self.crop_shape} not divisible by {factor} on each axis"
                )

    @classmethod
    def full(cls) -> "NetConfig":
        """Full-size 4D network, 96x96x64x16 crops."""
        return cls(base_filters=8, crop_shape=(96, 96, 64, 16))

    @classmethod
    def full_3d(cls) -> "NetConfig":
        """Full-size 3D baseline with one more level than the 4D network."""
        return cls(
            mode="seg3d",
            base_filters=8,
            levels=4,
            blocks_per_level=(1, 2, 4, 1),
            crop_shape=(96, 96, 64),
        )

    @classmethod
    def desk(cls) -> "NetConfig":
        return cls()

    @classmethod
    def desk_3d(cls) -> "NetConfig":
        return cls(
            mode="seg3d", levels=4, blocks_per_level=(1, 2, 4, 1), crop_shape=(32, 32, 24)
        )

    @property
    def kernel(self) -> Tuple[int, int, int, int]:
        return (3, 3, 3, 3) if self.mode == "seg4d" else (3, 3, 3, 1)

    @property
    def strides(self) -> Tuple[int, int, int, int]:
        return (2, 2, 2, 2) if self.mode == "seg4d" else (2, 2, 2, 1)

    @property
    def input_extents(self) -> Tuple[int, int, int, int]:
        """Crop extents (X, Y, Z, T) fed to the network; T is 1 for "seg3d"."""
        return self.crop_shape if self.mode == "seg4d" else self.crop_shape + (1,)

    def to_dict(self) -> dict:
        result = asdict(self)
        result.update(
            blocks_per_level=list(self.blocks_per_level), crop_shape=list(self.crop_shape)
        )
        return result


def layer_plan(config: NetConfig) -> List[LayerSpec]:
    """Ordered layers of the network for `config`."""
    b, k, s = config.base_filters, config.kernel, config.strides
    common = dict(kernel=k, groups=config.groups, eps=config.eps)
    plan = [LayerSpec("init", "conv", 1, b, row="InitConv", **common)]

    for level, n_blocks in enumerate(config.blocks_per_level):
        c = b * 2**level
        if level > 0:
            plan.append(
                LayerSpec(
                    f"down{level}", "down", c // 2, c, stride=s,
                    row=f"EncoderDown{level}", **common,
                )
            )
        for i in range(n_blocks):
            row = f"EncoderBlock{level}" if i == n_blocks - 1 else None
            plan.append(LayerSpec(f"enc{level}.block{i}", "res_block", c, c, row=row, **common))

    for level in reversed(range(config.levels - 1)):
        c = b * 2**level
        plan.extend(
            [
                LayerSpec(
                    f"up{level}", "up", 2 * c, c, stride=s, row=f"DecoderUp{level}", **common
                ),
                LayerSpec(
                    f"dec{level}.block0", "res_block", c, c, row=f"DecoderBlock{level}",
                    **common,
                ),
            ]
        )

    plan.append(LayerSpec("end", "end", b, config.num_classes, row="DecoderEnd", **common))
    return plan


def format_shape(shape: Sequence[int], mode: str = "seg4d") -> str:
    """Format a (C, X, Y, Z, T) shape as e.g. "8x96x96x64x16"; T is omitted for 3D."""
    dims = tuple(shape) if mode == "seg4d" else tuple(shape)[:-1]
    return "x".join(map(str, dims))


def shape_audit(config: NetConfig) -> List[Tuple[str, str]]:
    """Output size of every named row of the network, from shape rules alone.

    No parameters are allocated, so this works for the full-size network on any
    machine.
    """
    shape: Tuple[int, ...] = (1,) + config.input_extents
    rows = [("Input", format_shape(shape, config.mode))]
    skips = {}
    for spec in layer_plan(config):
        if spec.kind == "up":
            skip_level = int(spec.name[2:])
            shape = spec.output_shape(shape)
            if shape != skips[skip_level]:
                raise ShapeError(f"{spec.name}: upsampled {shape} ≠ skip {skips[skip_level]}")
        else:
            shape = spec.output_shape(shape)
        if spec.name.startswith("enc"):
            skips[int(spec.name[3:].split(".")[0])] = shape
        if spec.row:
            rows.append((spec.row, format_shape(shape, config.mode)))
    return rows


@dataclass
class ModelParams:
    """A network configuration with its parameters."""

    config: NetConfig
    params: LayerParams

    #: Training provenance, e.g. epochs run; not part of the checkpoint.
    info: dict = field(default_factory=dict)

    def __repr__(self) -> str:
        return f"<ModelParams {self.config.mode} {self.params.count()} parameters>"

    def with_crop(self, crop_shape: Sequence[int]) -> "ModelParams":
        """Same parameters, for inputs of a different crop size."""
        return replace(self, config=replace(self.config, crop_shape=tuple(crop_shape)))

    def digest(self) -> str:
        """16 hexadecimal digits identifying the configuration and parameter values."""
        h = blake2s(json.dumps(self.config.to_dict(), sort_keys=True).encode(), digest_size=8)
        for path, t in self.params.items():
            h.update(path.encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
        return h.hexdigest()


def build(config: NetConfig, seed: int = 0, dtype=None) -> ModelParams:
    """Build and initialize the network for `config`."""
    plan = layer_plan(config)
    shape_audit(config)
    model = ModelParams(config, init_params(plan, seed, dtype=dtype))
    log.info(f"Built {config.mode} network with {model.params.count()} parameters")
    return model


def forward(
    model: ModelParams, x: Tensor, trace: Optional[List[Tuple[str, str]]] = None
) -> Tensor:
    """Class probabilities for `x`.

    Parameters
    ----------
    x :
        Input of shape (N, 1, X, Y, Z, T), with (X, Y, Z, T) equal to
        :attr:`NetConfig.input_extents`.
    trace :
        If given, ``(row, output size)`` pairs for every named row are appended, using
        the shapes of the tensors actually computed.

    Returns
    -------
    Tensor
        Shape (N, C, X, Y, Z, T). Channels are ordered as in :data:`CLASSES` and sum
        to 1 at every voxel.
    """
    config = model.config
    if x.ndim != 6 or x.shape[1] != 1 or x.shape[2:] != config.input_extents:
        raise ShapeError(
            f"Input {x.shape} does not match (N, 1) + {config.input_extents}"
        )

    def note(row: Optional[str], t: Tensor) -> None:
        if trace is not None and row:
            trace.append((row, format_shape(t.shape[1:], config.mode)))

    note("Input", x)
    impl = config.conv_impl
    p = model.params
    skips = {}

    for spec in p.specs:
        scoped = p.scope(spec.name)
        if spec.kind == "conv":
            x = conv(x, scoped, impl=impl)
        elif spec.kind == "down":
            x = down_conv(x, scoped, impl=impl)
        elif spec.kind == "res_block":
            x = res_block(x, scoped, impl=impl)
            if spec.name.startswith("enc"):
                skips[int(spec.name[3:].split(".")[0])] = x
        elif spec.kind == "up":
            x = decoder_up(x, skips[int(spec.name[2:])], scoped)
        else:
            x = softmax_channels(end_conv(x, scoped))
        note(spec.row, x)

    return x


def _tile_starts(length: int, crop: int, overlap: float) -> List[int]:
    step = max(1, int(crop * (1 - overlap)))
    starts = list(range(0, length - crop + 1, step))
    if starts[-1] != length - crop:
        starts.append(length - crop)
    return starts


def predict_probabilities(
    model: ModelParams, volume: np.ndarray, overlap: float = 0.5
) -> np.ndarray:
    """Class probabilities (C, X, Y, Z, T) for a normalized volume (X, Y, Z, T).

    The volume is covered by crop-sized tiles overlapping by `overlap` on each axis;
    probabilities of overlapping tiles are averaged. Axes shorter than the crop are
    padded with -1 (the normalized intensity of -1024 HU) and the padding is removed
    from the result.
    """
    if not 0 <= overlap < 1:
        raise ValueError(f"overlap must be in [0, 1); got {overlap}")
    if volume.ndim != 4:
        raise ShapeError(f"Expected a (X, Y, Z, T) volume; got shape {volume.shape}")

    crop = model.config.input_extents
    dtype = next(iter(model.params.values())).dtype
    original = volume.shape
    pad = [(0, max(0, c - L)) for c, L in zip(crop, original)]
    padded = np.pad(volume, pad, constant_values=-1.0)

    total = np.zeros((model.config.num_classes,) + padded.shape)
    count = np.zeros(padded.shape)
    for origin in product(*map(_tile_starts, padded.shape, crop, [overlap] * 4)):
        window = tuple(slice(o, o + c) for o, c in zip(origin, crop))
        tile = Tensor(padded[window][np.newaxis, np.newaxis], dtype=dtype)
        total[(slice(None),) + window] += forward(model, tile).data[0]
        count[window] += 1

    result = total / count
    return result[(slice(None),) + tuple(slice(0, L) for L in original)]


def predict_labels(
    model: ModelParams, sequence: "Volume4DSequence", overlap: float = 0.5
) -> np.ndarray:
    """Label of the most probable class at every voxel of every frame of `sequence`.

    Returns an int8 array (X, Y, Z, T). In "seg3d" mode every frame is predicted
    independently.
    """
    from .data import normalize_intensity

    probs = predict_probabilities(model, normalize_intensity(sequence.intensities), overlap)
    return probs.argmax(axis=0).astype(np.int8)


# Checkpoint format


def encode_checkpoint(model: ModelParams) -> bytes:
    """Serialize `model` in the CKPT format.

    Layout, little-endian: magic "CKPT"; u16 version; u32 length and the
    configuration as JSON; u32 parameter count; then for each parameter a u16 path
    length, the UTF-8 path, u8 rank, u32 extents, and float32 values in row-major
    order.
    """
    config = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    parts = [
        CKPT_MAGIC,
        struct.pack("<HI", CKPT_VERSION, len(config)),
        config,
        struct.pack("<I", len(model.params)),
    ]
    for path, t in model.params.items():
        name = path.encode()
        parts.extend([struct.pack("<H", len(name)), name])
        parts.append(struct.pack(f"<B{t.ndim}I", t.ndim, *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes, dtype=None) -> ModelParams:
    """Inverse of :func:`encode_checkpoint`.

    Raises
    ------
    BadMagicError
        if `buf` does not start with "CKPT".
    TruncatedError
        if `buf` ends early or has bytes beyond the last parameter.
    FormatError
        for an unknown version, an invalid configuration, or parameters that do not
        match the configuration.
    """
    r = Reader(buf, "checkpoint")
    if buf[:4] != CKPT_MAGIC:
        raise BadMagicError(f"checkpoint: expected magic {CKPT_MAGIC!r}; got {buf[:4]!r}")
    r.take(4)
    version, n_config = r.unpack("HI")
    if version != CKPT_VERSION:
        raise FormatError(f"checkpoint: unsupported version {version}")
    try:
        config = NetConfig(**json.loads(r.take(n_config)))
    except (TypeError, ValueError) as e:
        raise FormatError(f"checkpoint: invalid configuration: {e}") from None

    plan = layer_plan(config)
    expected = {f"{s.name}.{k}": v for s in plan for k, v in s.param_shapes().items()}
    (count,) = r.unpack("I")
    if count != len(expected):
        raise FormatError(f"checkpoint: {count} parameters; configuration needs {len(expected)}")

    tensors = {}
    for _ in range(count):
        (n_path,) = r.unpack("H")
        path = r.take(n_path).decode()
        if path in tensors:
            raise FormatError(f"checkpoint: duplicate parameter {path!r}")
        (ndim,) = r.unpack("B")
        dims = check_dims(r.unpack(f"{ndim}I"))
        if expected.get(path) != dims:
            raise FormatError(f"checkpoint: unexpected parameter {path!r} of shape {dims}")
        tensors[path] = Tensor(
            r.array("f4", dims), requires_grad=True, dtype=dtype or np.float32, name=path
        )
    r.finish()

    # Same order as a freshly built model
    ordered = {k: tensors[k] for k in expected}
    return ModelParams(config, LayerParams(ordered, plan))


def save_checkpoint(model: ModelParams, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(model))
    log.info(f"Wrote checkpoint {path}")
    return path


def load_checkpoint(path: Union[str, Path], dtype=None) -> ModelParams:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise DataError(f"Cannot read checkpoint {path}: {e}") from None
    return decode_checkpoint(buf, dtype=dtype)
