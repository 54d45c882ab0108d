"""Fixtures and reference implementations for testing :mod:`.cardio4d`."""

import logging
from itertools import product
from typing import TYPE_CHECKING, Optional, Sequence, Union

import numpy as np
import pytest

if TYPE_CHECKING:
    import cardio4d.model

log = logging.getLogger(__name__)

#: Logit scale of :func:`threshold_model`.
THRESHOLD_SCALE = 50.0


def assert_le(exp: float, obs: float) -> None:
    if exp < obs:
        log.warning(f"{exp = } < {obs} = obs")
    else:
        assert exp <= obs


def conv4d_oracle(
    x: np.ndarray,
    w: np.ndarray,
    b: Optional[np.ndarray] = None,
    stride: Union[int, Sequence[int]] = 1,
) -> np.ndarray:
    """Reference 4D convolution: one :func:`numpy.einsum` per kernel tap.

    Same layouts and zero padding as :func:`.tensor_engine.conv4d`, computed in
    float64.
    """
    s = (stride,) * 4 if isinstance(stride, int) else tuple(stride)
    x, w = np.asarray(x, float), np.asarray(w, float)
    pads = [k // 2 for k in w.shape[2:]]
    xp = np.pad(x, [(0, 0), (0, 0)] + [(p, p) for p in pads])
    extents = [
        (L + 2 * p - k) // si + 1 for L, p, k, si in zip(x.shape[2:], pads, w.shape[2:], s)
    ]

    out = np.zeros(x.shape[:1] + w.shape[:1] + tuple(extents))
    for taps in product(*map(range, w.shape[2:])):
        window = tuple(
            slice(k, k + si * (n - 1) + 1, si) for k, si, n in zip(taps, s, extents)
        )
        patch = xp[(slice(None), slice(None)) + window]
        out += np.einsum("nc...,oc->no...", patch, w[(slice(None), slice(None)) + taps])
    if b is not None:
        out += np.asarray(b, float).reshape(1, -1, 1, 1, 1, 1)
    return out


def surface_oracle(mask: np.ndarray) -> np.ndarray:
    """Boundary voxels by explicit neighbour checks."""
    padded = np.pad(mask.astype(bool), 1)
    result = []
    for idx in np.argwhere(mask):
        p = tuple(idx + 1)
        for axis, step in product(range(3), (-1, 1)):
            q = list(p)
            q[axis] += step
            if not padded[tuple(q)]:
                result.append(idx)
                break
    return np.array(result, dtype=int).reshape(-1, 3)


def surface_distance_oracle(a: np.ndarray, b: np.ndarray) -> Optional[float]:
    """Symmetric average surface distance by exhaustive pairwise distances."""
    sa, sb = surface_oracle(a), surface_oracle(b)
    if len(sa) == 0 and len(sb) == 0:
        return 0.0
    elif len(sa) == 0 or len(sb) == 0:
        return None
    d = np.sqrt(((sa[:, None, :] - sb[None, :, :]) ** 2).sum(axis=-1))
    return (d.min(axis=1).sum() + d.min(axis=0).sum()) / (len(sa) + len(sb))


def tiny_net_config(**kwargs) -> "cardio4d.model.NetConfig":
    """Two-level network small enough for gradient checks and fast tests."""
    from cardio4d.model import NetConfig

    args = dict(base_filters=2, levels=2, blocks_per_level=(1, 1), crop_shape=(8, 8, 8, 4))
    args.update(kwargs)
    if args.get("mode") == "seg3d" and len(args["crop_shape"]) == 4:
        args["crop_shape"] = args["crop_shape"][:3]
    return NetConfig(**args)


def make_threshold_model(
    config: Optional["cardio4d.model.NetConfig"] = None, scale: float = THRESHOLD_SCALE
) -> "cardio4d.model.ModelParams":
    """A model that labels phantom voxels by intensity alone.

    The initial convolution copies the input to channel 0; every other convolution is
    zero, so each residual block and the coarse levels contribute nothing. The end
    layer gives logits 0 for background, ``2 s (x − 0.1)`` for LV and ``s x`` for
    myocardium, where ``x`` is the normalized intensity. For noiseless phantoms with
    default intensities its predictions equal the ground truth.
    """
    from cardio4d.model import build

    model = build(config or tiny_net_config(), seed=0)
    for path, t in model.params.items():
        if not path.endswith("gamma"):
            t.data[...] = 0.0

    init = model.params["init.weight"].data
    centre = tuple(k // 2 for k in init.shape[2:])
    init[(0, 0) + centre] = 1.0

    end_w = model.params["end.weight"].data
    end_b = model.params["end.bias"].data
    end_w[(1, 0, 0, 0, 0, 0)] = 2 * scale
    end_b[1] = -0.2 * scale
    end_w[(2, 0, 0, 0, 0, 0)] = scale
    return model


def tiny_phantom_spec(ef: float = 0.4, noise: float = 0.0, **kwargs):
    from cardio4d.data import PhantomSpec

    args = dict(shape=(16, 16, 12, 8), r_ed=(5.0, 5.0, 3.5), wall=1.5, noise=noise)
    args.update(kwargs)
    return PhantomSpec.from_ef(ef, **args)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(42)


@pytest.fixture(scope="session")
def tiny_net():
    """:func:`tiny_net_config`."""
    return tiny_net_config()


@pytest.fixture(scope="session")
def tiny_phantom():
    """A noiseless, fully annotated 16x16x12x8 phantom with EF about 0.4."""
    from cardio4d.data import phantom_generate

    return phantom_generate(tiny_phantom_spec(), seed=1, id="tiny")


@pytest.fixture(scope="session")
def threshold_model(tiny_net):
    """:func:`make_threshold_model` for :func:`tiny_net`."""
    return make_threshold_model(tiny_net)


@pytest.fixture(scope="session")
def tiny_dataset():
    """Small noiseless dataset: 4 training and 2 validation sequences."""
    from cardio4d.data import DatasetSpec, generate_dataset

    return generate_dataset(
        DatasetSpec(n_sequences=6, n_validation=2, phantom=tiny_phantom_spec(), seed=3)
    )


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory, tiny_dataset):
    """Directory containing :func:`tiny_dataset` written by :class:`.FileStore`."""
    from cardio4d.store import FileStore

    path = tmp_path_factory.mktemp("dataset")
    FileStore(path).update_from(tiny_dataset)
    yield path


@pytest.fixture(scope="session")
def checkpoint_path(tmp_path_factory, threshold_model):
    """CKPT file of :func:`threshold_model`."""
    from cardio4d.model import save_checkpoint

    path = tmp_path_factory.mktemp("model").joinpath("threshold.ckpt")
    yield save_checkpoint(threshold_model, path)


@pytest.fixture(scope="session")
def client(threshold_model):
    """A :class:`.starlette.testclient.TestClient` for :mod:`.cardio4d`."""
    from starlette.testclient import TestClient

    from cardio4d.starlette import build_app

    app = build_app(model=threshold_model)

    yield TestClient(app, base_url="https://example.com")
