"""Loss, optimizer and training loop.

The loss for one crop with K frames is

    L = Σ_{labeled t} D(p_true^t, p_pred^t) + Σ_{t=0}^{K−2} ‖p_pred^{t+1} − p_pred^t‖²

where D is the soft Dice loss. Only annotated frames enter the first term; all frames
enter the second.
"""

import csv
import logging
from dataclasses import astuple, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from .common import ConfigError, DataError
from .data import CropSampler, Dataset, Volume4DSequence
from .model import ModelParams, NetConfig, build, forward
from .tensor_engine import (
    Tape,
    Tensor,
    add,
    add_scalar,
    div,
    mul,
    narrow,
    neg,
    scale,
    square,
    sub,
    sum,
    take,
)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Training hyper-parameters."""

    #: Initial learning rate α₀.
    alpha0: float = 1e-3

    #: Number of epochs N_η.
    total_epochs: int = 500

    #: Only 1 is supported.
    batch_size: int = 1

    #: Crop (X, Y, Z, K); :obj:`None` for the network's crop.
    crop: Optional[Tuple[int, int, int, int]] = None

    #: Probability of centering a crop on a foreground voxel.
    fg_prob: float = 0.6

    betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    #: Exponent of the polynomial learning-rate decay.
    power: float = 0.9

    seed: int = 0

    #: ε of the soft Dice loss.
    dice_eps: float = 1e-5

    #: Classes whose Dice losses are averaged.
    dice_classes: Tuple[int, ...] = (1, 2)

    #: Temporal term normalization: "mean" divides each frame pair's squared
    #: difference by the number of voxels × channels; "sum" does not.
    temporal_norm: str = "mean"

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.dice_classes = tuple(self.dice_classes)
        if self.crop is not None:
            self.crop = tuple(self.crop)

        if self.alpha0 <= 0:
            raise ConfigError(f"alpha0 must be positive; got {self.alpha0}")
        if not 0 < self.fg_prob <= 1:
            raise ConfigError(f"fg_prob must be in (0, 1]; got {self.fg_prob}")
        if self.total_epochs < 1:
            raise ConfigError(f"total_epochs must be ≥ 1; got {self.total_epochs}")
        if self.batch_size != 1:
            raise ConfigError("Only batch_size 1 is supported")
        if self.temporal_norm not in ("mean", "sum"):
            raise ConfigError(f"temporal_norm must be 'mean' or 'sum'; got {self.temporal_norm!r}")
        if not self.dice_classes:
            raise ConfigError("dice_classes is empty")


@dataclass
class LossBreakdown:
    dice_term: float
    temporal_term: float
    labeled_frames_used: int
    total: float = field(init=False)

    def __post_init__(self):
        self.total = self.dice_term + self.temporal_term


def soft_dice(
    p_true: Tensor, p_pred: Tensor, eps: float = 1e-5, classes: Sequence[int] = (1, 2)
) -> Tensor:
    """Soft Dice loss of one frame, averaged over `classes`.

    For each class, ``1 − 2 Σ(p_true · p_pred) / (Σ p_true² + Σ p_pred² + eps)``.
    Both arguments have the channel on axis 1.
    """
    if p_true.shape != p_pred.shape:
        raise ValueError(f"soft_dice: shapes {p_true.shape} and {p_pred.shape} differ")
    result = None
    for c in classes:
        t, p = take(p_true, 1, [c]), take(p_pred, 1, [c])
        denom = add_scalar(add(sum(square(t)), sum(square(p))), eps)
        d = add_scalar(neg(scale(div(sum(mul(t, p)), denom), 2.0)), 1.0)
        result = d if result is None else add(result, d)
    return scale(result, 1.0 / len(classes))


def _zero(like: Tensor) -> Tensor:
    return Tensor(0.0, dtype=like.dtype)


def sparse_dice_loss(
    p_pred: Tensor,
    labels: Tensor,
    labeled_mask: Sequence[bool],
    eps: float = 1e-5,
    classes: Sequence[int] = (1, 2),
) -> Tensor:
    """Sum of :func:`soft_dice` over the frames (last axis) with `labeled_mask` set.

    Frames not labeled contribute nothing, neither to the value nor to gradients;
    their entries in `labels` are never read. With no labeled frame the result is 0.
    """
    mask = np.asarray(labeled_mask, dtype=bool)
    if mask.shape != (p_pred.shape[-1],):
        raise ValueError(f"{mask.size} mask entries for {p_pred.shape[-1]} frames")
    result = _zero(p_pred)
    for t in np.flatnonzero(mask):
        d = soft_dice(
            narrow(labels, -1, t, 1), narrow(p_pred, -1, t, 1), eps=eps, classes=classes
        )
        result = add(result, d)
    return result


def temporal_consistency(p_pred: Tensor, normalization: str = "mean") -> Tensor:
    """Sum over consecutive frame pairs of the squared difference of probabilities.

    With `normalization` "mean", each pair's sum of squares is divided by the number
    of batch × channel × voxel entries per frame. Returns 0 for a single frame.
    """
    K = p_pred.shape[-1]
    if K < 2:
        return _zero(p_pred)
    diff = sub(narrow(p_pred, -1, 1, K - 1), narrow(p_pred, -1, 0, K - 1))
    total = sum(square(diff))
    if normalization == "mean":
        return scale(total, 1.0 / (p_pred.size // K))
    elif normalization == "sum":
        return total
    raise ValueError(f"Unknown normalization {normalization!r}")


def total_loss(
    p_pred: Tensor,
    labels: Tensor,
    labeled_mask: Sequence[bool],
    config: Optional[TrainConfig] = None,
) -> Tuple[Tensor, LossBreakdown]:
    """Sparse Dice loss plus the temporal consistency term, with unit weights."""
    config = config or TrainConfig()
    dice = sparse_dice_loss(
        p_pred, labels, labeled_mask, eps=config.dice_eps, classes=config.dice_classes
    )
    temporal = temporal_consistency(p_pred, config.temporal_norm)
    breakdown = LossBreakdown(
        dice_term=dice.item(),
        temporal_term=temporal.item(),
        labeled_frames_used=int(np.count_nonzero(labeled_mask)),
    )
    return add(dice, temporal), breakdown


def lr_schedule(epoch: float, config: Optional[TrainConfig] = None) -> float:
    """Polynomial decay ``α₀ (1 − epoch / N)^power``.

    Raises
    ------
    ValueError
        if `epoch` is outside [0, N].
    """
    config = config or TrainConfig()
    N = config.total_epochs
    if not 0 <= epoch <= N:
        raise ValueError(f"epoch {epoch} outside [0, {N}]")
    return config.alpha0 * (1 - epoch / N) ** config.power


@dataclass
class AdamState:
    """Adam moment estimates."""

    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    #: Number of steps taken.
    t: int = 0

    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, Optional[np.ndarray]],
    state: AdamState,
    lr: float,
) -> AdamState:
    """Apply one Adam update with bias correction to `params`.

    Parameters missing from `grads`, or with a :obj:`None` gradient, are treated as
    having zero gradient.
    """
    b1, b2 = state.betas
    state.t += 1
    c1 = 1 - b1**state.t
    c2 = 1 - b2**state.t

    for path, p in params.items():
        g = grads.get(path)
        if g is None:
            g = np.zeros_like(p.data)
        m = b1 * state.m.get(path, 0.0) + (1 - b1) * g
        v = b2 * state.v.get(path, 0.0) + (1 - b2) * g * g
        state.m[path], state.v[path] = m, v
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.dtype)

    return state


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    dice_term: float
    temporal_term: float
    total: float


@dataclass
class TrainResult:
    #: Model after the final epoch.
    model: ModelParams

    log: List[EpochRecord] = field(default_factory=list)

    @property
    def losses(self) -> List[float]:
        return [r.total for r in self.log]


def train_loop(
    dataset: Union[Dataset, Sequence[Volume4DSequence]],
    config: TrainConfig,
    net: Union[NetConfig, ModelParams, None] = None,
    progress: bool = False,
) -> TrainResult:
    """Train a network on the training sequences of `dataset`.

    Each epoch visits every training sequence once, in an order shuffled per epoch,
    and takes one Adam step on one random crop of it. The result depends only on the
    inputs and ``config.seed``.

    Parameters
    ----------
    net :
        Network to train: a configuration to build with ``config.seed``, or an
        existing model that is updated in place. Default: :meth:`NetConfig.desk`.
    progress :
        Show a :mod:`tqdm` progress bar.

    Raises
    ------
    DataError
        if there are no training sequences.
    NonFiniteError
        if the loss or any intermediate value becomes NaN or infinite.
    """
    sequences = list(dataset.train if isinstance(dataset, Dataset) else dataset)
    if not sequences:
        raise DataError("No training sequences")

    model = net if isinstance(net, ModelParams) else build(net or NetConfig(), config.seed)
    if config.crop is not None and config.crop != model.config.input_extents:
        crop = config.crop if model.config.mode == "seg4d" else config.crop[:3]
        model = model.with_crop(crop)
    crop = model.config.input_extents

    samplers = [CropSampler(seq, crop, config.fg_prob) for seq in sequences]
    rng = np.random.default_rng(config.seed)
    state = AdamState(betas=config.betas, eps=config.adam_eps)
    result = TrainResult(model)

    log.info(
        f"Training {model!r} on {len(sequences)} sequences for {config.total_epochs} "
        f"epochs, crop {crop}"
    )
    for epoch in tqdm(range(config.total_epochs), disable=not progress, desc="epoch"):
        lr = lr_schedule(epoch, config)
        terms = []
        for i in rng.permutation(len(samplers)):
            sample = samplers[i].sample(rng)
            with Tape() as tape:
                probs = forward(model, sample.input)
                loss, breakdown = total_loss(probs, sample.labels, sample.labeled_mask, config)
            tape.backward(loss)
            adam_step(model.params, {k: t.grad for k, t in model.params.items()}, state, lr)
            model.params.zero_grad()
            terms.append((breakdown.dice_term, breakdown.temporal_term, breakdown.total))

        dice, temporal, total = np.mean(terms, axis=0).tolist()
        record = EpochRecord(epoch, lr, dice, temporal, total)
        result.log.append(record)
        log.info(
            f"epoch {epoch} lr {lr:.4e} dice {dice:.5f} temporal {temporal:.5f} "
            f"total {total:.5f}"
        )

    model.info.update(epochs=config.total_epochs, seed=config.seed)
    return result


def write_epoch_log(path: Union[str, Path], records: Sequence[EpochRecord]) -> Path:
    """Write `records` as CSV with header ``epoch,lr,dice_term,temporal_term,total``."""
    path = Path(path)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([fld.name for fld in fields(EpochRecord)])
        writer.writerows(astuple(r) for r in records)
    return path
