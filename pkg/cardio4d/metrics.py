"""Evaluation metrics.

All functions take integer label arrays with axes (X, Y, Z) for a frame or
(X, Y, Z, T) for a sequence, with classes as in :mod:`.data`: 0 background, 1 left
ventricle cavity (LV), 2 myocardium (LVM).
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .common import DataError, MetricError, ShapeError
from .data import LV, LVM, NUM_CLASSES, Dataset, Volume4DSequence
from .model import ModelParams, predict_labels

log = logging.getLogger(__name__)

#: Ejection fractions below this are "reduced".
EF_THRESHOLD = 0.55

#: Foreground classes, by report name.
FOREGROUND = {"lv": LV, "lvm": LVM}

#: Six-connected neighbourhood.
SIX = ndimage.generate_binary_structure(3, 1)


def _check_class(class_id: int) -> None:
    if class_id not in range(NUM_CLASSES):
        raise MetricError(f"Unknown class id {class_id}")


def _check_sequence(labels: np.ndarray) -> None:
    if labels.ndim != 4:
        raise ShapeError(f"Expected (X, Y, Z, T) labels; got shape {labels.shape}")
    if labels.shape[3] < 2:
        raise MetricError("Temporal metrics need at least 2 frames")


def dice_score(pred: np.ndarray, true: np.ndarray, class_id: int) -> float:
    """Dice overlap ``2|A∩B| / (|A| + |B|)`` of one class; 1.0 if both are empty."""
    _check_class(class_id)
    if pred.shape != true.shape:
        raise ShapeError(f"dice_score: shapes {pred.shape} and {true.shape} differ")
    a, b = pred == class_id, true == class_id
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def _onehot(labels: np.ndarray, classes: Sequence[int]) -> np.ndarray:
    return np.stack([labels == c for c in classes]).astype(np.int64)


def _l2_pooled(labels: np.ndarray, classes: Sequence[int], normalize: bool) -> float:
    onehot = _onehot(labels, classes)
    diff = np.diff(onehot, axis=-1)
    per_pair = np.sqrt((diff * diff).sum(axis=(0, 1, 2, 3)))
    value = float(per_pair.mean())
    if normalize:
        count = onehot.sum() / labels.shape[3]
        if count > 0:
            value /= math.sqrt(count)
    return value


def temporal_l2(
    labels: np.ndarray,
    classes: Sequence[int] = (LV, LVM),
    per_class: bool = False,
    normalize: bool = True,
) -> float:
    """L2 norm of the first-order time derivative of one-hot labels.

    For each pair of consecutive frames, the square root of the sum over voxels and
    `classes` of squared one-hot differences; the mean over pairs is returned. With
    `normalize`, the result is divided by the square root of the mean number of
    voxels per frame in `classes`. With `per_class`, the metric is computed for each
    class separately and averaged.

    Raises
    ------
    MetricError
        if there are fewer than 2 frames.
    """
    _check_sequence(labels)
    for c in classes:
        _check_class(c)
    if per_class:
        return float(np.mean([_l2_pooled(labels, [c], normalize) for c in classes]))
    return _l2_pooled(labels, classes, normalize)


def surface(mask: np.ndarray) -> np.ndarray:
    """Coordinates of the boundary voxels of `mask`.

    A boundary voxel belongs to `mask` and has at least one six-connected neighbour
    outside it; positions outside the array count as outside the mask.
    """
    interior = ndimage.binary_erosion(mask, structure=SIX, border_value=0)
    return np.argwhere(mask & ~interior)


def average_surface_distance(a: np.ndarray, b: np.ndarray) -> Optional[float]:
    """Symmetric average surface distance between two masks, in voxels.

    The mean, over the boundary voxels of both masks, of the Euclidean distance to
    the nearest boundary voxel of the other mask. 0.0 if both are empty; :obj:`None`
    if exactly one is.
    """
    sa, sb = surface(a), surface(b)
    if len(sa) == 0 and len(sb) == 0:
        return 0.0
    elif len(sa) == 0 or len(sb) == 0:
        return None
    d_ab, _ = cKDTree(sb).query(sa, k=1)
    d_ba, _ = cKDTree(sa).query(sb, k=1)
    return math.fsum(np.concatenate([d_ab, d_ba]).tolist()) / (len(sa) + len(sb))


@dataclass
class SurfaceDistance:
    #: Mean over included frame pairs (and classes).
    value: float

    #: Per-class, per-pair distances; :obj:`None` where excluded.
    pairs: Dict[int, List[Optional[float]]]

    #: Number of (class, pair) combinations in which exactly one frame was empty.
    excluded: int


def surface_distance_detail(
    labels: np.ndarray, classes: Sequence[int] = (LV, LVM), per_class: bool = True
) -> SurfaceDistance:
    """Average surface distance between consecutive frames, with per-pair values.

    With `per_class`, distances are computed for each class in `classes`; otherwise
    for the union of `classes`, reported under the key -1. Pairs where one frame
    has the class and the other does not are excluded from the mean and counted.
    """
    _check_sequence(labels)
    for c in classes:
        _check_class(c)
    groups = {c: [c] for c in classes} if per_class else {-1: list(classes)}

    pairs: Dict[int, List[Optional[float]]] = {}
    for key, members in groups.items():
        mask = np.isin(labels, members)
        pairs[key] = [
            average_surface_distance(mask[..., t], mask[..., t + 1])
            for t in range(labels.shape[3] - 1)
        ]

    included = [d for values in pairs.values() for d in values if d is not None]
    excluded = sum(d is None for values in pairs.values() for d in values)
    value = math.fsum(included) / len(included) if included else 0.0
    return SurfaceDistance(value, pairs, excluded)


def surface_distance_consecutive(
    labels: np.ndarray, classes: Sequence[int] = (LV, LVM), per_class: bool = True
) -> float:
    """Mean symmetric surface distance between consecutive frames, in voxels."""
    return surface_distance_detail(labels, classes, per_class).value


@dataclass
class EjectionFraction:
    #: 1 − min volume / max volume.
    ef: float

    #: :obj:`True` if `ef` is below :data:`EF_THRESHOLD`.
    reduced: bool

    #: LV cavity volume per frame, in mL.
    volumes_ml: List[float]

    #: Frame of maximum (end-diastolic) and minimum (end-systolic) volume.
    ed_frame: int
    es_frame: int


def ef_from_volumes(volumes: Sequence[float]) -> EjectionFraction:
    """Ejection fraction from per-frame cavity volumes.

    Raises
    ------
    MetricError
        if every volume is zero.
    """
    v = np.asarray(volumes, dtype=float)
    if v.size == 0 or v.max() <= 0:
        raise MetricError("No left-ventricle volume in any frame")
    ed, es = int(v.argmax()), int(v.argmin())
    ef = 1.0 - float(v[es] / v[ed])
    return EjectionFraction(ef, ef < EF_THRESHOLD, v.tolist(), ed, es)


def ejection_fraction(labels: np.ndarray, voxel_volume_ml: float = 1e-3) -> EjectionFraction:
    """Ejection fraction from the LV cavity volume of every frame."""
    if labels.ndim != 4:
        raise ShapeError(f"Expected (X, Y, Z, T) labels; got shape {labels.shape}")
    counts = (labels == LV).sum(axis=(0, 1, 2))
    return ef_from_volumes(counts * voxel_volume_ml)


@dataclass
class EFClassification:
    """Detection of reduced ejection fraction against reference values."""

    true_positive: int
    false_negative: int
    true_negative: int
    false_positive: int

    @property
    def sensitivity(self) -> Optional[float]:
        n = self.true_positive + self.false_negative
        return self.true_positive / n if n else None

    @property
    def specificity(self) -> Optional[float]:
        n = self.true_negative + self.false_positive
        return self.true_negative / n if n else None

    def to_dict(self) -> Dict:
        return dict(asdict(self), sensitivity=self.sensitivity, specificity=self.specificity)


def ef_classification(
    predicted: Sequence[float], reference: Sequence[float], threshold: float = EF_THRESHOLD
) -> EFClassification:
    """Count agreement of ``ef < threshold`` between `predicted` and `reference`."""
    if len(predicted) != len(reference):
        raise ValueError(f"{len(predicted)} predictions for {len(reference)} references")
    p = np.asarray(predicted) < threshold
    r = np.asarray(reference) < threshold
    return EFClassification(
        true_positive=int((p & r).sum()),
        false_negative=int((~p & r).sum()),
        true_negative=int((~p & ~r).sum()),
        false_positive=int((p & ~r).sum()),
    )


# Predictors: callables mapping a sequence to predicted labels

Predictor = Callable[[Volume4DSequence], np.ndarray]


@dataclass
class ModelPredictor:
    model: ModelParams
    overlap: float = 0.5

    def __call__(self, seq: Volume4DSequence) -> np.ndarray:
        return predict_labels(self.model, seq, self.overlap)


class GroundTruthPredictor:
    """Return the reference labels of every frame."""

    def __call__(self, seq: Volume4DSequence) -> np.ndarray:
        if seq.labels is None:
            raise DataError(f"{seq.id}: no labels")
        return seq.labels


@dataclass
class ConstantPredictor:
    """Predict `label` everywhere."""

    label: int = 0

    def __call__(self, seq: Volume4DSequence) -> np.ndarray:
        return np.full(seq.shape, self.label, dtype=np.int8)


@dataclass
class SequenceRecord:
    id: str
    #: Mean Dice over annotated frames, by class name.
    dice: Dict[str, float]
    annotated_frames: int
    smoothness_l2: float
    smoothness_surf: float
    #: Frame pairs excluded from `smoothness_surf`.
    surf_excluded: int
    ef: Optional[float]
    ef_reduced: Optional[bool]
    ed_frame: Optional[int]
    es_frame: Optional[int]
    reference_ef: Optional[float]

    @property
    def ef_error(self) -> Optional[float]:
        if self.ef is None or self.reference_ef is None:
            return None
        return abs(self.ef - self.reference_ef)


@dataclass
class MetricsReport:
    #: Mean Dice over all annotated frames of all sequences, by class name.
    dice: Dict[str, float]
    smoothness_l2: float
    smoothness_surf: float
    #: Mean ejection fraction over sequences where it is defined.
    ef: Optional[float]
    ef_reduced: Optional[bool]
    #: Mean absolute error of ejection fraction against the reference.
    ef_mae: Optional[float]
    classification: Optional[EFClassification]
    sequences: List[SequenceRecord] = field(default_factory=list)

    @property
    def mean_dice(self) -> float:
        return float(np.mean(list(self.dice.values())))

    def to_dict(self) -> Dict:
        result = asdict(self)
        result["mean_dice"] = self.mean_dice
        result["classification"] = self.classification and self.classification.to_dict()
        for record, d in zip(self.sequences, result["sequences"]):
            d["ef_error"] = record.ef_error
        return result

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path

    @classmethod
    def read(cls, path: Union[str, Path]) -> "MetricsReport":
        """Inverse of :meth:`write`.

        Raises
        ------
        DataError
            if the file cannot be read or is not a report.
        """
        path = Path(path)
        try:
            data = json.loads(path.read_text())
            data.pop("mean_dice", None)
            if c := data.get("classification"):
                data["classification"] = EFClassification(
                    **{k: c[k] for k in ("true_positive", "false_negative",
                                         "true_negative", "false_positive")}
                )
            data["sequences"] = [
                SequenceRecord(**{k: v for k, v in d.items() if k != "ef_error"})
                for d in data.get("sequences", [])
            ]
            return cls(**data)
        except (OSError, ValueError, TypeError, KeyError, AttributeError) as e:
            raise DataError(f"Cannot read metrics report {path}: {e}") from None


def _evaluate_one(
    predictor: Predictor, seq: Volume4DSequence, per_class: bool
) -> tuple:
    if seq.labels is None:
        raise DataError(f"{seq.id}: cannot evaluate without labels")
    pred = predictor(seq)
    frames = seq.annotated_frames
    if not frames:
        raise DataError(f"{seq.id}: no annotated frames to compute Dice on")
    scores = {
        name: [dice_score(pred[..., t], seq.labels[..., t], c) for t in frames]
        for name, c in FOREGROUND.items()
    }
    surf = surface_distance_detail(pred)

    try:
        ef = ejection_fraction(pred, seq.voxel_volume_ml)
    except MetricError:
        log.warning(f"{seq.id}: no LV predicted in any frame; ejection fraction undefined")
        ef = None
    reference = seq.meta.get("analytic_ef")
    if reference is None:
        reference = ejection_fraction(seq.labels, seq.voxel_volume_ml).ef

    record = SequenceRecord(
        id=seq.id,
        dice={k: float(np.mean(v)) for k, v in scores.items()},
        annotated_frames=len(frames),
        smoothness_l2=temporal_l2(pred, per_class=per_class),
        smoothness_surf=surf.value,
        surf_excluded=surf.excluded,
        ef=None if ef is None else ef.ef,
        ef_reduced=None if ef is None else ef.reduced,
        ed_frame=None if ef is None else ef.ed_frame,
        es_frame=None if ef is None else ef.es_frame,
        reference_ef=float(reference),
    )
    return record, scores


def evaluate(
    predictor: Union[Predictor, ModelParams],
    dataset: Union[Dataset, Sequence[Volume4DSequence]],
    per_class: bool = False,
) -> MetricsReport:
    """Evaluate `predictor` on the validation sequences of `dataset`.

    Dice is computed on annotated frames only; smoothness and ejection fraction on
    all predicted frames. `per_class` selects the per-class variant of
    :func:`temporal_l2`; surface distances are always per class.

    Raises
    ------
    DataError
        if there are no sequences to evaluate.
    """
    if isinstance(predictor, ModelParams):
        predictor = ModelPredictor(predictor)
    sequences = list(dataset.validation if isinstance(dataset, Dataset) else dataset)
    if not sequences:
        raise DataError("No validation sequences to evaluate")

    records = []
    all_scores: Dict[str, List[float]] = {k: [] for k in FOREGROUND}
    for seq in sequences:
        record, scores = _evaluate_one(predictor, seq, per_class)
        records.append(record)
        for k, v in scores.items():
            all_scores[k].extend(v)
        log.info(f"{seq.id}: Dice {record.dice} EF {record.ef}")

    defined = [r for r in records if r.ef is not None]
    ef = float(np.mean([r.ef for r in defined])) if defined else None
    return MetricsReport(
        dice={k: float(np.mean(v)) for k, v in all_scores.items()},
        smoothness_l2=float(np.mean([r.smoothness_l2 for r in records])),
        smoothness_surf=float(np.mean([r.smoothness_surf for r in records])),
        ef=ef,
        ef_reduced=None if ef is None else ef < EF_THRESHOLD,
        ef_mae=float(np.mean([r.ef_error for r in defined])) if defined else None,
        classification=ef_classification(
            [r.ef for r in defined], [r.reference_ef for r in defined]
        )
        if defined
        else None,
        sequences=records,
    )


@dataclass
class Comparison:
    """Outcome of :func:`compare_reports`."""

    smoother_l2: bool
    smoother_surf: bool
    dice_difference: float
    comparable_dice: bool

    @property
    def passed(self) -> bool:
        return self.smoother_l2 and self.smoother_surf and self.comparable_dice


def compare_reports(
    report: MetricsReport,
    baseline: MetricsReport,
    slack: float = 0.05,
    dice_tolerance: float = 0.05,
) -> Comparison:
    """Check that `report` is temporally smoother than `baseline` with comparable Dice.

    Smoothness values of `report` may exceed those of `baseline` by the relative
    `slack`; mean Dice must agree within `dice_tolerance`.
    """
    diff = report.mean_dice - baseline.mean_dice
    return Comparison(
        smoother_l2=report.smoothness_l2 <= baseline.smoothness_l2 * (1 + slack),
        smoother_surf=report.smoothness_surf <= baseline.smoothness_surf * (1 + slack),
        dice_difference=diff,
        comparable_dice=abs(diff) <= dice_tolerance,
    )
