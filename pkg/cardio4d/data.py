"""Synthetic cardiac sequences, crop sampling and volume files.

The phantom is a beating left ventricle: an ellipsoidal blood cavity (class 1)
surrounded by a myocardial shell of fixed thickness (class 2). The cavity radii follow

    r(t) = r_ed − (r_ed − r_es) · sin²(π t / T)

so frame 0 is end-diastole (largest cavity) and frame T/2 is end-systole.
"""

import logging
from dataclasses import dataclass, field, replace
from math import pi
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import yaml

from .common import (
    BadMagicError,
    ConfigError,
    DataError,
    FormatError,
    ManifestError,
    PhantomError,
    Reader,
    check_dims,
    derive_seed,
)
from .tensor_engine import Tensor

log = logging.getLogger(__name__)

#: Label values.
BACKGROUND, LV, LVM = 0, 1, 2

NUM_CLASSES = 3

#: Intensity range mapped to [-1, 1] by :func:`normalize_intensity`.
HU_RANGE = 1024.0

#: Annotation patterns understood by :func:`annotation_frames`.
PATTERNS = ("ed_es", "every4", "every2", "all")

SPLITS = ("train", "validation")

VOL4_MAGIC = b"VOL4"
VOL4_VERSION = 1
VOL4_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("i1")}


@dataclass
class PhantomSpec:
    """Geometry and intensities of a synthetic sequence."""

    #: Grid extents (X, Y, Z, T).
    shape: Tuple[int, int, int, int] = (48, 48, 32, 20)

    #: Cavity semi-axes at end-diastole, in voxels.
    r_ed: Tuple[float, float, float] = (13.0, 12.0, 10.0)

    #: Cavity semi-axes at end-systole, in voxels.
    r_es: Tuple[float, float, float] = (9.6, 8.8, 7.4)

    #: Myocardial wall thickness, in voxels.
    wall: float = 3.0

    #: Ellipsoid center; :obj:`None` for the grid center.
    center: Optional[Tuple[float, float, float]] = None

    #: Mean intensities (HU) of cavity, myocardium and background.
    hu_cavity: float = 350.0
    hu_myocardium: float = 50.0
    hu_background: float = -50.0

    #: Standard deviation of additive Gaussian noise (HU).
    noise: float = 25.0

    #: Voxel size in mm.
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    #: Interval between frames in ms.
    frame_ms: float = 50.0

    def __post_init__(self):
        self.shape = tuple(self.shape)
        self.r_ed = tuple(map(float, self.r_ed))
        self.r_es = tuple(map(float, self.r_es))
        if self.center is None:
            self.center = tuple((L - 1) / 2 for L in self.shape[:3])

        if len(self.shape) != 4 or min(self.shape) < 1:
            raise PhantomError(f"Invalid phantom grid {self.shape}")
        if min(self.r_es) <= 0 or any(a > b for a, b in zip(self.r_es, self.r_ed)):
            raise PhantomError(f"Need 0 < r_es ≤ r_ed; got {self.r_es}, {self.r_ed}")
        for c, r, L in zip(self.center, self.r_ed, self.shape):
            if c - r - self.wall < 0 or c + r + self.wall > L - 1:
                raise PhantomError(
                    f"Myocardial shell (radius {r + self.wall}) exceeds grid {self.shape}"
                )

    @classmethod
    def from_ef(cls, ef: float, **kwargs) -> "PhantomSpec":
        """Spec whose end-systolic radii give the ejection fraction `ef`.

        Every end-diastolic semi-axis is scaled by the same factor (1 − ef)^⅓.
        """
        if not 0 <= ef < 1:
            raise PhantomError(f"Ejection fraction must be in [0, 1); got {ef}")
        r_ed = kwargs.pop("r_ed", cls.r_ed)
        k = (1 - ef) ** (1 / 3)
        return cls(r_ed=r_ed, r_es=tuple(r * k for r in r_ed), **kwargs)

    @property
    def analytic_ef(self) -> float:
        """1 − V_es / V_ed of the continuous ellipsoids."""
        return 1 - float(np.prod(self.r_es) / np.prod(self.r_ed))

    def radii(self, t: int) -> np.ndarray:
        s = np.sin(pi * t / self.shape[3]) ** 2
        return np.array(self.r_ed) - (np.array(self.r_ed) - np.array(self.r_es)) * s


def ellipsoid_mask(shape: Sequence[int], center: Sequence[float], radii: Sequence[float]):
    """Boolean mask of grid points inside the ellipsoid."""
    axes = [((np.arange(L) - c) / r) ** 2 for L, c, r in zip(shape, center, radii)]
    return (axes[0][:, None, None] + axes[1][None, :, None] + axes[2][None, None, :]) <= 1.0


@dataclass
class Volume4DSequence:
    """A 4D image with optional labels.

    Arrays have axes (X, Y, Z, T). Labels are retained for every frame, but only
    frames with :attr:`annotated` set are available for training.
    """

    id: str

    #: Intensities in HU.
    intensities: np.ndarray

    #: Class labels, or :obj:`None` for an unlabeled image.
    labels: Optional[np.ndarray] = None

    #: Per-frame annotation flags.
    annotated: Optional[np.ndarray] = None

    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    frame_ms: float = 50.0

    #: Other information, e.g. "split" and "analytic_ef".
    meta: Dict = field(default_factory=dict)

    def __post_init__(self):
        if self.intensities.ndim != 4:
            raise DataError(f"{self.id}: expected (X, Y, Z, T) intensities")
        T = self.intensities.shape[3]
        if self.labels is not None:
            if self.labels.shape != self.intensities.shape:
                raise DataError(
                    f"{self.id}: labels {self.labels.shape} ≠ intensities "
                    f"{self.intensities.shape}"
                )
            if self.labels.size and (self.labels.min() < 0 or self.labels.max() > LVM):
                raise DataError(f"{self.id}: label values outside {{0, 1, 2}}")
        if self.annotated is None:
            self.annotated = np.full(T, self.labels is not None)
        self.annotated = np.asarray(self.annotated, dtype=bool)
        if self.annotated.shape != (T,):
            raise DataError(f"{self.id}: {self.annotated.size} annotation flags for {T} frames")
        if self.labels is None and self.annotated.any():
            raise DataError(f"{self.id}: annotated frames without labels")

    def __repr__(self) -> str:
        return (
            f"<Volume4DSequence {self.id!r} {self.shape} "
            f"{int(self.annotated.sum())}/{self.n_frames} annotated>"
        )

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.intensities.shape

    @property
    def n_frames(self) -> int:
        return self.shape[3]

    @property
    def annotated_frames(self) -> List[int]:
        return np.flatnonzero(self.annotated).tolist()

    @property
    def voxel_volume_ml(self) -> float:
        return float(np.prod(self.spacing)) / 1000.0

    @property
    def split(self) -> Optional[str]:
        return self.meta.get("split")


def phantom_generate(spec: PhantomSpec, seed: int, id: str = "phantom") -> Volume4DSequence:
    """Generate a fully annotated phantom sequence.

    The result depends only on `spec` and `seed`. The analytic ejection fraction is
    stored as ``meta["analytic_ef"]``.
    """
    rng = np.random.default_rng(seed)
    labels = np.zeros(spec.shape, dtype=np.int8)
    for t in range(spec.shape[3]):
        r = spec.radii(t)
        outer = ellipsoid_mask(spec.shape[:3], spec.center, r + spec.wall)
        cavity = ellipsoid_mask(spec.shape[:3], spec.center, r)
        labels[..., t][outer] = LVM
        labels[..., t][cavity] = LV

    means = np.array([spec.hu_background, spec.hu_cavity, spec.hu_myocardium])
    intensities = means[labels] + rng.normal(0.0, spec.noise, spec.shape)

    return Volume4DSequence(
        id=id,
        intensities=intensities.astype(np.float32),
        labels=labels,
        spacing=tuple(spec.spacing),
        frame_ms=spec.frame_ms,
        meta=dict(analytic_ef=spec.analytic_ef),
    )


def annotation_frames(pattern: str, n_frames: int) -> List[int]:
    """Indices of annotated frames for a named pattern.

    "ed_es" gives end-diastole (frame 0) and end-systole (frame T // 2); "every4" and
    "every2" every fourth or second frame from 0; "all" every frame.
    """
    if pattern == "ed_es":
        return sorted({0, n_frames // 2})
    elif pattern == "every4":
        return list(range(0, n_frames, 4))
    elif pattern == "every2":
        return list(range(0, n_frames, 2))
    elif pattern == "all":
        return list(range(n_frames))
    raise ValueError(f"Unknown annotation pattern {pattern!r}; expected one of {PATTERNS}")


def sparsify(seq: Volume4DSequence, keep: Iterable[int]) -> Volume4DSequence:
    """Copy of `seq` in which only frames in `keep` are annotated.

    Labels of the other frames are kept for evaluation.

    Raises
    ------
    ValueError
        if `keep` is empty or contains indices outside the sequence.
    """
    keep = sorted(set(keep))
    if not keep:
        raise ValueError("Cannot sparsify to zero annotated frames")
    if keep[0] < 0 or keep[-1] >= seq.n_frames:
        raise ValueError(f"Frame indices {keep} outside [0, {seq.n_frames})")
    if seq.labels is None:
        raise DataError(f"{seq.id}: no labels to annotate")
    annotated = np.zeros(seq.n_frames, dtype=bool)
    annotated[keep] = True
    return replace(seq, annotated=annotated, meta=dict(seq.meta))


def normalize_intensity(v: np.ndarray) -> np.ndarray:
    """Clamp to ±1024 HU and scale to [-1, 1]."""
    return (np.clip(v, -HU_RANGE, HU_RANGE) / HU_RANGE).astype(np.float32)


@dataclass
class CropSample:
    """One training crop."""

    #: Normalized intensities, shape (1, 1, X, Y, Z, K).
    input: Tensor

    #: One-hot labels, shape (1, 3, X, Y, Z, K); zero on frames not annotated.
    labels: Tensor

    #: Per-frame annotation flags within the crop window.
    labeled_mask: np.ndarray

    #: Offset of the crop in the (padded) sequence.
    origin: Tuple[int, int, int, int]

    #: "foreground" or "background".
    centered_on: str


class CropSampler:
    """Draw random crops from one sequence.

    Sequences smaller than the crop are padded at the end of each short axis with
    −1024 HU (−1 after normalization) and background labels. Crop centers are
    foreground voxels of annotated frames with probability `fg_prob`, otherwise
    background voxels of annotated frames, so every crop window contains at least one
    annotated frame.

    Raises
    ------
    DataError
        if the sequence has no annotated frame.
    """

    def __init__(self, seq: Volume4DSequence, crop_shape: Sequence[int], fg_prob: float = 0.6):
        if not 0 < fg_prob <= 1:
            raise ConfigError(f"fg_prob must be in (0, 1]; got {fg_prob}")
        if len(crop_shape) != 4:
            raise ConfigError(f"crop must have 4 extents; got {crop_shape}")
        if not seq.annotated.any():
            raise DataError(f"{seq.id}: no annotated frames to sample crops from")

        self.id = seq.id
        self.crop = tuple(crop_shape)
        self.fg_prob = fg_prob

        pad = [(0, max(0, c - L)) for c, L in zip(self.crop, seq.shape)]
        self.volume = np.pad(normalize_intensity(seq.intensities), pad, constant_values=-1.0)
        self.labels = np.pad(seq.labels, pad, constant_values=BACKGROUND)
        self.annotated = np.pad(seq.annotated, pad[3], constant_values=False)
        self.shape = self.volume.shape

        in_annotated = self.annotated[np.newaxis, np.newaxis, np.newaxis, :]
        self.fg = np.flatnonzero((self.labels != BACKGROUND) & in_annotated)
        self.bg = np.flatnonzero((self.labels == BACKGROUND) & in_annotated)
        if self.fg.size == 0:
            log.warning(f"{seq.id}: no foreground in annotated frames; crops on background")

    def sample_origin(self, rng: np.random.Generator) -> Tuple[Tuple[int, ...], str]:
        """Draw a crop origin and report whether it is centered on foreground."""
        u = rng.random()
        if self.fg.size and (u < self.fg_prob or self.bg.size == 0):
            centered_on, pool = "foreground", self.fg
        else:
            centered_on, pool = "background", self.bg
        center = np.unravel_index(pool[rng.integers(pool.size)], self.shape)
        origin = tuple(
            int(min(max(c - k // 2, 0), L - k)) for c, k, L in zip(center, self.crop, self.shape)
        )
        return origin, centered_on

    def sample(self, rng: np.random.Generator) -> CropSample:
        origin, centered_on = self.sample_origin(rng)
        return self.crop_at(origin, centered_on)

    def crop_at(self, origin: Sequence[int], centered_on: str = "") -> CropSample:
        window = tuple(slice(o, o + k) for o, k in zip(origin, self.crop))
        mask = self.annotated[window[3]].copy()
        onehot = np.eye(NUM_CLASSES, dtype=np.float64)[self.labels[window]]
        onehot = np.moveaxis(onehot, -1, 0) * mask
        return CropSample(
            input=Tensor(self.volume[window][np.newaxis, np.newaxis]),
            labels=Tensor(onehot[np.newaxis]),
            labeled_mask=mask,
            origin=tuple(origin),
            centered_on=centered_on,
        )


def sample_crop(
    seq: Volume4DSequence,
    crop_shape: Sequence[int],
    fg_prob: float = 0.6,
    rng: Optional[np.random.Generator] = None,
) -> CropSample:
    """Draw one crop; see :class:`CropSampler`."""
    return CropSampler(seq, crop_shape, fg_prob).sample(rng or np.random.default_rng())


# VOL4 volume files


@dataclass
class VolumeFile:
    """Contents of one VOL4 file."""

    #: float32 intensities or int8 labels.
    data: np.ndarray

    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    frame_ms: float = 0.0

    #: Per-frame annotation flags (label files only).
    annotated: Optional[np.ndarray] = None


def encode_volume(vf: VolumeFile) -> bytes:
    """Serialize `vf` in the VOL4 format.

    Layout, little-endian: magic "VOL4"; u16 version; u8 dtype code (0 float32,
    1 int8 labels); u8 rank; u32 extents; 3 × f32 spacing in mm and f32 frame interval
    in ms; for label files one flag byte per frame (last axis); then the values in
    row-major order with the last axis fastest.
    """
    data = vf.data
    if data.dtype.kind == "f":
        code = 0
    elif data.dtype.kind in "iu" and data.dtype.itemsize == 1:
        code = 1
    else:
        raise FormatError(f"Cannot store dtype {data.dtype} in VOL4")
    dims = check_dims(data.shape)

    parts = [
        VOL4_MAGIC,
        np.array([VOL4_VERSION], "<u2").tobytes(),
        np.array([code, len(dims)], "u1").tobytes(),
        np.array(dims, "<u4").tobytes(),
        np.array(tuple(vf.spacing) + (vf.frame_ms,), "<f4").tobytes(),
    ]
    if code == 1:
        flags = np.zeros(dims[-1], bool) if vf.annotated is None else vf.annotated
        if len(flags) != dims[-1]:
            raise FormatError(f"{len(flags)} annotation flags for {dims[-1]} frames")
        parts.append(np.asarray(flags, "u1").tobytes())
    parts.append(np.ascontiguousarray(data, VOL4_DTYPES[code]).tobytes())
    return b"".join(parts)


def decode_volume(buf: bytes, what: str = "volume") -> VolumeFile:
    """Inverse of :func:`encode_volume`.

    Raises
    ------
    BadMagicError
        if `buf` does not start with "VOL4".
    DimensionOverflowError
        if the declared extents are empty, too many or too large.
    TruncatedError
        if the payload is shorter or longer than the header declares.
    FormatError
        for an unknown version or dtype code.
    """
    if bytes(buf[:4]) != VOL4_MAGIC:
        raise BadMagicError(f"{what}: expected magic {VOL4_MAGIC!r}; got {bytes(buf[:4])!r}")
    r = Reader(buf, what)
    r.take(4)
    version, code, ndim = r.unpack("HBB")
    if version != VOL4_VERSION:
        raise FormatError(f"{what}: unsupported VOL4 version {version}")
    if code not in VOL4_DTYPES:
        raise FormatError(f"{what}: unknown dtype code {code}")
    dims = check_dims(r.unpack(f"{ndim}I"))
    *spacing, frame_ms = r.unpack("4f")

    annotated = None
    if code == 1:
        annotated = r.array("u1", (dims[-1],)).astype(bool)
    data = r.array(VOL4_DTYPES[code].str, dims)
    r.finish()
    return VolumeFile(data, tuple(spacing), frame_ms, annotated)


def write_volume(path: Union[str, Path], vf: VolumeFile) -> Path:
    path = Path(path)
    path.write_bytes(encode_volume(vf))
    return path


def read_volume(path: Union[str, Path]) -> VolumeFile:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise DataError(f"Cannot read volume {path}: {e}") from None
    return decode_volume(buf, what=str(path))


def sequence_files(seq: Volume4DSequence) -> Tuple[VolumeFile, Optional[VolumeFile]]:
    """Intensity and label :class:`VolumeFile` for `seq`."""
    image = VolumeFile(seq.intensities.astype(np.float32), seq.spacing, seq.frame_ms)
    if seq.labels is None:
        return image, None
    labels = VolumeFile(seq.labels.astype(np.int8), seq.spacing, seq.frame_ms, seq.annotated)
    return image, labels


def sequence_from_files(
    id: str, image: VolumeFile, labels: Optional[VolumeFile] = None, meta: Optional[Dict] = None
) -> Volume4DSequence:
    return Volume4DSequence(
        id=id,
        intensities=image.data.astype(np.float32),
        labels=None if labels is None else labels.data,
        annotated=None if labels is None else labels.annotated,
        spacing=image.spacing,
        frame_ms=image.frame_ms,
        meta=meta or {},
    )


# Manifest and datasets


def manifest_entry(seq: Volume4DSequence, intensity_path: str, label_path: str) -> Dict:
    entry = dict(
        id=seq.id,
        intensity_path=intensity_path,
        label_path=label_path,
        split=seq.split or "train",
        annotated_frames=seq.annotated_frames,
    )
    if "analytic_ef" in seq.meta:
        entry["analytic_ef"] = float(seq.meta["analytic_ef"])
    return entry


def write_manifest(path: Union[str, Path], entries: Sequence[Dict]) -> Path:
    path = Path(path)
    path.write_text(yaml.safe_dump(dict(sequences=list(entries)), sort_keys=False))
    return path


@dataclass
class Dataset:
    train: List[Volume4DSequence] = field(default_factory=list)
    validation: List[Volume4DSequence] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.train) + len(self.validation)

    def __iter__(self):
        yield from self.train
        yield from self.validation

    def summary(self) -> Dict:
        """Sequence counts, annotated-frame counts and annotated fraction per split."""
        result = {}
        for split in SPLITS:
            seqs = getattr(self, split)
            annotated = [int(s.annotated.sum()) for s in seqs]
            frames = sum(s.n_frames for s in seqs)
            result[split] = dict(
                sequences=len(seqs),
                annotated_frames=annotated,
                annotated_fraction=sum(annotated) / frames if frames else 0.0,
            )
        return result


_REQUIRED = ("id", "intensity_path", "label_path", "split", "annotated_frames")


def load_entry(entry: Dict, base: Path) -> Volume4DSequence:
    missing = [k for k in _REQUIRED if k not in entry]
    if missing:
        raise ManifestError(f"Manifest entry {entry.get('id')!r} lacks {missing}")
    if entry["split"] not in SPLITS:
        raise ManifestError(f"{entry['id']}: unknown split {entry['split']!r}")

    paths = [base / entry[k] for k in ("intensity_path", "label_path")]
    for p in paths:
        if not p.exists():
            raise DataError(f"{entry['id']}: missing file {p}")

    meta = dict(split=entry["split"])
    if "analytic_ef" in entry:
        meta["analytic_ef"] = float(entry["analytic_ef"])
    seq = sequence_from_files(entry["id"], read_volume(paths[0]), read_volume(paths[1]), meta)
    return sparsify(seq, entry["annotated_frames"])


def load_manifest(path: Union[str, Path]) -> Dataset:
    """Load a dataset listed in the YAML manifest at `path`.

    Paths in the manifest are relative to its directory. The manifest's
    ``annotated_frames`` override the flags stored in the label files.

    Raises
    ------
    ManifestError
        for unparseable YAML, missing fields, unknown splits or duplicate ids.
    DataError
        if a listed file does not exist.
    """
    path = Path(path)
    try:
        content = yaml.safe_load(path.read_text())
    except OSError as e:
        raise DataError(f"Cannot read manifest {path}: {e}") from None
    except yaml.YAMLError as e:
        raise ManifestError(f"Cannot parse manifest {path}: {e}") from None
    if not isinstance(content, dict) or not isinstance(content.get("sequences"), list):
        raise ManifestError(f"{path}: expected a 'sequences' list")

    dataset = Dataset()
    seen = set()
    for entry in content["sequences"]:
        if not isinstance(entry, dict):
            raise ManifestError(f"{path}: invalid entry {entry!r}")
        if entry.get("id") in seen:
            raise ManifestError(f"{path}: duplicate sequence id {entry['id']!r}")
        seen.add(entry.get("id"))
        seq = load_entry(entry, path.parent)
        getattr(dataset, seq.split).append(seq)

    log.info(
        f"Loaded {len(dataset.train)} training and {len(dataset.validation)} validation "
        f"sequences from {path}"
    )
    return dataset


@dataclass
class DatasetSpec:
    """Recipe for a synthetic dataset."""

    n_sequences: int = 10
    n_validation: int = 2

    #: Analytic ejection fractions are evenly spaced over this range, then shuffled.
    ef_range: Tuple[float, float] = (0.30, 0.70)

    #: Annotation patterns, cycled over training sequences. Validation sequences use
    #: "ed_es" and "all" alternately.
    patterns: Tuple[str, ...] = PATTERNS

    phantom: PhantomSpec = field(default_factory=PhantomSpec)

    seed: int = 0

    def __post_init__(self):
        if self.n_sequences < 1:
            raise ConfigError(f"Need at least one sequence; got {self.n_sequences}")
        if not 0 <= self.n_validation < self.n_sequences:
            raise ConfigError(
                f"n_validation must be in [0, {self.n_sequences}); got {self.n_validation}"
            )
        for p in self.patterns:
            if p not in PATTERNS:
                raise ConfigError(f"Unknown annotation pattern {p!r}")


def generate_dataset(spec: Optional[DatasetSpec] = None) -> Dataset:
    """Generate phantom sequences with a train/validation split.

    Sequence ``i`` has id ``phantom<i>`` and is generated from a seed derived from
    ``spec.seed`` and its id, so any subset can be regenerated independently.
    """
    spec = spec or DatasetSpec()
    rng = np.random.default_rng(spec.seed)
    efs = rng.permutation(np.linspace(*spec.ef_range, spec.n_sequences))
    n_train = spec.n_sequences - spec.n_validation
    T = spec.phantom.shape[3]

    geometry = {
        k: getattr(spec.phantom, k)
        for k in ("shape", "r_ed", "wall", "center", "hu_cavity", "hu_myocardium",
                  "hu_background", "noise", "spacing", "frame_ms")
    }

    dataset = Dataset()
    for i, ef in enumerate(efs):
        id = f"phantom{i:02d}"
        if i < n_train:
            split, pattern = "train", spec.patterns[i % len(spec.patterns)]
        else:
            split, pattern = "validation", ("ed_es", "all")[(i - n_train) % 2]

        seq = phantom_generate(
            PhantomSpec.from_ef(float(ef), **geometry), derive_seed(spec.seed, id), id=id
        )
        seq = sparsify(seq, annotation_frames(pattern, T))
        seq.meta.update(split=split, pattern=pattern)
        getattr(dataset, split).append(seq)
        log.debug(f"Generated {seq!r} (EF {ef:.3f}, {pattern})")

    return dataset
