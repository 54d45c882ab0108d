import struct
from dataclasses import replace

import numpy as np
import pytest
import yaml

from cardio4d.common import (
    BadMagicError,
    ConfigError,
    DataError,
    DimensionOverflowError,
    FormatError,
    ManifestError,
    PhantomError,
    TruncatedError,
)
from cardio4d.data import (
    LV,
    CropSampler,
    DatasetSpec,
    PhantomSpec,
    Volume4DSequence,
    VolumeFile,
    annotation_frames,
    decode_volume,
    ellipsoid_mask,
    encode_volume,
    generate_dataset,
    load_manifest,
    manifest_entry,
    normalize_intensity,
    phantom_generate,
    read_volume,
    sample_crop,
    sequence_files,
    sparsify,
    write_manifest,
    write_volume,
)
from cardio4d.testing import tiny_phantom_spec


class TestPhantom:
    @pytest.mark.parametrize(
        "kwargs, message",
        (
            (dict(r_es=(14.0, 12.0, 10.0)), "r_es"),
            (dict(r_es=(0.0, 1.0, 1.0)), "r_es"),
            (dict(wall=10.0), "exceeds grid"),
            (dict(shape=(48, 48, 32)), "Invalid phantom grid"),
        ),
    )
    def test_invalid(self, kwargs, message):
        with pytest.raises(PhantomError, match=message):
            PhantomSpec(**kwargs)

    @pytest.mark.parametrize("ef", [-0.1, 1.0])
    def test_from_ef_invalid(self, ef):
        with pytest.raises(PhantomError, match="Ejection fraction"):
            PhantomSpec.from_ef(ef)

    def test_from_ef(self):
        spec = PhantomSpec.from_ef(0.55)
        assert 0.55 == pytest.approx(spec.analytic_ef)
        assert spec.r_ed == PhantomSpec.r_ed

    def test_generate(self, tiny_phantom):
        seq = tiny_phantom

        assert "tiny" == seq.id
        assert (16, 16, 12, 8) == seq.shape
        assert np.float32 == seq.intensities.dtype
        assert {0, 1, 2} == set(np.unique(seq.labels))
        assert list(range(8)) == seq.annotated_frames
        assert 0.4 == pytest.approx(seq.meta["analytic_ef"])

        # Cavity largest at end-diastole, smallest at end-systole
        lv = (seq.labels == LV).sum(axis=(0, 1, 2))
        assert lv.max() == lv[0] and lv.min() == lv[4]
        assert 1 - lv[4] / lv[0] == pytest.approx(0.4, abs=0.08)

        # Without noise, intensities are the class means
        assert {-50.0, 50.0, 350.0} == set(np.unique(seq.intensities))

    def test_deterministic(self):
        spec = tiny_phantom_spec(noise=25.0)
        a, b, c = (phantom_generate(spec, seed) for seed in (7, 7, 8))

        np.testing.assert_array_equal(a.intensities, b.intensities)
        np.testing.assert_array_equal(a.labels, c.labels)
        assert not np.array_equal(a.intensities, c.intensities)


class TestVolume4DSequence:
    def test_invalid(self, tiny_phantom):
        with pytest.raises(DataError, match="expected"):
            replace(tiny_phantom, intensities=tiny_phantom.intensities[..., 0])
        with pytest.raises(DataError, match="labels"):
            replace(tiny_phantom, labels=tiny_phantom.labels[..., :4])
        with pytest.raises(DataError, match="outside"):
            replace(tiny_phantom, labels=tiny_phantom.labels * 2)
        with pytest.raises(DataError, match="annotation flags"):
            replace(tiny_phantom, annotated=np.ones(4, bool))
        with pytest.raises(DataError, match="without labels"):
            replace(tiny_phantom, labels=None)

    def test_unlabeled(self, tiny_phantom):
        seq = Volume4DSequence("x", tiny_phantom.intensities)
        assert [] == seq.annotated_frames
        assert "<Volume4DSequence 'x' (16, 16, 12, 8) 0/8 annotated>" == repr(seq)

    def test_voxel_volume(self, tiny_phantom):
        assert 0.001 == tiny_phantom.voxel_volume_ml
        assert 0.006 == pytest.approx(replace(tiny_phantom, spacing=(1, 2, 3)).voxel_volume_ml)


@pytest.mark.parametrize(
    "pattern, T, expected",
    (
        ("ed_es", 20, [0, 10]),
        ("every4", 20, [0, 4, 8, 12, 16]),
        ("every2", 20, list(range(0, 20, 2))),
        ("all", 8, list(range(8))),
        ("ed_es", 1, [0]),
    ),
)
def test_annotation_frames(pattern, T, expected):
    assert expected == annotation_frames(pattern, T)


def test_annotation_frames_invalid():
    with pytest.raises(ValueError, match="Unknown annotation pattern"):
        annotation_frames("every3", 20)


class TestSparsify:
    def test_sparsify(self, tiny_phantom):
        seq = sparsify(tiny_phantom, [4, 0, 4])

        assert [0, 4] == seq.annotated_frames
        # Labels of other frames are retained; the original is unchanged
        np.testing.assert_array_equal(tiny_phantom.labels, seq.labels)
        assert 8 == len(tiny_phantom.annotated_frames)

    @pytest.mark.parametrize("keep", [[], [8], [-1, 2]])
    def test_invalid(self, tiny_phantom, keep):
        with pytest.raises(ValueError):
            sparsify(tiny_phantom, keep)

    def test_no_labels(self, tiny_phantom):
        with pytest.raises(DataError, match="no labels"):
            sparsify(Volume4DSequence("x", tiny_phantom.intensities), [0])


def test_normalize_intensity():
    result = normalize_intensity(np.array([-2000.0, -1024, 0, 512, 3000]))

    assert np.float32 == result.dtype
    np.testing.assert_array_equal([-1, -1, 0, 0.5, 1], result)


@pytest.mark.parametrize(
    "radii", [(8, 8, 8), (8, 10, 12), (12, 9, 16)], ids=["sphere", "ellipsoid", "elongated"]
)
def test_ellipsoid_mask_volume(radii):
    """The voxel count approximates the volume of the continuous ellipsoid."""
    shape = tuple(2 * r + 6 for r in radii)
    center = tuple(L / 2 - 0.3 for L in shape)

    mask = ellipsoid_mask(shape, center, radii)

    expected = 4 / 3 * np.pi * np.prod(radii)
    assert mask.sum() == pytest.approx(expected, rel=0.03)
    # Entirely inside the grid
    assert not (mask[0].any() or mask[-1].any())


class TestCropSampler:
    def test_sample(self, tiny_phantom):
        sampler = CropSampler(tiny_phantom, (8, 8, 8, 4), fg_prob=1.0)
        sample = sampler.sample(np.random.default_rng(0))

        assert (1, 1, 8, 8, 8, 4) == sample.input.shape
        assert (1, 3, 8, 8, 8, 4) == sample.labels.shape
        assert "foreground" == sample.centered_on
        assert sample.labeled_mask.all()

        # Labels are one-hot
        np.testing.assert_array_equal(1.0, sample.labels.data.sum(axis=1))

    def test_sparse(self, tiny_phantom):
        """Every crop window contains an annotated frame; others have zero labels."""
        sampler = CropSampler(sparsify(tiny_phantom, [0]), (8, 8, 8, 4))
        rng = np.random.default_rng(1)

        for _ in range(20):
            sample = sampler.sample(rng)
            assert 0 == sample.origin[3]
            assert [True, False, False, False] == sample.labeled_mask.tolist()
            assert 0 == sample.labels.data[..., 1:].sum()

    def test_deterministic(self, tiny_phantom):
        sampler = CropSampler(tiny_phantom, (8, 8, 8, 4))
        a = [sampler.sample_origin(np.random.default_rng(3)) for _ in range(2)]
        assert a[0] == a[1]

    def test_foreground_fraction(self, tiny_phantom):
        sampler = CropSampler(tiny_phantom, (8, 8, 8, 4), fg_prob=0.6)
        rng = np.random.default_rng(7)

        draws = [sampler.sample_origin(rng)[1] for _ in range(10_000)]

        fraction = draws.count("foreground") / len(draws)
        assert 0.57 <= fraction <= 0.63
        assert len(draws) == draws.count("foreground") + draws.count("background")

    def test_sample_crop(self, tiny_phantom):
        a = sample_crop(tiny_phantom, (8, 8, 8, 4), rng=np.random.default_rng(5))
        b = CropSampler(tiny_phantom, (8, 8, 8, 4)).sample(np.random.default_rng(5))

        assert a.origin == b.origin
        np.testing.assert_array_equal(a.input.data, b.input.data)

    def test_padding(self, tiny_phantom):
        sampler = CropSampler(tiny_phantom, (20, 8, 8, 4))
        assert (20, 16, 12, 8) == sampler.shape

        sample = sampler.crop_at((0, 0, 0, 0))
        assert (sample.input.data[0, 0, 16:] == -1).all()
        assert (sample.labels.data[0, 0, 16:] == 1).all()

    def test_invalid(self, tiny_phantom):
        with pytest.raises(DataError, match="no annotated frames"):
            CropSampler(replace(tiny_phantom, annotated=np.zeros(8, bool)), (8, 8, 8, 4))
        with pytest.raises(ConfigError):
            CropSampler(tiny_phantom, (8, 8, 8))
        with pytest.raises(ConfigError):
            CropSampler(tiny_phantom, (8, 8, 8, 4), fg_prob=0)


class TestVOL4:
    @pytest.fixture(scope="class")
    def files(self, tiny_phantom):
        return sequence_files(sparsify(tiny_phantom, [0, 4]))

    def test_round_trip(self, files, tmp_path):
        image, labels = files
        image = replace(image, spacing=(0.5, 0.5, 2.0), frame_ms=40.0)

        result = decode_volume(encode_volume(image))
        np.testing.assert_array_equal(image.data, result.data)
        assert (0.5, 0.5, 2.0) == result.spacing and 40.0 == result.frame_ms
        assert result.annotated is None

        path = write_volume(tmp_path.joinpath("label.vol4"), labels)
        result = read_volume(path)
        assert np.int8 == result.data.dtype
        np.testing.assert_array_equal(labels.data, result.data)
        assert [0, 4] == np.flatnonzero(result.annotated).tolist()

    def test_header(self, files):
        buf = encode_volume(files[1])

        assert b"VOL4" == buf[:4]
        assert (1, 1, 4) == struct.unpack("<HBB", buf[4:8])
        assert (16, 16, 12, 8) == struct.unpack("<4I", buf[8:24])
        # Header, spacing and frame interval, flags, and one byte per label
        assert 24 + 16 + 8 + 16 * 16 * 12 * 8 == len(buf)

    def test_errors(self, files):
        buf = encode_volume(files[0])

        with pytest.raises(BadMagicError):
            decode_volume(b"CKPT" + buf[4:])
        with pytest.raises(TruncatedError):
            decode_volume(buf[:-1])
        with pytest.raises(TruncatedError, match="beyond payload"):
            decode_volume(buf + b"\0\0\0\0")
        with pytest.raises(FormatError, match="version 2"):
            decode_volume(buf[:4] + struct.pack("<H", 2) + buf[6:])
        with pytest.raises(FormatError, match="dtype code 7"):
            decode_volume(buf[:6] + b"\x07" + buf[7:])
        with pytest.raises(DimensionOverflowError, match="zero extent"):
            decode_volume(buf[:8] + struct.pack("<I", 0) + buf[12:])
        with pytest.raises(DimensionOverflowError, match="elements"):
            decode_volume(buf[:8] + struct.pack("<4I", *[2**16] * 4) + buf[24:])
        with pytest.raises(DimensionOverflowError, match="0 dimensions"):
            decode_volume(buf[:7] + b"\x00" + buf[8:])

    def test_encode_invalid(self):
        with pytest.raises(FormatError, match="int16"):
            encode_volume(VolumeFile(np.zeros((2, 2), np.int16)))
        with pytest.raises(FormatError, match="annotation flags"):
            encode_volume(VolumeFile(np.zeros((2, 2), np.int8), annotated=np.ones(3, bool)))

    def test_read_missing(self, tmp_path):
        with pytest.raises(DataError, match="Cannot read volume"):
            read_volume(tmp_path.joinpath("missing.vol4"))


class TestManifest:
    @pytest.fixture
    def entry(self, tmp_path, tiny_phantom):
        """Write the files of `tiny_phantom` to `tmp_path`; return its manifest entry."""
        image, labels = sequence_files(tiny_phantom)
        write_volume(tmp_path.joinpath("tiny_image.vol4"), image)
        write_volume(tmp_path.joinpath("tiny_label.vol4"), labels)
        return manifest_entry(tiny_phantom, "tiny_image.vol4", "tiny_label.vol4")

    def test_load(self, tmp_path, entry):
        entry.update(annotated_frames=[0, 4])
        other = dict(entry, id="other", split="validation")
        path = write_manifest(tmp_path.joinpath("manifest.yaml"), [entry, other])

        ds = load_manifest(path)

        assert ["tiny"] == [s.id for s in ds.train]
        assert ["other"] == [s.id for s in ds.validation]
        # Annotated frames in the manifest override the label file
        assert [0, 4] == ds.train[0].annotated_frames
        assert 0.4 == pytest.approx(ds.train[0].meta["analytic_ef"])

    def test_entry(self, entry):
        assert dict(
            id="tiny",
            intensity_path="tiny_image.vol4",
            label_path="tiny_label.vol4",
            split="train",
            annotated_frames=list(range(8)),
        ) == {k: v for k, v in entry.items() if k != "analytic_ef"}

    @pytest.mark.parametrize(
        "transform, exc, message",
        (
            (lambda e: "sequences: [", ManifestError, "Cannot parse"),
            (lambda e: "- 1\n- 2\n", ManifestError, "'sequences' list"),
            (lambda e: dict(sequences=[42]), ManifestError, "invalid entry"),
            (lambda e: dict(sequences=[dict(id="x")]), ManifestError, "lacks"),
            (lambda e: dict(sequences=[dict(e, split="test")]), ManifestError, "unknown split"),
            (lambda e: dict(sequences=[e, e]), ManifestError, "duplicate sequence id"),
            (
                lambda e: dict(sequences=[dict(e, label_path="nope.vol4")]),
                DataError,
                "missing file",
            ),
        ),
        ids=["yaml", "not-dict", "entry", "fields", "split", "duplicate", "file"],
    )
    def test_errors(self, tmp_path, entry, transform, exc, message):
        content = transform(entry)
        path = tmp_path.joinpath("manifest.yaml")
        path.write_text(content if isinstance(content, str) else yaml.safe_dump(content))

        with pytest.raises(exc, match=message):
            load_manifest(path)

    def test_missing(self, tmp_path):
        with pytest.raises(DataError, match="Cannot read manifest"):
            load_manifest(tmp_path.joinpath("manifest.yaml"))


class TestGenerateDataset:
    def test_split(self, tiny_dataset):
        assert ["phantom00", "phantom01", "phantom02", "phantom03"] == [
            s.id for s in tiny_dataset.train
        ]
        assert ["phantom04", "phantom05"] == [s.id for s in tiny_dataset.validation]
        assert 6 == len(tiny_dataset)
        assert all("validation" == s.split for s in tiny_dataset.validation)

    def test_patterns(self, tiny_dataset):
        assert [[0, 4], [0, 4], [0, 2, 4, 6], list(range(8)), [0, 4], list(range(8))] == [
            s.annotated_frames for s in tiny_dataset
        ]
        assert ["ed_es", "every4", "every2", "all", "ed_es", "all"] == [
            s.meta["pattern"] for s in tiny_dataset
        ]

    def test_ejection_fractions(self, tiny_dataset):
        efs = sorted(s.meta["analytic_ef"] for s in tiny_dataset)
        np.testing.assert_allclose(np.linspace(0.3, 0.7, 6), efs)

    def test_summary(self, tiny_dataset):
        result = tiny_dataset.summary()

        assert 4 == result["train"]["sequences"]
        assert [2, 2, 4, 8] == result["train"]["annotated_frames"]
        assert 0.5 == result["train"]["annotated_fraction"]
        assert 10 / 16 == result["validation"]["annotated_fraction"]

    def test_deterministic(self):
        spec = DatasetSpec(
            n_sequences=3, n_validation=1, phantom=tiny_phantom_spec(noise=10.0), seed=5
        )
        a, b = generate_dataset(spec), generate_dataset(spec)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.intensities, y.intensities)

    @pytest.mark.parametrize(
        "kwargs",
        (
            dict(n_sequences=0),
            dict(n_sequences=2, n_validation=2),
            dict(patterns=("ed_es", "every3")),
        ),
        ids=["empty", "no-train", "pattern"],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            DatasetSpec(**kwargs)
