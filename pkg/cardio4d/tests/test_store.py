import logging
from dataclasses import replace
from typing import Dict, List, Tuple

import numpy as np
import pytest

from cardio4d.data import load_manifest, sparsify
from cardio4d.model import ModelParams
from cardio4d.store import DictStore, FileStore, Store
from cardio4d.testing import assert_le

log = logging.getLogger(__name__)


@pytest.fixture
def objects_and_keys(tiny_phantom, threshold_model) -> List[Tuple[object, str]]:
    """A collection of storable objects for testing."""
    return [
        (replace(tiny_phantom, id="get-set"), "sequence-get-set"),
        (threshold_model, f"model-seg4d-{threshold_model.digest()}"),
    ]


def assert_same(exp, obs) -> None:
    if isinstance(exp, ModelParams):
        assert exp.config == obs.config
        assert exp.digest() == obs.digest()
    else:
        assert exp.id == obs.id
        np.testing.assert_array_equal(exp.intensities, obs.intensities)
        np.testing.assert_array_equal(exp.labels, obs.labels)
        np.testing.assert_array_equal(exp.annotated, obs.annotated)


def before_set_1(*args, **kwargs):
    log.info("\n".join(["hook before_set_1", str(args)[:80], str(kwargs)[:80]]))


def before_set_2(*args, **kwargs):
    log.info("\n".join(["hook before_set_2", str(args)[:80], str(kwargs)[:80]]))


class TestDictStore:
    def test_init_hook(self, caplog) -> None:
        def _(): ...

        # Iterable of callable can be passed to hooks= arg
        s = DictStore(hook={"before set": [before_set_1, before_set_2]})

        # Single callable (not iterable of callable) can be passed to hooks= arg
        s = DictStore(hook={"before set": _})
        assert _ in s.hook["before set"]

        # Message is logged passing hooks for unregistered IDs
        assert 0 == len(caplog.messages)
        DictStore(hook={"not a hook": _})
        assert "Unknown hook event 'not a hook'; ignored" in caplog.messages

    def test_invoke_hooks(self, tiny_phantom) -> None:
        calls = []
        s = DictStore(hook={"before set": lambda key, obj: calls.append(key)})

        s.set(tiny_phantom)
        s.update(tiny_phantom)

        assert ["sequence-tiny", "sequence-tiny"] == calls


class TestStore:
    @pytest.fixture(
        scope="class",
        params=[
            (DictStore, None),
            (FileStore, True),
        ],
        ids=lambda p: p[0].__name__,
    )
    def s(self, request, tmp_path_factory, tiny_dataset) -> Store:
        klass, with_tmp_dir = request.param

        args: Dict[str, object] = dict()
        if with_tmp_dir:
            args.update(path=tmp_path_factory.mktemp(klass.__name__))

        result = klass(**args)
        result.update_from(tiny_dataset)

        return result

    def test_delete0(self, s: Store, tiny_phantom):
        # Store an object
        key = s.set(replace(tiny_phantom, id="to-delete"))

        # Object's key is present in iter_keys()
        assert key in s.iter_keys()

        # Deletion succeeds
        s.delete(key)

        # Key is no longer present
        assert key not in s.iter_keys()

        # Attempting deletion again raises KeyError
        with pytest.raises(KeyError):
            s.delete(key)

    def test_get_set0(self, s: Store, objects_and_keys):
        for obj, exp_key in objects_and_keys:
            # obj can be stored
            key = s.set(obj)

            # key is as expected
            assert exp_key == key

            # Object can be retrieved, and is the same as stored
            assert_same(obj, s.get(key))

            # Storing again raises KeyError
            with pytest.raises(KeyError):
                s.set(obj)

        # Accessing an invalid key raises KeyError
        with pytest.raises(KeyError):
            s.get("FOO")
        with pytest.raises(KeyError):
            s.get("sequence-not-stored")

    def test_iter_keys0(self, s: Store):
        assert_le(6, len(list(s.iter_keys())))

    def test_key0(self, s: Store, threshold_model):
        key = s.key(threshold_model)
        assert key.startswith("model-seg4d-") and 16 == len(key.split("-")[-1])

        # Key is deterministic
        assert key == s.key(threshold_model)

        with pytest.raises(NotImplementedError):
            s.key(object())

    @pytest.mark.parametrize(
        "N_exp, kw",
        (
            (6, dict(kind="sequence")),
            (4, dict(split="train")),
            (2, dict(split="validation")),
        ),
    )
    def test_list(self, s: Store, N_exp: int, kw):
        """:meth:`.list` returns the correct number of objects."""
        assert_le(N_exp, len(s.list(**kw)))

    def test_list_models(self, s: Store, threshold_model):
        s.update(threshold_model)
        assert [s.key(threshold_model)] == s.list(kind="model")
        assert s.key(threshold_model) not in s.list(split="train")

        with pytest.raises(ValueError, match="Unknown kind"):
            s.list(kind="foo")

    def test_update(self, s: Store, tiny_phantom):
        # Store an object; record its key
        key = s.set(replace(tiny_phantom, id="update"))

        # The stored object has all frames annotated
        assert 8 == len(s.get(key).annotated_frames)

        # Update the stored object with a sparsely annotated copy
        s.update(sparsify(replace(tiny_phantom, id="update"), [0, 4]))

        # Now the same key retrieves the updated object
        assert [0, 4] == s.get(key).annotated_frames

    def test_update_from0(self, s: Store):
        """Contents of one store can be copied into another."""
        other = DictStore()
        other.update_from(s)

        assert sorted(s.iter_keys()) == sorted(other.iter_keys())

        # Copying again fails, or is logged and skipped
        with pytest.raises(KeyError):
            other.update_from(s)
        other.update_from(s, errors="log")

    def test_update_from1(self, s: Store):
        with pytest.raises(NotImplementedError):
            s.update_from(42)


class TestFileStore:
    def test_layout(self, dataset_dir, tiny_dataset):
        """A directory written by FileStore can be read with load_manifest()."""
        assert dataset_dir.joinpath("phantom00_image.vol4").exists()
        assert dataset_dir.joinpath("phantom00_label.vol4").exists()

        ds = load_manifest(dataset_dir.joinpath("manifest.yaml"))

        assert 4 == len(ds.train) and 2 == len(ds.validation)
        for exp, obs in zip(tiny_dataset, ds):
            assert_same(exp, obs)
            assert exp.split == obs.split

    def test_reopen(self, dataset_dir):
        """An existing directory is picked up by a new instance."""
        s = FileStore(dataset_dir)
        assert 6 == len(s.list(kind="sequence"))
        assert ["sequence-phantom04", "sequence-phantom05"] == s.list(split="validation")

    def test_delete(self, tmp_path, tiny_phantom):
        s = FileStore(tmp_path)
        key = s.set(tiny_phantom)
        s.delete(key)

        assert not tmp_path.joinpath("tiny_image.vol4").exists()
        assert [] == load_manifest(tmp_path.joinpath("manifest.yaml")).train

    def test_unlabeled(self, tmp_path, tiny_phantom):
        from cardio4d.common import DataError

        s = FileStore(tmp_path)
        with pytest.raises(DataError, match="no labels"):
            s.set(replace(tiny_phantom, labels=None, annotated=None))

    def test_update_from_path(self, dataset_dir, checkpoint_path, threshold_model):
        s = DictStore()

        # A directory with a manifest
        s.update_from(dataset_dir)
        assert 6 == len(s.list())

        # A checkpoint file
        s.update_from(checkpoint_path)
        assert [s.key(threshold_model)] == s.list(kind="model")
