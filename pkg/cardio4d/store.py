"""Storage of sequences and trained models.

:class:`.Store` computes a key for any object handled by :meth:`~.Store.key`:

- :class:`.Volume4DSequence`, with keys like :py:`"sequence-phantom03"`.
- :class:`.ModelParams`, with keys like :py:`"model-seg4d-1f0e3dad99908345"`.

…and stores or retrieves it using standard ‘CRUD’ operations, following the semantics
of Python :class:`dict`:

- :meth:`~.Store.set`: create.
- :meth:`~.Store.get`: retrieve.
- :meth:`~.Store.update`: update.
- :meth:`~.Store.delete`: delete.

Convenience methods are :meth:`.list` and :meth:`.update_from`.

Concrete subclasses are :class:`.DictStore` and :class:`.FileStore`.
"""

import logging
from abc import ABC, abstractmethod
from copy import deepcopy
from functools import singledispatchmethod
from pathlib import Path
from typing import (
    Callable,
    Dict,
    Iterable,
    List,
    Mapping,
    MutableMapping,
    Optional,
    Tuple,
    Union,
)

import yaml

from .common import DataError, ManifestError
from .data import (
    Dataset,
    Volume4DSequence,
    load_entry,
    load_manifest,
    manifest_entry,
    sequence_files,
    write_manifest,
    write_volume,
)
from .model import ModelParams, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

#: Kinds of stored objects; the first part of every key.
KINDS = ("sequence", "model")

Stored = Union[Volume4DSequence, ModelParams]


def key_kind(key: str) -> str:
    kind = key.split("-", 1)[0]
    if kind not in KINDS:
        raise KeyError(key)
    return kind


class Store(ABC):
    """Key-value storage of sequences and models.

    Concrete stores provide :meth:`delete`, :meth:`get`, :meth:`iter_keys`,
    :meth:`set` and :meth:`update`; everything else is built on those.
    """

    #: Events at which hooks run. A subclass may add its own.
    hook_ids: Tuple[str, ...] = ("before set",)

    #: Hooks of this instance, by event.
    hook: MutableMapping[str, List[Callable]]

    @abstractmethod
    def __init__(
        self,
        hook: Optional[Mapping[str, Union[Callable, Iterable[Callable]]]] = None,
        **kwargs,
    ) -> None:
        """Set up hooks; subclasses call this after their own setup.

        Parameters
        ----------
        hook :
            For each event in :attr:`hook_ids`, one callable or several. A "before
            set" hook receives the key and the object about to be stored, and may
            raise to prevent storage.
        """
        self.hook = {event: [] for event in self.hook_ids}

        for event, hooks in (hook or {}).items():
            if event not in self.hook:
                log.warning(f"Unknown hook event {event!r}; ignored")
                continue
            self.hook[event].extend([hooks] if callable(hooks) else hooks)

    @abstractmethod
    def delete(self, key: str) -> None:
        """Remove the object at `key`; :class:`KeyError` if there is none."""

    @abstractmethod
    def get(self, key: str) -> Stored:
        """Return the object at `key`; :class:`KeyError` if there is none."""

    @abstractmethod
    def iter_keys(self) -> Iterable[str]:
        """Iterate over all keys, in no particular order."""

    @abstractmethod
    def set(self, obj: Stored) -> str:
        """Add `obj` and return its key; :class:`KeyError` if the key is taken."""

    @abstractmethod
    def update(self, obj: Stored) -> str:
        """Add or replace `obj` and return its key."""

    def invoke_hooks(self, event: str, *args, **kwargs) -> None:
        for hook in self.hook[event]:
            hook(*args, **kwargs)

    @singledispatchmethod
    def key(self, obj) -> str:
        """Key of `obj`.

        :class:`.Volume4DSequence`
           :py:`"sequence-"` and the sequence ID.

        :class:`.ModelParams`
           :py:`"model-"`, the network mode, and :meth:`.ModelParams.digest`, so
           that two models share a key only if configuration and values agree.
        """
        raise NotImplementedError(f"No key for {type(obj).__name__}")

    @key.register
    def _key_sequence(self, obj: Volume4DSequence):
        return f"sequence-{obj.id}"

    @key.register
    def _key_model(self, obj: ModelParams):
        return f"model-{obj.config.mode}-{obj.digest()}"

    def split_of(self, key: str) -> Optional[str]:
        """Return the split of the sequence with `key`."""
        return getattr(self.get(key), "split", None)

    def list(self, kind: Optional[str] = None, split: Optional[str] = None) -> List[str]:
        """List matching keys, sorted.

        Parameters
        ----------
        kind :
            "sequence" or "model".
        split :
            "train" or "validation". Only sequences have a split, so giving `split`
            excludes models.
        """
        if kind is not None and kind not in KINDS:
            raise ValueError(f"Unknown kind {kind!r}; expected one of {KINDS}")
        if split is not None:
            kind = "sequence"

        result = []
        for key in self.iter_keys():
            if kind and key_kind(key) != kind:
                continue
            if split and self.split_of(key) != split:
                continue
            result.append(key)
        return sorted(result)

    @singledispatchmethod
    def update_from(self, obj: "Store", **kwargs) -> None:
        """Add the contents of `obj`.

        Parameters
        ----------
        obj :
            Any of:

            - :class:`pathlib.Path` of a dataset manifest (:file:`.yaml`), of a
              checkpoint (:file:`.ckpt`), or of a directory. For a directory, its
              :file:`manifest.yaml` and any checkpoints in it or its :file:`models`
              subdirectory are read.
            - another :class:`Store` instance: all contents of the other store are
              added.
            - a :class:`.Dataset`: all of its sequences are stored.

        Other Parameters
        ----------------
        errors : optional
            "raise" (default) or "log". With "log", objects that cannot be copied
            from another store are logged and skipped.

        Raises
        ------
        NotImplementedError
            for any `obj` other than the above.
        """
        if not isinstance(obj, Store):
            raise NotImplementedError(f"Cannot update from {type(obj).__name__}")

        log_errors = kwargs.get("errors", "raise") == "log"
        for key in sorted(obj.iter_keys()):
            try:
                self.set(deepcopy(obj.get(key)))
            except Exception as e:
                if not log_errors:
                    raise
                log.info(f"Skip {key}: {type(e).__name__}: {e}")

    @update_from.register
    def _update_from_path(self, p: Path, **kwargs):
        if p.is_dir():
            if (manifest := p.joinpath("manifest.yaml")).exists():
                self.update_from(manifest)
            for ckpt in sorted(p.glob("*.ckpt")) + sorted(p.glob("models/*.ckpt")):
                self.update_from(ckpt)
        elif p.suffix in (".yaml", ".yml"):
            self.update_from(load_manifest(p))
        elif p.suffix == ".ckpt":
            try:
                self.update(load_checkpoint(p))
            except DataError as e:
                log.warning(f"Could not read {p}; {e}")
        else:
            log.info(f"Ignore {p}")

    @update_from.register
    def _update_from_dataset(self, ds: Dataset, **kwargs):
        for seq in ds:
            self.update(seq)


class DictStore(Store):
    _contents: Dict[str, Stored]

    def __init__(self, **kwargs):
        self._contents = dict()
        super().__init__(**kwargs)

    def delete(self, key: str):
        self._contents.pop(key)

    def get(self, key: str):
        return self._contents[key]

    def set(self, obj):
        key = self.key(obj)

        if key in self._contents:
            raise KeyError(key)

        self.invoke_hooks("before set", key, obj)

        self._contents[key] = obj

        return key

    def update(self, obj):
        key = self.key(obj)

        self.invoke_hooks("before set", key, obj)

        self._contents[key] = obj

        return key

    def iter_keys(self):
        return self._contents.keys()


class FileStore(Store):
    """Store using a dataset directory.

    The directory contains:

    - for each sequence, :file:`{id}_image.vol4` and :file:`{id}_label.vol4`;
    - :file:`manifest.yaml`, listing the sequences, rewritten on every change; and
    - :file:`models/{key}.ckpt` for each model.

    A directory written by FileStore can be read with :func:`.load_manifest`.
    """

    #: Storage location.
    path: Path

    #: Manifest entries, by sequence ID.
    _entries: Dict[str, Dict]

    def __init__(self, path: Union[str, Path], **kwargs) -> None:
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        super().__init__(**kwargs)

        self._entries = {}
        if self.manifest_path.exists():
            content = yaml.safe_load(self.manifest_path.read_text()) or {}
            try:
                self._entries = {e["id"]: e for e in content.get("sequences", [])}
            except (AttributeError, KeyError, TypeError):
                raise ManifestError(f"Cannot use existing {self.manifest_path}") from None

    @property
    def manifest_path(self) -> Path:
        return self.path.joinpath("manifest.yaml")

    def path_for(self, key: str) -> Path:
        """Path of the checkpoint file for a model `key`."""
        return self.path.joinpath("models", f"{key}.ckpt")

    def delete(self, key):
        if key_kind(key) == "model":
            try:
                self.path_for(key).unlink()
            except FileNotFoundError:
                raise KeyError(key)
            return

        entry = self._entries.pop(key.split("-", 1)[1], None)
        if entry is None:
            raise KeyError(key)
        for k in ("intensity_path", "label_path"):
            self.path.joinpath(entry[k]).unlink(missing_ok=True)
        self._write_manifest()

    def get(self, key: str):
        if key_kind(key) == "model":
            path = self.path_for(key)
            if not path.exists():
                raise KeyError(key)
            return load_checkpoint(path)

        try:
            entry = self._entries[key.split("-", 1)[1]]
        except KeyError:
            raise KeyError(key) from None
        return load_entry(entry, self.path)

    def iter_keys(self):
        for id in self._entries:
            yield f"sequence-{id}"
        for p in self.path.glob("models/model-*.ckpt"):
            yield p.stem

    def split_of(self, key: str) -> Optional[str]:
        try:
            return self._entries[key.split("-", 1)[1]]["split"]
        except KeyError:
            raise KeyError(key) from None

    def set(self, obj):
        key = self.key(obj)

        if key in set(self.iter_keys()):
            raise KeyError(key)

        return self.update(obj)

    def update(self, obj):
        key = self.key(obj)

        self.invoke_hooks("before set", key, obj)

        self.write(obj, key)

        return key

    # New methods for this class

    @singledispatchmethod
    def write(self, obj, key: str) -> None:
        """Write `obj` to file(s) in :attr:`path`."""
        raise NotImplementedError

    @write.register
    def _write_sequence(self, obj: Volume4DSequence, key: str):
        image, labels = sequence_files(obj)
        if labels is None:
            raise DataError(f"{obj!r} has no labels; cannot store in {self.path}")

        names = [f"{obj.id}_image.vol4", f"{obj.id}_label.vol4"]
        for name, vf in zip(names, (image, labels)):
            write_volume(self.path.joinpath(name), vf)

        self._entries[obj.id] = manifest_entry(obj, *names)
        self._write_manifest()
        log.debug(f"Wrote {key} to {self.path}")

    @write.register
    def _write_model(self, obj: ModelParams, key: str):
        path = self.path_for(key)
        path.parent.mkdir(exist_ok=True)
        save_checkpoint(obj, path)
        log.debug(f"Wrote {key} to {path}")

    def _write_manifest(self) -> None:
        write_manifest(self.manifest_path, list(self._entries.values()))
