"""Configuration for :mod:`.cardio4d`."""

import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path
from typing import TYPE_CHECKING, Any, Dict, Iterable, Optional, Union

import yaml

from .common import ConfigError
from .model import NetConfig
from .train import TrainConfig

if TYPE_CHECKING:
    import cardio4d.model

#: Named network configurations accepted as ``net.preset``.
PRESETS = {
    "desk": NetConfig.desk,
    "desk_3d": NetConfig.desk_3d,
    "full": NetConfig.full,
    "full_3d": NetConfig.full_3d,
}


def _version(name: str) -> str:
    try:
        return version(name)
    except PackageNotFoundError:  # pragma: no cover
        return "999"


def version_string() -> str:
    """Return a string with versions of :mod:`.cardio4d`, :mod:`numpy`, and Python."""
    return " ".join(
        [
            f"cardio4d/{_version('cardio4d')}",
            f"numpy/{_version('numpy')}",
            f"Starlette/{_version('starlette')}",
            f"Python/{sys.version.split()[0]}",
        ]
    )


def _set_level(debug: bool) -> None:
    log = logging.getLogger("cardio4d")
    log.setLevel(logging.DEBUG if debug else logging.INFO)


def _parse_override(text: str) -> tuple:
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"Override {text!r} is not of the form KEY=VALUE")
    try:
        return key.strip().split("."), yaml.safe_load(value)
    except yaml.YAMLError as e:
        raise ConfigError(f"Cannot parse value in override {text!r}: {e}") from None


def _build(klass, values: Dict[str, Any], section: str):
    known = {f.name for f in fields(klass)}
    if unknown := sorted(set(values) - known):
        raise ConfigError(f"Unknown key(s) in {section!r}: {', '.join(unknown)}")
    try:
        return klass(**values)
    except TypeError as e:
        raise ConfigError(f"Invalid {section!r} configuration: {e}") from None


@dataclass
class RunConfig:
    """Fully resolved configuration of one command-line run."""

    net: NetConfig = field(default_factory=NetConfig)

    train: TrainConfig = field(default_factory=TrainConfig)

    #: Path to a dataset manifest.
    manifest: Optional[Path] = None

    #: Directory for checkpoints, logs and reports.
    output_dir: Path = Path("output")

    #: Seed for model initialization and training. Overrides ``train.seed``.
    seed: int = 0

    #: Log at DEBUG level.
    debug: bool = False

    def __post_init__(self):
        if self.manifest is not None:
            self.manifest = Path(self.manifest)
        self.output_dir = Path(self.output_dir)
        self.train.seed = self.seed
        _set_level(self.debug)

    @classmethod
    def load(
        cls, path: Union[str, Path, None] = None, overrides: Iterable[str] = ()
    ) -> "RunConfig":
        """Merge defaults, the YAML file at `path`, and `overrides`, in that order.

        The file has top-level keys ``seed``, ``manifest``, ``output_dir``, ``debug``
        and sections ``net`` and ``train`` holding fields of :class:`.NetConfig` and
        :class:`.TrainConfig`. The ``net`` section may also give a ``preset``, one of
        the keys of :data:`PRESETS`, whose values are used in place of the defaults.

        Each override is ``KEY=VALUE`` with a dotted key, for instance
        ``train.total_epochs=50``; the value is parsed as YAML.

        Raises
        ------
        ConfigError
            for an unreadable file, unknown keys or invalid values.
        """
        data: Dict[str, Any] = {"net": {}, "train": {}}
        if path is not None:
            try:
                content = yaml.safe_load(Path(path).read_text()) or {}
            except (OSError, yaml.YAMLError) as e:
                raise ConfigError(f"Cannot read configuration {path}: {e}") from None
            if not isinstance(content, dict):
                raise ConfigError(f"{path}: expected a mapping at top level")
            for key, value in content.items():
                if key in ("net", "train"):
                    data[key].update(value or {})
                else:
                    data[key] = value

        for text in overrides:
            keys, value = _parse_override(text)
            target = data
            for k in keys[:-1]:
                target = target.setdefault(k, {})
                if not isinstance(target, dict):
                    raise ConfigError(f"Override {text!r}: {k!r} is not a section")
            target[keys[-1]] = value

        return cls.from_dict(data)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        data = dict(data)
        net = dict(data.pop("net", None) or {})
        train = dict(data.pop("train", None) or {})

        if preset := net.pop("preset", None):
            if preset not in PRESETS:
                raise ConfigError(f"Unknown preset {preset!r}; expected one of {list(PRESETS)}")
            net = {**PRESETS[preset]().to_dict(), **net}

        train.pop("seed", None)
        return _build(
            cls,
            dict(
                data,
                net=_build(NetConfig, net, "net"),
                train=_build(TrainConfig, train, "train"),
            ),
            "top level",
        )

    def to_dict(self) -> Dict[str, Any]:
        train = asdict(self.train)
        for k, v in train.items():
            if isinstance(v, tuple):
                train[k] = list(v)
        return dict(
            net=self.net.to_dict(),
            train=train,
            manifest=None if self.manifest is None else str(self.manifest),
            output_dir=str(self.output_dir),
            seed=self.seed,
            debug=self.debug,
        )

    def dump(self, path: Union[str, Path]) -> Path:
        """Write the resolved configuration as YAML that :meth:`load` reads back."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))
        return path


@dataclass
class ServiceConfig:
    """Configuration for a prediction service instance."""

    #: Model used for predictions. If not given, loaded from :attr:`checkpoint`.
    model: Optional["cardio4d.model.ModelParams"] = None

    #: Path to a CKPT file; by default from the ``CARDIO4D_CHECKPOINT`` environment
    #: variable.
    checkpoint: Optional[Path] = field(
        default_factory=lambda: os.environ.get("CARDIO4D_CHECKPOINT")
    )

    #: Start the server in debugging mode.
    debug: bool = False

    #: Tile overlap for whole-sequence prediction.
    overlap: float = 0.5

    version_string: str = field(default_factory=version_string)

    def __post_init__(self):
        _set_level(self.debug)

        if self.model is None and self.checkpoint:
            from .model import load_checkpoint

            self.checkpoint = Path(self.checkpoint)
            self.model = load_checkpoint(self.checkpoint)
            logging.getLogger(__name__).info(f"Loaded model from {self.checkpoint}")
