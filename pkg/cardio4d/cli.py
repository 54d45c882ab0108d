"""Command-line interface.

Every subcommand works from a :class:`.RunConfig` resolved from defaults, the file
given with ``--config``, and ``--set KEY=VALUE`` overrides. Errors are reported with
the name of the failing subcommand; the exit status is the :attr:`exit_code` of the
error class: 1 for usage and configuration errors, 2 for data errors and 3 for
numeric failures.
"""

import argparse
import logging
import sys
import time
import traceback
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import kernels
from .common import Cardio4DError, DataError, NumericError, UsageError
from .config import RunConfig, version_string
from .model import NetConfig, format_shape, shape_audit

log = logging.getLogger(__name__)

#: Default benchmark shape: Cin, Cout, X, Y, Z, T.
BENCH_SHAPE = (4, 4, 16, 16, 12, 8)

#: Largest permitted disagreement between convolution implementations.
BENCH_TOLERANCE = 1e-5


class ArgumentParser(argparse.ArgumentParser):
    """Parser that raises :class:`.UsageError` instead of exiting."""

    def error(self, message):
        raise UsageError(message)


def _int_tuple(text: str) -> tuple:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers: {text!r}")


def build_parser() -> ArgumentParser:
    p = ArgumentParser(prog="cardio4d", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=version_string())
    p.add_argument("--config", type=Path, help="YAML run configuration")
    p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one configuration value, e.g. train.total_epochs=50",
    )
    p.add_argument("--debug", action="store_true", help="log at DEBUG level")
    p.add_argument(
        "--paper-shapes",
        action="store_true",
        help="print the layer output sizes of the full-size 4D and 3D networks and exit",
    )
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    s = sub.add_parser("gen", help="generate a phantom dataset")
    s.add_argument("out_dir", type=Path)
    s.add_argument("-n", "--sequences", type=int, default=10)
    s.add_argument("--validation", type=int, default=2)

    s = sub.add_parser("train", help="train a network")
    s.add_argument("--manifest", type=Path, help="dataset manifest; default: config")
    s.add_argument("--progress", action="store_true", help="show a progress bar")

    s = sub.add_parser("eval", help="evaluate a checkpoint on validation sequences")
    s.add_argument("checkpoint", type=Path, nargs="?")
    s.add_argument("--manifest", type=Path)
    s.add_argument(
        "--predictor",
        choices=["model", "ground-truth", "background"],
        default="model",
        help="'ground-truth' and 'background' ignore the checkpoint",
    )
    s.add_argument("--per-class", action="store_true", help="per-class temporal L2")
    s.add_argument("-o", "--out", type=Path, help="report path")

    s = sub.add_parser("predict", help="segment every frame of a VOL4 volume")
    s.add_argument("checkpoint", type=Path)
    s.add_argument("volume", type=Path)
    s.add_argument("-o", "--out", type=Path, required=True)
    s.add_argument("--overlap", type=float, default=0.5)

    s = sub.add_parser("bench", help="time the convolution implementations")
    s.add_argument(
        "--shape", type=_int_tuple, default=BENCH_SHAPE, help="CIN,COUT,X,Y,Z,T"
    )
    s.add_argument("-r", "--repetitions", type=int, default=3)

    sub.add_parser("shapes", help="print layer output sizes of the configured network")

    s = sub.add_parser("compare", help="compare a 4D report against a 3D baseline")
    s.add_argument("report", type=Path)
    s.add_argument("baseline", type=Path)
    s.add_argument("--slack", type=float, default=0.05)
    s.add_argument("--dice-tolerance", type=float, default=0.05)

    return p


def print_audit(config: NetConfig, title: str) -> None:
    rows = shape_audit(config)
    width = max(len(r) for r, _ in rows)
    print(f"{title} ({config.mode}, crop {format_shape(config.crop_shape)})")
    for row, size in rows:
        print(f"  {row:<{width}}  {size}")


def _manifest(args, config: RunConfig) -> Path:
    path = getattr(args, "manifest", None) or config.manifest
    if path is None:
        raise UsageError("No dataset manifest; give --manifest or set 'manifest'")
    return path


def cmd_gen(args, config: RunConfig) -> None:
    from .data import DatasetSpec, generate_dataset
    from .store import FileStore

    spec = DatasetSpec(
        n_sequences=args.sequences, n_validation=args.validation, seed=config.seed
    )
    dataset = generate_dataset(spec)
    store = FileStore(args.out_dir)
    store.update_from(dataset)
    log.info(
        f"Wrote {len(store.list(split='train'))} training and "
        f"{len(store.list(split='validation'))} validation sequences to {args.out_dir}"
    )


def cmd_train(args, config: RunConfig) -> None:
    from .data import load_manifest
    from .model import save_checkpoint
    from .train import train_loop, write_epoch_log

    dataset = load_manifest(_manifest(args, config))
    out = config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    config.dump(out.joinpath("config.yaml"))

    result = train_loop(dataset, config.train, config.net, progress=args.progress)

    save_checkpoint(result.model, out.joinpath("model.ckpt"))
    write_epoch_log(out.joinpath("epochs.csv"), result.log)
    log.info(f"Wrote checkpoint and epoch log to {out}")


def cmd_eval(args, config: RunConfig) -> None:
    from .data import load_manifest
    from .metrics import ConstantPredictor, GroundTruthPredictor, ModelPredictor, evaluate
    from .model import load_checkpoint

    dataset = load_manifest(_manifest(args, config))

    if args.predictor == "ground-truth":
        predictor: Callable = GroundTruthPredictor()
    elif args.predictor == "background":
        predictor = ConstantPredictor(0)
    elif args.checkpoint is None:
        raise UsageError("eval: a checkpoint is required with --predictor=model")
    else:
        predictor = ModelPredictor(load_checkpoint(args.checkpoint))

    report = evaluate(predictor, dataset, per_class=args.per_class)

    out = args.out or config.output_dir.joinpath("report.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write(out)
    print(f"Dice {report.dice}  mean {report.mean_dice:.4f}")
    print(f"Smoothness L2 {report.smoothness_l2:.5f}  surface {report.smoothness_surf:.5f}")
    print(f"EF {report.ef}  reduced {report.ef_reduced}  MAE {report.ef_mae}")
    log.info(f"Wrote {out}")


def cmd_predict(args, config: RunConfig) -> None:
    from .data import VolumeFile, read_volume, sequence_from_files, write_volume
    from .model import load_checkpoint, predict_labels

    model = load_checkpoint(args.checkpoint)
    vf = read_volume(args.volume)
    if vf.data.ndim != 4:
        raise DataError(f"{args.volume}: expected a (X, Y, Z, T) volume; got {vf.data.shape}")
    seq = sequence_from_files(args.volume.stem, vf)

    labels = predict_labels(model, seq, overlap=args.overlap)

    flags = np.ones(labels.shape[-1], dtype=bool)
    write_volume(args.out, VolumeFile(labels, seq.spacing, seq.frame_ms, flags))
    log.info(f"Wrote {args.out}")


def _bench_inputs(shape: Sequence[int], dtype) -> tuple:
    c_in, c_out, *extents = shape
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, c_in) + tuple(extents)).astype(dtype)
    w = (rng.standard_normal((c_out, c_in, 3, 3, 3, 3)) / np.sqrt(c_in * 81)).astype(dtype)
    b = rng.standard_normal(c_out).astype(dtype)
    return x, w, b


def _bench_run(name: str, x, w, b) -> np.ndarray:
    out = np.empty((x.shape[0], w.shape[0]) + x.shape[2:], dtype=x.dtype)
    kernels.FORWARD[name](x, w, b, out, 1, 1, 1, 1)
    return out


def check_agreement(shape: Sequence[int], tolerance: float = BENCH_TOLERANCE) -> Dict:
    """Largest absolute difference of each implementation from "direct", in float64.

    Raises
    ------
    NumericError
        if any difference exceeds `tolerance`.
    """
    x, w, b = _bench_inputs(shape, np.float64)
    reference = _bench_run("direct", x, w, b)
    result = {}
    for name in kernels.FORWARD:
        result[name] = float(np.abs(_bench_run(name, x, w, b) - reference).max())
        if result[name] > tolerance:
            raise NumericError(
                f"{name!r} convolution differs from 'direct' by {result[name]:.3e}"
            )
    log.info(f"Convolution implementations agree: {result}")
    return result


def cmd_bench(args, config: RunConfig) -> None:
    if args.repetitions < 1:
        raise UsageError(f"repetitions must be ≥ 1; got {args.repetitions}")
    if len(args.shape) != 6 or min(args.shape) < 1:
        raise UsageError(f"--shape needs 6 positive integers; got {args.shape}")

    check_agreement(args.shape)

    x, w, b = _bench_inputs(args.shape, np.float32)
    macs = np.prod(args.shape) * 81
    print(f"shape {','.join(map(str, args.shape))}, {args.repetitions} repetitions, float32")
    print(f"{'kernel':<10}{'seconds':>12}{'GMAC/s':>10}")
    for name in ("naive", "temporal", "direct"):
        _bench_run(name, x, w, b)  # compile
        times = []
        for _ in range(args.repetitions):
            start = time.perf_counter()
            _bench_run(name, x, w, b)
            times.append(time.perf_counter() - start)
        best = min(times)
        print(f"{name:<10}{best:>12.5f}{macs / best / 1e9:>10.3f}")


def cmd_shapes(args, config: RunConfig) -> None:
    print_audit(config.net, "Configured network")


def cmd_compare(args, config: RunConfig) -> None:
    from .metrics import MetricsReport, compare_reports

    report, baseline = MetricsReport.read(args.report), MetricsReport.read(args.baseline)
    c = compare_reports(report, baseline, args.slack, args.dice_tolerance)
    print(f"Smoother by temporal L2:         {c.smoother_l2}")
    print(f"Smoother by surface distance:    {c.smoother_surf}")
    print(f"Mean Dice difference:            {c.dice_difference:+.4f}")
    print(f"Comparable Dice:                 {c.comparable_dice}")
    if not c.passed:
        raise Cardio4DError(f"{args.report} is not smoother than {args.baseline}")


COMMANDS: Dict[str, Callable] = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "bench": cmd_bench,
    "shapes": cmd_shapes,
    "compare": cmd_compare,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Run the command line; return the exit status."""
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s")
    stage = "cardio4d"
    try:
        args = build_parser().parse_args(argv)
        stage = args.command or stage

        overrides = args.overrides + (["debug=true"] if args.debug else [])
        config = RunConfig.load(args.config, overrides)

        if args.paper_shapes:
            print_audit(NetConfig.full(), "Full-size 4D network")
            print_audit(NetConfig.full_3d(), "Full-size 3D baseline")
            return 0
        elif args.command is None:
            raise UsageError("a command is required")

        COMMANDS[args.command](args, config)
    except Cardio4DError as e:
        log.error(f"{stage}: {type(e).__name__}: {e}")
        log.debug("".join(traceback.format_exception(e)))
        return e.exit_code
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
