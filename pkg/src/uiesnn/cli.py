"""Command-line entry point: ``uiesnn {train,infer,profile,eval,synth}``.

Settings come from an optional INI file (sections ``[network]``, ``[train]``,
``[data]``, ``[run]``) and are overridden by flags. Every command writes the
resolved settings to ``config.resolved.ini`` in its output directory.

Exit codes: 0 success, 2 user/config error, 3 artifact error (checkpoint or
image I/O), 4 training divergence.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import data, network, profiler, quality, training
from .errors import CheckpointError, ConfigError, DivergenceError, IngestionError, PreconditionError
from .neuron import LifConfig

log = logging.getLogger("uiesnn")

EXIT_OK, EXIT_USAGE, EXIT_ARTIFACT, EXIT_DIVERGED = 0, 2, 3, 4
RESOLVED_NAME = "config.resolved.ini"


class UsageError(Exception):
    """Invalid flags or config values; carries every problem found."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


# ------------------------------------------------------------------ settings

def optional_float(text):
    """A float, or None for an empty / ``none`` value."""
    if text is None or str(text).strip().lower() in ("", "none"):
        return None
    return float(text)


optional_float.__name__ = "float"

# (section, key, type, default); a flag with the same key overrides the file
SETTINGS = (
    ("network", "depth", int, 4),
    ("network", "base_channels", int, 64),
    ("network", "timesteps", int, 5),
    ("network", "threshold", float, 0.25),
    ("network", "surrogate_slope", float, 25.0),
    ("network", "decay_init", float, 0.5),
    ("network", "resolution", int, 512),
    ("train", "epochs", int, 200),
    ("train", "validation_start_epoch", int, 50),
    ("train", "batch_size", int, 4),
    ("train", "lr", float, 1e-3),
    ("train", "lr_min", optional_float, None),
    ("data", "train_fraction", float, 0.9),
    ("data", "workers", int, 1),
    ("run", "seed", int, 0),
    ("run", "threads", int, 1),
)


@dataclass
class RunConfig:
    """Merged view of config file and flags."""

    values: dict
    paths: dict = field(default_factory=dict)

    def __getattr__(self, name):
        try:
            return self.__dict__["values"][name]
        except KeyError:
            raise AttributeError(name) from None

    def network_config(self):
        res = self.values["resolution"]
        return network.NetworkConfig(
            depth=self.depth, base_channels=self.base_channels, timesteps=self.timesteps,
            lif=LifConfig(threshold=self.threshold, surrogate_slope=self.surrogate_slope,
                          decay_init=self.decay_init),
            input_shape=(3, res, res))

    def schedule(self):
        return training.TrainSchedule(epochs=self.epochs, validation_start_epoch=self.validation_start_epoch,
                                      batch_size=self.batch_size, seed=self.seed, lr=self.lr,
                                      lr_min=self.lr_min)

    def to_ini(self):
        cp = configparser.ConfigParser()
        for section, key, _, _ in SETTINGS:
            if not cp.has_section(section):
                cp.add_section(section)
            value = self.values[key]
            cp.set(section, key, repr(value) if isinstance(value, float) else "" if value is None else str(value))
        cp.add_section("paths")
        for k, v in sorted(self.paths.items()):
            cp.set("paths", k, "" if v is None else str(v))
        return cp


def resolve(args):
    """Build and fully validate a RunConfig; raises UsageError listing every problem."""
    problems = []
    values = {key: default for _, key, _, default in SETTINGS}
    if getattr(args, "config", None):
        cp = configparser.ConfigParser()
        try:
            if not cp.read(args.config, encoding="utf-8"):
                raise UsageError([f"--config: cannot read {args.config}"])
        except configparser.Error as exc:
            raise UsageError([f"--config: {exc}"]) from exc
        known = {(s, k): t for s, k, t, _ in SETTINGS}
        for section in cp.sections():
            for key, raw in cp.items(section):
                if (section, key) not in known:
                    if section != "paths":
                        problems.append(f"--config: unknown setting [{section}] {key}")
                    continue
                try:
                    values[key] = known[(section, key)](raw)
                except ValueError:
                    problems.append(f"--config: [{section}] {key} = {raw!r} is not a valid "
                                    f"{known[(section, key)].__name__}")
    for _, key, _, _ in SETTINGS:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    rc = RunConfig(values)
    problems.extend(_path_problems(args))
    if values["threads"] < 1:
        problems.append("--threads must be >= 1")
    if values["workers"] < 1:
        problems.append("workers must be >= 1")
    try:
        rc.network_config()
    except (ConfigError, ValueError) as exc:
        problems.append(str(exc))
    if getattr(args, "command", None) == "train":
        try:
            rc.schedule()
        except ConfigError as exc:
            problems.append(str(exc))
    if problems:
        raise UsageError(problems)
    return rc


def _write_resolved(rc, out_dir):
    with open(Path(out_dir) / RESOLVED_NAME, "w", encoding="utf-8") as fh:
        rc.to_ini().write(fh)


# command -> ((attribute, flag, kind, required), ...)
PATH_FLAGS = {
    "train": (("data", "--data", "dir", True), ("val_data", "--val-data", "dir", False)),
    "infer": (("checkpoint", "--checkpoint", "file", True), ("input", "--input", "dir", True)),
    "profile": (("checkpoint", "--checkpoint", "file", True), ("input", "--input", "dir", True)),
    "eval": (("enhanced", "--enhanced", "dir", True),),
}


def _path_problems(args):
    problems = []
    for attr, flag, kind, required in PATH_FLAGS.get(getattr(args, "command", None), ()):
        path = getattr(args, attr, None)
        if path is None:
            if required:
                problems.append(f"{flag} is required")
        elif kind == "dir" and not Path(path).is_dir():
            problems.append(f"{flag}: directory not found: {path}")
        elif kind == "file" and not Path(path).is_file():
            problems.append(f"{flag}: file not found: {path}")
    return problems


def _out_dir(path):
    Path(path).mkdir(parents=True, exist_ok=True)
    return Path(path)


# ------------------------------------------------------------------ commands

def cmd_train(args, rc):
    cfg = rc.network_config()
    target = cfg.input_shape[1:]
    try:
        paths = data.scan_pairs(args.data)
    except ConfigError as exc:
        raise UsageError([f"--data: {exc}"]) from exc
    if not paths:
        raise UsageError([f"--data: no matching raw/ref image pairs under {args.data}"])
    if args.val_data is not None:
        train_paths, val_paths = paths, data.scan_pairs(args.val_data)
    elif len(paths) > 1 and rc.train_fraction < 1.0:
        manifest = data.DatasetManifest(paths, rc.seed, rc.train_fraction, 1.0 - rc.train_fraction, target)
        train_paths, val_paths = data.split(manifest)
    else:
        train_paths, val_paths = paths, []
    train_pairs = data.load_pairs(train_paths, target, rc.workers)
    val_pairs = data.load_pairs(val_paths, target, rc.workers)
    out = _out_dir(args.out)
    rc.paths.update(data=args.data, val_data=args.val_data, out=str(out))
    _write_resolved(rc, out)
    with open(out / "split.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["subset", "raw", "reference"])
        for name, subset in (("train", train_paths), ("val", val_paths)):
            for r, f in subset:
                w.writerow([name, r, f])
    result = training.train(train_pairs, val_pairs, cfg, rc.schedule(), out_dir=str(out))
    print(f"best epoch {result.best_epoch} val_mse {result.best_val_mse:.6g} -> {out / 'best.ckpt'}")
    return EXIT_OK


def _images_for(input_dir):
    files = data.list_images(input_dir)
    if not files:
        raise UsageError([f"--input: no images in {input_dir}"])
    return files


def cmd_infer(args, rc):
    graph = _load_for_run(args.checkpoint, rc, args)
    target = graph.cfg.input_shape[1:]
    out = _out_dir(args.out)
    rc.paths.update(checkpoint=args.checkpoint, input=args.input, out=str(out))
    _write_resolved(rc, out)
    rows = []
    for path in _images_for(args.input):
        image = data.load_image(path, target)
        t0 = time.perf_counter()
        pred, _ = network.infer(graph, image)
        elapsed = time.perf_counter() - t0
        name = Path(path).stem + ".png"
        data.save_png(pred, out / name)
        rows.append((name, f"{elapsed:.4f}"))
        log.info("%s: %.3f s", name, elapsed)
    with open(out / "timing.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["filename", "seconds"])
        w.writerows(rows)
    print(f"wrote {len(rows)} images to {out}")
    return EXIT_OK


def _load_for_run(checkpoint, rc, args):
    graph = network.load(checkpoint)
    changes = {}
    if args.timesteps is not None:
        changes["timesteps"] = args.timesteps
    if args.threshold is not None:
        changes["lif"] = LifConfig(threshold=args.threshold, surrogate_slope=graph.cfg.lif.surrogate_slope,
                                   decay_init=graph.cfg.lif.decay_init)
    if args.resolution is not None:
        changes["input_shape"] = (3, args.resolution, args.resolution)
    if changes:
        try:
            graph = network.with_config(graph, **changes)
        except ConfigError as exc:
            raise UsageError([str(exc)]) from exc
    for key in ("depth", "base_channels", "timesteps", "resolution"):
        rc.values[key] = graph.cfg.input_shape[1] if key == "resolution" else getattr(graph.cfg, key)
    rc.values["threshold"] = graph.cfg.lif.threshold
    return graph


def cmd_profile(args, rc):
    graph = _load_for_run(args.checkpoint, rc, args)
    target = graph.cfg.input_shape[1:]
    out = _out_dir(args.out)
    rc.paths.update(checkpoint=args.checkpoint, input=args.input, out=str(out))
    _write_resolved(rc, out)
    traces = []
    for path in _images_for(args.input):
        _, trace = network.infer(graph, data.load_image(path, target))
        traces.append(trace)
    report = profiler.energy_report(graph, profiler.merge_traces(traces))
    (out / "energy.csv").write_text(report.to_csv(), encoding="utf-8")
    summary = report.summary()
    (out / "summary.txt").write_text(summary + "\n", encoding="utf-8")
    print(summary)
    return EXIT_OK


EVAL_FULL = ("filename", "psnr_db", "ssim", "uciqe", "uiqm")
EVAL_NOREF = ("filename", "uciqe", "uiqm")


def _fmt(value):
    return "inf" if value == math.inf else repr(float(value))


def evaluate_dirs(enhanced_dir, reference_dir=None):
    """Per-image metric rows (dicts) for every enhanced image with a matching reference."""
    files = data.list_images(enhanced_dir)
    if reference_dir is not None:
        refs = {p.name: p for p in data.list_images(reference_dir)}
        files = [p for p in files if p.name in refs]
    rows = []
    for path in files:
        image = data.load_image(path)[0]
        row = {"filename": path.name, "uciqe": quality.uciqe(image), "uiqm": quality.uiqm(image)}
        if reference_dir is not None:
            ref = data.load_image(refs[path.name], image.shape[1:])[0]
            row["psnr_db"] = quality.psnr(ref, image)
            row["ssim"] = quality.ssim(ref, image)
        rows.append(row)
    return rows


def cmd_eval(args, rc):
    ref_dir = args.reference
    if ref_dir is not None and not Path(ref_dir).is_dir():
        log.warning("--reference %s not found; computing no-reference metrics only", ref_dir)
        ref_dir = None
    rows = evaluate_dirs(args.enhanced, ref_dir)
    if not rows:
        raise UsageError([f"--enhanced: no images with matching filenames in {args.enhanced}"])
    out = _out_dir(args.out)
    rc.paths.update(enhanced=args.enhanced, reference=ref_dir, out=str(out))
    _write_resolved(rc, out)
    fields = EVAL_FULL if ref_dir is not None else EVAL_NOREF
    means = {k: float(np.mean([r[k] for r in rows])) for k in fields[1:]}
    with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(fields)
        for r in rows:
            w.writerow([r["filename"]] + [_fmt(r[k]) for k in fields[1:]])
        w.writerow(["MEAN"] + [_fmt(means[k]) for k in fields[1:]])
    print("  ".join(f"{k} {means[k]:.4f}" for k in fields[1:]))
    return EXIT_OK


def cmd_synth(args, rc):
    if args.count < 1 or args.size < 1:
        raise UsageError(["--count and --size must be >= 1"])
    pairs = data.synthetic_pairs(args.count, args.size, rc.seed)
    data.write_pairs(pairs, args.out)
    print(f"wrote {len(pairs)} synthetic pairs to {args.out}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "infer": cmd_infer, "profile": cmd_profile, "eval": cmd_eval, "synth": cmd_synth}


# -------------------------------------------------------------------- parser

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with [network] [train] [data] [run] sections")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="BLAS thread count (results are reproducible per count)")
    common.add_argument("--depth", type=int)
    common.add_argument("--base-channels", dest="base_channels", type=int)
    common.add_argument("--timesteps", type=int)
    common.add_argument("--threshold", type=float)
    common.add_argument("--resolution", type=int, help="square input side length in pixels")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="uiesnn", description="Spiking U-Net for underwater image enhancement")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train from scratch on raw/ + ref/ image pairs")
    p.add_argument("--data", help="directory with raw/ and ref/ subdirectories")
    p.add_argument("--val-data", dest="val_data", help="separate validation directory (default: split --data)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-min", dest="lr_min", type=float, help="cosine-anneal the learning rate down to this value")
    p.add_argument("--validation-start", dest="validation_start_epoch", type=int)

    for name, text in (("infer", "enhance every image in a directory"),
                       ("profile", "spike rates, synaptic operations and energy on a set of images")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--checkpoint")
        p.add_argument("--input", help="directory of input images")

    p = sub.add_parser("eval", parents=[common], help="PSNR/SSIM/UCIQE/UIQM over a directory")
    p.add_argument("--enhanced", help="directory of enhanced images")
    p.add_argument("--reference", help="directory of reference images (optional)")

    p = sub.add_parser("synth", parents=[common], help="write procedural raw/ref pairs for smoke tests")
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--size", type=int, default=64)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = resolve(args)
        with threadpool_limits(limits=rc.threads):
            return COMMANDS[args.command](args, rc)
    except UsageError as exc:
        for problem in exc.problems:
            print(f"error: {problem}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, PreconditionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, IngestionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except DivergenceError as exc:
        print(f"error: {exc}; last finite checkpoint: {exc.checkpoint}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
