"""Command-line pipeline: simulate -> ingest -> augment -> train -> eval, plus crossval.

Every stage reads its inputs from and writes its outputs under ``--out``
(default layout below) so the stages chain with one output directory::

    <out>/corpus     simulate   per-subject IMU / reference / annotation CSVs
    <out>/steps      ingest     step store
    <out>/data       augment    train/val/test datasets, partition, size report
    <out>/model      train      checkpoint + history.csv
    <out>/eval       eval       report.txt/.csv, steps.csv, SVG plots
    <out>/crossval   crossval   per-fold reports + summary

Configuration is flat ``key=value`` text with section prefixes (``sim.``,
``detector.``, ``ingest.``, ``aug.``, ``split.``, ``model.``, ``train.``,
``paths.``); ``--set key=value`` and the short flags override the file.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import platform
import sys
from dataclasses import dataclass, field, fields, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from .gaitsim import CorpusRanges, InvalidParams, write_corpus
from .imu_data import (DataError, DetectorConfig, align_streams, load_steps, parse_annotations, parse_gt_log,
                       parse_imu_log, save_steps, segment_steps_annotated, segment_steps_auto)
from .model import InvalidConfig, ModelConfig, build_model, load_checkpoint, save_checkpoint
from .pipeline import AugmentSpec, Dataset, Partition, SplitSpec, build_dataset
from .training import Diverged, TrainConfig, coerce, config_to_text, cross_validate, train
from .trajectory import (aggregate_report, emit_plots, evaluate_steps, format_table, write_report_csv,
                         write_step_csv)

log = logging.getLogger("deepgait")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    n_subjects: int = 10
    steps_per_subject: int = 50
    units: str = "si"


@dataclass(frozen=True)
class IngestConfig:
    segmentation: str = "annotated"     # annotated | auto
    min_overlap: float = 1.0


@dataclass(frozen=True)
class Paths:
    corpus: str = ""        # empty -> <out>/corpus
    steps: str = ""
    data: str = ""
    model: str = ""


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = "run"
    sim: SimConfig = SimConfig()
    ranges: CorpusRanges = CorpusRanges()
    detector: DetectorConfig = DetectorConfig()
    ingest: IngestConfig = IngestConfig()
    aug: AugmentSpec = AugmentSpec()
    split: SplitSpec = SplitSpec()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    paths: Paths = field(default_factory=Paths)

    def path(self, name):
        p = getattr(self.paths, name)
        return Path(p) if p else Path(self.out) / name

    def lines(self):
        out = [f"seed={self.seed}"]
        for sec in SECTIONS:
            obj = getattr(self, sec)
            if sec == "model":
                out += [f"model.{k}={v}" for k, v in obj.to_dict().items()]
            else:
                out += config_to_text(obj, f"{sec}.")
        return out

    def text(self):
        return "\n".join(self.lines()) + "\n"

    def digest(self):
        return hashlib.sha256(self.text().encode()).hexdigest()


SECTIONS = ("sim", "ranges", "detector", "ingest", "aug", "split", "model", "train", "paths")


def parse_config_text(text, source="<config>"):
    """``key=value`` lines; ``#`` starts a comment. Returns an ordered dict."""
    out = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key=value, got {raw.strip()!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def apply_overrides(cfg: RunConfig, kv: dict) -> RunConfig:
    """Return ``cfg`` with flat ``section.field`` overrides applied and validated."""
    top, per = {}, {sec: {} for sec in SECTIONS}
    for key, value in kv.items():
        if key in ("seed", "out"):
            top[key] = value
            continue
        sec, _, name = key.partition(".")
        if sec not in per or not name:
            raise ConfigError(f"unknown config key {key!r}")
        names = {f.name for f in fields(getattr(cfg, sec))}
        if name not in names:
            raise ConfigError(f"unknown config key {key!r}")
        per[sec][name] = value
    try:
        if "seed" in top:
            cfg = replace(cfg, seed=int(top["seed"]))
        if "out" in top:
            cfg = replace(cfg, out=top["out"])
        for sec, vals in per.items():
            if not vals:
                continue
            obj = getattr(cfg, sec)
            if sec == "model":
                d = obj.to_dict()
                d.update(vals)
                new = ModelConfig.from_dict(d)
            else:
                new = replace(obj, **{k: _coerce_field(sec, k, v, getattr(obj, k)) for k, v in vals.items()})
            cfg = replace(cfg, **{sec: new})
    except ConfigError:
        raise
    except (ValueError, TypeError, InvalidConfig, InvalidParams) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
    _check(cfg)
    return cfg


def _coerce_field(sec, name, value, like):
    try:
        return coerce(value, like)
    except ValueError as exc:
        raise ConfigError(f"{sec}.{name}: cannot parse {value!r} ({exc})") from exc


def _check(cfg: RunConfig):
    if cfg.sim.units not in ("si", "g_dps"):
        raise ConfigError(f"sim.units must be si or g_dps, got {cfg.sim.units!r}")
    if cfg.sim.n_subjects < 1 or cfg.sim.steps_per_subject < 1:
        raise ConfigError("sim.n_subjects and sim.steps_per_subject must be positive")
    if cfg.ingest.segmentation not in ("annotated", "auto"):
        raise ConfigError(f"ingest.segmentation must be annotated or auto, got {cfg.ingest.segmentation!r}")
    if len(cfg.split.fractions) != 3 or abs(sum(cfg.split.fractions) - 1) > 1e-9:
        raise ConfigError("split.fractions must be three numbers summing to 1")


def build_config(args) -> RunConfig:
    kv = {}
    if args.config:
        p = Path(args.config)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        kv.update(parse_config_text(p.read_text(), str(p)))
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        kv[k.strip()] = v.strip()
    flags = {"seed": args.seed, "out": args.out, "model.channel_scale": args.scale,
             "model.variant": args.variant, "aug.mode": args.aug,
             "model.depth": None if args.depth is None else f"conv{args.depth}"}
    kv.update({k: str(v) for k, v in flags.items() if v is not None})
    return apply_overrides(RunConfig(), kv)


def write_manifest(out_dir, command, cfg: RunConfig, extra=None):
    """Config hash, seed, versions and the full resolved config next to the outputs."""
    lines = [f"command={command}", f"config_sha256={cfg.digest()}", f"seed={cfg.seed}",
             f"deepgait={__version__}", f"numpy={np.__version__}", f"python={platform.python_version()}"]
    lines += [f"{k}={v}" for k, v in (extra or {}).items()]
    lines += [f"config.{line}" for line in cfg.lines()]
    path = Path(out_dir) / "run_manifest.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


def _require(path, what):
    if not Path(path).exists():
        raise DataError(f"{what} not found at {path}")
    return Path(path)


# --------------------------------------------------------------------------
# commands

def cmd_simulate(cfg: RunConfig):
    out = cfg.path("corpus")
    sids = write_corpus(out, cfg.sim.n_subjects, cfg.sim.steps_per_subject, cfg.ranges, cfg.seed, cfg.sim.units)
    write_manifest(out, "simulate", cfg, {"subjects": len(sids)})
    log.info("wrote %d subjects to %s", len(sids), out)
    return out


def cmd_ingest(cfg: RunConfig):
    src = _require(cfg.path("corpus"), "corpus directory")
    imu_files = sorted(src.glob("*_imu.csv"))
    if not imu_files:
        raise DataError(f"no *_imu.csv files in {src}")
    steps = []
    for f in imu_files:
        sid = f.name[:-len("_imu.csv")]
        imu = parse_imu_log(f, subject_id=sid)
        gt = parse_gt_log(_require(src / f"{sid}_gt.csv", "reference log"), subject_id=sid)
        pair = align_streams(imu, gt, cfg.ingest.min_overlap)
        if cfg.ingest.segmentation == "annotated":
            # annotations index the raw IMU file; shift into the aligned pair
            ann = parse_annotations(_require(src / f"{sid}_steps.csv", "step annotations"))
            ann = [(s - pair.imu_offset, e - pair.imu_offset) for s, e in ann]
            steps += segment_steps_annotated(pair, ann)
        else:
            steps += segment_steps_auto(pair, cfg.detector)
    out = cfg.path("steps")
    save_steps(out, steps)
    write_manifest(out, "ingest", cfg, {"steps": len(steps)})
    log.info("stored %d steps in %s", len(steps), out)
    return out


def _write_partition(path, steps, part: Partition):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "subject_id", "step_index", "split"])
        for name in ("train", "val", "test"):
            for i in getattr(part, name):
                w.writerow([i, steps[i].subject_id, steps[i].step_index, name])


def _read_partition(path):
    idx = {"train": [], "val": [], "test": []}
    with Path(path).open() as fh:
        for r in csv.DictReader(fh):
            idx[r["split"]].append(int(r["index"]))
    return Partition(tuple(idx["train"]), tuple(idx["val"]), tuple(idx["test"]))


def cmd_augment(cfg: RunConfig):
    steps = load_steps(_require(cfg.path("steps"), "step store"))
    if cfg.split.mode != "by_step":
        raise ConfigError("augment materializes one by_step split; use crossval for subject folds")
    from .pipeline import split_steps
    part = split_steps(steps, cfg.split)
    tr, va, te, report = build_dataset(steps, cfg.aug, part, cfg.seed)
    out = cfg.path("data")
    out.mkdir(parents=True, exist_ok=True)
    for ds in (tr, va, te):
        ds.save(out / ds.split)
    _write_partition(out / "partition.csv", steps, part)
    report.save(out / "size_report.csv")
    write_manifest(out, "augment", cfg, {"train": len(tr), "val": len(va), "test": len(te)})
    log.info("train %d / val %d / test %d windows", len(tr), len(va), len(te))
    return out


def cmd_train(cfg: RunConfig, progress=None):
    data = _require(cfg.path("data"), "dataset directory")
    tr = Dataset.load(_require(data / "train", "training set"))
    va = Dataset.load(data / "val") if (data / "val").exists() else None
    model = build_model(cfg.model, seed=cfg.seed)
    model, hist = train(model, tr, va, replace(cfg.train, seed=cfg.seed), progress=progress)
    out = cfg.path("model")
    save_checkpoint(model, out, {"seed": cfg.seed, "best_epoch": hist.best_epoch})
    hist.save_csv(out / "history.csv")
    write_manifest(out, "train", cfg, {"epochs_run": len(hist), "best_epoch": hist.best_epoch})
    return out


def cmd_eval(cfg: RunConfig):
    steps = load_steps(_require(cfg.path("steps"), "step store"))
    part = _read_partition(_require(cfg.path("data") / "partition.csv", "partition"))
    model = load_checkpoint(_require(cfg.path("model"), "checkpoint"))
    test = [steps[i] for i in part.test]
    if not test:
        raise DataError("the partition has no test steps")
    results = evaluate_steps(model, test, cfg.aug)
    report = aggregate_report(results, "mixed-step")
    out = Path(cfg.out) / "eval"
    out.mkdir(parents=True, exist_ok=True)
    label = f"{model.cfg.variant} {model.cfg.depth} / {cfg.aug.mode}"
    (out / "report.txt").write_text(format_table([(label, report)]) + "\n")
    write_report_csv(out / "report.csv", report, label)
    write_step_csv(out / "steps.csv", results)
    worst = max(results, key=lambda r: r.errors[0])
    emit_plots(results[0].pred, results[0].ref, out / "plots", f"{results[0].subject_id}_{results[0].step_index}")
    emit_plots(worst.pred, worst.ref, out / "plots", f"worst_{worst.subject_id}_{worst.step_index}")
    write_manifest(out, "eval", cfg, {"test_steps": len(test)})
    return out


def cmd_crossval(cfg: RunConfig, progress=None):
    steps = load_steps(_require(cfg.path("steps"), "step store"))
    reports, summary = cross_validate(steps, cfg.model, replace(cfg.train, seed=cfg.seed), cfg.aug,
                                      k=cfg.split.k, seed=cfg.seed, progress=progress)
    out = Path(cfg.out) / "crossval"
    out.mkdir(parents=True, exist_ok=True)
    rows = [(f"fold {i}", r) for i, r in enumerate(reports)]
    text = format_table(rows) + "\n\n" + "mean X/Y/Z error (cm): " + \
        " ".join(f"{v:.3f}" for v in summary["mean"]) + f"\nbest fold: {summary['best_fold']}\n"
    (out / "report.txt").write_text(text)
    for i, r in enumerate(reports):
        write_report_csv(out / f"fold{i}.csv", r, f"fold {i}")
    with (out / "summary.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mean_x", "mean_y", "mean_z", "best_fold"])
        w.writerow([*(repr(v) for v in summary["mean"]), summary["best_fold"]])
    write_manifest(out, "crossval", cfg, {"folds": len(reports)})
    return out


COMMANDS = {"simulate": cmd_simulate, "ingest": cmd_ingest, "augment": cmd_augment,
            "train": cmd_train, "eval": cmd_eval, "crossval": cmd_crossval}


# --------------------------------------------------------------------------
# entry point

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _fraction(s):
    try:
        f = Fraction(s)
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"not a rational number: {s!r}")
    if f <= 0:
        raise argparse.ArgumentTypeError("scale must be positive")
    return f


def make_parser():
    p = _Parser(prog="deepgait", description="IMU stride reconstruction pipeline")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="flat key=value config file")
        s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        s.add_argument("--seed", type=int)
        s.add_argument("--out")
        s.add_argument("--scale", type=_fraction, help="channel scale, e.g. 1/8")
        s.add_argument("--variant", choices=("fused", "independent"))
        s.add_argument("--depth", type=int, choices=(9, 5))
        s.add_argument("--aug", choices=("none", "sliding", "random", "combined"))
    return p


def _log_epoch(epoch, hist):
    log.info("epoch %d train %.5f val %.5f", epoch + 1, hist.train_loss[-1], hist.val_loss[-1])


def main(argv=None):
    try:
        args = make_parser().parse_args(argv)
    except SystemExit as exc:          # usage errors and --help
        return exc.code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    progress = _log_epoch if args.verbose else None
    try:
        cfg = build_config(args)
        fn = COMMANDS[args.command]
        out = fn(cfg, progress) if args.command in ("train", "crossval") else fn(cfg)
    except Diverged as exc:
        print(f"deepgait {args.command}: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, DataError, ValueError, OSError) as exc:
        print(f"deepgait {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(out)
    return EXIT_OK
