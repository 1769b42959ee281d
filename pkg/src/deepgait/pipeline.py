"""Windowing, augmentation and splitting of step segments into model datasets."""
from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import nn
from .imu_data import IMU_RATE, RATIO, StepSegment


class TooShort(ValueError):
    pass


class TooFewSteps(ValueError):
    pass


class NotEnoughSubjects(ValueError):
    pass


def differentiate(series):
    """Consecutive differences along the last axis: ``C x N -> C x (N - 1)``."""
    series = np.asarray(series)
    if series.shape[-1] < 2:
        raise TooShort(f"need at least 2 samples to differentiate, got {series.shape[-1]}")
    return series[..., 1:] - series[..., :-1]


def integrate(diffs, origin):
    """Inverse of :func:`differentiate`: prepend ``origin`` and accumulate."""
    diffs = np.asarray(diffs, dtype=float)
    origin = np.asarray(origin, dtype=float).reshape(*diffs.shape[:-1], 1)
    return np.concatenate([origin, origin + np.cumsum(diffs, axis=-1)], axis=-1)


@dataclass(frozen=True)
class AugmentSpec:
    win_imu: int = 150
    win_gt: int = 30
    overlap_imu: int = 10
    overlap_gt: int = 2
    random_count: int = 5
    mode: str = "combined"        # none | sliding | random | combined
    differential: bool = True     # False: raw samples in, absolute positions out

    def __post_init__(self):
        if self.win_imu != RATIO * self.win_gt or self.overlap_imu != RATIO * self.overlap_gt:
            raise ValueError("IMU window and overlap must be exactly 5x the reference ones")
        if not 0 <= self.overlap_imu < self.win_imu:
            raise ValueError("overlap must be smaller than the window")
        if self.mode not in ("none", "sliding", "random", "combined"):
            raise ValueError(f"unknown augmentation mode {self.mode!r}")
        if self.random_count < 1:
            raise ValueError("random_count must be positive")

    @property
    def stride(self):
        return self.win_imu - self.overlap_imu


class Provenance(NamedTuple):
    subject_id: str
    step_index: int
    imu_start: int
    tag: str


@dataclass(frozen=True, eq=False)
class Window:
    x: np.ndarray        # (6, win_imu - 1)
    y: np.ndarray        # (3, win_gt - 1)
    provenance: Provenance


def make_window(step: StepSegment, start, spec: AugmentSpec, tag) -> Window:
    if start % RATIO:
        raise ValueError(f"window start {start} is not a multiple of {RATIO}")
    imu = step.imu[:, start:start + spec.win_imu]
    gt = step.gt[:, start // RATIO:start // RATIO + spec.win_gt]
    if imu.shape[1] != spec.win_imu or gt.shape[1] != spec.win_gt:
        raise ValueError(f"window at {start} runs past the end of a {step.n_imu}-sample step")
    if spec.differential:
        x, y = differentiate(imu), differentiate(gt)
    else:
        x, y = imu[:, 1:], gt[:, 1:]
    return Window(x, y, Provenance(step.subject_id, step.step_index, start, tag))


def _need(step, spec):
    if step.n_imu < spec.win_imu:
        raise TooShort(f"step of {step.n_imu} samples is shorter than a {spec.win_imu}-sample window")


def sliding_starts(n, spec: AugmentSpec):
    starts = list(range(0, n - spec.win_imu + 1, spec.stride))
    if starts[-1] + spec.win_imu < n:
        starts.append(RATIO * ((n - spec.win_imu) // RATIO))
    return starts


def sliding_windows(step: StepSegment, spec: AugmentSpec = AugmentSpec()) -> list[Window]:
    """Overlapping windows plus one tail window anchored at the step end."""
    _need(step, spec)
    return [make_window(step, s, spec, "sliding") for s in sliding_starts(step.n_imu, spec)]


def random_starts(n, spec: AugmentSpec, rng):
    return RATIO * rng.integers(0, (n - spec.win_imu) // RATIO + 1, size=spec.random_count)


def random_windows(step: StepSegment, spec: AugmentSpec, rng) -> list[Window]:
    """``random_count`` windows with uniform 5-aligned starts, drawn with replacement."""
    _need(step, spec)
    return [make_window(step, int(s), spec, "random") for s in random_starts(step.n_imu, spec, rng)]


def test_starts(n, spec: AugmentSpec):
    return list(range(0, n - spec.win_imu + 1, spec.win_imu))


def test_windows(step: StepSegment, spec: AugmentSpec = AugmentSpec()) -> list[Window]:
    """Contiguous non-overlapping tiling; a remainder shorter than a window is dropped."""
    _need(step, spec)
    return [make_window(step, s, spec, "test") for s in test_starts(step.n_imu, spec)]


test_windows.__test__ = False  # not a pytest test


def step_rng(seed, step: StepSegment):
    return np.random.default_rng([seed, zlib.crc32(step.subject_id.encode()), step.step_index])


def augment_step(step, spec: AugmentSpec, seed) -> list[Window]:
    if spec.mode == "none":
        return [make_window(step, w.provenance.imu_start, spec, "none") for w in test_windows(step, spec)]
    out = []
    if spec.mode in ("sliding", "combined"):
        out += sliding_windows(step, spec)
    if spec.mode in ("random", "combined"):
        out += random_windows(step, spec, step_rng(seed, step))
    return out


# --------------------------------------------------------------------------
# datasets

@dataclass(eq=False)
class Dataset:
    x: np.ndarray                  # (N, 6, 149)
    y: np.ndarray                  # (N, 3, 29)
    provenance: list
    split: str = "train"
    seed: int = 0

    def __len__(self):
        return len(self.x)

    @property
    def windows(self):
        return [Window(x, y, p) for x, y, p in zip(self.x, self.y, self.provenance)]

    @classmethod
    def from_windows(cls, windows, split, seed, spec: AugmentSpec = AugmentSpec()):
        if windows:
            x = np.stack([w.x for w in windows])
            y = np.stack([w.y for w in windows])
        else:
            x = np.zeros((0, 6, spec.win_imu - 1))
            y = np.zeros((0, 3, spec.win_gt - 1))
        return cls(x, y, [w.provenance for w in windows], split, seed)

    def step_keys(self):
        return {(p.subject_id, p.step_index) for p in self.provenance}

    def save(self, path):
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        nn.save_tensor(path / "x.bin", self.x)
        nn.save_tensor(path / "y.bin", self.y)
        with (path / "manifest.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["row", "subject_id", "step_index", "imu_start", "tag", "split", "seed"])
            for i, p in enumerate(self.provenance):
                w.writerow([i, p.subject_id, p.step_index, p.imu_start, p.tag, self.split, self.seed])

    @classmethod
    def load(cls, path):
        path = Path(path)
        x = nn.load_tensor(path / "x.bin")
        y = nn.load_tensor(path / "y.bin")
        prov, split, seed = [], "train", 0
        with (path / "manifest.csv").open() as fh:
            for r in csv.DictReader(fh):
                prov.append(Provenance(r["subject_id"], int(r["step_index"]), int(r["imu_start"]), r["tag"]))
                split, seed = r["split"], int(r["seed"])
        return cls(x, y, prov, split, seed)


@dataclass(frozen=True)
class SplitSpec:
    mode: str = "by_step"          # by_step | by_subject_kfold
    fractions: tuple = (0.8, 0.1, 0.1)
    k: int = 6
    val_fraction: float = 0.1      # of the training steps, k-fold mode
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("by_step", "by_subject_kfold"):
            raise ValueError(f"unknown split mode {self.mode!r}")
        if self.mode == "by_subject_kfold" and self.k < 2:
            raise ValueError("k-fold splitting needs k >= 2")


@dataclass(frozen=True)
class Partition:
    train: tuple
    val: tuple
    test: tuple
    fold: int | None = None
    test_subjects: tuple = ()


def _three_way(indices, fractions):
    n = len(indices)
    n_train = round(fractions[0] * n)
    n_val = round(fractions[1] * n)
    return (tuple(sorted(indices[:n_train])), tuple(sorted(indices[n_train:n_train + n_val])),
            tuple(sorted(indices[n_train + n_val:])))


def split_steps(steps, split: SplitSpec = SplitSpec(), rng=None):
    """Step-level partition (by_step) or list of subject-disjoint folds (by_subject_kfold).

    Returned indices refer to positions in ``steps``.
    """
    if rng is None:
        rng = np.random.default_rng(split.seed)
    if split.mode == "by_step":
        order = [int(i) for i in rng.permutation(len(steps))]
        return Partition(*_three_way(order, split.fractions))
    subjects = sorted({s.subject_id for s in steps})
    if len(subjects) < split.k:
        raise NotEnoughSubjects(f"{len(subjects)} subjects cannot form {split.k} folds")
    shuffled = [subjects[i] for i in rng.permutation(len(subjects))]
    folds = np.array_split(np.array(shuffled, dtype=object), split.k)
    parts = []
    for f, fold_subjects in enumerate(folds):
        held = set(fold_subjects)
        test = [i for i, s in enumerate(steps) if s.subject_id in held]
        rest = [i for i, s in enumerate(steps) if s.subject_id not in held]
        rest = [rest[i] for i in rng.permutation(len(rest))]
        n_val = round(split.val_fraction * len(rest))
        parts.append(Partition(tuple(sorted(rest[n_val:])), tuple(sorted(rest[:n_val])), tuple(test),
                               f, tuple(sorted(held))))
    return parts


@dataclass
class SizeReport:
    """Window and sample-point counts of the training split, per augmentation."""

    base_points: int                       # sum of training-step IMU lengths
    rows: dict = field(default_factory=dict)   # name -> (windows, points)

    def multiplier(self, name):
        return self.rows[name][1] / self.base_points

    def lines(self):
        out = ["augmentation,windows,sample_points,seconds,multiplier"]
        out.append(f"original,0,{self.base_points},{self.base_points / IMU_RATE:.3f},1.000")
        for name, (n_win, pts) in self.rows.items():
            out.append(f"{name},{n_win},{pts},{pts / IMU_RATE:.3f},{pts / self.base_points:.3f}")
        return out

    def save(self, path):
        Path(path).write_text("\n".join(self.lines()) + "\n")


def build_dataset(steps, spec: AugmentSpec = AugmentSpec(), split: SplitSpec | Partition = SplitSpec(), seed=0):
    """Split at step level, then augment the training steps only.

    Validation and test steps always use the non-overlapping tiling.
    Returns ``(train, val, test, SizeReport)``.
    """
    if len(steps) < 10:
        raise TooFewSteps(f"need at least 10 steps, got {len(steps)}")
    part = split if isinstance(split, Partition) else split_steps(steps, split)
    if isinstance(part, list):
        raise ValueError("build_dataset takes a single partition; pick one fold")
    train_steps = [steps[i] for i in part.train]
    train = []
    for s in train_steps:
        train += augment_step(s, spec, seed)
    val = [w for i in part.val for w in _eval_windows(steps[i], spec)]
    test = [w for i in part.test for w in _eval_windows(steps[i], spec)]

    report = SizeReport(sum(s.n_imu for s in train_steps))
    n_slide = sum(len(sliding_starts(s.n_imu, spec)) for s in train_steps)
    n_rand = spec.random_count * len(train_steps)
    n_none = sum(len(test_starts(s.n_imu, spec)) for s in train_steps)
    for name, n in (("none", n_none), ("sliding", n_slide), ("random", n_rand), ("combined", n_slide + n_rand)):
        report.rows[name] = (n, n * spec.win_imu)
    return (Dataset.from_windows(train, "train", seed, spec), Dataset.from_windows(val, "val", seed, spec),
            Dataset.from_windows(test, "test", seed, spec), report)


def _eval_windows(step, spec):
    return test_windows(step, spec)
