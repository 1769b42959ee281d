"""Per-step trajectory reconstruction and per-axis error statistics.

Error metric: for each test step, the mean absolute deviation per axis between
the reconstructed and reference trajectories (cm); a report is the mean and
population standard deviation of those per-step values.

The test tiling leaves out the reference difference that bridges two
consecutive windows, so in differential mode the reference trajectory is the
ground truth rebuilt through the same tiling. Errors then measure prediction
error only and do not depend on the step's absolute position.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .pipeline import AugmentSpec, test_windows


class EmptyWindows(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Trajectory:
    points: np.ndarray     # (n, 3) cm, 100 Hz
    origin: np.ndarray     # (3,)

    def __len__(self):
        return len(self.points)


def reconstruct(windows, origin) -> Trajectory:
    """Concatenate predicted ``3 x n`` differences and integrate from ``origin``.

    ``windows`` is a sequence of ``(3, n)`` arrays or one ``(3, n)`` array.
    """
    if isinstance(windows, np.ndarray) and windows.ndim == 2:
        windows = [windows]
    windows = list(windows)
    if not windows:
        raise EmptyWindows("no windows to reconstruct from")
    diffs = np.concatenate([np.asarray(w, dtype=float) for w in windows], axis=1)
    origin = np.asarray(origin, dtype=float).reshape(3)
    pts = np.vstack([origin, origin + np.cumsum(diffs.T, axis=0)])
    return Trajectory(pts, origin)


def from_positions(windows, origin) -> Trajectory:
    """Trajectory for absolute-position outputs (non-differential mode)."""
    windows = list(windows)
    if not windows:
        raise EmptyWindows("no windows to reconstruct from")
    origin = np.asarray(origin, dtype=float).reshape(3)
    pts = np.vstack([origin] + [np.asarray(w, dtype=float).T for w in windows])
    return Trajectory(pts, origin)


def per_axis_error(pred, gt):
    """Mean absolute deviation per axis over trajectory points (cm)."""
    p = pred.points if isinstance(pred, Trajectory) else np.asarray(pred, dtype=float)
    g = gt.points if isinstance(gt, Trajectory) else np.asarray(gt, dtype=float)
    if p.shape != g.shape:
        raise LengthMismatch(f"trajectory of {len(p)} points vs reference of {len(g)}")
    return tuple(float(v) for v in np.abs(p - g).mean(axis=0))


@dataclass(frozen=True)
class StepResult:
    subject_id: str
    step_index: int
    errors: tuple              # (ex, ey, ez) cm
    n_windows: int
    pred: Trajectory
    ref: Trajectory

    @property
    def step_id(self):
        return f"{self.subject_id}/{self.step_index}"


@dataclass(frozen=True)
class ErrorReport:
    mean: tuple
    std: tuple
    steps: int
    windows: int
    points: int
    protocol: str = "mixed-step"

    def row(self, label=""):
        cells = [f"{m:.2f}±{s:.2f}" for m, s in zip(self.mean, self.std)]
        return f"{label:<34}{cells[0]:>14}{cells[1]:>14}{cells[2]:>14}"


def aggregate_report(results, protocol="mixed-step") -> ErrorReport:
    """Mean and population std across steps, per axis."""
    results = list(results)
    if not results:
        raise ValueError("no step results to aggregate")
    e = np.array([r.errors if isinstance(r, StepResult) else r for r in results], dtype=float)
    windows = sum(r.n_windows for r in results if isinstance(r, StepResult))
    points = sum(len(r.pred) for r in results if isinstance(r, StepResult))
    return ErrorReport(tuple(float(v) for v in e.mean(axis=0)), tuple(float(v) for v in e.std(axis=0)),
                       len(e), windows, points, protocol)


def evaluate_steps(model, steps, spec: AugmentSpec = AugmentSpec()):
    """Tile each step, predict every window and score the rebuilt trajectory."""
    from .training import predict

    results = []
    per_step = [test_windows(s, spec) for s in steps]
    flat = [w for ws in per_step for w in ws]
    if not flat:
        return results
    pred = predict(model, np.stack([w.x for w in flat]))
    k = 0
    for step, ws in zip(steps, per_step):
        p = pred[k:k + len(ws)]
        k += len(ws)
        origin = step.gt[:, 0]
        if spec.differential:
            traj = reconstruct(list(p), origin)
            ref = reconstruct([w.y for w in ws], origin)
        else:
            traj = from_positions(list(p), origin)
            ref = from_positions([w.y for w in ws], origin)
        results.append(StepResult(step.subject_id, step.step_index, per_axis_error(traj, ref),
                                  len(ws), traj, ref))
    return results


def mean_stride(steps):
    """Mean X displacement over a step (cm)."""
    return float(np.mean([s.gt[0, -1] - s.gt[0, 0] for s in steps]))


# --------------------------------------------------------------------------
# outputs

TABLE_HEADER = f"{'Architecture / Dataset':<34}{'X error(cm)':>14}{'Y error(cm)':>14}{'Z error(cm)':>14}"


def format_table(rows):
    """``rows``: iterable of ``(label, ErrorReport)``."""
    return "\n".join([TABLE_HEADER] + [rep.row(label) for label, rep in rows])


def write_step_csv(path, results):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step_id", "subject", "ex", "ey", "ez"])
        for r in results:
            w.writerow([r.step_id, r.subject_id, *(repr(v) for v in r.errors)])


def read_step_csv(path):
    with Path(path).open() as fh:
        return [(r["step_id"], r["subject"], float(r["ex"]), float(r["ey"]), float(r["ez"]))
                for r in csv.DictReader(fh)]


def write_report_csv(path, report: ErrorReport, label=""):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "protocol", "steps", "windows", "points",
                    "mean_x", "std_x", "mean_y", "std_y", "mean_z", "std_z"])
        cells = [v for pair in zip(report.mean, report.std) for v in pair]
        w.writerow([label, report.protocol, report.steps, report.windows, report.points,
                    *(repr(v) for v in cells)])


def write_points_csv(path, pred: Trajectory, gt: Trajectory):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "pred_x", "pred_y", "pred_z", "gt_x", "gt_y", "gt_z"])
        for k, (p, g) in enumerate(zip(pred.points, gt.points)):
            w.writerow([k, *(repr(float(v)) for v in p), *(repr(float(v)) for v in g)])


def read_points_csv(path):
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return rows[:, 1:4], rows[:, 4:7]


def emit_plots(pred: Trajectory, gt: Trajectory, out_dir, stem="step"):
    """Side view, top view and 3-D view SVGs plus a CSV of both point sets."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if len(pred) == 0 or len(gt) == 0:
        raise ValueError("cannot plot an empty trajectory")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    plt.rcParams["svg.hashsalt"] = "deepgait"
    P, G = pred.points, gt.points
    files = []
    for name, (a, b) in (("side", (0, 2)), ("top", (0, 1))):
        fig, ax = plt.subplots(figsize=(6, 3))
        ax.plot(G[:, a], G[:, b], "k-", label="ground truth")
        ax.plot(P[:, a], P[:, b], "r--", label="predicted")
        ax.set_xlabel(f"{'XYZ'[a]} (cm)")
        ax.set_ylabel(f"{'XYZ'[b]} (cm)")
        ax.legend()
        fig.tight_layout()
        f = out / f"{stem}_{name}.svg"
        fig.savefig(f, metadata={"Date": None})
        plt.close(fig)
        files.append(f)
    fig = plt.figure(figsize=(5, 4))
    ax = fig.add_subplot(projection="3d")
    ax.plot(G[:, 0], G[:, 1], G[:, 2], "k-", label="ground truth")
    ax.plot(P[:, 0], P[:, 1], P[:, 2], "r--", label="predicted")
    ax.set_xlabel("X (cm)")
    ax.set_ylabel("Y (cm)")
    ax.set_zlabel("Z (cm)")
    ax.legend()
    f = out / f"{stem}_3d.svg"
    fig.savefig(f, metadata={"Date": None})
    plt.close(fig)
    files.append(f)
    csv_path = out / f"{stem}_points.csv"
    write_points_csv(csv_path, pred, gt)
    files.append(csv_path)
    return files
