"""IMU / ground-truth stream ingestion, alignment and step segmentation.

Internal units are m/s^2, rad/s, centimeters and seconds. The IMU runs at
500 Hz and the motion-capture reference at 100 Hz, so ground-truth sample ``k``
of an aligned pair corresponds to IMU sample ``5 k``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

G = 9.80665
DEG = math.pi / 180.0
IMU_RATE = 500.0
GT_RATE = 100.0
RATIO = 5
ACCEL_RANGE = 16 * G            # m/s^2, per axis
GYRO_RANGE = 2000 * DEG         # rad/s, per axis
MIN_STEP = 150
MAX_STEP = 2000

IMU_COLUMNS = ("t", "ax", "ay", "az", "gx", "gy", "gz")
MAG_COLUMNS = ("mx", "my", "mz")
GT_COLUMNS = ("t", "x", "y", "z")


class DataError(ValueError):
    """Base class for every input-data problem (CLI exit code 2)."""


class MalformedRow(DataError):
    def __init__(self, path, line, reason):
        super().__init__(f"{path}:{line}: {reason}")
        self.line = line


class NonMonotoneTime(DataError):
    pass


class IrregularSampling(DataError):
    pass


class RangeViolation(DataError):
    pass


class EmptyStream(DataError):
    pass


class NoOverlap(DataError):
    pass


class RateMismatch(DataError):
    pass


class OverlappingAnnotations(DataError):
    pass


class UnalignedStart(DataError):
    pass


class BadSegment(DataError):
    pass


# --------------------------------------------------------------------------
# unit conversion

def g_to_si(a):
    return np.asarray(a, dtype=float) * G


def si_to_g(a):
    return np.asarray(a, dtype=float) / G


def dps_to_si(w):
    return np.asarray(w, dtype=float) * DEG


def si_to_dps(w):
    return np.asarray(w, dtype=float) / DEG


# --------------------------------------------------------------------------
# domain types

class ImuSample(NamedTuple):
    t: float
    accel: tuple
    gyro: tuple


def _frozen(a):
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class ImuStream:
    t: np.ndarray          # (N,) seconds
    accel: np.ndarray      # (N, 3) m/s^2
    gyro: np.ndarray       # (N, 3) rad/s
    subject_id: str = ""
    rate_hz: float = IMU_RATE

    def __post_init__(self):
        object.__setattr__(self, "t", _frozen(self.t))
        object.__setattr__(self, "accel", _frozen(self.accel).reshape(-1, 3))
        object.__setattr__(self, "gyro", _frozen(self.gyro).reshape(-1, 3))
        if not len(self.t) == len(self.accel) == len(self.gyro):
            raise DataError("IMU stream arrays differ in length")

    def __len__(self):
        return len(self.t)

    def sample(self, i) -> ImuSample:
        return ImuSample(float(self.t[i]), tuple(self.accel[i]), tuple(self.gyro[i]))

    @property
    def duration(self):
        return len(self) / self.rate_hz

    def slice(self, start, stop):
        return ImuStream(self.t[start:stop], self.accel[start:stop], self.gyro[start:stop],
                         self.subject_id, self.rate_hz)


@dataclass(frozen=True, eq=False)
class GroundTruthStream:
    t: np.ndarray          # (M,) seconds
    positions: np.ndarray  # (M, 3) cm, lab frame: X walking direction, Y lateral, Z up
    subject_id: str = ""
    rate_hz: float = GT_RATE

    def __post_init__(self):
        object.__setattr__(self, "t", _frozen(self.t))
        object.__setattr__(self, "positions", _frozen(self.positions).reshape(-1, 3))
        if len(self.t) != len(self.positions):
            raise DataError("ground-truth stream arrays differ in length")

    def __len__(self):
        return len(self.t)

    @property
    def duration(self):
        return len(self) / self.rate_hz

    def slice(self, start, stop):
        return GroundTruthStream(self.t[start:stop], self.positions[start:stop],
                                 self.subject_id, self.rate_hz)


@dataclass(frozen=True, eq=False)
class AlignedPair:
    imu: ImuStream
    gt: GroundTruthStream
    imu_offset: int = 0   # index of imu[0] in the untrimmed stream
    gt_offset: int = 0


@dataclass(frozen=True, eq=False)
class StepSegment:
    """One walking step: ``L`` IMU samples and ``L / 5`` aligned reference points."""

    accel: np.ndarray      # (L, 3)
    gyro: np.ndarray       # (L, 3)
    positions: np.ndarray  # (L/5, 3) cm
    subject_id: str
    step_index: int
    start: int = 0         # IMU index of the first sample within its aligned stream

    def __post_init__(self):
        for name in ("accel", "gyro", "positions"):
            object.__setattr__(self, name, _frozen(getattr(self, name)).reshape(-1, 3))
        L = len(self.accel)
        if len(self.gyro) != L:
            raise BadSegment("accel and gyro lengths differ")
        if L % RATIO:
            raise BadSegment(f"step length {L} is not a multiple of {RATIO}")
        if not MIN_STEP <= L <= MAX_STEP:
            raise BadSegment(f"step length {L} outside [{MIN_STEP}, {MAX_STEP}]")
        if len(self.positions) * RATIO != L:
            raise BadSegment(f"{len(self.positions)} reference points do not match {L} IMU samples")

    @property
    def n_imu(self):
        return len(self.accel)

    @property
    def imu(self):
        """(6, L) rows ax, ay, az, gx, gy, gz."""
        return np.concatenate([self.accel.T, self.gyro.T])

    @property
    def gt(self):
        """(3, L/5) rows X, Y, Z in cm."""
        return self.positions.T

    @property
    def key(self):
        return (self.subject_id, self.step_index)


# --------------------------------------------------------------------------
# CSV parsing / writing

def _read_table(path, expected, optional=()):
    path = Path(path)
    units = None
    header = None
    rows = []
    with path.open() as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if body.startswith("units="):
                    units = body.split("=", 1)[1].strip()
                continue
            cells = [c.strip() for c in line.split(",")]
            if header is None:
                n = len(expected)
                if tuple(cells[:n]) != expected or tuple(cells[n:]) not in ((), tuple(optional)):
                    raise MalformedRow(path, lineno, f"expected header {','.join(expected)}")
                header = cells
                continue
            if len(cells) != len(header):
                raise MalformedRow(path, lineno, f"expected {len(header)} fields, got {len(cells)}")
            try:
                vals = [float(c) for c in cells]
            except ValueError:
                raise MalformedRow(path, lineno, "non-numeric field") from None
            if not all(math.isfinite(v) for v in vals):
                raise MalformedRow(path, lineno, "non-finite value")
            rows.append((lineno, vals))
    if header is None or not rows:
        raise EmptyStream(f"{path}: no samples")
    return units, header, rows


def _check_times(path, t, lines, rate):
    dt = np.diff(t)
    bad = np.flatnonzero(dt <= 0)
    if bad.size:
        raise NonMonotoneTime(f"{path}:{lines[bad[0] + 1]}: timestamp does not increase")
    period = 1.0 / rate
    off = np.flatnonzero(np.abs(dt - period) > 0.01 * period)
    if off.size:
        i = off[0]
        raise IrregularSampling(
            f"{path}:{lines[i + 1]}: sample spacing {dt[i]:.6g} s deviates from 1/{rate:g} Hz by more than 1%")


def parse_imu_log(path, units=None, subject_id=None) -> ImuStream:
    """Read an IMU CSV (``t,ax,ay,az,gx,gy,gz[,mx,my,mz]``) into SI units.

    ``units`` is ``"g_dps"`` or ``"si"``; when omitted the file's
    ``# units=...`` comment decides. Magnetometer columns are discarded.
    """
    file_units, _, rows = _read_table(path, IMU_COLUMNS, MAG_COLUMNS)
    units = units or file_units
    if units not in ("g_dps", "si"):
        raise DataError(f"{path}: unit spec must be g_dps or si (got {units!r})")
    lines = [r[0] for r in rows]
    data = np.array([r[1][:7] for r in rows])
    t, accel, gyro = data[:, 0], data[:, 1:4], data[:, 4:7]
    if units == "g_dps":
        accel, gyro = g_to_si(accel), dps_to_si(gyro)
    for arr, limit, what in ((accel, ACCEL_RANGE, "accelerometer"), (gyro, GYRO_RANGE, "gyroscope")):
        over = np.flatnonzero((np.abs(arr) > limit * (1 + 1e-12)).any(axis=1))
        if over.size:
            raise RangeViolation(f"{path}:{lines[over[0]]}: {what} sample exceeds the sensor dynamic range")
    _check_times(path, t, lines, IMU_RATE)
    return ImuStream(t, accel, gyro, subject_id if subject_id is not None else Path(path).stem)


def parse_gt_log(path, subject_id=None) -> GroundTruthStream:
    """Read a reference CSV (``t,x,y,z`` in millimeters) into centimeters."""
    _, _, rows = _read_table(path, GT_COLUMNS)
    lines = [r[0] for r in rows]
    data = np.array([r[1] for r in rows])
    _check_times(path, data[:, 0], lines, GT_RATE)
    return GroundTruthStream(data[:, 0], data[:, 1:4] / 10.0,
                             subject_id if subject_id is not None else Path(path).stem)


def write_imu_log(path, stream: ImuStream, units="si"):
    accel, gyro = stream.accel, stream.gyro
    if units == "g_dps":
        accel, gyro = si_to_g(accel), si_to_dps(gyro)
    lines = [f"# units={units}", ",".join(IMU_COLUMNS)]
    for t, a, w in zip(stream.t, accel, gyro):
        lines.append(",".join(repr(float(v)) for v in (t, *a, *w)))
    Path(path).write_text("\n".join(lines) + "\n")


def write_gt_log(path, stream: GroundTruthStream):
    lines = [",".join(GT_COLUMNS)]
    for t, p in zip(stream.t, stream.positions * 10.0):
        lines.append(",".join(repr(float(v)) for v in (t, *p)))
    Path(path).write_text("\n".join(lines) + "\n")


def parse_annotations(path):
    _, _, rows = _read_table(path, ("start", "end"))
    out = []
    for lineno, (s, e) in rows:
        if s != int(s) or e != int(e):
            raise MalformedRow(path, lineno, "annotation indices must be integers")
        out.append((int(s), int(e)))
    return out


def write_annotations(path, annotations):
    Path(path).write_text("start,end\n" + "".join(f"{s},{e}\n" for s, e in annotations))


# --------------------------------------------------------------------------
# alignment and segmentation

def align_streams(imu: ImuStream, gt: GroundTruthStream, min_overlap=1.0) -> AlignedPair:
    """Trim both streams to their common interval with an exact 5:1 index map."""
    if len(imu) < 2 or len(gt) < 2:
        raise EmptyStream("streams need at least two samples")
    imu_rate = (len(imu) - 1) / (imu.t[-1] - imu.t[0])
    gt_rate = (len(gt) - 1) / (gt.t[-1] - gt.t[0])
    if abs(imu_rate / gt_rate - RATIO) > 0.01 * RATIO:
        raise RateMismatch(f"IMU/reference rate ratio {imu_rate / gt_rate:.4f} deviates from {RATIO}")
    period = 1.0 / imu_rate
    lo = max(imu.t[0], gt.t[0])
    hi = min(imu.t[-1], gt.t[-1])
    if hi - lo < min_overlap - period:
        raise NoOverlap(f"streams overlap for {max(hi - lo, 0):.3f} s, need {min_overlap} s")
    j0 = int(np.searchsorted(gt.t, lo - 0.5 * period))
    i0 = int(np.argmin(np.abs(imu.t - gt.t[j0])))
    if abs(imu.t[i0] - gt.t[j0]) > 0.5 * period:
        raise RateMismatch("no IMU sample coincides with the first common reference sample")
    n_gt = int(np.searchsorted(gt.t, hi + 0.5 * period, side="right")) - j0
    m = min(n_gt, (len(imu) - i0) // RATIO)
    if m < 2:
        raise NoOverlap("common interval too short")
    last_imu = i0 + RATIO * (m - 1)
    if abs(imu.t[last_imu] - gt.t[j0 + m - 1]) > 0.5 * period:
        raise RateMismatch("5:1 index correspondence drifts across the common interval")
    return AlignedPair(imu.slice(i0, i0 + RATIO * m), gt.slice(j0, j0 + m), i0, j0)


def _segment(pair: AlignedPair, start, end, step_index):
    start, end = int(start), int(end)
    return StepSegment(pair.imu.accel[start:end], pair.imu.gyro[start:end],
                       pair.gt.positions[start // RATIO:end // RATIO],
                       pair.imu.subject_id or pair.gt.subject_id, step_index, start)


def segment_steps_annotated(pair: AlignedPair, annotations) -> list[StepSegment]:
    """One step per ``(start, end)`` IMU-index annotation (end exclusive).

    Ends that are not multiples of 5 are truncated down to one.
    """
    n = len(pair.imu)
    steps = []
    prev_end = 0
    for k, (start, end) in enumerate(annotations):
        if start < prev_end:
            raise OverlappingAnnotations(f"annotation {k} ({start},{end}) overlaps or is out of order")
        if start % RATIO:
            raise UnalignedStart(f"annotation {k} starts at {start}, not a multiple of {RATIO}")
        if not 0 <= start < end <= n:
            raise BadSegment(f"annotation {k} ({start},{end}) outside stream of {n} samples")
        end -= (end - start) % RATIO
        if end - start < MIN_STEP:
            raise BadSegment(f"annotation {k} spans {end - start} samples, shorter than one {MIN_STEP}-sample window")
        steps.append(_segment(pair, start, end, k))
        prev_end = end
    return steps


@dataclass(frozen=True)
class DetectorConfig:
    window: int = 50          # moving-RMS length, samples
    low: float = 0.3          # rad/s, hysteresis release
    high: float = 0.6         # rad/s, hysteresis trigger
    floor: float = 1e-3       # rad/s, minimum edge-refinement threshold
    noise_k: float = 5.0      # edge threshold >= noise_k * estimated stance noise


def _moving_rms(x, n):
    kernel = np.ones(n) / n
    return np.sqrt(np.maximum(np.convolve(x * x, kernel, mode="same"), 0.0))


def segment_steps_auto(pair: AlignedPair, cfg: DetectorConfig = DetectorConfig()) -> list[StepSegment]:
    """Find swing phases from gyroscope energy.

    A moving RMS of the gyro magnitude with hysteresis locates motion bursts;
    each burst's edges are then pushed to where the (baseline-removed) angular
    rate drops to the stance noise floor. Starts are snapped down and ends up
    to multiples of 5; bursts shorter than one window are discarded.
    """
    gyro = np.asarray(pair.imu.gyro)
    n = len(gyro)
    mag = np.linalg.norm(gyro, axis=1)
    rms = _moving_rms(mag, cfg.window)
    bursts = []
    active, a = False, 0
    for i, r in enumerate(rms):
        if not active and r > cfg.high:
            active, a = True, i
        elif active and r < cfg.low:
            bursts.append((a, i))
            active = False
    if active:
        bursts.append((a, n))
    if not bursts:
        return []

    still = rms < cfg.low
    if still.sum() >= 10:
        baseline = np.median(gyro[still], axis=0)
        resid = gyro[still] - baseline
        sigma = 1.4826 * np.median(np.abs(resid - np.median(resid, axis=0)), axis=0).max()
    else:
        baseline, sigma = np.zeros(3), 0.0
    edge = max(cfg.floor, cfg.noise_k * sigma)
    moving = np.linalg.norm(gyro - baseline, axis=1) > edge

    steps = []
    for a, b in bursts:
        idx = np.flatnonzero(moving[a:b])
        if idx.size == 0:
            continue
        s, e = a + idx[0], a + idx[-1] + 1
        while s > 0 and moving[s - 1]:
            s -= 1
        while e < n and moving[e]:
            e += 1
        s = (s // RATIO) * RATIO
        e = min(-(-e // RATIO) * RATIO, n - n % RATIO)
        if steps and s < steps[-1][1]:
            s = steps[-1][1]
        if MIN_STEP <= e - s <= MAX_STEP:
            steps.append((s, e))
    return [_segment(pair, s, e, k) for k, (s, e) in enumerate(steps)]


# --------------------------------------------------------------------------
# step store: <dir>/steps.csv + imu.bin (6 x sum L) + gt.bin (3 x sum L/5)

def save_steps(path, steps):
    from . import nn

    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    rows = ["subject_id,step_index,start,n_imu"]
    rows += [f"{s.subject_id},{s.step_index},{s.start},{s.n_imu}" for s in steps]
    (path / "steps.csv").write_text("\n".join(rows) + "\n")
    imu = np.concatenate([s.imu for s in steps], axis=1) if steps else np.zeros((6, 0))
    gt = np.concatenate([s.gt for s in steps], axis=1) if steps else np.zeros((3, 0))
    nn.save_tensor(path / "imu.bin", imu)
    nn.save_tensor(path / "gt.bin", gt)


def load_steps(path) -> list[StepSegment]:
    from . import nn

    path = Path(path)
    if not (path / "steps.csv").exists():
        raise DataError(f"{path} is not a step store (steps.csv missing)")
    imu = nn.load_tensor(path / "imu.bin")
    gt = nn.load_tensor(path / "gt.bin")
    steps = []
    i = 0
    for line in (path / "steps.csv").read_text().splitlines()[1:]:
        if not line.strip():
            continue
        sid, k, start, n = line.split(",")
        n = int(n)
        a = imu[:, i:i + n]
        steps.append(StepSegment(a[:3].T, a[3:].T, gt[:, i // RATIO:(i + n) // RATIO].T, sid, int(k), int(start)))
        i += n
    return steps
