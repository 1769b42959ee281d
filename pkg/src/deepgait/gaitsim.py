"""Synthetic foot-mounted IMU data with known ground truth.

A step is a swing phase of duration ``T`` between two stance phases. Within
the swing (``u = t / T``):

    X(t) = D (u - sin(2 pi u) / (2 pi))       D = speed * T
    Y(t) = sway * sin^2(pi u)
    Z(t) = clearance * sin^2(pi u)
    pitch(t) = A sin(2 pi u) sin^2(pi u)

All positions, velocities and angular rates vanish at both ends of the
swing, so consecutive steps glue into a continuous walk. The accelerometer
reports specific force (``a - g``, so a resting sensor reads +9.80665 m/s^2
on its z axis) rotated into the body frame; the gyroscope reports body-frame
angular velocity (pitch rate about the lateral axis).
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imu_data import (ACCEL_RANGE, G, GT_RATE, GYRO_RANGE, IMU_RATE, RATIO, AlignedPair,
                       GroundTruthStream, ImuStream, segment_steps_annotated,
                       write_annotations, write_gt_log, write_imu_log)

TWO_PI = 2 * math.pi


class InvalidParams(ValueError):
    pass


class RangeExceeded(ValueError):
    pass


@dataclass(frozen=True)
class GaitParams:
    speed: float = 1.0               # m/s
    step_duration: float = 0.7       # s
    clearance: float = 5.0           # cm
    sway: float = 1.0                # cm
    pitch_amplitude: float = 0.6     # rad
    accel_noise_sigma: float = 0.0   # m/s^2
    gyro_noise_sigma: float = 0.0    # rad/s
    accel_bias: tuple = (0.0, 0.0, 0.0)
    gyro_bias: tuple = (0.0, 0.0, 0.0)
    seed: int = 0

    def validate(self):
        if not 0.45 <= self.speed <= 1.75:
            raise InvalidParams(f"speed {self.speed} m/s outside [0.45, 1.75]")
        if not 0.6 <= self.step_duration <= 1.4:
            raise InvalidParams(f"step_duration {self.step_duration} s outside [0.6, 1.4]")
        if not 2 <= self.clearance <= 8:
            raise InvalidParams(f"clearance {self.clearance} cm outside [2, 8]")
        if not 0 <= self.sway <= 3:
            raise InvalidParams(f"sway {self.sway} cm outside [0, 3]")
        if self.accel_noise_sigma < 0 or self.gyro_noise_sigma < 0:
            raise InvalidParams("noise sigmas must be non-negative")
        if len(self.accel_bias) != 3 or len(self.gyro_bias) != 3:
            raise InvalidParams("biases must be 3-vectors")
        n = self.step_duration * IMU_RATE
        if abs(n - round(n)) > 1e-6 or round(n) % RATIO:
            raise InvalidParams("step_duration must be a whole number of 10 ms reference periods")
        return self


@dataclass(frozen=True)
class SwingPath:
    """Closed-form swing trajectory in meters / radians, local to the step start."""

    duration: float
    stride: float          # m
    sway: float            # m
    clearance: float       # m
    pitch_amplitude: float

    def position(self, t):
        u = np.asarray(t) / self.duration
        s2 = np.sin(math.pi * u) ** 2
        x = self.stride * (u - np.sin(TWO_PI * u) / TWO_PI)
        return np.stack([x, self.sway * s2, self.clearance * s2], axis=-1)

    def velocity(self, t):
        T = self.duration
        u = np.asarray(t) / T
        x = self.stride / T * (1 - np.cos(TWO_PI * u))
        s = np.sin(TWO_PI * u) * math.pi / T
        return np.stack([x, self.sway * s, self.clearance * s], axis=-1)

    def acceleration(self, t):
        T = self.duration
        u = np.asarray(t) / T
        x = self.stride * TWO_PI / T**2 * np.sin(TWO_PI * u)
        c = np.cos(TWO_PI * u) * 2 * math.pi**2 / T**2
        return np.stack([x, self.sway * c, self.clearance * c], axis=-1)

    def pitch(self, t):
        u = np.asarray(t) / self.duration
        return self.pitch_amplitude * np.sin(TWO_PI * u) * np.sin(math.pi * u) ** 2

    def pitch_rate(self, t):
        T = self.duration
        u = np.asarray(t) / T
        a, b = TWO_PI * u, math.pi * u
        # d/du [sin(a) sin^2(b)] = 2pi cos(a) sin^2(b) + pi sin(a) sin(2b)
        d = TWO_PI * np.cos(a) * np.sin(b) ** 2 + math.pi * np.sin(a) * np.sin(2 * b)
        return self.pitch_amplitude * d / T

    def arc_length(self, n=20001):
        p = self.position(np.linspace(0, self.duration, n))
        return float(np.linalg.norm(np.diff(p, axis=0), axis=1).sum())


def synth_trajectory(params: GaitParams) -> SwingPath:
    params.validate()
    T = params.step_duration
    return SwingPath(T, params.speed * T, params.sway / 100.0, params.clearance / 100.0,
                     params.pitch_amplitude)


def specific_force_body(acc_world, pitch):
    """Rotate ``a - g`` into a body frame pitched by ``pitch`` about the lateral axis."""
    f = np.array(acc_world, dtype=float)
    f[..., 2] += G
    c, s = np.cos(pitch), np.sin(pitch)
    # body = R_y(pitch)^T world
    return np.stack([c * f[..., 0] - s * f[..., 2], f[..., 1], s * f[..., 0] + c * f[..., 2]], axis=-1)


@dataclass
class Walk:
    """A continuous synthetic recording with its hidden truth."""

    imu: ImuStream
    gt: GroundTruthStream
    boundaries: list            # (start, end) IMU indices of each swing
    params: list                # GaitParams per swing
    accel_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def pair(self):
        return AlignedPair(self.imu, self.gt)


def _walk_signals(steps, stances, origin):
    """Noise-free world positions (m), body specific force and gyro at 500 Hz."""
    n_total = sum(stances) + sum(round(p.step_duration * IMU_RATE) for p in steps)
    pos = np.zeros((n_total, 3))
    acc = np.zeros((n_total, 3))
    pitch = np.zeros(n_total)
    rate = np.zeros(n_total)
    here = np.array(origin, dtype=float)
    i = 0
    bounds = []
    for k, p in enumerate(steps):
        pos[i:i + stances[k]] = here
        i += stances[k]
        path = synth_trajectory(p)
        n = round(p.step_duration * IMU_RATE)
        t = np.arange(n) / IMU_RATE
        pos[i:i + n] = here + path.position(t)
        acc[i:i + n] = path.acceleration(t)
        pitch[i:i + n] = path.pitch(t)
        rate[i:i + n] = path.pitch_rate(t)
        bounds.append((i, i + n))
        here = here + path.position(p.step_duration)
        i += n
    pos[i:] = here
    return pos, specific_force_body(acc, pitch), rate, bounds


def imu_from_trajectory(params: GaitParams, stance=(100, 100), origin=(0.0, 0.0, 0.0), subject_id="sim"):
    """Simulate one swing framed by stance phases: returns ``(imu, gt, (start, end))``."""
    walk = simulate_walk([params], [stance[0]], tail=stance[1], origin=origin, subject_id=subject_id,
                         seed=params.seed)
    return walk.imu, walk.gt, walk.boundaries[0]


def simulate_walk(steps, stances, tail=100, origin=(0.0, 0.0, 0.0), subject_id="sim", seed=0) -> Walk:
    """Concatenate stance/swing phases into one recording.

    ``stances[k]`` is the number of stationary IMU samples before swing ``k``;
    ``tail`` the number after the last swing. All counts must be multiples of 5.
    Noise and bias are taken from ``steps[0]``.
    """
    if len(stances) != len(steps):
        raise InvalidParams("one stance length per step is required")
    stances = list(stances)
    if any(s % RATIO or s < 0 for s in stances + [tail]):
        raise InvalidParams("stance lengths must be non-negative multiples of 5")
    for p in steps:
        p.validate()
    pos, accel, gyro_y, bounds = _walk_signals(steps, stances + [tail], origin)
    n = len(pos)
    gyro = np.zeros((n, 3))
    gyro[:, 1] = gyro_y

    p0 = steps[0]
    rng = np.random.default_rng(seed)
    a_bias = np.asarray(p0.accel_bias, dtype=float)
    g_bias = np.asarray(p0.gyro_bias, dtype=float)
    accel = accel + a_bias + p0.accel_noise_sigma * rng.standard_normal((n, 3))
    gyro = gyro + g_bias + p0.gyro_noise_sigma * rng.standard_normal((n, 3))
    if np.abs(accel).max() > ACCEL_RANGE or np.abs(gyro).max() > GYRO_RANGE:
        raise RangeExceeded("parameters drive the simulated sensor beyond its dynamic range")

    t = np.arange(n) / IMU_RATE
    imu = ImuStream(t, accel, gyro, subject_id)
    gt = GroundTruthStream(np.arange(n // RATIO) / GT_RATE, pos[::RATIO][: n // RATIO] * 100.0, subject_id)
    return Walk(imu, gt, bounds, list(steps), a_bias, g_bias)


@dataclass(frozen=True)
class CorpusRanges:
    """Per-subject parameter ranges; per-step values jitter around the subject's draw."""

    speed: tuple = (0.45, 1.75)
    step_duration: tuple = (0.6, 0.8)
    clearance: tuple = (2.0, 8.0)
    sway: tuple = (0.0, 3.0)
    pitch_amplitude: tuple = (0.4, 0.8)
    stance: tuple = (0.2, 0.4)           # s
    jitter: float = 0.05                 # relative per-step jitter
    accel_noise_sigma: float = 0.0
    gyro_noise_sigma: float = 0.0
    accel_bias_sigma: float = 0.0
    gyro_bias_sigma: float = 0.0


def _snap(seconds, lo, hi):
    """Round to whole 10 ms periods inside [lo, hi]."""
    n = round(seconds * GT_RATE)
    n = min(max(n, math.ceil(lo * GT_RATE - 1e-9)), math.floor(hi * GT_RATE + 1e-9))
    return n / GT_RATE


def _clip(v, bounds):
    return float(min(max(v, bounds[0]), bounds[1]))


def subject_walk(subject_id, n_steps, ranges: CorpusRanges, seed) -> Walk:
    rng = np.random.default_rng([seed, zlib.crc32(subject_id.encode())])
    base = {k: rng.uniform(*getattr(ranges, k))
            for k in ("speed", "step_duration", "clearance", "sway", "pitch_amplitude")}
    a_bias = tuple(rng.normal(0, ranges.accel_bias_sigma, 3)) if ranges.accel_bias_sigma else (0.0,) * 3
    g_bias = tuple(rng.normal(0, ranges.gyro_bias_sigma, 3)) if ranges.gyro_bias_sigma else (0.0,) * 3
    steps, stances = [], []
    for _ in range(n_steps):
        j = 1 + ranges.jitter * rng.uniform(-1, 1, size=5)
        steps.append(GaitParams(
            speed=_clip(base["speed"] * j[0], (0.45, 1.75)),
            step_duration=_snap(base["step_duration"] * j[1], 0.6, 1.4),
            clearance=_clip(base["clearance"] * j[2], (2.0, 8.0)),
            sway=_clip(base["sway"] * j[3], (0.0, 3.0)),
            pitch_amplitude=base["pitch_amplitude"] * j[4],
            accel_noise_sigma=ranges.accel_noise_sigma,
            gyro_noise_sigma=ranges.gyro_noise_sigma,
            accel_bias=a_bias, gyro_bias=g_bias, seed=seed))
        stances.append(round(rng.uniform(*ranges.stance) * GT_RATE) * RATIO)
    origin = (0.0, float(rng.uniform(-50, 50)) / 100.0, 0.0)
    return simulate_walk(steps, stances, tail=stances[0], origin=origin, subject_id=subject_id,
                         seed=int(rng.integers(2**31)))


def subject_ids(n_subjects):
    return [f"S{i:02d}" for i in range(n_subjects)]


def generate_corpus(n_subjects, steps_per_subject, ranges: CorpusRanges = CorpusRanges(), seed=0):
    """Steps of ``n_subjects`` synthetic walkers, segmented at their true swing boundaries."""
    if n_subjects < 1:
        raise InvalidParams("need at least one subject")
    steps = []
    for sid in subject_ids(n_subjects):
        walk = subject_walk(sid, steps_per_subject, ranges, seed)
        steps += segment_steps_annotated(walk.pair, walk.boundaries)
    return steps


def write_corpus(out_dir, n_subjects, steps_per_subject, ranges: CorpusRanges = CorpusRanges(), seed=0,
                 units="si"):
    """Write ``<sid>_imu.csv``, ``<sid>_gt.csv`` and ``<sid>_steps.csv`` per subject."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for sid in subject_ids(n_subjects):
        walk = subject_walk(sid, steps_per_subject, ranges, seed)
        write_imu_log(out / f"{sid}_imu.csv", walk.imu, units=units)
        write_gt_log(out / f"{sid}_gt.csv", walk.gt)
        write_annotations(out / f"{sid}_steps.csv", walk.boundaries)
        written.append(sid)
    return written
