"""Ground-truth walking trajectories, positioning noise and IMU step measurements.

Positions are sampled on a unit time step, so a speed is a distance per step.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

PATTERNS = ("a", "b", "c")
DEFAULT_SPEED = (0.05, 0.25)
MAX_REJECTIONS = 1000
SIGMA_FLOOR = 1e-6


@dataclass
class Trajectory:
    positions: np.ndarray  # (T, 2)
    pattern: str = ""
    seed: int | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        if self.positions.ndim != 2 or self.positions.shape[1] != 2:
            raise ValueError(f"positions must be (T, 2), got {self.positions.shape}")

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def T(self) -> int:
        return len(self.positions)


@dataclass
class ImuMeasurement:
    """Measured step length and heading for steps t = 2..T."""

    distance: np.ndarray  # (T-1,)
    heading: np.ndarray   # (T-1,)
    snr_db: float = math.inf

    def __len__(self) -> int:
        return len(self.distance)

    def steps(self) -> np.ndarray:
        """Cartesian step vectors (T-1, 2)."""
        return np.column_stack([self.distance * np.cos(self.heading),
                                self.distance * np.sin(self.heading)])


def integrate(start, steps) -> np.ndarray:
    """Positions from a start point and a (T-1, 2) array of steps."""
    start = np.asarray(start, dtype=float)
    return np.vstack([start, start + np.cumsum(np.asarray(steps, dtype=float), axis=0)])


def constant_velocity(start, velocity, T: int) -> np.ndarray:
    return integrate(start, np.tile(np.asarray(velocity, dtype=float), (T - 1, 1)))


def straight_line(start, heading: float, speeds) -> np.ndarray:
    speeds = np.asarray(speeds, dtype=float)
    direction = np.array([math.cos(heading), math.sin(heading)])
    return integrate(start, speeds[:, None] * direction)


def turning(start, speed: float, heading: float, turn_step: int, new_heading: float,
            T: int) -> np.ndarray:
    """Constant speed; steps 2..turn_step use ``heading``, later steps ``new_heading``."""
    n_before = turn_step - 1
    first = speed * np.array([math.cos(heading), math.sin(heading)])
    second = speed * np.array([math.cos(new_heading), math.sin(new_heading)])
    steps = np.vstack([np.tile(first, (n_before, 1)), np.tile(second, (T - 1 - n_before, 1))])
    return integrate(start, steps)


def _inside(pos: np.ndarray, bounds) -> bool:
    xmin, ymin, xmax, ymax = bounds
    return bool(np.all((pos[:, 0] >= xmin) & (pos[:, 0] <= xmax)
                       & (pos[:, 1] >= ymin) & (pos[:, 1] <= ymax)))


def _draw(pattern: str, T: int, bounds, speed_range, rng: np.random.Generator,
          turn_step: int = 2) -> np.ndarray:
    xmin, ymin, xmax, ymax = bounds
    vmin, vmax = speed_range
    start = np.array([rng.uniform(xmin, xmax), rng.uniform(ymin, ymax)])
    heading = rng.uniform(0.0, 2.0 * math.pi)
    if pattern == "a":
        speed = rng.uniform(vmin, vmax)
        return constant_velocity(start, speed * np.array([math.cos(heading), math.sin(heading)]), T)
    if pattern == "b":
        return straight_line(start, heading, rng.uniform(vmin, vmax, size=T - 1))
    speed = rng.uniform(vmin, vmax)
    return turning(start, speed, heading, turn_step, rng.uniform(0.0, 2.0 * math.pi), T)


def gen_trajectory(pattern: str, T: int = 5, bounds=(0.0, 0.0, 1.25, 1.25),
                   speed_range=DEFAULT_SPEED, seed: int | np.random.Generator = 0) -> Trajectory:
    """One trajectory of the given motion pattern.

    (a) constant velocity; (b) fixed heading, per-step speed drawn
    independently; (c) constant speed with one heading change at a step
    drawn uniformly from 2..T-1.  Start points are uniform in ``bounds`` and
    trajectories leaving the area are redrawn.  The turn step is drawn once,
    before rejection, so that leaving the area cannot bias its distribution.
    """
    if pattern not in PATTERNS:
        raise ValueError(f"unknown pattern {pattern!r}")
    if T < 2:
        raise ValueError("T must be at least 2")
    if not 0 < speed_range[0] <= speed_range[1]:
        raise ValueError("speed range must be positive and ordered")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    turn_step = int(rng.integers(2, T)) if pattern == "c" and T > 2 else 2
    for _ in range(MAX_REJECTIONS):
        pos = _draw(pattern, T, bounds, speed_range, rng, turn_step)
        if _inside(pos, bounds):
            return Trajectory(pos, pattern, None if isinstance(seed, np.random.Generator) else seed)
    raise ValueError(
        f"no pattern-{pattern} trajectory of {T} steps fits in {bounds} after "
        f"{MAX_REJECTIONS} attempts")


def make_dataset(n: int, T: int = 5, bounds=(0.0, 0.0, 1.25, 1.25), seed: int = 0,
                 speed_range=DEFAULT_SPEED, patterns=None) -> list[Trajectory]:
    """``n`` trajectories with the pattern drawn uniformly per sample (or given explicitly)."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        pattern = PATTERNS[int(rng.integers(3))] if patterns is None else patterns[i]
        traj = gen_trajectory(pattern, T, bounds, speed_range, rng)
        traj.seed = seed
        out.append(traj)
    return out


def stack(trajs) -> np.ndarray:
    """(N, T, 2) array from a list of trajectories (or pass an array through)."""
    if isinstance(trajs, np.ndarray):
        return trajs
    return np.stack([t.positions for t in trajs])


def add_noise(traj, sigma: float, seed: int | np.random.Generator = 0):
    """Add i.i.d. N(0, sigma^2) to every coordinate; works on a Trajectory or an array."""
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if isinstance(traj, Trajectory):
        noisy = traj.positions + sigma * rng.standard_normal(traj.positions.shape)
        return Trajectory(noisy, traj.pattern, traj.seed)
    arr = np.asarray(traj, dtype=float)
    return arr + sigma * rng.standard_normal(arr.shape)


def step_lengths_and_headings(positions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = np.diff(positions, axis=-2)
    return np.hypot(d[..., 0], d[..., 1]), np.arctan2(d[..., 1], d[..., 0])


def imu_noise_std(r, theta, snr_db: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-axis IMU noise std giving the requested SNR on each displacement component.

    Absolute values keep the std nonnegative; a 1e-6 m floor keeps axis-aligned
    steps from getting exactly zero noise.
    """
    gain = 10.0 ** (snr_db / 20.0)
    sx = np.maximum(np.abs(r * np.cos(theta)) / gain, SIGMA_FLOOR)
    sy = np.maximum(np.abs(r * np.sin(theta)) / gain, SIGMA_FLOOR)
    return sx, sy


def imu_measure(traj, snr_db: float, seed: int | np.random.Generator = 0) -> ImuMeasurement:
    """Noisy (distance, heading) per step; ``snr_db = inf`` is noiseless."""
    positions = traj.positions if isinstance(traj, Trajectory) else np.asarray(traj, dtype=float)
    if len(positions) < 2:
        raise ValueError("need at least two positions")
    r, theta = step_lengths_and_headings(positions)
    if math.isinf(snr_db) and snr_db > 0:
        return ImuMeasurement(r, theta, snr_db)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    sx, sy = imu_noise_std(r, theta, snr_db)
    vx = r * np.cos(theta) + sx * rng.standard_normal(r.shape)
    vy = r * np.sin(theta) + sy * rng.standard_normal(r.shape)
    return ImuMeasurement(np.hypot(vx, vy), np.arctan2(vy, vx), snr_db)


def imu_batch(positions: np.ndarray, snr_db: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """IMU (distance, heading) for a stack of trajectories (N, T, 2) -> two (N, T-1) arrays."""
    rng = np.random.default_rng(seed)
    out_r, out_h = [], []
    for pos in positions:
        m = imu_measure(pos, snr_db, rng)
        out_r.append(m.distance)
        out_h.append(m.heading)
    return np.array(out_r), np.array(out_h)
