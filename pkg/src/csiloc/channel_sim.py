"""Synthetic multipath CSI for a uniform linear array.

A fixed scatterer geometry turns a terminal location into per-path gains,
angles of arrival and delays, which are then summed into the
antenna x subcarrier channel response

    H[a, s] = sum_p c_p exp(-j 2 pi a d cos(phi_p) / lambda_c) exp(-j 2 pi f_s tau_p)

with antenna index ``a`` running 1..A.  The array lies along the x axis, so
``phi`` is measured from +x and broadside is +y.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

C_LIGHT = 299_792_458.0
REFLECTION_LOSS = 0.3
RELATIVE_NOISE = 0.01


@dataclass(frozen=True)
class ChannelConfig:
    num_antennas: int = 16
    num_subcarriers: int = 16
    center_wavelength: float = C_LIGHT / 2.4e9
    antenna_spacing: float = C_LIGHT / 2.4e9 / 2
    subcarrier_freqs: tuple[float, ...] = ()
    num_paths: int = 5
    # None: 0.01 x mean noiseless magnitude at each location
    noise_std: float | None = None

    def __post_init__(self):
        if not self.subcarrier_freqs:
            object.__setattr__(self, "subcarrier_freqs",
                               tuple(baseband_subcarriers(self.num_subcarriers)))
        freqs = np.asarray(self.subcarrier_freqs, dtype=float)
        if self.num_antennas < 1 or self.num_subcarriers < 1:
            raise ValueError("num_antennas and num_subcarriers must be positive")
        if len(freqs) != self.num_subcarriers:
            raise ValueError(
                f"{len(freqs)} subcarrier frequencies given for S={self.num_subcarriers}")
        if len(freqs) > 1 and np.any(np.diff(freqs) <= 0):
            raise ValueError("subcarrier frequencies must be strictly increasing")
        if self.center_wavelength <= 0 or self.antenna_spacing <= 0:
            raise ValueError("wavelength and antenna spacing must be positive")
        if self.num_paths < 1:
            raise ValueError("num_paths must be at least 1")
        if self.noise_std is not None and self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.num_antennas, self.num_subcarriers, 2)


def baseband_subcarriers(n: int, bandwidth: float = 200e6) -> np.ndarray:
    """Evenly spaced subcarrier offsets centred on zero."""
    if n == 1:
        return np.zeros(1)
    return np.linspace(-bandwidth / 2, bandwidth / 2, n)


@dataclass(frozen=True)
class PathSet:
    coeffs: np.ndarray  # complex, (P,)
    aoa: np.ndarray     # radians, (P,)
    delay: np.ndarray   # seconds, (P,)

    def __post_init__(self):
        if not (len(self.coeffs) == len(self.aoa) == len(self.delay)):
            raise ValueError("path parameter lists differ in length")
        if np.any(np.asarray(self.delay) < 0):
            raise ValueError("path delays must be nonnegative")

    def __len__(self) -> int:
        return len(self.coeffs)


@dataclass(frozen=True)
class Environment:
    config: ChannelConfig
    bs_position: tuple[float, float]
    scatterers: tuple[tuple[float, float], ...]
    bounds: tuple[float, float, float, float]  # xmin, ymin, xmax, ymax
    seed: int

    def contains(self, location) -> bool:
        x, y = location
        xmin, ymin, xmax, ymax = self.bounds
        return xmin <= x <= xmax and ymin <= y <= ymax


def placement_box(bounds) -> tuple[tuple[float, float, float, float], tuple[float, float]]:
    """Scatterer box and BS position for an area.

    The box is the area grown by half its larger side in every direction.
    The BS sits below the midpoint of the lower edge, 1 m further out than
    the box, so every scatterer and location is seen at an angle in (0, pi).
    """
    xmin, ymin, xmax, ymax = map(float, bounds)
    if not (xmax > xmin and ymax > ymin):
        raise ValueError(f"degenerate bounds {bounds}")
    margin = 0.5 * max(xmax - xmin, ymax - ymin)
    box = (xmin - margin, ymin - margin, xmax + margin, ymax + margin)
    bs = (0.5 * (xmin + xmax), ymin - margin - 1.0)
    return box, bs


def build_environment(config: ChannelConfig, bounds, seed: int) -> Environment:
    box, bs = placement_box(bounds)
    rng = np.random.default_rng(seed)
    n = config.num_paths - 1
    xs = rng.uniform(box[0], box[2], size=n)
    ys = rng.uniform(box[1], box[3], size=n)
    scatterers = tuple((float(x), float(y)) for x, y in zip(xs, ys))
    return Environment(config, bs, scatterers, tuple(map(float, bounds)), int(seed))


def path_phase(seed: int, index: int) -> float:
    digest = hashlib.blake2b(f"{seed}:{index}".encode(), digest_size=8).digest()
    return 2.0 * math.pi * int.from_bytes(digest, "little") / 2.0**64


def path_params(env: Environment, location) -> PathSet:
    if not env.contains(location):
        raise ValueError(f"location {tuple(location)} outside area {env.bounds}")
    bx, by = env.bs_position
    mx, my = float(location[0]), float(location[1])
    los = math.hypot(mx - bx, my - by)
    mags = [1.0 / max(los, 1.0)]
    aoa = [math.atan2(my - by, mx - bx)]
    lengths = [los]
    for sx, sy in env.scatterers:
        leg1 = math.hypot(sx - bx, sy - by)
        total = leg1 + math.hypot(mx - sx, my - sy)
        mags.append(REFLECTION_LOSS / max(total, 1.0))
        aoa.append(math.atan2(sy - by, sx - bx))
        lengths.append(total)
    phases = [path_phase(env.seed, p) for p in range(len(mags))]
    coeffs = np.array(mags) * np.exp(1j * np.array(phases))
    return PathSet(coeffs, np.array(aoa), np.array(lengths) / C_LIGHT)


def channel_response(config: ChannelConfig, paths: PathSet) -> np.ndarray:
    """Noiseless complex (A, S) response of a set of paths."""
    a = np.arange(1, config.num_antennas + 1)
    f = np.asarray(config.subcarrier_freqs)
    steer = np.exp(-2j * np.pi * np.outer(a, config.antenna_spacing * np.cos(paths.aoa))
                   / config.center_wavelength)
    delay = np.exp(-2j * np.pi * np.outer(paths.delay, f))
    return (steer * paths.coeffs) @ delay


def split_complex(h: np.ndarray) -> np.ndarray:
    return np.stack([h.real, h.imag], axis=-1)


def to_complex(csi: np.ndarray) -> np.ndarray:
    return csi[..., 0] + 1j * csi[..., 1]


def csi_at(env: Environment, location, rng: np.random.Generator | None = None) -> np.ndarray:
    """CSI tensor (A, S, 2) at ``location``; noise is drawn only when ``rng`` is given."""
    h = channel_response(env.config, path_params(env, location))
    std = env.config.noise_std
    if std is None:
        std = RELATIVE_NOISE * float(np.mean(np.abs(h)))
    if rng is not None and std > 0:
        h = h + std * (rng.standard_normal(h.shape) + 1j * rng.standard_normal(h.shape))
    return split_complex(h)


def normalize_csi(csi: np.ndarray) -> np.ndarray:
    """Scale each (A, S, 2) tensor by 1 / its max absolute entry."""
    csi = np.asarray(csi, dtype=float)
    peak = np.abs(csi).max(axis=(-3, -2, -1), keepdims=True)
    return csi / np.where(peak > 0, peak, 1.0)


@dataclass
class CsiDataset:
    csi: np.ndarray        # (N, A, S, 2)
    locations: np.ndarray  # (N, 2)
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.locations)

    def __iter__(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        return iter(zip(self.csi, self.locations))

    def subset(self, idx) -> "CsiDataset":
        return CsiDataset(self.csi[idx], self.locations[idx], dict(self.meta))


def uniform_locations(bounds, n: int, rng: np.random.Generator) -> np.ndarray:
    xmin, ymin, xmax, ymax = bounds
    return np.column_stack([rng.uniform(xmin, xmax, n), rng.uniform(ymin, ymax, n)])


def sample_dataset(env: Environment, n_points: int, seed: int) -> CsiDataset:
    """``n_points`` uniform locations and their (noisy) CSI, reproducible per seed."""
    if n_points < 1:
        raise ValueError("n_points must be at least 1")
    rng = np.random.default_rng(seed)
    locs = uniform_locations(env.bounds, n_points, rng)
    csi = np.stack([csi_at(env, loc, rng) for loc in locs])
    return CsiDataset(csi, locs)


def csi_along(env: Environment, positions: np.ndarray, seed: int) -> np.ndarray:
    """Noisy CSI for an arbitrary array of locations (..., 2)."""
    rng = np.random.default_rng(seed)
    flat = np.asarray(positions).reshape(-1, 2)
    out = np.stack([csi_at(env, loc, rng) for loc in flat])
    return out.reshape(positions.shape[:-1] + out.shape[1:])
