"""Experiment configuration: an INI file of ``key = value`` sections.

Every random draw in a run is keyed by a named seed.  Unset named seeds are
derived from ``[seeds] base`` so that ``--seed`` reseeds a whole run.
"""
from __future__ import annotations

import configparser
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .channel_sim import C_LIGHT, ChannelConfig, baseband_subcarriers
from .denoiser import DenoiserHyper
from .positioning import NetworkConfig, TrainHyper

SEED_NAMES = ("env", "data", "train", "traj", "denoiser", "noise", "imu", "tune")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Seeds:
    base: int = 0
    overrides: tuple[tuple[str, int], ...] = ()

    def __post_init__(self):
        for name, _ in self.overrides:
            if name not in SEED_NAMES:
                raise ConfigError(f"unknown seed name {name!r}; expected one of {SEED_NAMES}")

    def __getattr__(self, name: str) -> int:
        if name not in SEED_NAMES:
            raise AttributeError(name)
        for key, value in self.overrides:
            if key == name:
                return value
        return 1000 * self.base + SEED_NAMES.index(name)

    def resolved(self) -> dict[str, int]:
        return {name: getattr(self, name) for name in SEED_NAMES}


@dataclass(frozen=True)
class ChannelSettings:
    num_antennas: int = 16
    num_subcarriers: int = 16
    num_paths: int = 5
    carrier_hz: float = 2.4e9
    bandwidth_hz: float = 200e6
    noise_std: float | None = None
    bounds: tuple[float, float, float, float] = (0.0, 0.0, 1.25, 1.25)

    def __post_init__(self):
        xmin, ymin, xmax, ymax = self.bounds
        if not (xmax > xmin and ymax > ymin):
            raise ConfigError(f"degenerate area bounds {self.bounds}")
        if self.carrier_hz <= 0 or self.bandwidth_hz < 0:
            raise ConfigError("carrier and bandwidth must be positive")
        self.channel_config()

    def channel_config(self) -> ChannelConfig:
        wavelength = C_LIGHT / self.carrier_hz
        try:
            return ChannelConfig(self.num_antennas, self.num_subcarriers, wavelength,
                                 wavelength / 2,
                                 tuple(baseband_subcarriers(self.num_subcarriers, self.bandwidth_hz)),
                                 self.num_paths, self.noise_std)
        except ValueError as e:
            raise ConfigError(str(e)) from e


@dataclass(frozen=True)
class DataSettings:
    n_train: int = 1000
    n_val: int = 500
    n_test: int = 500

    def __post_init__(self):
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ConfigError("dataset sizes must be positive")


@dataclass(frozen=True)
class TrajectorySettings:
    T: int = 5
    n_train: int = 10000
    n_test: int = 1000
    n_val: int = 300
    speed_min: float = 0.05
    speed_max: float = 0.25
    # std of the noise added to true positions when no position model is used
    position_noise: float = 0.03

    def __post_init__(self):
        if self.T < 2:
            raise ConfigError("trajectory length T must be at least 2")
        if not 0 < self.speed_min <= self.speed_max:
            raise ConfigError("speed range must be positive and ordered")
        if min(self.n_train, self.n_test, self.n_val) < 1:
            raise ConfigError("trajectory set sizes must be positive")
        if self.position_noise < 0:
            raise ConfigError("position_noise must be nonnegative")


@dataclass(frozen=True)
class PnpSettings:
    mu: float = 1.0
    rho: float = 1.0
    level: float = 0.03
    max_iter: int = 200
    tol: float = 1e-6
    mu_grid: tuple[float, ...] = (0.01, 0.1, 1.0, 10.0, 100.0)
    # includes rho = 2 mu for every mu so the prior-free refine limit is reachable
    rho_grid: tuple[float, ...] = (0.02, 0.2, 2.0, 20.0, 200.0)
    snr_grid: tuple[float, ...] = (1.0, 10.0, 20.0, 40.0, 60.0, 80.0, 100.0)

    def __post_init__(self):
        if self.mu < 0 or any(m < 0 for m in self.mu_grid):
            raise ConfigError("mu must be nonnegative")
        if self.rho <= 0 or any(r <= 0 for r in self.rho_grid):
            raise ConfigError("rho must be positive")
        if self.tol <= 0 or self.max_iter < 1:
            raise ConfigError("tol must be positive and max_iter at least 1")
        if not self.mu_grid or not self.rho_grid or not self.snr_grid:
            raise ConfigError("tuning and SNR grids must be nonempty")


@dataclass(frozen=True)
class DenoiserSettings:
    grid_mm: tuple[float, ...] = (10.0, 30.0, 50.0)
    epochs: int = 300
    batch_size: int = 128
    lr: float = 1e-3
    halve_every: int = 200
    val_fraction: float = 0.1
    hidden: int = 128
    init: str = "identity"

    def __post_init__(self):
        if not self.grid_mm or any(g < 0 for g in self.grid_mm):
            raise ConfigError("denoiser grid must be nonempty and nonnegative")
        if len(set(self.grid_mm)) != len(self.grid_mm):
            raise ConfigError("denoiser grid has duplicate levels")
        if self.init not in ("identity", "kaiming"):
            raise ConfigError(f"unknown denoiser init {self.init!r}")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in [0, 1)")

    @property
    def grid(self) -> tuple[float, ...]:
        return tuple(g / 1000.0 for g in self.grid_mm)

    def hyper(self) -> DenoiserHyper:
        return DenoiserHyper(self.epochs, self.batch_size, self.lr, self.halve_every,
                             self.val_fraction, self.hidden, self.init)


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 150
    batch_size: int = 128
    lr: float = 1e-3
    halve_every: int = 50

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0 or self.halve_every < 1:
            raise ConfigError("training epochs, batch size, lr and halve_every must be positive")

    def hyper(self, seed: int) -> TrainHyper:
        return TrainHyper(self.epochs, self.batch_size, self.lr, self.halve_every, seed)


@dataclass(frozen=True)
class ExperimentConfig:
    label: str = "run"
    out: str = "out"
    seeds: Seeds = Seeds()
    channel: ChannelSettings = ChannelSettings()
    data: DataSettings = DataSettings()
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainSettings = TrainSettings()
    trajectory: TrajectorySettings = TrajectorySettings()
    denoiser: DenoiserSettings = DenoiserSettings()
    pnp: PnpSettings = PnpSettings()

    def __post_init__(self):
        n = self.network
        if (n.num_antennas, n.num_subcarriers) != (self.channel.num_antennas,
                                                   self.channel.num_subcarriers):
            raise ConfigError("network input size must match the channel's antennas x subcarriers")

    def semantic(self) -> dict:
        """Everything that affects results (label and output directory excluded)."""
        d = {
            "seeds": self.seeds.resolved(),
            "channel": asdict(self.channel),
            "data": asdict(self.data),
            "network": asdict(self.network),
            "train": asdict(self.train),
            "trajectory": asdict(self.trajectory),
            "denoiser": asdict(self.denoiser),
            "pnp": asdict(self.pnp),
        }
        return d

    def hash(self) -> str:
        blob = json.dumps(self.semantic(), sort_keys=True, separators=(",", ":"), allow_nan=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_seed(self, base: int) -> "ExperimentConfig":
        return replace(self, seeds=Seeds(base, ()))


# ---------------------------------------------------------------------------
# parsing


def _parse_value(raw: str, kind, key: str):
    raw = raw.strip()
    text = str(kind)
    try:
        if "tuple" in text:
            parts = [p for p in raw.replace(",", " ").split() if p]
            return tuple(float(p) for p in parts)
        if "None" in text and raw.lower() in ("", "none", "auto"):
            return None
        if "bool" in text:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if "int" in text and "float" not in text:
            return int(raw)
        if "float" in text:
            value = float(raw)
            if math.isnan(value):
                raise ValueError(raw)
            return value
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def _build(cls, section: dict[str, str], name: str):
    known = {f.name: f.type for f in fields(cls)}
    kwargs = {}
    for key, raw in section.items():
        if key not in known:
            raise ConfigError(f"unknown key [{name}] {key}")
        kwargs[key] = _parse_value(raw, known[key], f"[{name}] {key}")
    if "bounds" in kwargs and len(kwargs["bounds"]) != 4:
        raise ConfigError("[channel] bounds needs four numbers: xmin ymin xmax ymax")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{name}]: {e}") from e


_SECTIONS = {
    "channel": ChannelSettings,
    "data": DataSettings,
    "network": NetworkConfig,
    "train": TrainSettings,
    "trajectory": TrajectorySettings,
    "denoiser": DenoiserSettings,
    "pnp": PnpSettings,
}


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from e
    kwargs: dict = {}
    for name in parser.sections():
        section = dict(parser[name])
        if name == "run":
            for key, value in section.items():
                if key not in ("label", "out"):
                    raise ConfigError(f"unknown key [run] {key}")
                kwargs[key] = value.strip()
        elif name == "seeds":
            base = _parse_value(section.pop("base", "0"), int, "[seeds] base")
            overrides = tuple(sorted((k, _parse_value(v, int, f"[seeds] {k}"))
                                     for k, v in section.items()))
            kwargs["seeds"] = Seeds(base, overrides)
        elif name in _SECTIONS:
            kwargs[name] = _build(_SECTIONS[name], section, name)
        else:
            raise ConfigError(f"unknown section [{name}]")
    if "network" not in kwargs and "channel" in kwargs:
        ch = kwargs["channel"]
        kwargs["network"] = _build(NetworkConfig, {"num_antennas": str(ch.num_antennas),
                                                   "num_subcarriers": str(ch.num_subcarriers)},
                                   "network")
    return ExperimentConfig(**kwargs)


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config(text)


def _format(value) -> str:
    if isinstance(value, tuple):
        return " ".join(repr(v) for v in value)
    if value is None:
        return "none"
    return repr(value) if isinstance(value, float) else str(value)


def dump_config(cfg: ExperimentConfig) -> str:
    """Canonical INI text; ``parse_config(dump_config(c))`` hashes the same as ``c``."""
    lines = ["[run]", f"label = {cfg.label}", f"out = {cfg.out}", "", "[seeds]",
             f"base = {cfg.seeds.base}"]
    lines += [f"{k} = {v}" for k, v in cfg.seeds.overrides]
    for name in _SECTIONS:
        lines += ["", f"[{name}]"]
        for key, value in asdict(getattr(cfg, name)).items():
            lines.append(f"{key} = {_format(value)}")
    return "\n".join(lines) + "\n"
