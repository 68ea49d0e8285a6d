"""Experiment protocols built on the library: datasets, training, evaluation, CSV output.

All CSVs carry base-SI values (metres, m^2) with millimetre columns alongside.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass

import numpy as np

from .channel_sim import CsiDataset, Environment, build_environment, csi_along, sample_dataset
from .config import ExperimentConfig
from .denoiser import DenoiserBank, train_bank
from .formats import atomic_write
from .positioning import VARIANT_LABELS, PositionModel, mse, predict, train_position_net
from .tracking import (PnpConfig, final_step_mse, pnp_track_batch, refine_trajectory,
                       steps_from_imu, tune_pnp)
from .trajectory import add_noise, imu_batch, make_dataset, stack

log = logging.getLogger(__name__)

VARIANTS = ("full", "aarb0", "pb0_aarb0")
METHODS = ("positioning", "refine", "pnp")
_MM = {"m": 1e3, "m2": 1e6}


def subseed(seed: int, *keys: int) -> int:
    """Independent 32-bit seed derived from ``seed`` and integer keys."""
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


@dataclass(frozen=True)
class MetricsRecord:
    label: str
    metric: str
    value: float
    unit: str
    seed: int
    config_hash: str


# ---------------------------------------------------------------------------
# CSV output


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def csv_bytes(header, rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    return buf.getvalue().encode()


def write_csv(path, header, rows) -> None:
    atomic_write(path, csv_bytes(header, rows))


METRIC_COLUMNS = ("label", "metric", "value", "unit", "value_mm", "unit_mm", "seed", "config_hash")


def metric_rows(records):
    for r in records:
        scale = _MM.get(r.unit)
        mm = r.value * scale if scale else ""
        unit_mm = {"m": "mm", "m2": "mm2"}.get(r.unit, "")
        yield (r.label, r.metric, float(r.value), r.unit, mm, unit_mm, r.seed, r.config_hash)


def write_metrics(path, records) -> None:
    write_csv(path, METRIC_COLUMNS, metric_rows(records))


def read_metrics(path) -> list[MetricsRecord]:
    with open(path, newline="") as f:
        return [MetricsRecord(r["label"], r["metric"], float(r["value"]), r["unit"],
                              int(r["seed"]), r["config_hash"]) for r in csv.DictReader(f)]


def cdf_rows(errors) -> list[tuple[float, float]]:
    e = np.sort(np.asarray(errors, dtype=float).ravel())
    if e.size == 0:
        raise ValueError("cannot build a CDF from an empty error list")
    if not np.all(np.isfinite(e)):
        raise ValueError("errors must be finite")
    n = e.size
    return [(float(v), (i + 1) / n) for i, v in enumerate(e)]


def emit_cdf(errors, path) -> list[tuple[float, float]]:
    """Sorted (error, cumulative fraction) CSV of positioning errors in metres."""
    rows = cdf_rows(errors)
    write_csv(path, ("error_m", "error_mm", "fraction"), ((e, e * 1e3, f) for e, f in rows))
    return rows


def read_cdf(path) -> list[tuple[float, float]]:
    with open(path, newline="") as f:
        return [(float(r["error_m"]), float(r["fraction"])) for r in csv.DictReader(f)]


# ---------------------------------------------------------------------------
# positioning


def make_environment(cfg: ExperimentConfig) -> Environment:
    return build_environment(cfg.channel.channel_config(), cfg.channel.bounds, cfg.seeds.env)


def make_datasets(cfg: ExperimentConfig, env: Environment) -> tuple[CsiDataset, CsiDataset, CsiDataset]:
    s, d = cfg.seeds.data, cfg.data
    return (sample_dataset(env, d.n_train, subseed(s, 0)),
            sample_dataset(env, d.n_val, subseed(s, 1)),
            sample_dataset(env, d.n_test, subseed(s, 2)))


def train_position(cfg: ExperimentConfig, train: CsiDataset, val: CsiDataset,
                   variant: str = "full", **kw) -> PositionModel:
    model = train_position_net(cfg.network.variant(variant), train, val,
                               cfg.train.hyper(cfg.seeds.train), **kw)
    model.meta["variant"] = variant
    return model


def position_errors(model: PositionModel, test: CsiDataset) -> np.ndarray:
    """Euclidean error per test point (metres)."""
    return np.linalg.norm(predict(model, test.csi) - test.locations, axis=-1)


def evaluate_position(cfg: ExperimentConfig, model: PositionModel, test: CsiDataset,
                      label: str | None = None) -> tuple[list[MetricsRecord], np.ndarray]:
    err = position_errors(model, test)
    h, s = cfg.hash(), cfg.seeds.base
    label = label or cfg.label
    records = [MetricsRecord(label, "test_mse", float(np.mean(err ** 2)), "m2", s, h),
               MetricsRecord(label, "mean_error", float(np.mean(err)), "m", s, h),
               MetricsRecord(label, "median_error", float(np.median(err)), "m", s, h)]
    return records, err


@dataclass
class AblationResult:
    records: list[MetricsRecord]
    mse: dict[str, float]
    models: dict[str, PositionModel]

    @property
    def ordered(self) -> bool:
        m = self.mse
        return m["full"] <= m["aarb0"] <= m["pb0_aarb0"]


def run_ablation(cfg: ExperimentConfig, variants=VARIANTS) -> AblationResult:
    """Train each variant on one environment and score it on the shared test set."""
    env = make_environment(cfg)
    train, val, test = make_datasets(cfg, env)
    records, scores, models = [], {}, {}
    for v in variants:
        log.info("ablation seed %d: training %s", cfg.seeds.base, VARIANT_LABELS[v])
        model = train_position(cfg, train, val, v)
        scores[v] = mse(predict(model, test.csi), test.locations)
        models[v] = model
        records.append(MetricsRecord(VARIANT_LABELS[v], "test_mse", scores[v], "m2",
                                     cfg.seeds.base, cfg.hash()))
    return AblationResult(records, scores, models)


def ablation_rows(results: list[AblationResult]):
    for res in results:
        for r in res.records:
            yield (r.seed, r.label, r.value, r.value * 1e6, int(res.ordered), r.config_hash)


ABLATION_COLUMNS = ("seed", "variant", "test_mse_m2", "test_mse_mm2", "ordered", "config_hash")


# ---------------------------------------------------------------------------
# trajectories and tracking


@dataclass
class TrajectorySets:
    train: np.ndarray  # (N, T, 2)
    val: np.ndarray
    test: np.ndarray


def make_trajectories(cfg: ExperimentConfig) -> TrajectorySets:
    t, s = cfg.trajectory, cfg.seeds.traj
    speed = (t.speed_min, t.speed_max)
    bounds = cfg.channel.bounds
    return TrajectorySets(
        stack(make_dataset(t.n_train, t.T, bounds, subseed(s, 0), speed)),
        stack(make_dataset(t.n_val, t.T, bounds, subseed(s, 1), speed)),
        stack(make_dataset(t.n_test, t.T, bounds, subseed(s, 2), speed)))


def train_denoisers(cfg: ExperimentConfig, train: np.ndarray) -> DenoiserBank:
    return train_bank(train, cfg.denoiser.grid, cfg.denoiser.hyper(), cfg.seeds.denoiser)


def position_estimates(cfg: ExperimentConfig, truth: np.ndarray, key: int,
                       model: PositionModel | None = None,
                       env: Environment | None = None) -> np.ndarray:
    """Per-step location estimates along true trajectories.

    With a model, CSI is synthesised at each true position and fed through the
    network; otherwise Gaussian noise of std ``position_noise`` is added.
    """
    seed = subseed(cfg.seeds.noise, key)
    if model is None:
        return add_noise(truth, cfg.trajectory.position_noise, seed)
    if env is None:
        raise ValueError("a position model needs the environment to synthesise CSI")
    csi = csi_along(env, truth, seed)
    flat = csi.reshape((-1,) + csi.shape[-3:])
    return predict(model, flat).reshape(truth.shape)


def noise_level(estimates: np.ndarray, truth: np.ndarray) -> float:
    """Per-coordinate RMS error, used to pick the matching denoiser."""
    return float(np.sqrt(np.mean((estimates - truth) ** 2)))


def imu_steps(cfg: ExperimentConfig, truth: np.ndarray, snr_db: float, key: int) -> np.ndarray:
    r, h = imu_batch(truth, snr_db, subseed(cfg.seeds.imu, key, int(round(snr_db * 1000))))
    return steps_from_imu(r, h)


def run_tracking(cfg: ExperimentConfig, bank: DenoiserBank, sets: TrajectorySets,
                 model: PositionModel | None = None, env: Environment | None = None,
                 label: str | None = None) -> list[MetricsRecord]:
    """Final-step MSE of raw positioning vs. denoiser refinement on the test set."""
    level = matched_level(cfg, sets, model, env)
    est = position_estimates(cfg, sets.test, 2, model, env)
    refined = refine_trajectory(bank, est, level)
    h, s = cfg.hash(), cfg.seeds.base
    label = label or cfg.label
    a, b = final_step_mse(est, sets.test), final_step_mse(refined, sets.test)
    return [MetricsRecord(label, "positioning_final_mse", a, "m2", s, h),
            MetricsRecord(label, "refine_final_mse", b, "m2", s, h),
            MetricsRecord(label, "refine_improvement", 1.0 - b / a, "1", s, h),
            MetricsRecord(label, "denoiser_level", level, "m", s, h)]


def matched_level(cfg: ExperimentConfig, sets: TrajectorySets,
                  model: PositionModel | None = None, env: Environment | None = None) -> float:
    """Positioning noise std the refinement denoiser is matched to."""
    if model is None:
        return cfg.trajectory.position_noise
    return noise_level(position_estimates(cfg, sets.val, 1, model, env), sets.val)


@dataclass
class SweepPoint:
    snr_db: float
    method: str
    mse: float
    mu: float = math.nan
    rho: float = math.nan
    iterations: float = math.nan


SWEEP_COLUMNS = ("snr_db", "method", "final_mse_m2", "final_mse_mm2", "mu", "rho",
                 "mean_iterations", "config_hash")


def run_snr_sweep(cfg: ExperimentConfig, bank: DenoiserBank, sets: TrajectorySets,
                  snr_list=None, model: PositionModel | None = None,
                  env: Environment | None = None) -> tuple[list[SweepPoint], list[MetricsRecord]]:
    """Final-step MSE vs IMU SNR for positioning only, refinement, and tuned PnP-ADMM.

    (mu, rho) are tuned per SNR on the validation trajectories and then
    applied to the test trajectories.
    """
    p = cfg.pnp
    snr_list = list(p.snr_grid if snr_list is None else snr_list)
    level = matched_level(cfg, sets, model, env)
    pnp_level = p.level
    val_est = position_estimates(cfg, sets.val, 1, model, env)
    test_est = position_estimates(cfg, sets.test, 2, model, env)
    base_mse = final_step_mse(test_est, sets.test)
    refine_mse = final_step_mse(refine_trajectory(bank, test_est, level), sets.test)
    points: list[SweepPoint] = []
    for snr in snr_list:
        val_steps = imu_steps(cfg, sets.val, snr, 1)
        test_steps = imu_steps(cfg, sets.test, snr, 2)
        best, _, _ = tune_pnp(bank, val_est, val_steps, sets.val, p.mu_grid, p.rho_grid,
                              pnp_level, p.max_iter, p.tol)
        res = pnp_track_batch(bank, test_est, test_steps, best)
        points.append(SweepPoint(snr, "positioning", base_mse))
        points.append(SweepPoint(snr, "refine", refine_mse))
        points.append(SweepPoint(snr, "pnp", final_step_mse(res.L, sets.test), best.mu,
                                 best.rho, float(np.mean(res.iterations))))
        log.info("snr %g dB: pnp %.4g (mu=%g rho=%g) refine %.4g", snr, points[-1].mse,
                 best.mu, best.rho, refine_mse)
    h, s = cfg.hash(), cfg.seeds.base
    records = [MetricsRecord(f"{cfg.label}:{pt.method}@{pt.snr_db:g}dB", "final_mse", pt.mse,
                             "m2", s, h) for pt in points]
    return points, records


def sweep_rows(points: list[SweepPoint], config_hash: str):
    for pt in points:
        yield (pt.snr_db, pt.method, pt.mse, pt.mse * 1e6, pt.mu, pt.rho, pt.iterations,
               config_hash)


def sweep_curve(points: list[SweepPoint], method: str) -> list[tuple[float, float]]:
    return sorted((pt.snr_db, pt.mse) for pt in points if pt.method == method)


def monotone_violations(curve: list[tuple[float, float]], slack: float = 0.05) -> int:
    """Steps where the MSE rises by more than ``slack`` (relative) as SNR increases."""
    return sum(1 for (_, a), (_, b) in zip(curve, curve[1:]) if b > a * (1.0 + slack))


def pnp_config(cfg: ExperimentConfig) -> PnpConfig:
    p = cfg.pnp
    return PnpConfig(p.mu, p.rho, p.level, p.max_iter, p.tol)
