"""Trajectory refinement with the learned prior, alone or fused with IMU steps.

The IMU-aided tracker solves

    min_L  f(L, M) + mu ||L_pos - L||^2 + lam * phi(L)

by scaled-form ADMM with the split L = Z: an exact tridiagonal solve for L,
a denoiser call for Z, and the dual update p <- p + L - Z.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from .denoiser import DenoiserBank, DenoiserModel, denoise, select_denoiser
from .trajectory import ImuMeasurement, Trajectory

Prior = Union[DenoiserBank, DenoiserModel, Callable[[np.ndarray], np.ndarray]]


@dataclass(frozen=True)
class PnpConfig:
    mu: float = 1.0
    rho: float = 1.0
    level: float = 0.02
    max_iter: int = 200
    tol: float = 1e-6

    def __post_init__(self):
        if self.mu < 0:
            raise ValueError("mu must be nonnegative")
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        if self.tol <= 0:
            raise ValueError("tolerance must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")


@dataclass
class AdmmState:
    L: np.ndarray
    Z: np.ndarray
    p: np.ndarray
    k: int
    primal: float
    dual: float


@dataclass
class PnpResult:
    L: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    history: list[AdmmState] = field(default_factory=list)


def _positions(x) -> np.ndarray:
    return x.positions if isinstance(x, Trajectory) else np.asarray(x, dtype=float)


def _steps(imu) -> np.ndarray:
    if isinstance(imu, ImuMeasurement):
        return imu.steps()
    return np.asarray(imu, dtype=float)


def resolve_prior(prior: Prior, level: float) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(prior, DenoiserBank):
        model = select_denoiser(prior, level)
        return lambda x: denoise(model, x)
    if isinstance(prior, DenoiserModel):
        return lambda x: denoise(prior, x)
    if callable(prior):
        return prior
    raise TypeError(f"cannot use {type(prior).__name__} as a denoising prior")


def refine_trajectory(bank: DenoiserBank, noisy, level: float):
    """Denoise with the bank member trained nearest to ``level``."""
    return denoise(select_denoiser(bank, level), noisy)


def motion_residual(L, imu) -> float:
    """Sum over t = 2..T of ||(l_t - l_{t-1}) - measured step_t||^2."""
    pos = _positions(L)
    steps = _steps(imu)
    if steps.shape != (len(pos) - 1, 2):
        raise ValueError(f"{len(steps)} IMU steps for a trajectory of length {len(pos)}")
    return float(np.sum((np.diff(pos, axis=0) - steps) ** 2))


def lstep_matrix(T: int, mu: float, rho: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Bands (lower, diag, upper) of 2 D^T D + (2 mu + rho) I, D the first difference."""
    dtd = np.full(T, 2.0)
    if T == 1:
        dtd[:] = 0.0
    else:
        dtd[0] = dtd[-1] = 1.0
    diag = 2.0 * dtd + (2.0 * mu + rho)
    off = np.full(T - 1, -2.0)
    return off, diag, off.copy()


def thomas_solve(lower: np.ndarray, diag: np.ndarray, upper: np.ndarray,
                 rhs: np.ndarray) -> np.ndarray:
    """Tridiagonal elimination without pivoting; ``rhs`` may carry extra columns."""
    n = len(diag)
    rhs = np.asarray(rhs, dtype=float)
    c = np.zeros(n)
    d = np.zeros_like(rhs)
    c_prev = 0.0
    d_prev = np.zeros(rhs.shape[1:])
    for i in range(n):
        a = lower[i - 1] if i > 0 else 0.0
        denom = diag[i] - a * c_prev
        c[i] = upper[i] / denom if i < n - 1 else 0.0
        d[i] = (rhs[i] - a * d_prev) / denom
        c_prev, d_prev = c[i], d[i]
    x = np.empty_like(d)
    x[-1] = d[-1]
    for i in range(n - 2, -1, -1):
        x[i] = d[i] - c[i] * x[i + 1]
    return x


def tridiag_matvec(lower, diag, upper, x: np.ndarray) -> np.ndarray:
    y = diag[:, None] * x if x.ndim > 1 else diag * x
    if len(diag) > 1:
        y[1:] += (lower[:, None] if x.ndim > 1 else lower) * x[:-1]
        y[:-1] += (upper[:, None] if x.ndim > 1 else upper) * x[1:]
    return y


def _dt_apply(b: np.ndarray, T: int) -> np.ndarray:
    """D^T b for b of shape (T-1, ...) -> (T, ...)."""
    out = np.zeros((T,) + b.shape[1:])
    if T > 1:
        out[:-1] -= b
        out[1:] += b
    return out


def l_update(L_pos, imu, Z, p, mu: float, rho: float) -> np.ndarray:
    """Exact minimiser of f(L, M) + mu ||L_pos - L||^2 + rho/2 ||L - Z + p||^2.

    Arrays are (T, 2) or batched (N, T, 2); x and y decouple and share the
    same tridiagonal matrix.
    """
    if rho <= 0:
        raise ValueError("rho must be positive")
    L_pos = _positions(L_pos)
    Z, p = np.asarray(Z, dtype=float), np.asarray(p, dtype=float)
    T = L_pos.shape[-2]
    steps = _steps(imu) if T > 1 else np.zeros(L_pos.shape[:-2] + (0, 2))
    if steps.shape[-2] != T - 1:
        raise ValueError(f"{steps.shape[-2]} IMU steps for a trajectory of length {T}")
    rhs = 2.0 * mu * L_pos + rho * (Z - p)
    rhs = np.moveaxis(rhs, -2, 0)
    b = np.moveaxis(steps, -2, 0)
    rhs = rhs + 2.0 * _dt_apply(b, T)
    shape = rhs.shape
    lower, diag, upper = lstep_matrix(T, mu, rho)
    x = thomas_solve(lower, diag, upper, rhs.reshape(T, -1))
    return np.moveaxis(x.reshape(shape), 0, -2)


def z_update(bank: Prior, L, p, level: float) -> np.ndarray:
    return resolve_prior(bank, level)(np.asarray(L) + np.asarray(p))


def pnp_track_batch(prior: Prior, L_pos: np.ndarray, steps: np.ndarray, config: PnpConfig,
                    record: bool = False) -> PnpResult:
    """PnP-ADMM on a stack of trajectories (N, T, 2) with steps (N, T-1, 2).

    Each trajectory stops updating once both its primal residual ||L - Z||
    and dual residual rho ||Z_k - Z_{k-1}|| are within tolerance.
    """
    denoiser = resolve_prior(prior, config.level)
    L_pos = np.asarray(L_pos, dtype=float)
    steps = np.asarray(steps, dtype=float)
    n = len(L_pos)
    Z = L_pos.copy()
    p = np.zeros_like(L_pos)
    L = L_pos.copy()
    active = np.ones(n, dtype=bool)
    iters = np.zeros(n, dtype=int)
    history: list[AdmmState] = []
    for k in range(1, config.max_iter + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        Lk = l_update(L_pos[idx], steps[idx], Z[idx], p[idx], config.mu, config.rho)
        Zk = denoiser(Lk + p[idx])
        pk = p[idx] + Lk - Zk
        if not (np.all(np.isfinite(Lk)) and np.all(np.isfinite(Zk))):
            raise FloatingPointError(f"non-finite ADMM iterate at iteration {k}")
        primal = np.sqrt(np.sum((Lk - Zk) ** 2, axis=(1, 2)))
        dual = config.rho * np.sqrt(np.sum((Zk - Z[idx]) ** 2, axis=(1, 2)))
        L[idx], Z[idx], p[idx] = Lk, Zk, pk
        iters[idx] = k
        done = (primal <= config.tol) & (dual <= config.tol)
        active[idx[done]] = False
        if record:
            history.append(AdmmState(L.copy(), Z.copy(), p.copy(), k,
                                     float(primal.max()), float(dual.max())))
    return PnpResult(L, iters, ~active, history)


def pnp_track(bank: Prior, L_pos, imu, config: PnpConfig) -> tuple[np.ndarray, list[AdmmState]]:
    """Fuse one positioning trajectory with IMU steps; returns (L, per-iteration states)."""
    pos = _positions(L_pos)
    steps = _steps(imu)
    if steps.shape != (len(pos) - 1, 2):
        raise ValueError(f"{len(steps)} IMU steps for a trajectory of length {len(pos)}")
    res = pnp_track_batch(bank, pos[None], steps[None], config, record=True)
    history = [AdmmState(s.L[0], s.Z[0], s.p[0], s.k, s.primal, s.dual) for s in res.history]
    return res.L[0], history


def final_step_mse(estimate: np.ndarray, truth: np.ndarray) -> float:
    """Mean over trajectories of ||L_hat_T - L_T||^2 (m^2)."""
    return float(np.mean(np.sum((estimate[:, -1] - truth[:, -1]) ** 2, axis=-1)))


def steps_from_imu(distance: np.ndarray, heading: np.ndarray) -> np.ndarray:
    return np.stack([distance * np.cos(heading), distance * np.sin(heading)], axis=-1)


def qp_solution(L_pos, imu, mu: float) -> np.ndarray:
    """Closed-form minimiser of f(L, M) + mu ||L_pos - L||^2 (no prior), dense solve."""
    pos = _positions(L_pos)
    steps = _steps(imu)
    T = len(pos)
    D = np.diff(np.eye(T), axis=0)
    A = 2.0 * D.T @ D + 2.0 * mu * np.eye(T)
    rhs = 2.0 * D.T @ steps + 2.0 * mu * pos
    return np.linalg.solve(A, rhs)


def tune_pnp(prior: Prior, L_pos: np.ndarray, steps: np.ndarray, truth: np.ndarray,
             mus, rhos, level: float, max_iter: int = 200,
             tol: float = 1e-6) -> tuple[PnpConfig, float, list[tuple[float, float, float]]]:
    """Grid search over (mu, rho) minimising final-step MSE; returns the best config."""
    best_cfg, best = None, math.inf
    table = []
    for mu in mus:
        for rho in rhos:
            cfg = PnpConfig(mu=float(mu), rho=float(rho), level=level, max_iter=max_iter, tol=tol)
            est = pnp_track_batch(prior, L_pos, steps, cfg).L
            err = final_step_mse(est, truth)
            table.append((float(mu), float(rho), err))
            if err < best:
                best_cfg, best = cfg, err
    return best_cfg, best, table
