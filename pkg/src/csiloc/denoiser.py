"""Learned trajectory prior: a bank of 3-layer MLP Gaussian denoisers.

Each model maps a flattened noisy trajectory (t-major: x1, y1, x2, y2, ...)
straight to the clean trajectory; one model is trained per noise level.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .trajectory import Trajectory, stack

log = logging.getLogger(__name__)

# Noise-level grid in millimetres; stored in metres.
PAPER_GRID_MM = (1, 3, 5, 10, 15, 20, 25, 30, 35, 40, 45, 50)
PAPER_GRID = tuple(v / 1000.0 for v in PAPER_GRID_MM)


@dataclass
class DenoiserModel:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray
    level: float
    T: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = 2 * self.T
        hidden = self.W1.shape[1]
        shapes = [(self.W1, (n, hidden)), (self.b1, (hidden,)), (self.W2, (hidden, hidden)),
                  (self.b2, (hidden,)), (self.W3, (hidden, n)), (self.b3, (n,))]
        for arr, want in shapes:
            if arr.shape != want:
                raise ValueError(f"denoiser weight shape {arr.shape}, expected {want}")
        if self.level < 0:
            raise ValueError("noise level must be nonnegative")

    @property
    def arrays(self) -> list[np.ndarray]:
        return [self.W1, self.b1, self.W2, self.b2, self.W3, self.b3]

    def __call__(self, positions: np.ndarray) -> np.ndarray:
        return denoise(self, positions)

    def lipschitz_bound(self) -> float:
        return float(np.prod([np.linalg.norm(w, 2) for w in (self.W1, self.W2, self.W3)]))


def _act(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, ag.LEAKY_SLOPE * x)


def denoise(model: DenoiserModel, noisy):
    """Run the MLP on one trajectory (T, 2), a batch (N, T, 2) or a Trajectory."""
    is_traj = isinstance(noisy, Trajectory)
    pos = noisy.positions if is_traj else np.asarray(noisy, dtype=float)
    if pos.shape[-2:] != (model.T, 2):
        raise ValueError(f"trajectory length {pos.shape[-2]} does not match model T={model.T}")
    flat = pos.reshape(-1, 2 * model.T)
    h = _act(flat @ model.W1 + model.b1)
    h = _act(h @ model.W2 + model.b2)
    out = (h @ model.W3 + model.b3).reshape(pos.shape)
    if is_traj:
        return Trajectory(out, noisy.pattern, noisy.seed)
    return out


def identity_denoiser(T: int, hidden: int = 128, level: float = 0.0) -> DenoiserModel:
    """Weights for which the network computes the identity exactly (up to rounding).

    Uses ``leaky(x) - leaky(-x) = (1 + slope) x``; needs ``hidden >= 4T``.
    """
    n = 2 * T
    if hidden < 2 * n:
        raise ValueError("identity construction needs hidden >= 4T")
    eye = np.eye(n)
    c = 1.0 / (1.0 + ag.LEAKY_SLOPE)
    W1 = np.zeros((n, hidden))
    W1[:, :n], W1[:, n:2 * n] = eye, -eye
    W2 = np.zeros((hidden, hidden))
    W2[:n, :n], W2[n:2 * n, :n] = c * eye, -c * eye
    W2[:n, n:2 * n], W2[n:2 * n, n:2 * n] = -c * eye, c * eye
    W3 = np.zeros((hidden, n))
    W3[:n], W3[n:2 * n] = c * eye, -c * eye
    z = np.zeros
    return DenoiserModel(W1, z(hidden), W2, z(hidden), W3, z(n), level, T)


@dataclass
class DenoiserHyper:
    epochs: int = 300
    batch_size: int = 128
    lr: float = 1e-3
    halve_every: int = 200
    val_fraction: float = 0.1
    hidden: int = 128
    init: str = "identity"


def init_weights(T: int, hidden: int, rng: np.random.Generator,
                 scheme: str = "identity") -> dict[str, np.ndarray]:
    """Initial MLP weights.

    ``kaiming``: fan-in uniform weights, zero biases.  ``identity``: the exact
    identity network of :func:`identity_denoiser` on the first 4T hidden units,
    with the remaining units Kaiming-initialised and their read-out weights
    scaled by 1e-2 so training starts from (almost) the identity map.
    """
    n = 2 * T
    w = {
        "W1": ag.kaiming_uniform(rng, (n, hidden), n),
        "b1": np.zeros(hidden),
        "W2": ag.kaiming_uniform(rng, (hidden, hidden), hidden),
        "b2": np.zeros(hidden),
        "W3": ag.kaiming_uniform(rng, (hidden, n), hidden),
        "b3": np.zeros(n),
    }
    if scheme == "kaiming":
        return w
    if scheme != "identity":
        raise ValueError(f"unknown init scheme {scheme!r}")
    ident = identity_denoiser(T, hidden)
    k = 2 * n
    w["W1"][:, :k] = ident.W1[:, :k]
    w["W2"][:, :k] = 0.0
    w["W2"][:k, :] = 0.0
    w["W2"][:k, :k] = ident.W2[:k, :k]
    w["W3"] *= 1e-2
    w["W3"][:k] = ident.W3[:k]
    return w


def _loss(params: dict, y: np.ndarray, x: np.ndarray) -> ag.Tensor:
    h = ag.leaky_relu(ag.linear(y, params["W1"], params["b1"]))
    h = ag.leaky_relu(ag.linear(h, params["W2"], params["b2"]))
    out = ag.linear(h, params["W3"], params["b3"])
    # mean over samples and time steps of the squared position error
    return ag.scale(ag.square_sum(ag.sub(out, x)), 2.0 / x.size)


def train_denoiser(trajset, level: float, hyper: DenoiserHyper | None = None,
                   seed: int = 0) -> DenoiserModel:
    """Fit one denoiser at noise std ``level`` (metres).

    Noise is redrawn every epoch; a held-out split with fixed noise picks the
    best epoch.
    """
    hyper = hyper or DenoiserHyper()
    if level < 0:
        raise ValueError("noise level must be nonnegative")
    if not isinstance(trajset, np.ndarray) and len({len(t) for t in trajset}) > 1:
        raise ValueError("all trajectories must have the same length T")
    data = stack(trajset).astype(float)
    n, T, _ = data.shape
    flat = data.reshape(n, 2 * T)
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_val = max(1, int(round(hyper.val_fraction * n))) if n > 1 else 0
    val_idx, train_idx = order[:n_val], order[n_val:]
    if len(train_idx) == 0:
        train_idx = order
    x_val = flat[val_idx]
    y_val = x_val + level * np.random.default_rng([seed, 0]).standard_normal(x_val.shape)
    x_tr = flat[train_idx]

    params = {k: ag.parameter(v) for k, v in init_weights(T, hyper.hidden, rng, hyper.init).items()}
    adam = ag.AdamState(lr=hyper.lr, halve_every=hyper.halve_every)
    best = {k: v.data.copy() for k, v in params.items()}
    best_val = math.inf
    best_epoch = -1
    frozen = lambda: {k: ag.Tensor(v.data) for k, v in params.items()}  # noqa: E731
    for epoch in range(hyper.epochs):
        erng = np.random.default_rng([seed, epoch + 1])
        perm = erng.permutation(len(x_tr))
        noisy = x_tr + level * erng.standard_normal(x_tr.shape)
        for start in range(0, len(x_tr), hyper.batch_size):
            idx = perm[start:start + hyper.batch_size]
            ag.zero_grads(params.values())
            loss = _loss(params, noisy[idx], x_tr[idx])
            if not math.isfinite(float(loss.data)):
                raise FloatingPointError(f"denoiser loss diverged at epoch {epoch}")
            ag.backward(loss)
            ag.adam_step(params, ag.collect_grads(params), adam, epoch)
        if n_val:
            val = float(_loss(frozen(), y_val, x_val).data)
        else:
            val = float(_loss(frozen(), x_tr, x_tr).data)
        if val < best_val:
            best_val, best_epoch = val, epoch
            best = {k: v.data.copy() for k, v in params.items()}
    log.debug("denoiser level %.4g best val %.6g at epoch %d", level, best_val, best_epoch)
    return DenoiserModel(best["W1"], best["b1"], best["W2"], best["b2"], best["W3"], best["b3"],
                         float(level), T, {"best_val_mse": best_val, "best_epoch": best_epoch})


@dataclass
class DenoiserBank:
    models: list[DenoiserModel]

    def __post_init__(self):
        if not self.models:
            raise ValueError("a denoiser bank needs at least one model")
        levels = [m.level for m in self.models]
        if any(b <= a for a, b in zip(levels, levels[1:])):
            raise ValueError("bank noise levels must be strictly increasing")
        if len({m.T for m in self.models}) != 1:
            raise ValueError("all bank members must share T")

    @property
    def levels(self) -> list[float]:
        return [m.level for m in self.models]

    @property
    def T(self) -> int:
        return self.models[0].T

    def __len__(self) -> int:
        return len(self.models)

    def __iter__(self):
        return iter(self.models)


def train_bank(trajset, grid, hyper: DenoiserHyper | None = None, seed: int = 0) -> DenoiserBank:
    grid = [float(g) for g in grid]
    if not grid:
        raise ValueError("noise-level grid is empty")
    if len(set(grid)) != len(grid):
        raise ValueError("noise-level grid has duplicates")
    return DenoiserBank([train_denoiser(trajset, g, hyper, seed) for g in sorted(grid)])


def select_denoiser(bank: DenoiserBank, level: float) -> DenoiserModel:
    """Member whose training level is nearest ``level``; ties go to the lower level."""
    best = bank.models[0]
    best_gap = abs(best.level - level)
    for m in bank.models[1:]:
        gap = abs(m.level - level)
        if gap < best_gap - 1e-12 * max(1.0, abs(level)):
            best, best_gap = m, gap
    return best
