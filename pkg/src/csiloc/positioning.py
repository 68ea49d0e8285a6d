"""Attention-augmented residual CNN that maps one CSI tensor to a 2-D location.

Layout: shallow conv -> D x (RB, PB) -> M deep blocks (AARB when
``(m - 1) % z == 0``, RB otherwise) -> flatten -> FCN n1-n2-2.
"""
from __future__ import annotations

import copy
import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .channel_sim import CsiDataset, normalize_csi

log = logging.getLogger(__name__)


# Kaiming slope parameter sqrt(5) gives bound 1/sqrt(fan_in); the He bound
# sqrt(6/fan_in) blows up activations through the residual stacks.
INIT_SLOPE = math.sqrt(5.0)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    num_antennas: int = 16
    num_subcarriers: int = 16
    D: int = 2
    M: int = 3
    z: int = 1
    n_q: int = 4
    n_v: int = 4
    kernel: int = 5
    channels: int = 8
    n1: int = 64
    n2: int = 32
    p: int = 2
    q: int = 2
    use_pb: bool = True
    use_aarb: bool = True

    def __post_init__(self):
        if self.D < 1 or self.M < 1:
            raise ValueError("D and M must be at least 1")
        if not 1 <= self.z <= self.M:
            raise ValueError("z must lie in [1, M]")
        if self.kernel % 2 == 0:
            raise ValueError("kernel size must be odd")
        if self.num_antennas % self.p ** self.D or self.num_subcarriers % self.q ** self.D:
            raise ValueError(
                f"input ({self.num_antennas},{self.num_subcarriers}) not divisible by "
                f"pooling ({self.p}^{self.D},{self.q}^{self.D})")

    @classmethod
    def paper(cls, num_antennas: int = 64, num_subcarriers: int = 100) -> "NetworkConfig":
        return cls(num_antennas, num_subcarriers, D=2, M=7, z=1, n_q=4, n_v=4,
                   kernel=5, channels=32, n1=64, n2=32, p=2, q=2)

    @property
    def deep_size(self) -> tuple[int, int]:
        return (self.num_antennas // self.p ** self.D, self.num_subcarriers // self.q ** self.D)

    @property
    def n_k(self) -> int:
        return self.n_q

    def deep_block_kinds(self) -> list[str]:
        kinds = []
        for m in range(1, self.M + 1):
            kinds.append("aarb" if self.use_aarb and (m - 1) % self.z == 0 else "rb")
        return kinds

    def variant(self, name: str) -> "NetworkConfig":
        """Ablation variants: ``full``, ``aarb0`` (AARB->RB), ``pb0_aarb0`` (also PB->AveP)."""
        d = asdict(self)
        if name == "full":
            d.update(use_pb=True, use_aarb=True)
        elif name == "aarb0":
            d.update(use_pb=True, use_aarb=False)
        elif name == "pb0_aarb0":
            d.update(use_pb=False, use_aarb=False)
        else:
            raise ValueError(f"unknown variant {name!r}")
        return NetworkConfig(**d)


VARIANT_LABELS = {"full": "AAResCNN", "aarb0": "AAResCNN_AARB0",
                  "pb0_aarb0": "AAResCNN_PB0_AARB0"}


# ---------------------------------------------------------------------------
# blocks


def _sub(params: dict, prefix: str) -> dict:
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


def _channels(x: Tensor) -> int:
    return x.shape[-1]


def rb_forward(x: Tensor, params: dict) -> Tensor:
    """Residual block: ``x + conv2(act(conv1(x)))``."""
    if params["conv1.w"].shape[2] != _channels(x) or params["conv2.w"].shape[3] != _channels(x):
        raise ValueError("residual block channel count does not match its input")
    h = ag.leaky_relu(ag.conv2d(x, params["conv1.w"], params["conv1.b"]))
    return ag.add(x, ag.conv2d(h, params["conv2.w"], params["conv2.b"]))


def pb_forward(x: Tensor, params: dict, p: int, q: int) -> Tensor:
    """Pooling block: conv to 2C channels, p x q average pool, conv back to C."""
    h = ag.conv2d(x, params["conv1.w"], params["conv1.b"])
    h = ag.avg_pool(h, p, q)
    return ag.conv2d(h, params["conv2.w"], params["conv2.b"])


def relative_indices(n: int) -> np.ndarray:
    """``idx[h, m] = (m - h) + (n - 1)``, the row of the relative encoding table."""
    r = np.arange(n)
    return r[None, :] - r[:, None] + (n - 1)


def _attention(x: Tensor, params: dict) -> tuple[Tensor, Tensor]:
    single = x.data.ndim == 3
    if single:
        x = ag.reshape(x, (1,) + x.shape)
    _, h, w, _ = x.shape
    n_q = params["q.w"].shape[3]
    if params["k.w"].shape[3] != n_q:
        raise ValueError("query and key widths must match")
    if params["rel_h"].shape != (2 * h - 1, n_q) or params["rel_w"].shape != (2 * w - 1, n_q):
        raise ValueError(f"relative encodings do not fit a {h}x{w} feature map")
    q = ag.conv2d(x, params["q.w"])
    k = ag.conv2d(x, params["k.w"])
    v = ag.conv2d(x, params["v.w"])
    rh = ag.take(params["rel_h"], relative_indices(h))  # (h, m, c)
    rw = ag.take(params["rel_w"], relative_indices(w))  # (w, n, c)
    content = ag.einsum("bhwc,bmnc->bhwmn", q, k)
    lh = ag.einsum("bhwc,hmc->bhwm", q, rh)
    lw = ag.einsum("bhwc,wnc->bhwn", q, rw)
    b = x.shape[0]
    logits = ag.add(ag.add(content, ag.reshape(lh, (b, h, w, h, 1))),
                    ag.reshape(lw, (b, h, w, 1, w)))
    weights = ag.softmax2d(ag.scale(logits, 1.0 / math.sqrt(n_q)))
    out = ag.einsum("bhwmn,bmnc->bhwc", weights, v)
    if single:
        out = ag.reshape(out, out.shape[1:])
        weights = ag.reshape(weights, weights.shape[1:])
    return out, weights


def aaconv_forward(x: Tensor, params: dict) -> Tensor:
    """Single-head attention-augmented convolution (attention branch only).

    Logits for output pixel (h, w) over input pixel (m, n) are
    ``Q[h,w] . (K[m,n] + rel_h[m-h] + rel_w[n-w]) / sqrt(N_q)``; a 2-D
    softmax turns them into weights that average the value vectors.
    """
    return _attention(x, params)[0]


def attention_weights(x: Tensor, params: dict) -> np.ndarray:
    return _attention(x, params)[1].data


def aarb_forward(x: Tensor, params: dict) -> Tensor:
    """AARB: [conv(x) | aaconv(x)] -> act -> conv back to C_in, plus skip."""
    c = _channels(x)
    if params["conv_a.w"].shape[2] != c or params["conv2.w"].shape[3] != c:
        raise ValueError("AARB channel count does not match its input")
    a = ag.conv2d(x, params["conv_a.w"], params["conv_a.b"])
    b = aaconv_forward(x, params)
    h = ag.leaky_relu(ag.concat([a, b], axis=-1))
    return ag.add(x, ag.conv2d(h, params["conv2.w"], params["conv2.b"]))


# ---------------------------------------------------------------------------
# model


@dataclass
class PositionModel:
    config: NetworkConfig
    params: "OrderedDict[str, Tensor]"
    meta: dict = field(default_factory=dict)

    def frozen(self) -> dict[str, Tensor]:
        return {k: Tensor(v.data) for k, v in self.params.items()}

    def copy(self) -> "PositionModel":
        return PositionModel(self.config,
                             OrderedDict((k, ag.parameter(v.data.copy()))
                                         for k, v in self.params.items()),
                             copy.deepcopy(self.meta))

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))


def init_model(config: NetworkConfig, seed: int = 0) -> PositionModel:
    """Kaiming-uniform weights (bound 1/sqrt(fan_in)), zero biases, N(0, N_q^-1/2) encodings."""
    rng = np.random.default_rng(seed)
    k, c = config.kernel, config.channels
    params: OrderedDict[str, Tensor] = OrderedDict()

    def conv(name, c_in, c_out, size=k, bias=True):
        params[f"{name}.w"] = ag.parameter(
            ag.kaiming_uniform(rng, (size, size, c_in, c_out), size * size * c_in, INIT_SLOPE))
        if bias:
            params[f"{name}.b"] = ag.parameter(np.zeros(c_out))

    def dense(name, n_in, n_out):
        params[f"{name}.w"] = ag.parameter(
            ag.kaiming_uniform(rng, (n_in, n_out), n_in, INIT_SLOPE))
        params[f"{name}.b"] = ag.parameter(np.zeros(n_out))

    conv("shallow", 2, c)
    for d in range(1, config.D + 1):
        conv(f"stage{d}.rb.conv1", c, c)
        conv(f"stage{d}.rb.conv2", c, c)
        if config.use_pb:
            conv(f"stage{d}.pb.conv1", c, 2 * c)
            conv(f"stage{d}.pb.conv2", 2 * c, c)
    h, w = config.deep_size
    for m, kind in enumerate(config.deep_block_kinds(), start=1):
        pre = f"deep{m}.{kind}"
        if kind == "rb":
            conv(f"{pre}.conv1", c, c)
            conv(f"{pre}.conv2", c, c)
        else:
            conv(f"{pre}.conv_a", c, c)
            conv(f"{pre}.q", c, config.n_q, size=1, bias=False)
            conv(f"{pre}.k", c, config.n_k, size=1, bias=False)
            conv(f"{pre}.v", c, config.n_v, size=1, bias=False)
            std = config.n_q ** -0.5
            params[f"{pre}.rel_h"] = ag.parameter(rng.normal(0, std, (2 * h - 1, config.n_q)))
            params[f"{pre}.rel_w"] = ag.parameter(rng.normal(0, std, (2 * w - 1, config.n_q)))
            conv(f"{pre}.conv2", c + config.n_v, c)
    dense("fc1", h * w * c, config.n1)
    dense("fc2", config.n1, config.n2)
    dense("fc3", config.n2, 2)
    return PositionModel(config, params, {"epochs_run": 0, "best_val_mse": None})


def deep_features(config: NetworkConfig, params: dict, x: Tensor) -> Tensor:
    """Feature map after the last deep block, shape (N, H/p^D, W/q^D, C)."""
    h = ag.conv2d(x, params["shallow.w"], params["shallow.b"])
    for d in range(1, config.D + 1):
        h = rb_forward(h, _sub(params, f"stage{d}.rb."))
        if config.use_pb:
            h = pb_forward(h, _sub(params, f"stage{d}.pb."), config.p, config.q)
        else:
            h = ag.avg_pool(h, config.p, config.q)
    for m, kind in enumerate(config.deep_block_kinds(), start=1):
        sub = _sub(params, f"deep{m}.{kind}.")
        h = rb_forward(h, sub) if kind == "rb" else aarb_forward(h, sub)
    return h


def forward_batch(config: NetworkConfig, params: dict, x) -> Tensor:
    """Locations (N, 2) for already-normalised CSI (N, A, S, 2)."""
    x = ag.as_tensor(x)
    if x.data.ndim != 4 or x.shape[1:] != (config.num_antennas, config.num_subcarriers, 2):
        raise ValueError(
            f"expected CSI batch (N,{config.num_antennas},{config.num_subcarriers},2), "
            f"got {x.shape}")
    f = ag.flatten(deep_features(config, params, x))
    f = ag.leaky_relu(ag.linear(f, params["fc1.w"], params["fc1.b"]))
    f = ag.leaky_relu(ag.linear(f, params["fc2.w"], params["fc2.b"]))
    return ag.linear(f, params["fc3.w"], params["fc3.b"])


def net_forward(model: PositionModel, csi: np.ndarray) -> np.ndarray:
    """Location estimate for one CSI tensor (A, S, 2) or a batch (N, A, S, 2)."""
    csi = np.asarray(csi, dtype=float)
    single = csi.ndim == 3
    x = normalize_csi(csi[None] if single else csi)
    out = forward_batch(model.config, model.frozen(), x).data
    return out[0] if single else out


def predict(model: PositionModel, csi: np.ndarray, batch_size: int = 256) -> np.ndarray:
    x = normalize_csi(np.asarray(csi, dtype=float))
    frozen = model.frozen()
    chunks = [forward_batch(model.config, frozen, x[i:i + batch_size]).data
              for i in range(0, len(x), batch_size)]
    return np.concatenate(chunks, axis=0)


def mse(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean over samples of the squared Euclidean error (m^2)."""
    return float(np.mean(np.sum((pred - target) ** 2, axis=-1)))


def loss_on(config: NetworkConfig, params: dict, x: np.ndarray, y: np.ndarray) -> Tensor:
    pred = forward_batch(config, params, x)
    return ag.scale(ag.square_sum(ag.sub(pred, y)), 1.0 / len(y))


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainHyper:
    epochs: int = 1000
    batch_size: int = 128
    lr: float = 1e-3
    halve_every: int = 200
    seed: int = 0


@dataclass
class TrainingState:
    """Everything needed to resume training bit-identically."""

    model: PositionModel
    best_params: dict[str, np.ndarray]
    best_val_mse: float
    best_epoch: int
    adam: ag.AdamState
    next_epoch: int = 0
    history: list[tuple[int, float, float]] = field(default_factory=list)


def start_training(config: NetworkConfig, hyper: TrainHyper) -> TrainingState:
    model = init_model(config, hyper.seed)
    return TrainingState(model, {k: v.data.copy() for k, v in model.params.items()},
                         math.inf, -1, ag.AdamState(lr=hyper.lr, halve_every=hyper.halve_every))


def train_position_net(config: NetworkConfig, train: CsiDataset, val: CsiDataset,
                       hyper: TrainHyper | None = None, state: TrainingState | None = None,
                       stop_at: int | None = None,
                       on_epoch: Callable[[TrainingState], None] | None = None) -> PositionModel:
    """Adam on the summed squared location error; keeps the best validation checkpoint.

    ``state`` resumes an interrupted run; ``stop_at`` ends the loop early
    (exclusive epoch index) leaving ``state`` ready to resume.
    """
    hyper = hyper or TrainHyper()
    if len(train) == 0 or len(val) == 0:
        raise ValueError("training and validation sets must be nonempty")
    shape = (config.num_antennas, config.num_subcarriers, 2)
    for name, ds in (("train", train), ("val", val)):
        if ds.csi.shape[1:] != shape:
            raise ValueError(f"{name} CSI shape {ds.csi.shape[1:]} does not match network {shape}")
    state = state or start_training(config, hyper)
    x_train = normalize_csi(train.csi)
    x_val = normalize_csi(val.csi)
    params = state.model.params
    n = len(train)
    end = hyper.epochs if stop_at is None else min(stop_at, hyper.epochs)
    for epoch in range(state.next_epoch, end):
        order = np.random.default_rng([hyper.seed, epoch + 1]).permutation(n)
        total = 0.0
        for start in range(0, n, hyper.batch_size):
            idx = order[start:start + hyper.batch_size]
            ag.zero_grads(params.values())
            loss = loss_on(config, params, x_train[idx], train.locations[idx])
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(f"loss became {value} at epoch {epoch}, batch {start // hyper.batch_size}")
            ag.backward(loss)
            ag.adam_step(params, ag.collect_grads(params), state.adam, epoch)
            total += value * len(idx)
        val_mse = mse(predict(state.model, val.csi), val.locations)
        if not math.isfinite(val_mse):
            raise TrainingDiverged(f"validation MSE became {val_mse} at epoch {epoch}")
        state.history.append((epoch, total / n, val_mse))
        if val_mse < state.best_val_mse:
            state.best_val_mse = val_mse
            state.best_epoch = epoch
            state.best_params = {k: v.data.copy() for k, v in params.items()}
        state.next_epoch = epoch + 1
        log.debug("epoch %d train %.6g val %.6g", epoch, total / n, val_mse)
        if on_epoch is not None:
            on_epoch(state)
    best = PositionModel(config, OrderedDict((k, ag.parameter(v.copy()))
                                             for k, v in state.best_params.items()),
                         {"epochs_run": state.next_epoch, "best_val_mse": state.best_val_mse,
                          "best_epoch": state.best_epoch})
    return best


# ---------------------------------------------------------------------------
# cost model


def flops_estimate(op_kind: str, H: int, W: int, C_in: int, k: int = 1,
                   N_q: int = 0, N_v: int = 0, C_out: int | None = None) -> tuple[int, int]:
    """(parameter count, FLOPs) of one AveP, Conv or AAConv layer.

    Conv assumes ``C_out == C_in`` unless given, matching the usual
    constant-width blocks.
    """
    kind = op_kind.lower()
    if min(H, W, C_in) <= 0:
        raise ValueError("dimensions must be positive")
    if kind == "avep":
        return 0, H * W * C_in
    if kind == "conv":
        c_out = C_in if C_out is None else C_out
        return k * k * C_in * c_out, 2 * k * k * H * W * C_in * c_out
    if kind == "aaconv":
        params = C_in * (2 * N_q + N_v) + 2 * (H + W)
        flops = 2 * H * W * (H * W * (3 * N_q + N_v) + C_in * (2 * N_q + N_v))
        return params, flops
    raise ValueError(f"unknown op kind {op_kind!r}")


def network_cost(config: NetworkConfig) -> list[tuple[str, str, int, int]]:
    """Per-layer (name, kind, params, flops) for the whole network's conv/pool/attention layers."""
    rows = []
    h, w = config.num_antennas, config.num_subcarriers
    c, k = config.channels, config.kernel

    def conv(name, c_in, c_out):
        rows.append((name, "conv", *flops_estimate("conv", h, w, c_in, k, C_out=c_out)))

    conv("shallow", 2, c)
    for d in range(1, config.D + 1):
        conv(f"stage{d}.rb.conv1", c, c)
        conv(f"stage{d}.rb.conv2", c, c)
        if config.use_pb:
            conv(f"stage{d}.pb.conv1", c, 2 * c)
            rows.append((f"stage{d}.pb.pool", "avep",
                         *flops_estimate("avep", h, w, 2 * c)))
            h, w = h // config.p, w // config.q
            conv(f"stage{d}.pb.conv2", 2 * c, c)
        else:
            rows.append((f"stage{d}.pool", "avep", *flops_estimate("avep", h, w, c)))
            h, w = h // config.p, w // config.q
    for m, kind in enumerate(config.deep_block_kinds(), start=1):
        if kind == "rb":
            conv(f"deep{m}.rb.conv1", c, c)
            conv(f"deep{m}.rb.conv2", c, c)
        else:
            conv(f"deep{m}.aarb.conv_a", c, c)
            rows.append((f"deep{m}.aarb.aaconv", "aaconv",
                         *flops_estimate("aaconv", h, w, c, 1, config.n_q, config.n_v)))
            conv(f"deep{m}.aarb.conv2", c + config.n_v, c)
    return rows
