"""Binary file formats (all little-endian).

CSI1  dataset:      "CSI1", A, S, count (u32); per record 2 x f64 location,
                    then A*S*2 f32 (antenna outer, subcarrier inner, re/im).
TRJ1  trajectories: "TRJ1", T, count (u32); per record T*2 f64.
IMU1  IMU steps:    "IMU1", T, count (u32); per record SNR (f64) then
                    (T-1) x (distance, heading) f64.
DNB1  denoiser bank: "DNB1", version, count (u32); per model T (u32),
                    level (f64), six shape-prefixed f64 arrays.
PNM1  position model: "PNM1", version (u32), config JSON, meta JSON, then
                    named shape-prefixed f64 arrays.
"""
from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from collections import OrderedDict
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import autograd as ag
from .channel_sim import CsiDataset
from .denoiser import DenoiserBank, DenoiserModel
from .positioning import NetworkConfig, PositionModel, TrainingState
from .trajectory import ImuMeasurement

FORMAT_VERSION = 1


class FormatError(Exception):
    """Base class for unreadable files."""


class BadMagic(FormatError):
    pass


class BadVersion(FormatError):
    pass


class Truncated(FormatError):
    pass


def atomic_write(path, data: bytes) -> None:
    """Write to a temporary file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise Truncated(f"{self.what}: file truncated at byte {len(self.data)} "
                            f"(needed {self.pos + n})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def u32(self) -> int:
        return self.unpack("I")[0]

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype).newbyteorder("<")
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).astype(dt.newbyteorder("="))

    def shaped(self) -> np.ndarray:
        ndim = self.u32()
        shape = self.unpack("I" * ndim) if ndim else ()
        return self.array("f8", int(np.prod(shape, dtype=np.int64))).reshape(shape)

    def text(self) -> str:
        return self.take(self.u32()).decode("utf-8")

    def magic(self, expected: bytes) -> None:
        got = self.take(4)
        if got != expected:
            raise BadMagic(f"{self.what}: expected magic {expected!r}, found {got!r}")

    def version(self) -> None:
        v = self.u32()
        if v != FORMAT_VERSION:
            raise BadVersion(f"{self.what}: unsupported version {v} (expected {FORMAT_VERSION})")

    def end(self) -> None:
        if self.pos != len(self.data):
            raise FormatError(f"{self.what}: {len(self.data) - self.pos} trailing bytes")


def _shaped(buf: io.BytesIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype="<f8")
    buf.write(struct.pack("<I", arr.ndim))
    if arr.ndim:
        buf.write(struct.pack("<" + "I" * arr.ndim, *arr.shape))
    buf.write(np.ascontiguousarray(arr).tobytes())


def _text(buf: io.BytesIO, s: str) -> None:
    raw = s.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def _read(path, what: str) -> _Reader:
    return _Reader(Path(path).read_bytes(), f"{what} {path}")


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


# ---------------------------------------------------------------------------
# CSI datasets


def save_csi_dataset(path, ds: CsiDataset) -> None:
    n, a, s, _ = ds.csi.shape
    buf = io.BytesIO()
    buf.write(struct.pack("<4sIII", b"CSI1", a, s, n))
    for loc, csi in zip(ds.locations, ds.csi):
        buf.write(np.asarray(loc, dtype="<f8").tobytes())
        buf.write(np.asarray(csi, dtype="<f4").tobytes())
    atomic_write(path, buf.getvalue())


def load_csi_dataset(path) -> CsiDataset:
    r = _read(path, "CSI dataset")
    r.magic(b"CSI1")
    a, s, n = r.unpack("III")
    locs = np.empty((n, 2))
    csi = np.empty((n, a, s, 2))
    for i in range(n):
        locs[i] = r.array("f8", 2)
        csi[i] = r.array("f4", a * s * 2).reshape(a, s, 2)
    r.end()
    return CsiDataset(csi, locs)


# ---------------------------------------------------------------------------
# trajectories and IMU


def save_trajectories(path, positions: np.ndarray) -> None:
    positions = np.asarray(positions, dtype="<f8")
    n, T, _ = positions.shape
    atomic_write(path, struct.pack("<4sII", b"TRJ1", T, n) + positions.tobytes())


def load_trajectories(path) -> np.ndarray:
    r = _read(path, "trajectory file")
    r.magic(b"TRJ1")
    T, n = r.unpack("II")
    out = r.array("f8", n * T * 2).reshape(n, T, 2)
    r.end()
    return out


def save_imu(path, measurements: list[ImuMeasurement]) -> None:
    if not measurements:
        raise ValueError("no IMU measurements to save")
    T = len(measurements[0]) + 1
    buf = io.BytesIO()
    buf.write(struct.pack("<4sII", b"IMU1", T, len(measurements)))
    for m in measurements:
        if len(m) != T - 1:
            raise ValueError("IMU records differ in length")
        buf.write(struct.pack("<d", m.snr_db))
        buf.write(np.column_stack([m.distance, m.heading]).astype("<f8").tobytes())
    atomic_write(path, buf.getvalue())


def load_imu(path) -> list[ImuMeasurement]:
    r = _read(path, "IMU file")
    r.magic(b"IMU1")
    T, n = r.unpack("II")
    out = []
    for _ in range(n):
        (snr,) = r.unpack("d")
        rows = r.array("f8", (T - 1) * 2).reshape(T - 1, 2)
        out.append(ImuMeasurement(rows[:, 0].copy(), rows[:, 1].copy(), snr))
    r.end()
    return out


# ---------------------------------------------------------------------------
# denoiser bank


def save_bank(path, bank: DenoiserBank) -> None:
    buf = io.BytesIO()
    buf.write(struct.pack("<4sII", b"DNB1", FORMAT_VERSION, len(bank)))
    for m in bank:
        buf.write(struct.pack("<Id", m.T, m.level))
        for arr in m.arrays:
            _shaped(buf, arr)
    atomic_write(path, buf.getvalue())


def load_bank(path) -> DenoiserBank:
    r = _read(path, "denoiser bank")
    r.magic(b"DNB1")
    r.version()
    n = r.u32()
    models = []
    for _ in range(n):
        T, level = r.unpack("Id")
        arrays = [r.shaped() for _ in range(6)]
        models.append(DenoiserModel(*arrays, level=level, T=T))
    r.end()
    return DenoiserBank(models)


# ---------------------------------------------------------------------------
# position model and training checkpoints


def _write_pnm(path, config: NetworkConfig, meta: dict, arrays: "OrderedDict[str, np.ndarray]") -> None:
    buf = io.BytesIO()
    buf.write(struct.pack("<4sI", b"PNM1", FORMAT_VERSION))
    _text(buf, _dumps(asdict(config)))
    _text(buf, _dumps(meta))
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        _text(buf, name)
        _shaped(buf, arr)
    atomic_write(path, buf.getvalue())


def _read_pnm(path) -> tuple[NetworkConfig, dict, "OrderedDict[str, np.ndarray]"]:
    r = _read(path, "position model")
    r.magic(b"PNM1")
    r.version()
    config = NetworkConfig(**json.loads(r.text()))
    meta = json.loads(r.text())
    arrays: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(r.u32()):
        name = r.text()
        arrays[name] = r.shaped()
    r.end()
    return config, meta, arrays


def save_model(path, model: PositionModel) -> None:
    arrays = OrderedDict((k, v.data) for k, v in model.params.items())
    _write_pnm(path, model.config, dict(model.meta), arrays)


def load_model(path) -> PositionModel:
    config, meta, arrays = _read_pnm(path)
    params = OrderedDict((k, ag.parameter(v)) for k, v in arrays.items() if "/" not in k)
    return PositionModel(config, params, meta)


def save_checkpoint(path, state: TrainingState) -> None:
    """Model plus everything needed to resume training (best weights, Adam moments)."""
    arrays: OrderedDict[str, np.ndarray] = OrderedDict(
        (k, v.data) for k, v in state.model.params.items())
    for k, v in state.best_params.items():
        arrays[f"best/{k}"] = v
    for k in state.adam.m:
        arrays[f"adam_m/{k}"] = state.adam.m[k]
        arrays[f"adam_v/{k}"] = state.adam.v[k]
    a = state.adam
    meta = {"kind": "checkpoint", "next_epoch": state.next_epoch,
            "best_val_mse": state.best_val_mse, "best_epoch": state.best_epoch,
            "history": [list(h) for h in state.history],
            "adam": {"lr": a.lr, "beta1": a.beta1, "beta2": a.beta2, "eps": a.eps,
                     "halve_every": a.halve_every, "step": a.step}}
    _write_pnm(path, state.model.config, meta, arrays)


def load_checkpoint(path) -> TrainingState:
    config, meta, arrays = _read_pnm(path)
    if meta.get("kind") != "checkpoint":
        raise FormatError(f"{path} is a model file, not a training checkpoint")
    params = OrderedDict((k, ag.parameter(v)) for k, v in arrays.items() if "/" not in k)
    best = {k[5:]: v for k, v in arrays.items() if k.startswith("best/")}
    adam = ag.AdamState(**meta["adam"])
    adam.m = {k[7:]: v for k, v in arrays.items() if k.startswith("adam_m/")}
    adam.v = {k[7:]: v for k, v in arrays.items() if k.startswith("adam_v/")}
    return TrainingState(PositionModel(config, params, {}), best, meta["best_val_mse"],
                         meta["best_epoch"], adam, meta["next_epoch"],
                         [tuple(h) for h in meta["history"]])
