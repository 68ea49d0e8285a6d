import struct

import numpy as np
import pytest

from csiloc import formats
from csiloc.channel_sim import CsiDataset
from csiloc.denoiser import DenoiserBank, identity_denoiser
from csiloc.positioning import NetworkConfig, TrainHyper, init_model, start_training, train_position_net
from csiloc.trajectory import ImuMeasurement

TOY = NetworkConfig(num_antennas=8, num_subcarriers=8, D=1, M=2, channels=3, kernel=3, n1=8, n2=4)


def toy_data(seed, n):
    rng = np.random.default_rng(seed)
    return CsiDataset(rng.normal(size=(n, 8, 8, 2)), rng.uniform(0, 1.25, (n, 2)))


def test_csi_round_trip(tmp_path):
    ds = toy_data(0, 3)
    formats.save_csi_dataset(tmp_path / "a.csi", ds)
    back = formats.load_csi_dataset(tmp_path / "a.csi")
    np.testing.assert_array_equal(back.locations, ds.locations)
    np.testing.assert_array_equal(back.csi, ds.csi.astype(np.float32))
    assert (tmp_path / "a.csi").read_bytes()[:4] == b"CSI1"
    assert (tmp_path / "a.csi").stat().st_size == 16 + 3 * (16 + 8 * 8 * 2 * 4)


def test_trajectory_and_imu_round_trip(tmp_path):
    pos = np.random.default_rng(1).normal(size=(4, 5, 2))
    formats.save_trajectories(tmp_path / "t.trj", pos)
    np.testing.assert_array_equal(formats.load_trajectories(tmp_path / "t.trj"), pos)
    imu = [ImuMeasurement(np.array([0.1, 0.2]), np.array([1.0, -2.0]), 20.0),
           ImuMeasurement(np.array([0.3, 0.0]), np.array([0.5, 0.25]), float("inf"))]
    formats.save_imu(tmp_path / "m.imu", imu)
    back = formats.load_imu(tmp_path / "m.imu")
    for a, b in zip(imu, back):
        np.testing.assert_array_equal(a.distance, b.distance)
        np.testing.assert_array_equal(a.heading, b.heading)
        assert a.snr_db == b.snr_db
    with pytest.raises(ValueError):
        formats.save_imu(tmp_path / "e.imu", [])


def test_bank_round_trip(tmp_path):
    bank = DenoiserBank([identity_denoiser(5, 24, 0.01), identity_denoiser(5, 24, 0.03)])
    bank.models[1].b3[:] = 0.5
    formats.save_bank(tmp_path / "b.dnb", bank)
    back = formats.load_bank(tmp_path / "b.dnb")
    assert back.levels == bank.levels and back.T == 5
    for m, n in zip(bank, back):
        for x, y in zip(m.arrays, n.arrays):
            np.testing.assert_array_equal(x, y)


def test_model_round_trip(tmp_path):
    m = init_model(TOY, seed=3)
    m.meta["best_val_mse"] = 0.25
    formats.save_model(tmp_path / "m.pnm", m)
    back = formats.load_model(tmp_path / "m.pnm")
    assert back.config == m.config and back.meta == m.meta
    assert list(back.params) == list(m.params)
    for k in m.params:
        np.testing.assert_array_equal(back.params[k].data, m.params[k].data)


def test_errors_are_distinct(tmp_path):
    pos = np.zeros((2, 3, 2))
    path = tmp_path / "t.trj"
    formats.save_trajectories(path, pos)
    raw = path.read_bytes()
    path.write_bytes(raw[:-3])
    with pytest.raises(formats.Truncated):
        formats.load_trajectories(path)
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(formats.BadMagic):
        formats.load_trajectories(path)
    path.write_bytes(raw + b"\0")
    with pytest.raises(formats.FormatError):
        formats.load_trajectories(path)

    bank = DenoiserBank([identity_denoiser(5, 24, 0.01)])
    bpath = tmp_path / "b.dnb"
    formats.save_bank(bpath, bank)
    raw = bpath.read_bytes()
    bpath.write_bytes(raw[:4] + struct.pack("<I", 99) + raw[8:])
    with pytest.raises(formats.BadVersion):
        formats.load_bank(bpath)
    for exc in (formats.Truncated, formats.BadMagic, formats.BadVersion):
        assert issubclass(exc, formats.FormatError)
    assert len({formats.Truncated, formats.BadMagic, formats.BadVersion}) == 3


def test_model_file_is_not_a_checkpoint(tmp_path):
    formats.save_model(tmp_path / "m.pnm", init_model(TOY, 0))
    with pytest.raises(formats.FormatError):
        formats.load_checkpoint(tmp_path / "m.pnm")


def test_atomic_write_leaves_no_temp_files(tmp_path):
    formats.atomic_write(tmp_path / "sub" / "x.bin", b"abc")
    formats.atomic_write(tmp_path / "sub" / "x.bin", b"defg")
    assert (tmp_path / "sub" / "x.bin").read_bytes() == b"defg"
    assert [p.name for p in (tmp_path / "sub").iterdir()] == ["x.bin"]


def test_checkpoint_resume_is_bit_identical(tmp_path):
    train, val = toy_data(4, 20), toy_data(5, 6)
    hyper = TrainHyper(epochs=4, batch_size=8, seed=2)
    straight = train_position_net(TOY, train, val, hyper)
    state = start_training(TOY, hyper)
    train_position_net(TOY, train, val, hyper, state=state, stop_at=2)
    formats.save_checkpoint(tmp_path / "c.pnm", state)
    restored = formats.load_checkpoint(tmp_path / "c.pnm")
    assert restored.next_epoch == 2 and restored.history == state.history
    resumed = train_position_net(TOY, train, val, hyper, state=restored)
    formats.save_model(tmp_path / "a.pnm", straight)
    formats.save_model(tmp_path / "b.pnm", resumed)
    assert (tmp_path / "a.pnm").read_bytes() == (tmp_path / "b.pnm").read_bytes()
