import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from csiloc.trajectory import (ImuMeasurement, Trajectory, add_noise, constant_velocity,
                               gen_trajectory, imu_batch, imu_measure, imu_noise_std, integrate,
                               make_dataset, stack, step_lengths_and_headings)

AREA = (0.0, 0.0, 1.25, 1.25)


def test_constant_velocity_points():
    pos = constant_velocity((0.0, 0.0), (0.1, 0.0), 5)
    np.testing.assert_allclose(pos, [[0, 0], [0.1, 0], [0.2, 0], [0.3, 0], [0.4, 0]], atol=1e-15)


@given(seed=st.integers(0, 100_000))
def test_pattern_a_has_equal_steps(seed):
    pos = gen_trajectory("a", 5, AREA, seed=seed).positions
    d = np.diff(pos, axis=0)
    assert np.max(np.abs(d - d[0])) <= 1e-12


@given(seed=st.integers(0, 100_000))
def test_pattern_b_keeps_heading(seed):
    _, heading = step_lengths_and_headings(gen_trajectory("b", 5, AREA, seed=seed).positions)
    assert np.max(np.abs(np.angle(np.exp(1j * (heading - heading[0]))))) <= 1e-12


@given(pattern=st.sampled_from("abc"), T=st.integers(2, 8), seed=st.integers(0, 100_000))
def test_trajectories_stay_inside_with_bounded_steps(pattern, T, seed):
    tr = gen_trajectory(pattern, T, AREA, (0.05, 0.25), seed)
    assert tr.T == T
    p = tr.positions
    assert np.all((p >= 0) & (p <= 1.25))
    r, _ = step_lengths_and_headings(p)
    assert np.all((r >= 0.05 - 1e-12) & (r <= 0.25 + 1e-12))


def turn_index(pos):
    d = np.diff(pos, axis=0)
    for t in range(1, len(d)):
        if np.max(np.abs(d[t] - d[0])) > 1e-12:
            return t + 1  # last step still on the old heading, numbering steps from 2
    return None


def test_turn_step_is_uniform():
    rng = np.random.default_rng(5)
    T = 5
    counts = {}
    for _ in range(10_000):
        t = turn_index(gen_trajectory("c", T, AREA, seed=rng).positions)
        counts[t] = counts.get(t, 0) + 1
    assert set(counts) == {2, 3, 4}
    expected = 10_000 / 3
    chi2 = sum((c - expected) ** 2 / expected for c in counts.values())
    # survival function of chi-square with 2 degrees of freedom
    assert math.exp(-chi2 / 2) > 0.01


def test_rejects_bad_arguments():
    with pytest.raises(ValueError):
        gen_trajectory("d")
    with pytest.raises(ValueError):
        gen_trajectory("a", T=1)
    with pytest.raises(ValueError):
        gen_trajectory("a", speed_range=(0.0, 0.1))
    with pytest.raises(ValueError, match="1000"):
        gen_trajectory("a", 5, (0, 0, 0.1, 0.1), (0.2, 0.3), seed=0)
    with pytest.raises(ValueError):
        make_dataset(0)


def test_forced_patterns_and_determinism():
    ds = make_dataset(3, patterns="abc", seed=4)
    assert [t.pattern for t in ds] == ["a", "b", "c"]
    np.testing.assert_array_equal(stack(make_dataset(20, seed=9)), stack(make_dataset(20, seed=9)))
    assert stack(ds).shape == (3, 5, 2)


def test_pattern_frequencies():
    ds = make_dataset(10_000, seed=1)
    for p in "abc":
        freq = sum(t.pattern == p for t in ds) / len(ds)
        assert 0.30 <= freq <= 0.37


def test_zero_noise_is_identity():
    tr = gen_trajectory("b", seed=3)
    np.testing.assert_array_equal(add_noise(tr, 0.0, 1).positions, tr.positions)
    with pytest.raises(ValueError):
        add_noise(tr, -0.1)


def test_noise_std_and_independence():
    base = np.zeros((2000, 5, 2))
    noise = add_noise(base, 0.02, seed=7)
    assert noise.shape == base.shape
    per_coord = noise.reshape(-1, 2)[:10_000]
    assert np.all((per_coord.std(axis=0) >= 0.0194) & (per_coord.std(axis=0) <= 0.0206))
    x = noise[..., 0]
    lag1 = np.corrcoef(x[:, :-1].ravel(), x[:, 1:].ravel())[0, 1]
    assert abs(lag1) < 0.03
    assert np.all(np.abs(per_coord.mean(axis=0)) <= 4 * 0.02 / math.sqrt(10_000))


def test_imu_sigma_worked_example():
    sx, sy = imu_noise_std(np.array([1.0]), np.array([math.pi / 4]), 20.0)
    assert sx[0] == pytest.approx(0.070711, abs=1e-6)
    assert sy[0] == pytest.approx(0.070711, abs=1e-6)


def test_imu_sigma_floor_on_axis_aligned_steps():
    sx, sy = imu_noise_std(np.array([0.2]), np.array([0.0]), 20.0)
    assert sy[0] == 1e-6 and sx[0] == pytest.approx(0.02)


def test_noiseless_imu_inverts_integration():
    tr = gen_trajectory("c", 6, seed=2)
    m = imu_measure(tr, math.inf)
    r, h = step_lengths_and_headings(tr.positions)
    np.testing.assert_array_equal(m.distance, r)
    np.testing.assert_array_equal(m.heading, h)
    assert len(m) == 5
    np.testing.assert_allclose(integrate(tr.positions[0], m.steps()), tr.positions, atol=1e-14)


def test_imu_error_grows_as_snr_drops():
    pos = stack(make_dataset(2500, seed=3))  # 10 000 steps
    true_r, _ = step_lengths_and_headings(pos)
    lo, _ = imu_batch(pos, 1.0, seed=1)
    hi, _ = imu_batch(pos, 100.0, seed=1)
    assert lo.shape == true_r.shape == (2500, 4)
    assert np.mean(np.abs(lo - true_r)) > np.mean(np.abs(hi - true_r))
    assert np.all(lo >= 0)


def test_imu_requires_two_points():
    with pytest.raises(ValueError):
        imu_measure(np.zeros((1, 2)), 20.0)


def test_trajectory_validates_shape():
    with pytest.raises(ValueError):
        Trajectory(np.zeros((5, 3)))
    assert isinstance(imu_measure(np.zeros((3, 2)) + 0.5, 10.0), ImuMeasurement)
