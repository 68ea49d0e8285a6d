import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from csiloc.channel_sim import (C_LIGHT, ChannelConfig, Environment, PathSet, build_environment,
                                channel_response, csi_along, csi_at, normalize_csi, path_params,
                                sample_dataset, to_complex)

from oracles import csi_grid_mp, placement_reference

AREA = (0.0, 0.0, 1.25, 1.25)


def small_config(A=4, S=4, P=1, noise=0.0, freqs=None):
    if freqs is None:
        return ChannelConfig(A, S, num_paths=P, noise_std=noise)
    return ChannelConfig(A, S, subcarrier_freqs=tuple(freqs), num_paths=P, noise_std=noise)


def test_config_validation():
    with pytest.raises(ValueError):
        ChannelConfig(num_subcarriers=3, subcarrier_freqs=(1.0, 2.0))
    with pytest.raises(ValueError):
        ChannelConfig(num_subcarriers=2, subcarrier_freqs=(2.0, 1.0))
    with pytest.raises(ValueError):
        ChannelConfig(antenna_spacing=0.0)
    with pytest.raises(ValueError):
        ChannelConfig(num_paths=0)
    with pytest.raises(ValueError):
        ChannelConfig(noise_std=-1.0)


def test_single_path_environment_has_no_scatterers():
    env = build_environment(small_config(P=1), AREA, seed=123)
    assert env.scatterers == ()


def test_environment_is_deterministic():
    cfg = small_config(P=5)
    assert build_environment(cfg, AREA, 9) == build_environment(cfg, AREA, 9)
    assert build_environment(cfg, AREA, 9) != build_environment(cfg, AREA, 10)


def test_placement_matches_reference_rule():
    env = build_environment(small_config(P=5), AREA, seed=7)
    bs, scat, box = placement_reference(AREA, 4, 7)
    assert len(env.scatterers) == 4
    assert env.bs_position == pytest.approx(bs, abs=0)
    np.testing.assert_array_equal(np.array(env.scatterers), np.array(scat))
    for x, y in env.scatterers:
        assert box[0] <= x <= box[2] and box[1] <= y <= box[3]
    # BS outside the area, below the midpoint of an edge
    assert not env.contains(env.bs_position)
    assert env.bs_position[0] == pytest.approx(0.625)


def test_degenerate_bounds_rejected():
    with pytest.raises(ValueError):
        build_environment(small_config(), (0, 0, 0, 1), 0)
    with pytest.raises(ValueError):
        build_environment(small_config(), (0, 1, 1, 1), 0)


def test_broadside_location_has_zero_cosine():
    env = build_environment(small_config(P=1), AREA, 0)
    ps = path_params(env, (env.bs_position[0], 0.7))
    assert ps.aoa[0] == pytest.approx(math.pi / 2, abs=1e-15)
    assert abs(math.cos(ps.aoa[0])) < 1e-15


def test_los_delay_from_distance():
    cfg = small_config(P=1)
    env = Environment(cfg, (0.0, -3.0), (), AREA, 0)
    ps = path_params(env, (0.0, 0.0))
    assert ps.delay[0] == pytest.approx(3.0 / C_LIGHT, rel=1e-15)
    assert ps.delay[0] == pytest.approx(1.0007e-8, rel=1e-4)
    assert abs(ps.coeffs[0]) == pytest.approx(1.0 / 3.0)


def test_los_has_smallest_delay_and_reflection_loss():
    env = build_environment(small_config(P=5), AREA, 3)
    ps = path_params(env, (0.3, 0.9))
    assert np.argmin(ps.delay) == 0
    total = ps.delay[1:] * C_LIGHT
    np.testing.assert_allclose(np.abs(ps.coeffs[1:]), 0.3 / np.maximum(total, 1.0), rtol=1e-14)
    assert np.all((ps.aoa > 0) & (ps.aoa < math.pi))


def test_nearby_locations_have_bounded_delay_change():
    env = build_environment(small_config(P=5), AREA, 4)
    a = path_params(env, (0.5, 0.5))
    b = path_params(env, (0.505, 0.5))
    assert abs(a.delay[0] - b.delay[0]) <= 0.005 / C_LIGHT


def test_location_outside_area_rejected():
    env = build_environment(small_config(), AREA, 0)
    with pytest.raises(ValueError):
        path_params(env, (2.0, 0.5))


def test_trivial_path_gives_all_ones():
    cfg = small_config(A=3, S=5)
    h = channel_response(cfg, PathSet(np.array([1.0 + 0j]), np.array([math.pi / 2]), np.array([0.0])))
    np.testing.assert_allclose(h, np.ones((3, 5)), atol=1e-15)


@given(phi=st.floats(0.01, math.pi - 0.01), tau=st.floats(0, 1e-7))
def test_single_unit_path_has_unit_modulus(phi, tau):
    cfg = small_config(A=6, S=7)
    h = channel_response(cfg, PathSet(np.array([1.0 + 0j]), np.array([phi]), np.array([tau])))
    np.testing.assert_allclose(np.abs(h), 1.0, atol=1e-12)


def test_single_path_phase_linear_in_antenna_index():
    cfg = small_config(A=8, S=1, freqs=[0.0])
    phi = 1.1
    h = channel_response(cfg, PathSet(np.array([1.0 + 0j]), np.array([phi]), np.array([0.0])))
    phase = np.unwrap(np.angle(h[:, 0]))
    a = np.arange(1, 9)
    slope, icpt = np.polyfit(a, phase, 1)
    resid = phase - (slope * a + icpt)
    assert np.max(np.abs(resid)) <= 1e-9
    expected = -2 * math.pi * cfg.antenna_spacing * math.cos(phi) / cfg.center_wavelength
    assert slope == pytest.approx(expected, abs=1e-9)


def test_three_path_response_matches_high_precision_oracle():
    rng = np.random.default_rng(0)
    cfg = small_config(A=5, S=6, P=3)
    coeffs = rng.normal(size=3) + 1j * rng.normal(size=3)
    aoa = rng.uniform(0.1, 3.0, 3)
    delay = rng.uniform(0, 5e-8, 3)
    h = channel_response(cfg, PathSet(coeffs, aoa, delay))
    ref = csi_grid_mp(coeffs, aoa, delay, 5, cfg.subcarrier_freqs, cfg.antenna_spacing,
                      cfg.center_wavelength)
    assert np.max(np.abs(h - ref)) <= 1e-12


def test_noiseless_csi_is_pure_function_of_location():
    env = build_environment(small_config(P=4, noise=0.0), AREA, 2)
    np.testing.assert_array_equal(csi_at(env, (0.2, 0.4)), csi_at(env, (0.2, 0.4)))
    assert csi_at(env, (0.2, 0.4)).shape == (4, 4, 2)


def test_noise_added_only_with_rng():
    env = build_environment(small_config(P=3, noise=0.05), AREA, 2)
    clean = csi_at(env, (0.2, 0.4))
    noisy = csi_at(env, (0.2, 0.4), np.random.default_rng(1))
    diff = (noisy - clean).ravel()
    assert 0.02 < np.std(diff) < 0.09


def test_single_sample_dataset_consistent_with_csi_at():
    env = build_environment(small_config(P=3), AREA, 5)
    ds = sample_dataset(env, 1, seed=11)
    assert len(ds) == 1
    rng = np.random.default_rng(11)
    rng.uniform(0, 1.25, 1)
    rng.uniform(0, 1.25, 1)
    np.testing.assert_array_equal(ds.csi[0], csi_at(env, ds.locations[0], rng))


def test_dataset_deterministic_and_rejects_empty():
    env = build_environment(small_config(P=3), AREA, 5)
    a, b = sample_dataset(env, 5, 3), sample_dataset(env, 5, 3)
    np.testing.assert_array_equal(a.csi, b.csi)
    np.testing.assert_array_equal(a.locations, b.locations)
    with pytest.raises(ValueError):
        sample_dataset(env, 0, 3)


def test_dataset_locations_uniform_over_area():
    env = build_environment(small_config(A=2, S=2, P=1), AREA, 5)
    ds = sample_dataset(env, 1000, 21)
    sigma = 1.25 / math.sqrt(12) / math.sqrt(1000)
    assert np.all(np.abs(ds.locations.mean(axis=0) - 0.625) <= 3 * sigma)
    assert ds.locations.min() >= 0 and ds.locations.max() <= 1.25


def test_csi_along_matches_shape():
    env = build_environment(small_config(P=2), AREA, 5)
    pos = np.full((3, 5, 2), 0.5)
    assert csi_along(env, pos, 0).shape == (3, 5, 4, 4, 2)


def test_normalization_scales_to_unit_peak():
    x = np.random.default_rng(0).normal(size=(3, 4, 4, 2))
    n = normalize_csi(x)
    np.testing.assert_allclose(np.abs(n).max(axis=(1, 2, 3)), 1.0)
    np.testing.assert_array_equal(normalize_csi(np.zeros((4, 4, 2))), np.zeros((4, 4, 2)))
    np.testing.assert_allclose(to_complex(x)[0, 0, 0], x[0, 0, 0, 0] + 1j * x[0, 0, 0, 1])
