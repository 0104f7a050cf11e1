import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats
from scipy.linalg import expm

from qhgm.codes import decode_base4, encode_base4
from qhgm.hamiltonian import WeightMatrix, build_hamiltonian
from qhgm.model import (Dataset, ModelParams, SamplingDegeneracy, SynthConfig, evolved_states,
                        full_distribution, generate_synthetic, initial_state_jacobian, likelihood,
                        prepare_initial_state, product_state, sample_from_state, sample_outcomes)
from qhgm.povm import joint_element

from conftest import random_params

P0 = np.array([0.46651, 0.375, 0.125, 0.03349])


def zero_params(n, theta=0.0, phi=0.0):
    return ModelParams(WeightMatrix.zeros(n), np.full(n, theta), np.full(n, phi))


def test_initial_state_examples():
    np.testing.assert_array_equal(prepare_initial_state([0, 0], [0, 0]).amplitudes, [1, 0, 0, 0])
    one = prepare_initial_state([np.pi / 2] * 3, [0] * 3).amplitudes
    np.testing.assert_allclose(one, np.eye(8)[7], atol=1e-15)
    np.testing.assert_allclose(prepare_initial_state([np.pi / 4], [np.pi / 2]).amplitudes,
                               np.array([1, 1j]) / np.sqrt(2), atol=1e-15)
    with pytest.raises(ValueError):
        prepare_initial_state([0, 0], [0])


def test_initial_state_jacobian_fd(rng):
    th, ph = rng.uniform(0, np.pi, 3), rng.uniform(0, 2 * np.pi, 3)
    dth, dph = initial_state_jacobian(th, ph)
    h = 1e-6
    for k in range(3):
        e = np.eye(3)[k] * h
        np.testing.assert_allclose(dth[k], (product_state(th + e, ph) - product_state(th - e, ph)) / (2 * h),
                                   atol=1e-9)
        np.testing.assert_allclose(dph[k], (product_state(th, ph + e) - product_state(th, ph - e)) / (2 * h),
                                   atol=1e-9)


def test_evolution_matches_expm(rng):
    p = random_params(rng, 3)
    t = 0.61
    psi = evolved_states(p, [t])[0]
    ref = expm(-1j * t * build_hamiltonian(p.weights)) @ product_state(p.thetas, p.phis)
    assert np.linalg.norm(psi - ref) < 1e-10


def test_single_qubit_ket0_distribution(povm):
    p = zero_params(1)
    for t in (0.1, 0.9):
        np.testing.assert_allclose(full_distribution(p, t, povm), P0, atol=1e-5)
        np.testing.assert_allclose([likelihood(p, t, [m], povm) for m in range(4)], P0, atol=1e-5)


def test_single_qubit_plus_distribution(povm):
    dist = full_distribution(zero_params(1, np.pi / 4), 0.5, povm)
    plus = np.array([1, 1]) / np.sqrt(2)
    dense = [np.real(plus @ e @ plus) for e in povm.elements]
    np.testing.assert_allclose(dist, 0.25 * (1 + povm.bloch[:, 0]), atol=1e-14)
    np.testing.assert_allclose(dist, dense, atol=1e-14)
    np.testing.assert_allclose(dist, [0.375, 0.125, 0.125, 0.375], atol=1e-14)


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_normalization(n, povm, rng):
    for _ in range(5):
        p = random_params(rng, n)
        dist = full_distribution(p, rng.uniform(0, 1), povm)
        assert abs(dist.sum() - 1) <= 1e-10
        assert np.all(dist >= 0)


@pytest.mark.parametrize("n", [2, 3])
def test_rank1_likelihood_equals_dense_trace(n, povm, rng):
    p = random_params(rng, n)
    t = 0.37
    psi = evolved_states(p, [t])[0]
    dist = full_distribution(p, t, povm)
    for m in itertools.product(range(4), repeat=n):
        dense = np.real(np.vdot(psi, joint_element(povm, m) @ psi))
        assert abs(likelihood(p, t, m, povm) - dense) <= 1e-12
        assert abs(dist[encode_base4(np.array(m))] - dense) <= 1e-12


def test_zero_hamiltonian_time_invariance(povm, rng):
    p = random_params(rng, 3)
    p = ModelParams(WeightMatrix.zeros(3), p.thetas, p.phis)
    d1, d2 = full_distribution(p, 0.05, povm), full_distribution(p, 0.95, povm)
    assert np.max(np.abs(d1 - d2)) <= 1e-14


def test_enumeration_guard(povm):
    with pytest.raises(ValueError):
        full_distribution(zero_params(3), 0.1, povm, n_enum=2)


@pytest.mark.parametrize("n", [1, 2, 3])
def test_sampler_chi_square(n, povm):
    rng = np.random.default_rng(100 + n)
    p = random_params(rng, n)
    t = 0.8
    samples = sample_outcomes(p, t, 50000, povm, rng)
    counts = np.bincount(encode_base4(samples), minlength=4**n)
    expected = full_distribution(p, t, povm) * samples.shape[0]
    keep = expected >= 5
    obs = np.append(counts[keep], counts[~keep].sum())
    exp = np.append(expected[keep], expected[~keep].sum())
    if exp[-1] == 0:
        obs, exp = obs[:-1], exp[:-1]
    assert stats.chisquare(obs, exp * obs.sum() / exp.sum()).pvalue > 1e-3


def test_sampler_total_variation_n2(povm):
    rng = np.random.default_rng(7)
    p = random_params(rng, 2)
    samples = sample_outcomes(p, 0.5, 200_000, povm, rng)
    emp = np.bincount(encode_base4(samples), minlength=16) / 200_000
    assert 0.5 * np.abs(emp - full_distribution(p, 0.5, povm)).sum() < 0.015


def test_sampler_product_state_independence(povm):
    rng = np.random.default_rng(3)
    samples = sample_outcomes(zero_params(2), 0.3, 100_000, povm, rng)
    for j in range(2):
        freq = np.bincount(samples[:, j], minlength=4) / samples.shape[0]
        np.testing.assert_allclose(freq, P0, atol=0.006)
    joint = np.bincount(encode_base4(samples), minlength=16).reshape(4, 4) / samples.shape[0]
    np.testing.assert_allclose(joint, np.outer(P0, P0), atol=0.006)


def test_sampler_determinism(povm, rng):
    p = random_params(rng, 3)
    a = sample_outcomes(p, 0.4, 500, povm, np.random.default_rng(9))
    b = sample_outcomes(p, 0.4, 500, povm, np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)


def test_sampler_degenerate_state(povm):
    with pytest.raises(SamplingDegeneracy):
        sample_from_state(np.zeros(4, dtype=complex), 3, povm, np.random.default_rng(0))
    with pytest.raises(ValueError):
        sample_from_state(np.array([1, 0], dtype=complex), 0, povm, np.random.default_rng(0))


def test_generate_synthetic_shapes_and_determinism(povm):
    cfg = SynthConfig(n=3, n_times=4, n_cells=25, seed=11)
    ds1, truth1 = generate_synthetic(cfg, povm)
    ds2, truth2 = generate_synthetic(cfg, povm)
    assert ds1.outcomes.shape == (4, 25, 3)
    np.testing.assert_array_equal(ds1.outcomes, ds2.outcomes)
    np.testing.assert_array_equal(truth1.weights.w, truth2.weights.w)
    assert np.all(ds1.times > 0) and np.all(ds1.times <= 1) and np.all(np.diff(ds1.times) >= 0)
    assert np.all(np.diag(truth1.weights.w) == 0)
    single, _ = generate_synthetic(SynthConfig(n=2, n_times=1, n_cells=1), povm)
    assert single.outcomes.shape == (1, 1, 2)


def test_synthetic_reference_shape_config():
    cfg = SynthConfig(n=12, n_times=65, n_cells=6000)
    assert (cfg.n_times, cfg.n_cells, cfg.n) == (65, 6000, 12)


def test_dataset_invariants():
    with pytest.raises(ValueError):
        Dataset([0.1], np.full((1, 2, 2), 4))
    with pytest.raises(ValueError):
        Dataset([0.0], np.zeros((1, 2, 2)))
    with pytest.raises(ValueError):
        Dataset([0.5, 0.2], np.zeros((2, 2, 2)))
    ds = Dataset([0.2, 0.2], np.zeros((2, 3, 2)))
    assert (ds.n, ds.n_times, ds.n_cells) == (2, 2, 3)


def test_params_roundtrip(rng):
    p = random_params(rng, 3)
    q = ModelParams.from_dict(p.to_dict())
    np.testing.assert_array_equal(q.weights.w, p.weights.w)
    np.testing.assert_array_equal(q.thetas, p.thetas)
    with pytest.raises(ValueError):
        ModelParams.from_dict({"n": 1, "w_max": 1, "weights": [[0]]})


@given(st.lists(st.integers(0, 3), min_size=1, max_size=12))
def test_code_roundtrip(m):
    m = np.array(m)
    np.testing.assert_array_equal(decode_base4(encode_base4(m), m.size), m)
