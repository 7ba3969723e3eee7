from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from spinchain_rl.dynamics import ContractError, hamiltonian_fidelity
from spinchain_rl.noise import (
    NoiseConfig,
    coarse_grain_fidelity,
    direction_dimension,
    direction_to_matrix,
    perturbed_hamiltonian,
    sample_sphere_direction,
    sample_structured_perturbation,
)


def _is_sym_tridiagonal(P):
    return np.array_equal(P, P.T) and not np.any(np.triu(P, 2)) and not np.any(np.tril(P, -2))


class TestStructuredPerturbation:
    def test_zero_sigma(self, rng):
        np.testing.assert_array_equal(sample_structured_perturbation(4, 0.0, rng), np.zeros((4, 4)))

    def test_negative_sigma(self, rng):
        with pytest.raises(ContractError):
            sample_structured_perturbation(4, -0.1, rng)

    def test_moments(self):
        rng = np.random.default_rng(0)
        draws = np.stack([sample_structured_perturbation(4, 0.05, rng) for _ in range(100_000)])
        free = np.concatenate([draws[:, range(4), range(4)], draws[:, range(3), range(1, 4)]],
                              axis=1)
        assert free.shape[1] == 7
        assert np.all(np.abs(free.mean(axis=0)) < 3 * 0.05 / np.sqrt(100_000))
        # sigma is a standard deviation
        np.testing.assert_allclose(free.std(axis=0), 0.05, rtol=0.02)

    @given(st.integers(2, 9), st.floats(0, 2), st.integers(0, 2**32 - 1))
    def test_symmetric_tridiagonal(self, n, sigma, seed):
        P = sample_structured_perturbation(n, sigma, np.random.default_rng(seed))
        assert _is_sym_tridiagonal(P)


class TestCoarseGrain:
    @pytest.mark.parametrize("m", [1, 7, 100])
    def test_degenerate(self, rng, m):
        assert coarse_grain_fidelity(1.0, m, rng) == 1.0
        assert coarse_grain_fidelity(0.0, m, rng) == 0.0

    def test_exact_readout(self, rng):
        f = 0.123456789123
        assert coarse_grain_fidelity(f, 0, rng) == f

    def test_moments_half(self):
        rng = np.random.default_rng(1)
        x = np.array([coarse_grain_fidelity(0.5, 100, rng) for _ in range(10_000)])
        assert abs(x.mean() - 0.5) <= 3 * 0.05 / 100
        assert x.std() == pytest.approx(0.05, rel=0.05)

    @given(st.floats(0, 1), st.integers(1, 500), st.integers(0, 2**32 - 1))
    def test_on_grid(self, f, m, seed):
        r = coarse_grain_fidelity(f, m, np.random.default_rng(seed))
        assert 0 <= r <= 1
        assert r * m == pytest.approx(round(r * m), abs=1e-9)

    def test_rejects_out_of_range(self, rng):
        with pytest.raises(ContractError):
            coarse_grain_fidelity(1.2, 10, rng)


class TestSphere:
    def test_dimension(self):
        assert direction_dimension(5) == 9

    def test_unit_norm_and_mean(self):
        rng = np.random.default_rng(2)
        D = np.stack([sample_sphere_direction(5, rng) for _ in range(100_000)])
        np.testing.assert_allclose(np.linalg.norm(D, axis=1), 1.0, atol=1e-12)
        assert np.all(np.abs(D.mean(axis=0)) < 3 / np.sqrt(100_000))

    def test_perturbed_hamiltonian(self, rng):
        H = np.diag([1.0, 2.0, 3.0]) + np.diag([1.0, 1.0], 1) + np.diag([1.0, 1.0], -1)
        d = sample_sphere_direction(3, rng)
        np.testing.assert_array_equal(perturbed_hamiltonian(H, d, 0.0), H)
        np.testing.assert_array_equal(perturbed_hamiltonian(np.zeros((3, 3)), d, 1.0),
                                      direction_to_matrix(d, 3))
        a = hamiltonian_fidelity(perturbed_hamiltonian(H, d, 0.07), 2.0, 0, 2)
        b = hamiltonian_fidelity(perturbed_hamiltonian(H, -d, -0.07), 2.0, 0, 2)
        assert a == b

    def test_direction_shape_checked(self):
        with pytest.raises(ContractError):
            direction_to_matrix(np.ones(4), 3)


def test_noise_config():
    assert NoiseConfig().noiseless
    assert not NoiseConfig(0.05, 0).noiseless
    with pytest.raises(ContractError):
        NoiseConfig(shots=-1)
