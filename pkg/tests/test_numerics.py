"""Tests for seeded streams and the small linear-algebra helpers."""

from __future__ import annotations

import numpy as np
import pytest

from eavesdrop.errors import InvalidArgumentError, SingularMatrixError
from eavesdrop.numerics import (
    Rng,
    finite_diff_gradient,
    hermitian,
    relative_error,
    sample_complex_gaussian,
    solve_least_squares,
    stack_complex,
    unstack_complex,
)

# ── Rng ──────────────────────────────────────────────────────────────────────


class TestRng:
    def test_same_seed_same_stream(self):
        a = Rng(42).generator.standard_normal(8)
        b = Rng(42).generator.standard_normal(8)
        assert np.array_equal(a, b)

    def test_child_independent_of_derivation_order(self):
        """A child stream depends only on seed and key path."""
        root = Rng(9)
        first = root.child("trial", 3).generator.standard_normal(4)
        root.child("trial", 1).generator.standard_normal(100)
        again = Rng(9).child("trial", 3).generator.standard_normal(4)
        assert np.array_equal(first, again)

    def test_children_differ(self):
        a = Rng(1).child("channel", 0).generator.standard_normal(4)
        b = Rng(1).child("channel", 1).generator.standard_normal(4)
        assert not np.array_equal(a, b)

    def test_float_keys_distinguish_snr(self):
        a = Rng(1).child(5.0).generator.standard_normal(4)
        b = Rng(1).child(10.0).generator.standard_normal(4)
        assert not np.array_equal(a, b)

    def test_fingerprint_stable_and_63_bit(self):
        fp = Rng(3).child("x").fingerprint()
        assert fp == Rng(3).child("x").fingerprint()
        assert 0 <= fp < (1 << 63)
        assert fp != Rng(3).child("y").fingerprint()

    @pytest.mark.parametrize("seed", [-1, 1 << 64])
    def test_seed_out_of_range(self, seed: int):
        with pytest.raises(InvalidArgumentError):
            Rng(seed)


# ── Complex Gaussian ─────────────────────────────────────────────────────────


class TestComplexGaussian:
    def test_variance_matches(self):
        h = sample_complex_gaussian(Rng(0), 200, 200, 2.0)
        assert h.shape == (200, 200)
        assert np.mean(np.abs(h) ** 2) == pytest.approx(2.0, rel=0.05)

    def test_zero_variance_rejected(self):
        with pytest.raises(InvalidArgumentError):
            sample_complex_gaussian(Rng(0), 2, 2, 0.0)


# ── Least squares ────────────────────────────────────────────────────────────


class TestLeastSquares:
    def test_exact_for_consistent_system(self):
        a = sample_complex_gaussian(Rng(1), 4, 2, 1.0)
        x = sample_complex_gaussian(Rng(2), 2, 3, 1.0)
        assert np.allclose(solve_least_squares(a, a @ x), x, atol=1e-12)

    def test_residual_orthogonal_to_columns(self):
        a = sample_complex_gaussian(Rng(3), 6, 2, 1.0)
        b = sample_complex_gaussian(Rng(4), 6, 1, 1.0)
        x = solve_least_squares(a, b)
        assert np.allclose(hermitian(a) @ (b - a @ x), 0.0, atol=1e-10)

    def test_rank_deficient_raises(self):
        col = sample_complex_gaussian(Rng(5), 3, 1, 1.0)
        with pytest.raises(SingularMatrixError):
            solve_least_squares(np.hstack([col, 2.0 * col]), col)

    def test_wide_matrix_rejected(self):
        with pytest.raises(InvalidArgumentError):
            solve_least_squares(np.ones((2, 3)), np.ones(2))

    def test_rhs_row_mismatch(self):
        with pytest.raises(InvalidArgumentError, match="rows"):
            solve_least_squares(np.eye(3), np.ones(2))


# ── Finite differences and helpers ───────────────────────────────────────────


class TestHelpers:
    def test_finite_diff_quadratic(self):
        x = np.array([[1.0, -2.0], [0.5, 3.0]])
        grad = finite_diff_gradient(lambda v: float(np.sum(v**2)), x)
        assert np.allclose(grad, 2.0 * x, atol=1e-8)

    def test_finite_diff_rejects_bad_step(self):
        with pytest.raises(InvalidArgumentError):
            finite_diff_gradient(lambda v: 0.0, np.zeros(2), h=0.0)

    def test_stack_unstack(self):
        z = np.array([[1 + 2j, -3j], [0.5, 4 - 1j]])
        stacked = stack_complex(z)
        assert stacked.shape == (2, 2, 2)
        assert stacked.dtype == np.float64
        assert np.array_equal(unstack_complex(stacked), z)

    def test_relative_error(self):
        assert relative_error(np.ones(4), np.ones(4)) == 0.0
        assert relative_error(np.zeros(4), np.zeros(4)) == 0.0
        assert relative_error(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == pytest.approx(
            np.sqrt(2.0)
        )
