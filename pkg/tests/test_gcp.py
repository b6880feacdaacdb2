import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gcpkge.gcp import (
    Batch,
    FactorModel,
    ShapeError,
    bernoulli_deriv,
    bernoulli_loss,
    full_loss,
    gcp_grad,
    get_family,
    model_gradient,
    predict_entry,
    scatter_gradients,
)
from gcpkge.memory import measure
from gcpkge.oracles import (
    dense_cp_als_residual_gradient,
    dense_cp_gradient,
    finite_difference_gradient,
    max_relative_error,
    random_instance,
)

# extended-precision references (mpmath, 50 digits)
LN2 = 0.69314718055994530942
LOSS_1_40 = 4.2483542552915889863e-18
SIGMOID_8 = 0.9996646498695335219


class TestPredictEntry:
    def test_direct_sum(self):
        assert predict_entry((1, 2), (3, 1), (2, 1)) == 8.0

    def test_zero_relation_annihilates(self, rng):
        a, c = rng.normal(size=5), rng.normal(size=5)
        assert predict_entry(a, np.zeros(5), c) == 0.0

    def test_basis_rows(self):
        e1 = np.array([1.0, 0.0, 0.0])
        assert predict_entry(e1, e1, e1) == 1.0

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            predict_entry((1, 2), (1, 2, 3), (1, 2))


class TestBernoulli:
    def test_loss_at_zero(self):
        assert bernoulli_loss(1, 0.0) == pytest.approx(LN2, rel=1e-15)
        assert bernoulli_loss(0, 0.0) == pytest.approx(LN2, rel=1e-15)

    def test_loss_of_well_fit_positive_keeps_precision(self):
        assert bernoulli_loss(1, 40.0) == pytest.approx(LOSS_1_40, rel=1e-12)

    def test_no_overflow_at_extremes(self):
        big = np.finfo(np.float64).max
        vals = bernoulli_loss(np.array([0, 1, 0, 1]), np.array([big, -big, -big, big]))
        assert np.all(np.isfinite(vals))
        np.testing.assert_allclose(vals[:2], big)
        assert vals[2] == 0.0 and vals[3] == 0.0

    def test_deriv_values(self):
        assert bernoulli_deriv(0, 0.0) == 0.5
        assert bernoulli_deriv(1, 0.0) == -0.5
        assert bernoulli_deriv(0, 8.0) == pytest.approx(SIGMOID_8, rel=1e-15)

    def test_deriv_matches_finite_difference(self, rng):
        x = rng.integers(0, 2, 10_000).astype(float)
        m = rng.uniform(-10, 10, 10_000)
        h = 1e-5
        fd = (bernoulli_loss(x, m + h) - bernoulli_loss(x, m - h)) / (2 * h)
        assert np.max(np.abs(fd - bernoulli_deriv(x, m))) < 1e-8

    @settings(max_examples=200, deadline=None)
    @given(st.sampled_from([0, 1]), st.floats(-1e300, 1e300, allow_nan=False))
    def test_nonnegative_and_bounded_derivative(self, x, m):
        assert bernoulli_loss(x, m) >= 0
        assert abs(bernoulli_deriv(x, m)) <= 1
        if abs(m) < 30:
            assert abs(bernoulli_deriv(x, m)) < 1

    def test_loss_vanishes_as_model_fits(self):
        assert bernoulli_loss(1, 50.0) < 1e-20
        assert bernoulli_loss(0, -50.0) < 1e-20
        assert bernoulli_loss(1, 50.0) < bernoulli_loss(1, 10.0) < bernoulli_loss(1, 1.0)


class TestGaussian:
    def test_loss_and_derivative(self):
        fam = get_family("gaussian")
        assert fam.loss(1.0, 3.0) == 4.0
        assert fam.deriv(1.0, 3.0) == 4.0

    def test_unknown_family(self):
        with pytest.raises(ValueError):
            get_family("poisson")


class TestGcpGrad:
    def test_single_entry_example(self):
        b = Batch(np.array([0]), np.array([0]), np.array([1]), np.array([0]))
        g = gcp_grad(b, np.array([[1.0, 2.0]]), np.array([[3.0, 1.0]]), np.array([[2.0, 1.0]]))
        np.testing.assert_allclose(g.g_a[0], SIGMOID_8 * np.array([6.0, 1.0]), rtol=1e-14)
        np.testing.assert_allclose(g.g_b[0], SIGMOID_8 * np.array([2.0, 2.0]), rtol=1e-14)
        np.testing.assert_allclose(g.g_c[0], SIGMOID_8 * np.array([3.0, 2.0]), rtol=1e-14)
        assert g.loss == pytest.approx(8 + math.log1p(math.exp(-8)), rel=1e-14)

    def test_perfect_fit_gives_zero_rows(self):
        # Gaussian with m == x has y == 0 exactly
        b = Batch(np.array([0]), np.array([0]), np.array([0]), np.array([8.0]))
        g = gcp_grad(b, np.array([[1.0, 2.0]]), np.array([[3.0, 1.0]]), np.array([[2.0, 1.0]]),
                     "gaussian")
        assert not g.g_a.any() and not g.g_b.any() and not g.g_c.any()

    def test_shape_mismatch(self):
        b = Batch(np.zeros(2, int), np.zeros(2, int), np.zeros(2, int), np.zeros(2))
        with pytest.raises(ShapeError):
            gcp_grad(b, np.ones((2, 3)), np.ones((2, 4)), np.ones((2, 3)))
        with pytest.raises(ShapeError):
            gcp_grad(b, np.ones((3, 3)), np.ones((3, 3)), np.ones((3, 3)))
        with pytest.raises(ShapeError):
            Batch(np.zeros(2, int), np.zeros(3, int), np.zeros(2, int), np.zeros(2))

    def test_matches_finite_differences_20x5x20(self):
        inst = random_instance(20, 5, 8, density=200 / 2000, rng=7)
        GA, GB, _ = model_gradient(inst.model, inst.omega, batch_size=32)
        FA, FB = finite_difference_gradient(inst.model, inst.omega)
        assert max_relative_error(GA, FA) < 1e-4
        assert max_relative_error(GB, FB) < 1e-4

    def test_no_pseudo_inverse(self):
        # the pseudo-inverse variant of the update formula is not the gradient
        inst = random_instance(6, 2, 3, density=0.5, rng=3)
        A, B = inst.model.A, inst.model.B
        M = np.einsum("ir,jr,kr->ijk", A, B, A)
        Y = inst.W * bernoulli_deriv(inst.X, M)
        kr = (B[:, None, :] * A[None, :, :]).reshape(-1, 3)
        pinv_variant = Y.reshape(6, -1) @ np.linalg.pinv(kr.T)
        FA, _ = finite_difference_gradient(inst.model, inst.omega)
        assert max_relative_error(pinv_variant, FA) > 1e-2

    def test_shared_entity_matrix_accumulates_both_roles(self, rng):
        model = FactorModel(rng.normal(size=(5, 4)), rng.normal(size=(2, 4)))
        # entity 3 is the subject of entry 0 and the object of entry 1
        omega = Batch(np.array([3, 0, 1]), np.array([0, 1, 0]), np.array([2, 3, 4]),
                      np.array([1.0, 0.0, 1.0]))
        g = gcp_grad(omega, model.A[omega.inds_a], model.B[omega.inds_b], model.A[omega.inds_c])
        GA, GB = scatter_gradients(omega, g, 5, 2)
        np.testing.assert_allclose(GA[3], g.g_a[0] + g.g_c[1], rtol=1e-15)
        FA, FB = finite_difference_gradient(model, omega)
        assert max_relative_error(GA, FA) < 1e-6
        assert max_relative_error(GB, FB) < 1e-6

    @pytest.mark.parametrize("seed", range(5))
    def test_dense_mttkrp_agrees(self, seed):
        inst = random_instance(12, 4, 5, density=0.3, rng=seed)
        GA, GB, _ = model_gradient(inst.model, inst.omega, batch_size=17)
        DA, DB = dense_cp_gradient(inst.model, inst.X, inst.W)
        np.testing.assert_allclose(GA, DA, atol=1e-12)
        np.testing.assert_allclose(GB, DB, atol=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_gaussian_reduces_to_cp_als_residual(self, seed):
        inst = random_instance(10, 3, 4, density=0.4, rng=seed, family="gaussian")
        GA, GB, _ = model_gradient(inst.model, inst.omega, "gaussian", batch_size=50)
        DA, DB = dense_cp_als_residual_gradient(inst.model, inst.X, inst.W)
        assert max_relative_error(GA, DA, floor=1e-12) < 1e-10
        assert max_relative_error(GB, DB, floor=1e-12) < 1e-10

    def test_float32_rows_stay_float32(self, rng):
        b = Batch(np.zeros(4, int), np.zeros(4, int), np.zeros(4, int), np.ones(4))
        rows = rng.normal(size=(4, 3)).astype(np.float32)
        g = gcp_grad(b, rows, rows, rows)
        assert g.g_a.dtype == g.g_b.dtype == g.g_c.dtype == np.float32

    def test_transient_memory_scales_with_batch_not_vocabulary(self, rng):
        def run(L, R):
            b = Batch(np.zeros(L, int), np.zeros(L, int), np.zeros(L, int),
                      rng.integers(0, 2, L))
            rows = [rng.normal(size=(L, R)) for _ in range(3)]
            return measure(gcp_grad, b, *rows)[1]

        base = run(2000, 32)
        assert base < 12 * 2000 * 32 * 8
        assert run(4000, 32) / base == pytest.approx(2.0, rel=0.1)
        assert run(2000, 64) / base == pytest.approx(2.0, rel=0.1)


class TestFullLoss:
    def test_empty(self):
        model = FactorModel(np.ones((2, 2)), np.ones((1, 2)))
        empty = Batch(np.zeros(0, int), np.zeros(0, int), np.zeros(0, int), np.zeros(0))
        assert full_loss(model, empty) == 0.0

    def test_single_positive_at_zero(self):
        model = FactorModel(np.zeros((2, 2)), np.ones((1, 2)))
        one = Batch(np.array([0]), np.array([0]), np.array([1]), np.array([1]))
        assert full_loss(model, one) == pytest.approx(LN2, rel=1e-15)

    def test_partition_sum(self):
        inst = random_instance(15, 4, 6, density=0.2, rng=11)
        whole = full_loss(inst.model, inst.omega)
        parts = math.fsum(full_loss(inst.model, p) for p in inst.omega.split(7))
        assert parts == pytest.approx(whole, rel=1e-14)
        _, _, batched = model_gradient(inst.model, inst.omega, batch_size=40)
        assert batched == pytest.approx(whole, rel=1e-12)
