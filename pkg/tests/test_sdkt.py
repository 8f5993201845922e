"""Gram matrix, transfer loss, analytic gradient, and MMD-equivalence tests."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pwseg.errors import ShapeError
from pwseg.sdkt import gram, mmd_poly2, sdkt_grad, sdkt_loss


def finite_difference_grad(x, teachers, h=1e-3):
    """Central differences of the loss, element by element (float64)."""
    fd = np.zeros_like(x, dtype=np.float64)
    for i in range(x.size):
        xp = x.copy()
        xp.flat[i] += h
        xm = x.copy()
        xm.flat[i] -= h
        fd.flat[i] = (sdkt_loss(xp, teachers) - sdkt_loss(xm, teachers)) / (2 * h)
    return fd


class TestGram:
    def test_orthonormal_rows(self):
        x = np.array([[1.0, 0.0], [0.0, 1.0]])
        np.testing.assert_allclose(gram(x), 0.25 * np.eye(2))

    def test_zeros(self):
        np.testing.assert_array_equal(gram(np.zeros((3, 2, 2, 2))), np.zeros((3, 3)))

    def test_symmetry_psd_trace(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((6, 4, 3, 5))
        g = gram(x)
        np.testing.assert_array_equal(g, g.T)
        eigs = np.linalg.eigvalsh(g)
        assert eigs.min() >= -1e-6 * np.trace(g)
        vol = 4 * 3 * 5
        np.testing.assert_allclose(np.trace(g), (x**2).sum() / (6 * vol), rtol=1e-10)

    def test_spatial_permutation_invariance(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((4, 30))
        perm = rng.permutation(30)
        np.testing.assert_array_equal(gram(x), gram(x[:, perm]))

    def test_scaling_exact_power_of_two(self):
        """Power-of-two scales commute with the Gram exactly (no rounding)."""
        rng = np.random.default_rng(13)
        x = rng.standard_normal((5, 40))
        for a in (0.5, 2.0, 8.0):
            np.testing.assert_array_equal(gram(a * x), a * a * gram(x))

    @settings(max_examples=25, deadline=None)
    @given(st.floats(-4, 4), st.integers(1, 5), st.integers(1, 20))
    def test_scaling(self, a, c, n):
        rng = np.random.default_rng(c * 31 + n)
        x = rng.standard_normal((c, n))
        np.testing.assert_allclose(gram(a * x), a * a * gram(x), atol=1e-9)


class TestLoss:
    def test_matching_teacher_zero(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((4, 3, 3, 3))
        assert sdkt_loss(x, [(x.copy(), 1.0)]) == 0.0

    def test_identity_gap(self):
        """Zero teacher against a 0.25*I Gram gives ||0.25 I||_F^2 = 0.125."""
        x = np.array([[1.0, 0.0], [0.0, 1.0]])
        teacher = np.zeros_like(x)
        assert sdkt_loss(x, [(teacher, 1.0)]) == pytest.approx(0.125)

    def test_weight_linearity(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((5, 2, 2, 2))
        t1 = rng.standard_normal((5, 2, 2, 2))
        t2 = rng.standard_normal((5, 3, 3, 3))  # volumes may differ
        a, b = 0.7, 2.25
        want = a * sdkt_loss(x, [(t1, 1.0)]) + b * sdkt_loss(x, [(t2, 1.0)])
        assert sdkt_loss(x, [(t1, a), (t2, b)]) == pytest.approx(want, rel=1e-12)

    def test_nonnegative(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((3, 10))
        t = rng.standard_normal((3, 10))
        assert sdkt_loss(x, [(t, 0.5)]) >= 0.0

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            sdkt_loss(np.zeros((3, 8)), [(np.zeros((4, 8)), 1.0)])


class TestGrad:
    def test_zero_features_zero_grad(self):
        teacher = np.random.default_rng(5).standard_normal((3, 2, 2, 2))
        g = sdkt_grad(np.zeros((3, 2, 2, 2)), [(teacher, 1.0)])
        np.testing.assert_array_equal(g, np.zeros((3, 2, 2, 2)))

    def test_single_channel_closed_form(self):
        """C=1 reduces to scalar calculus: grad = 4w(|x|^2/n - g) x / n."""
        rng = np.random.default_rng(6)
        x = rng.standard_normal((1, 7))
        t = rng.standard_normal((1, 7))
        w = 1.4
        n = 7
        g_t = (t**2).sum() / n
        want = 4 * w * ((x**2).sum() / n - g_t) * x / n
        np.testing.assert_allclose(sdkt_grad(x, [(t, w)]), want, rtol=1e-10)

    def test_finite_difference_oracle(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((4, 3, 3, 3))
        teachers = [(rng.standard_normal((4, 3, 3, 3)), 0.8), (rng.standard_normal((4, 2, 2, 2)), 1.7)]
        analytic = sdkt_grad(x, teachers)
        fd = finite_difference_grad(x, teachers)
        rel = np.linalg.norm(analytic - fd) / np.linalg.norm(fd)
        assert rel < 1e-6

    def test_shape_preserved(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((6, 2, 3, 4))
        g = sdkt_grad(x, [(rng.standard_normal((6, 5, 5, 5)), 1.0)])
        assert g.shape == x.shape


class TestMmd:
    def test_identical_sets_zero(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((4, 12))
        assert mmd_poly2(x, x.copy()) == pytest.approx(0.0, abs=1e-12)

    def test_gram_equivalence(self):
        """C^2 ||GM(x) - GM(y)||_F^2 equals the biased poly-2 MMD^2."""
        rng = np.random.default_rng(10)
        for _ in range(10):
            c = int(rng.integers(1, 9))
            n = int(rng.integers(1, 30))
            x = rng.standard_normal((c, n))
            y = rng.standard_normal((c, n))
            lhs = c**2 * float(np.sum((gram(x) - gram(y)) ** 2))
            rhs = mmd_poly2(x, y)
            assert lhs == pytest.approx(rhs, rel=1e-6)

    def test_sign_invariance(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((3, 9))
        assert mmd_poly2(x, -x) == pytest.approx(0.0, abs=1e-10)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            mmd_poly2(np.zeros((2, 4)), np.zeros((3, 4)))
