import numpy as np
import pytest

from timealloc import kernels


def random_weights(rng, positive=True):
    if positive:
        return np.exp(rng.normal(scale=1.0, size=4))
    return rng.normal(scale=1.0, size=4)


class TestGridMax:
    @pytest.mark.parametrize("n_parts", [4, 5, 8, 17, 60])
    def test_dp_equals_enumeration(self, n_parts):
        rng = np.random.default_rng(n_parts)
        for positive in (True, False):
            for _ in range(5):
                w = random_weights(rng, positive)
                dp = kernels.simplex_grid_max(w, n_parts, 1440.0)
                enum = kernels.simplex_grid_max_enumerate(w, n_parts, 1440.0)
                assert dp == pytest.approx(enum, rel=1e-12, abs=1e-12)

    def test_argmax_value_is_attained(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            w = random_weights(rng)
            best, parts = kernels.simplex_grid_argmax(w, 300, 1440.0)
            assert parts.sum() == 300
            assert np.all(parts >= 1)
            lt = np.log(1440.0 * parts / 300)
            assert best == pytest.approx(float(w @ lt), rel=1e-12)

    def test_argmax_matches_max(self):
        rng = np.random.default_rng(9)
        for _ in range(5):
            w = random_weights(rng)
            best, _ = kernels.simplex_grid_argmax(w, 777, 1440.0)
            assert best == pytest.approx(
                kernels.simplex_grid_max(w, 777, 1440.0), rel=1e-14
            )

    def test_rejects_tiny_grid(self):
        with pytest.raises(ValueError):
            kernels.simplex_grid_max(np.ones(4), 3, 1440.0)


class TestBackendAgreement:
    """The numpy fallback and the dispatched backend agree bit-for-bit-ish."""

    def test_softmax_rows(self):
        rng = np.random.default_rng(2)
        Z = rng.normal(scale=5.0, size=(40, 4))
        np.testing.assert_allclose(
            kernels.softmax_rows(Z), kernels.softmax_rows_np(Z), atol=1e-14
        )

    def test_share_jacobian(self):
        rng = np.random.default_rng(3)
        P = kernels.softmax_rows_np(rng.normal(size=(15, 4)))
        X = np.column_stack([np.ones(15), rng.normal(size=(15, 10))])
        np.testing.assert_allclose(
            kernels.share_jacobian(P, X), kernels.share_jacobian_np(P, X), atol=1e-14
        )

    def test_grid_kernels(self):
        rng = np.random.default_rng(4)
        for _ in range(5):
            w = random_weights(rng)
            assert kernels.simplex_grid_max(w, 250, 1440.0) == pytest.approx(
                kernels.simplex_grid_max_np(w, 250, 1440.0), rel=1e-14
            )
            b1, p1 = kernels.simplex_grid_argmax(w, 250, 1440.0)
            b2, p2 = kernels.simplex_grid_argmax_np(w, 250, 1440.0)
            assert b1 == pytest.approx(b2, rel=1e-14)
            np.testing.assert_array_equal(p1, p2)

    def test_backend_name(self):
        assert kernels.backend() in ("numba", "numpy")


class TestSoftmaxProperties:
    def test_floor_keeps_positivity(self):
        Z = np.array([[800.0, 0.0, 0.0, 0.0]])
        P = kernels.softmax_rows(Z)
        assert np.all(P > 0)
        assert abs(P.sum() - 1.0) < 1e-12

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(6)
        P = kernels.softmax_rows(rng.normal(scale=100.0, size=(30, 4)))
        np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-12)
