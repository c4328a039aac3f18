"""Loss terms, their identities, and the embedding-geometry metrics."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from embdyn import autodiff as ad
from embdyn import losses as L
from embdyn.autodiff import Tensor


def _unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _grad_wrt(fn, x):
    t = ad.leaf(x)
    ad.backward(fn(t))
    return t.grad


E = np.eye(3)


class TestLossWeights:
    def test_rejects_small_K(self):
        with pytest.raises(ValueError):
            L.LossWeights(K=1)

    def test_rejects_negative_or_non_finite(self):
        with pytest.raises(ValueError):
            L.LossWeights(lambda_s=-0.1)
        with pytest.raises(ValueError):
            L.LossWeights(lambda_b=np.inf)

    def test_multicrop_view_count(self):
        L.LossWeights(K=4, objective="multicrop", multicrop_V=2)
        with pytest.raises(ValueError):
            L.LossWeights(K=4, objective="multicrop", multicrop_V=1)

    def test_noise_rows_must_be_unit(self):
        with pytest.raises(ValueError):
            L.NoiseDraw(np.ones((2, 3)))


class TestByolLoss:
    def test_identity(self):
        p = _unit(np.random.default_rng(0).standard_normal((4, 3)))
        assert L.byol_loss(Tensor(p), p).item() == pytest.approx(0.0, abs=1e-15)

    def test_antipodal(self):
        p = _unit(np.random.default_rng(0).standard_normal((4, 3)))
        assert L.byol_loss(Tensor(p), -p).item() == pytest.approx(4.0, abs=1e-14)

    def test_orthogonal(self):
        assert L.byol_loss(Tensor(E[:1]), E[1:2]).item() == pytest.approx(2.0, abs=1e-15)

    def test_rejects_non_unit(self):
        with pytest.raises(ValueError, match="unit"):
            L.byol_loss(Tensor([[2.0, 0.0]]), [[1.0, 0.0]])

    def test_equals_two_minus_two_cosine(self):
        rng = np.random.default_rng(1)
        p, z = _unit(rng.standard_normal((8, 5))), _unit(rng.standard_normal((8, 5)))
        expected = np.mean(2.0 - 2.0 * np.sum(p * z, axis=1))
        assert L.byol_loss(Tensor(p), z).item() == pytest.approx(expected, abs=1e-14)


class TestCentroidLoss:
    def test_at_centroid_is_zero(self):
        z = _unit(np.random.default_rng(2).standard_normal((3, 2, 4)))
        c = np.broadcast_to(z.mean(axis=1, keepdims=True), z.shape)
        assert L.centroid_loss(Tensor(c), z).item() == pytest.approx(0.0, abs=1e-15)

    def test_hand_example(self):
        p = np.array([[E[0], E[0]]])
        z = np.array([[E[0], E[1]]])
        assert L.centroid_loss(Tensor(p), z).item() == pytest.approx(0.5, abs=1e-15)

    def test_needs_two_views(self):
        with pytest.raises(ValueError):
            L.centroid_loss(Tensor(np.ones((2, 1, 3))), np.ones((2, 1, 3)))

    @pytest.mark.parametrize("K", [2, 4, 8])
    def test_gradient_equals_pairwise(self, K):
        rng = np.random.default_rng(K)
        for n in (1, 3, 8):
            p, z = _unit(rng.standard_normal((n, K, 5))), _unit(rng.standard_normal((n, K, 5)))
            gc = _grad_wrt(lambda t: L.centroid_loss(t, z), p)
            gp = _grad_wrt(lambda t: L.pairwise_loss(t, z), p)
            np.testing.assert_allclose(gc, gp, rtol=0, atol=1e-10)

    def test_values_differ_by_target_variance(self):
        rng = np.random.default_rng(3)
        p, z = _unit(rng.standard_normal((4, 3, 5))), _unit(rng.standard_normal((4, 3, 5)))
        var = np.mean(np.sum((z - z.mean(axis=1, keepdims=True)) ** 2, axis=-1))
        diff = L.pairwise_loss(Tensor(p), z).item() - L.centroid_loss(Tensor(p), z).item()
        assert diff == pytest.approx(var, abs=1e-12)


class TestBrownianLoss:
    def test_orthogonal_noise(self):
        p = np.array([[E[0], E[1]]])
        noise = L.NoiseDraw(E[2:3])
        assert L.brownian_loss(Tensor(p), noise).item() == 0.0

    def test_aligned_noise(self):
        n_hat = _unit(np.random.default_rng(4).standard_normal((3, 4)))
        p = np.repeat(n_hat[:, None, :], 2, axis=1)
        assert L.brownian_loss(Tensor(p), L.NoiseDraw(n_hat)).item() == pytest.approx(1.0, abs=1e-15)

    def test_batch_mismatch(self):
        with pytest.raises(ValueError):
            L.brownian_loss(Tensor(np.ones((3, 2, 4))), L.NoiseDraw(_unit(np.ones((2, 4)))))

    def test_gradient_is_noise_over_nK(self):
        rng = np.random.default_rng(5)
        n, K, d = 6, 4, 3
        noise = L.draw_noise(n, d, rng)
        g = _grad_wrt(lambda t: L.brownian_loss(t, noise), _unit(rng.standard_normal((n, K, d))))
        # exact up to the rounding of 1/(nK)
        np.testing.assert_allclose(g, np.broadcast_to(noise.n_hat[:, None, :] / (n * K), (n, K, d)), rtol=1e-15, atol=0)

    def test_monte_carlo_mean(self):
        rng = np.random.default_rng(6)
        n, K, d, N = 4, 2, 8, 10_000
        p = Tensor(_unit(rng.standard_normal((n, K, d))))
        vals = [L.brownian_loss(p, L.draw_noise(n, d, rng)).item() for _ in range(N)]
        assert abs(np.mean(vals)) < 3.0 / np.sqrt(N * d)

    def test_noise_is_unit_and_isotropic(self):
        draw = L.draw_noise(20_000, 3, np.random.default_rng(7))
        np.testing.assert_allclose(np.linalg.norm(draw.n_hat, axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(draw.n_hat.mean(axis=0), 0.0, atol=0.02)


class TestCovariance:
    def test_identical_rows(self):
        np.testing.assert_array_equal(L.covariance(Tensor(np.ones((4, 3)))).data, np.zeros((3, 3)))

    def test_hand_example(self):
        np.testing.assert_array_equal(L.covariance(Tensor([[1.0, 0.0], [-1.0, 0.0]])).data, np.diag([2.0, 0.0]))

    def test_whitened(self):
        rng = np.random.default_rng(8)
        n, d = 10, 4
        x = rng.standard_normal((n, d))
        x -= x.mean(axis=0)
        q, _ = np.linalg.qr(x)
        np.testing.assert_allclose(L.covariance(Tensor(q * np.sqrt(n - 1))).data, np.eye(d), atol=1e-12)

    def test_matches_numpy(self):
        x = np.random.default_rng(9).standard_normal((7, 3))
        np.testing.assert_allclose(L.covariance(Tensor(x)).data, np.cov(x, rowvar=False), atol=1e-14)

    def test_needs_two_rows(self):
        with pytest.raises(ValueError):
            L.covariance(Tensor(np.ones((1, 3))))


class TestSingularValueLoss:
    def test_identity_covariance(self):
        n, d = 9, 3
        x = np.random.default_rng(10).standard_normal((n, d))
        x -= x.mean(axis=0)
        q, _ = np.linalg.qr(x)
        p = np.stack([q * np.sqrt(n - 1)] * 2, axis=1)
        assert L.singular_value_loss(Tensor(p)).item() == pytest.approx(0.0, abs=1e-20)

    def test_hand_example(self):
        p = np.array([[[1.0, 0.0]], [[-1.0, 0.0]]])
        assert L.singular_value_loss(Tensor(p)).item() == pytest.approx(2.0, abs=1e-15)

    def test_frobenius_equals_eigen_sum(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            d = int(rng.integers(1, 17))
            a = rng.standard_normal((d, d))
            s = a @ a.T
            fro = np.sum((s - np.eye(d)) ** 2)
            sigma = np.linalg.svd(s, compute_uv=False)
            assert abs(fro - np.sum((sigma - 1.0) ** 2)) < 1e-8

    def test_averages_over_views(self):
        rng = np.random.default_rng(12)
        p = rng.standard_normal((6, 3, 2))
        expected = np.mean([np.sum((np.cov(p[:, j], rowvar=False) - np.eye(2)) ** 2) for j in range(3)])
        assert L.singular_value_loss(Tensor(p)).item() == pytest.approx(expected, rel=1e-13)


class TestMulticropLoss:
    def test_all_equal(self):
        p = np.repeat(_unit(np.random.default_rng(13).standard_normal((3, 1, 4))), 4, axis=1)
        assert L.multicrop_byol_loss(Tensor(p), p).item() == pytest.approx(0.0, abs=1e-13)

    def test_orthogonal_views(self):
        p = E[None]
        assert L.multicrop_byol_loss(Tensor(p), p).item() == pytest.approx(12.0, abs=1e-14)

    def test_two_views_is_symmetric_byol_sum(self):
        rng = np.random.default_rng(14)
        p, z = _unit(rng.standard_normal((5, 2, 4))), _unit(rng.standard_normal((5, 2, 4)))
        sym = L.symmetric_byol_loss(Tensor(p), z).item()
        assert L.multicrop_byol_loss(Tensor(p), z).item() == pytest.approx(2.0 * sym, abs=1e-13)

    def test_needs_two_views(self):
        with pytest.raises(ValueError):
            L.multicrop_byol_loss(Tensor(np.ones((2, 1, 1))), np.ones((2, 1, 1)))


class TestCombinedLoss:
    def _inputs(self, seed=15, n=6, K=4, d=3):
        rng = np.random.default_rng(seed)
        p = rng.standard_normal((n, K, d))
        z = _unit(rng.standard_normal((n, K, d)))
        return p, z, L.draw_noise(n, d, rng)

    def test_no_regularizers_equals_centroid(self):
        p, z, noise = self._inputs()
        pt = Tensor(p)
        br = L.combined_loss(pt, ad.l2_normalize(pt), z, noise, L.LossWeights(K=4))
        assert br.total.item() == L.centroid_loss(ad.l2_normalize(pt), z).item()

    def test_breakdown_sums_to_total(self):
        p, z, noise = self._inputs()
        pt = Tensor(p)
        w = L.LossWeights(K=4, lambda_s=0.004, lambda_b=0.5)
        br = L.combined_loss(pt, ad.l2_normalize(pt), z, noise, w)
        assert br.total.item() == pytest.approx(br.L_c + 0.004 * br.L_s + 0.5 * br.L_b, abs=1e-12)
        assert sum(br.weighted.values()) == pytest.approx(br.total.item(), abs=1e-12)

    def test_noise_required_with_lambda_b(self):
        p, z, _ = self._inputs()
        pt = Tensor(p)
        with pytest.raises(ValueError):
            L.combined_loss(pt, ad.l2_normalize(pt), z, None, L.LossWeights(K=4, lambda_b=0.5))

    def test_batch_permutation_invariance(self):
        p, z, noise = self._inputs(n=7)
        perm = np.random.default_rng(16).permutation(7)
        w = L.LossWeights(K=4, lambda_s=0.004, lambda_b=0.5)

        def total(p, z, n_hat):
            pt = Tensor(p)
            return L.combined_loss(pt, ad.l2_normalize(pt), z, L.NoiseDraw(n_hat), w).total.item()

        a = total(p, z, noise.n_hat)
        b = total(p[perm], z[perm], noise.n_hat[perm])
        assert a == pytest.approx(b, abs=1e-12)

    def test_zero_weight_terms_do_not_reach_graph(self):
        p, z, noise = self._inputs()
        leaf = ad.leaf(p)
        w = L.LossWeights(K=4, lambda_c=0.0, lambda_s=0.0, lambda_b=0.5)
        br = L.combined_loss(leaf, ad.l2_normalize(leaf), z, noise, w)
        ad.backward(br.total)
        only_b = _grad_wrt(lambda t: L.brownian_loss(ad.l2_normalize(t), noise) * 0.5, p)
        assert br.L_c > 0 and br.L_s > 0
        np.testing.assert_array_equal(leaf.grad, only_b)


class TestGeometryMetrics:
    def test_identical_points(self):
        x = np.repeat(E[:1], 5, axis=0)
        assert L.uniformity_metric(x) == 0.0
        assert L.alignment_metric(np.stack([x, x], axis=1)) == 0.0

    def test_antipodal_uniformity(self):
        assert L.uniformity_metric(np.array([E[0], -E[0]]), t=2.0) == pytest.approx(-8.0, abs=1e-14)

    def test_uniformity_needs_two_points(self):
        with pytest.raises(ValueError):
            L.uniformity_metric(E[:1])

    def test_alignment_hand_example(self):
        pairs = np.array([[E[0], E[1]], [E[2], E[2]]])
        assert L.alignment_metric(pairs) == pytest.approx(1.0, abs=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 30), st.integers(2, 6), st.integers(0, 2**31))
    def test_uniformity_bounds(self, n, d, seed):
        x = _unit(np.random.default_rng(seed).standard_normal((n, d)))
        u = L.uniformity_metric(x)
        assert -8.0 - 1e-12 <= u <= 1e-12
