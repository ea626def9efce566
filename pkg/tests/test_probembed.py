import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from probtal import numcore as nc
from probtal import probembed as pe
from probtal.features import TextBank


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def gseq(mu, scale):
    return pe.GaussianSequence(nc.tensor(mu, dtype=np.float64), nc.tensor(scale, dtype=np.float64))


class TestEstimate:
    def test_zero_sigma_weights_hit_floor(self):
        p = pe.init_prob_adapter(6, 4, np.random.default_rng(0))
        p["g_sigma.w"] = nc.tensor(np.zeros((6, 4)))
        p["g_sigma.b"] = nc.tensor(np.zeros(4))
        g = pe.estimate_gaussian(np.random.default_rng(1).normal(size=(5, 6)), p)
        assert g.mu.shape == g.scale.shape == (5, 4)
        np.testing.assert_allclose(g.scale.data, pe.EPS_SIGMA, rtol=1e-6)

    def test_scale_strictly_positive(self):
        rng = np.random.default_rng(2)
        p = pe.init_prob_adapter(8, 4, rng, sigma_bias=0.0)
        g = pe.estimate_gaussian(rng.normal(size=(1000, 8)) * 5, p)
        assert np.all(g.scale.data >= np.float32(pe.EPS_SIGMA))

    def test_var_is_square_of_scale(self):
        g = gseq([[0.0, 0.0]], [[2.0, 0.5]])
        np.testing.assert_allclose(g.var.data, [[4.0, 0.25]])


class TestSampling:
    def test_degenerate_scale(self):
        mu = np.random.default_rng(3).normal(size=(3, 4))
        z = pe.sample_embeddings(gseq(mu, np.zeros((3, 4))), 7, np.random.default_rng(0))
        assert z.shape == (3, 7, 4)
        np.testing.assert_array_equal(z.data, np.repeat(mu[:, None], 7, axis=1))

    def test_mean_and_variance_oracle(self):
        mu = np.array([[0.5, -1.0, 2.0]])
        scale = np.array([[1.0, 1.0, 1.0]])
        z = pe.sample_embeddings(gseq(mu, scale), 100_000, np.random.default_rng(4)).data[0]
        np.testing.assert_array_less(np.abs(z.mean(0) - mu[0]), 0.02)
        np.testing.assert_allclose(z.var(0), scale[0] ** 2, rtol=0.03)

    def test_nonunit_scale_variance(self):
        scale = np.array([[0.3, 2.0]])
        z = pe.sample_embeddings(gseq(np.zeros((1, 2)), scale), 100_000, np.random.default_rng(5)).data[0]
        np.testing.assert_allclose(z.var(0), scale[0] ** 2, rtol=0.03)

    def test_K_must_be_positive(self):
        with pytest.raises(ValueError):
            pe.sample_embeddings(gseq(np.zeros((1, 2)), np.ones((1, 2))), 0, np.random.default_rng(0))

    def test_gradient_flows_through_draws(self):
        mu = nc.tensor([[1.0, 2.0]], requires_grad=True, dtype=np.float64)
        sc = nc.tensor([[0.5, 0.5]], requires_grad=True, dtype=np.float64)
        rng = np.random.default_rng(6)
        z = pe.sample_embeddings(pe.GaussianSequence(mu, sc), 3, rng)
        gmu, gsc = nc.grad(nc.tsum(z), [mu, sc])
        eps = np.random.default_rng(6).standard_normal((1, 3, 2))
        np.testing.assert_allclose(gmu, [[3.0, 3.0]])
        np.testing.assert_allclose(gsc, eps.sum(axis=1))


class TestPcas:
    def test_identical_vectors(self):
        x = unit([[1.0, 2.0, 2.0]])
        bank = np.concatenate([x, unit([[0.0, 1.0, 0.0]])])
        with nc.precision(np.float64):
            s = pe.probabilistic_cas(gseq(x, np.zeros((1, 3))), bank, 5, np.random.default_rng(0), tau=1.0)
        assert s.data[0, 0] == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("K", [1, 3, 20, 100])
    def test_degenerate_scale_equals_cosine(self, K):
        rng = np.random.default_rng(K)
        mu, bank = rng.normal(size=(6, 5)), rng.normal(size=(4, 5))
        s = pe.probabilistic_cas(gseq(mu, np.full((6, 5), 1e-12)), bank, K, rng).data
        ref = unit(mu) @ unit(bank).T / pe.TAU
        np.testing.assert_allclose(s, ref, atol=1e-5)

    def test_K_zero_is_deterministic(self):
        rng = np.random.default_rng(7)
        mu, bank = rng.normal(size=(3, 4)), rng.normal(size=(2, 4))
        with nc.precision(np.float64):
            s = pe.probabilistic_cas(gseq(mu, np.ones((3, 4))), bank, 0, None).data
        np.testing.assert_allclose(s, unit(mu) @ unit(bank).T / pe.TAU, rtol=1e-12)

    def test_bounded_by_inverse_tau(self):
        rng = np.random.default_rng(8)
        s = pe.probabilistic_cas(gseq(rng.normal(size=(10, 4)), np.ones((10, 4)) * 3),
                                 rng.normal(size=(3, 4)), 20, rng).data
        assert np.all(np.abs(s) <= 1 / pe.TAU + 1e-9)

    @given(st.floats(0.01, 100), st.floats(0.01, 100), st.integers(0, 1000))
    @settings(max_examples=30, deadline=None)
    def test_scale_invariance(self, a, b, seed):
        rng = np.random.default_rng(seed)
        z, bank = rng.normal(size=(3, 4, 5)), rng.normal(size=(2, 5))
        base = pe.pcas(nc.tensor(z, dtype=np.float64), nc.tensor(bank, dtype=np.float64)).data
        bank2 = bank.copy()
        bank2[1] *= b
        z2 = z.copy()
        z2[1, 2] *= a
        moved = pe.pcas(nc.tensor(z2, dtype=np.float64), nc.tensor(bank2, dtype=np.float64)).data
        np.testing.assert_allclose(moved, base, rtol=1e-9, atol=1e-9)

    def test_bad_tau(self):
        with pytest.raises(ValueError):
            pe.pcas(np.ones((1, 1, 2)), np.ones((1, 2)), tau=0.0)

    def test_mc_self_consistency(self):
        """K=1e4 estimate sits within 3 standard errors of a K=1e6 reference."""
        mu, scale = np.array([[0.6, -0.2, 0.4, 0.1]]), np.full((1, 4), 0.5)
        bank = unit(np.array([[1.0, 0.0, 1.0, 0.0]]))
        g = gseq(mu, scale)
        small = pe.sample_embeddings(g, 10_000, np.random.default_rng(10)).data[0]
        big = pe.sample_embeddings(g, 1_000_000, np.random.default_rng(11)).data[0]
        cs = unit(small) @ bank[0] / pe.TAU
        cb = unit(big) @ bank[0] / pe.TAU
        se = np.sqrt(cs.var() / len(cs) + cb.var() / len(cb))
        assert abs(cs.mean() - cb.mean()) < 3 * se

    def test_log_variance_slope(self):
        rng = np.random.default_rng(12)
        g = gseq(np.array([[0.3, -0.5, 0.8]]), np.full((1, 3), 0.7))
        bank = unit(np.array([[1.0, 1.0, 0.0]]))
        Ks = [8, 32, 128, 512]
        variances = []
        for K in Ks:
            vals = [pe.probabilistic_cas(g, bank, K, rng).data[0, 0] for _ in range(400)]
            variances.append(np.var(vals))
        slope = np.polyfit(np.log(Ks), np.log(variances), 1)[0]
        assert -1.2 <= slope <= -0.8


class TestBankLosses:
    def test_ortho_orthonormal(self):
        assert pe.loss_ortho(np.eye(3)).item() == pytest.approx(0.0, abs=1e-12)

    def test_ortho_identical_rows(self):
        assert pe.loss_ortho(np.array([[1.0, 0.0], [1.0, 0.0]])).item() == pytest.approx(2.0)

    def test_ortho_gradcheck_background_row(self):
        rng = np.random.default_rng(13)
        rows = unit(rng.normal(size=(3, 5)))
        bg = nc.tensor(rng.normal(size=5))
        err = nc.grad_check(lambda b: pe.loss_ortho(pe.bank_tensor_from_rows(rows, b)), bg)
        assert err < 1e-3

    def test_bank_tensor_freezes_class_rows(self):
        bank = TextBank(unit(np.random.default_rng(14).normal(size=(3, 4))).astype(np.float32), ["a", "b"])
        bg = nc.tensor(np.ones(4), requires_grad=True)
        t = pe.bank_tensor(bank, bg)
        g = nc.backward(pe.loss_ortho(t))
        assert set(g) == {bg}
        np.testing.assert_array_equal(t.data[:2], bank.embeddings[:2])


class TestKd:
    def test_aligned(self):
        x = np.random.default_rng(15).normal(size=(6, 4))
        with nc.precision(np.float64):
            v = pe.loss_kd(x * 3.0, x).item()
        assert v == pytest.approx(-np.log(1 + pe.EPS_LOG), abs=1e-9)

    def test_orthogonal(self):
        mu = np.array([[1.0, 0.0], [0.0, 2.0]])
        x = np.array([[0.0, 1.0], [3.0, 0.0]])
        with nc.precision(np.float64):
            assert pe.loss_kd(mu, x).item() == pytest.approx(-np.log(0.5 + pe.EPS_LOG), rel=1e-12)

    def test_anti_aligned_is_clamped(self):
        x = np.random.default_rng(16).normal(size=(4, 3))
        with nc.precision(np.float64):
            v = pe.loss_kd(-x, x).item()
        assert np.isfinite(v) and 10 < v <= -np.log(pe.EPS_LOG) + 1e-6

    def test_decreases_along_geodesic(self):
        rng = np.random.default_rng(17)
        x = unit(rng.normal(size=(1, 5)))[0]
        start = unit(rng.normal(size=5) - 2 * x)
        omega = np.arccos(np.clip(start @ x, -1, 1))
        vals = []
        for t in np.linspace(0, 1, 10):
            mu = (np.sin((1 - t) * omega) * start + np.sin(t * omega) * x) / np.sin(omega)
            with nc.precision(np.float64):
                vals.append(pe.loss_kd(mu[None], x[None]).item())
        assert np.all(np.diff(vals) < 0)

    def test_gradcheck(self):
        rng = np.random.default_rng(18)
        mu, x = nc.tensor(rng.normal(size=(8, 8))), rng.normal(size=(8, 8))
        assert nc.grad_check(lambda m: pe.loss_kd(m, x), mu) < 1e-3
