import numpy as np
import pytest
from scipy.stats import multivariate_normal

from vtlsv import ivector as iv
from vtlsv.errors import DataError
from vtlsv.gmm import DiagonalGmm


def ubm_two_far():
    return DiagonalGmm([0.5, 0.5], [[-50.0, 0.0], [50.0, 0.0]], [[1.0, 1.0], [1.0, 1.0]])


class TestStats:
    def test_single_component(self):
        ubm = DiagonalGmm([1.0], [[1.0, 2.0]], [[1.0, 1.0]])
        x = np.random.default_rng(0).normal(0, 1, (40, 2))
        st = iv.accumulate_stats(x, ubm)
        assert st.n[0] == pytest.approx(40.0, abs=1e-12)
        np.testing.assert_allclose(st.f[0], (x - [1.0, 2.0]).sum(0), atol=1e-10)

    def test_frames_at_component_mean(self):
        st = iv.accumulate_stats(np.tile([50.0, 0.0], (25, 1)), ubm_two_far())
        assert st.n[1] == pytest.approx(25.0) and st.n[0] < 1e-10
        np.testing.assert_allclose(st.f[1], 0.0, atol=1e-10)

    def test_occupancy_sum(self):
        ubm = DiagonalGmm([0.2, 0.3, 0.5], np.random.default_rng(1).normal(0, 1, (3, 4)), np.ones((3, 4)))
        st = iv.accumulate_stats(np.random.default_rng(2).normal(0, 2, (77, 4)), ubm)
        assert st.n_frames == pytest.approx(77.0, abs=1e-6)

    def test_empty(self):
        with pytest.raises(DataError):
            iv.accumulate_stats(np.zeros((0, 2)), ubm_two_far())


def random_tv(k, d, r, seed):
    rng = np.random.default_rng(seed)
    return iv.TotalVariabilityModel(np.zeros(k * d), rng.normal(0, 1, (k * d, r)),
                                    rng.uniform(0.5, 2.0, (k, d)))


class TestExtraction:
    def test_zero_stats(self):
        tv = random_tv(3, 2, 4, 0)
        w = iv.extract_ivector(iv.BaumWelchStats(np.zeros(3), np.zeros((3, 2))), tv)
        assert np.array_equal(w, np.zeros(4))

    def test_scalar_closed_form(self):
        t, s2, n, f = 0.7, 1.9, 13.0, 4.2
        tv = iv.TotalVariabilityModel(np.zeros(1), np.array([[t]]), np.array([[s2]]))
        w = iv.extract_ivector(iv.BaumWelchStats(np.array([n]), np.array([[f]])), tv)
        assert w[0] == pytest.approx(t * f / s2 / (1 + t * t * n / s2), rel=1e-14)

    @pytest.mark.parametrize("r", [1, 3, 8])
    def test_matches_dense_inverse(self, r):
        k, d = 4, 3
        tv = random_tv(k, d, r, r)
        rng = np.random.default_rng(10 + r)
        st = iv.BaumWelchStats(rng.uniform(0, 20, k), rng.normal(0, 5, (k, d)))
        sinv = np.diag(1.0 / tv.sigma.reshape(-1))
        nn = np.diag(np.repeat(st.n, d))
        t = tv.t_matrix
        dense = np.linalg.inv(np.eye(r) + t.T @ sinv @ nn @ t) @ t.T @ sinv @ st.f.reshape(-1)
        np.testing.assert_allclose(iv.extract_ivector(st, tv), dense, atol=1e-8)

    def test_non_finite(self):
        with pytest.raises(DataError):
            iv.extract_ivector(iv.BaumWelchStats(np.array([np.nan, 1, 1]), np.zeros((3, 2))),
                               random_tv(3, 2, 2, 0))


def generative_stats(k=3, d=2, r=6, n_utt=60, seed=0):
    """Stats of utterances whose supervector is m + T0 w, w ~ N(0, I)."""
    rng = np.random.default_rng(seed)
    ubm = DiagonalGmm(np.full(k, 1.0 / k), rng.normal(0, 3, (k, d)), np.full((k, d), 0.5))
    t0 = rng.normal(0, 1.0, (k * d, r))
    stats, supers = [], []
    for _ in range(n_utt):
        w = rng.standard_normal(r)
        offs = (t0 @ w).reshape(k, d)
        n = rng.uniform(20, 60, k)
        # first-order stats of n_k frames drawn around the shifted means
        f = n[:, None] * offs + np.sqrt(n[:, None] * 0.5) * rng.standard_normal((k, d))
        stats.append(iv.BaumWelchStats(n, f))
        supers.append(offs.reshape(-1))
    return ubm, stats, np.array(supers)


class TestTmatrix:
    def test_objective_monotone(self):
        ubm, stats, _ = generative_stats()
        tv = iv.train_tmatrix(stats, ubm, rank=4, iterations=8, seed=1)
        trace = tv.objective_trace
        assert len(trace) == 9
        for a, b in zip(trace, trace[1:]):
            assert b - a >= -1e-6 * abs(a)

    def test_reconstruction_improves(self):
        ubm, stats, supers = generative_stats()
        errs = []
        for iters in (1, 3, 10):
            tv = iv.train_tmatrix(stats, ubm, rank=6, iterations=iters, seed=2)
            rec = np.array([tv.t_matrix @ iv.extract_ivector(s, tv) for s in stats])
            errs.append(np.mean((rec - supers) ** 2))
        assert errs[0] > errs[1] > errs[2]

    def test_posterior_precision_spd(self):
        ubm, stats, _ = generative_stats()
        tv = iv.train_tmatrix(stats, ubm, rank=4, iterations=2, seed=0)
        tw = tv._whitened()
        tt = np.einsum("kdr,kds->krs", tw, tw)
        for st in stats[:5]:
            prec = iv._posterior(tw, tt, st, tv.sigma)[0]
            assert np.allclose(prec, prec.T) and np.linalg.eigvalsh(prec).min() >= 1.0 - 1e-9

    def test_rank_too_large(self):
        ubm, stats, _ = generative_stats()
        with pytest.raises(DataError):
            iv.train_tmatrix(stats, ubm, rank=7)

    def test_starved_mixture_ridge(self):
        ubm, stats, _ = generative_stats(n_utt=10)
        for st in stats:
            st.n[0] = 0.0
            st.f[0] = 0.0
        with pytest.warns(RuntimeWarning, match="ridge"):
            tv = iv.train_tmatrix(stats, ubm, rank=2, iterations=2)
        assert np.all(np.isfinite(tv.t_matrix))

    def test_file_roundtrip(self, tmp_path):
        tv = random_tv(2, 3, 2, 4)
        tv.save(tmp_path / "t.vsvt")
        back = iv.TotalVariabilityModel.load(tmp_path / "t.vsvt")
        assert np.array_equal(back.t_matrix, tv.t_matrix) and np.array_equal(back.sigma, tv.sigma)


class TestSphericalNorm:
    def test_unit_norm(self):
        rng = np.random.default_rng(0)
        fit = rng.normal(3, 2, (200, 5))
        out, norm = iv.spherical_norm(rng.normal(0, 1, (30, 5)), fit)
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-9)
        np.testing.assert_allclose(norm.apply(fit[:3]), iv.spherical_norm(fit[:3], fit)[0], atol=1e-12)

    def test_identity_whitening(self):
        rng = np.random.default_rng(1)
        z = rng.standard_normal((400, 3))
        # exactly zero-mean, identity-covariance fit set
        z -= z.mean(0)
        l = np.linalg.cholesky(np.cov(z, rowvar=False, bias=True))
        fit = z @ np.linalg.inv(l).T
        mean, white = iv.whitening(fit)
        np.testing.assert_allclose(white, np.eye(3), atol=1e-10)
        v = rng.standard_normal((4, 3))
        out, _ = iv.spherical_norm(v, fit, iterations=1)
        np.testing.assert_allclose(out, v / np.linalg.norm(v, axis=1, keepdims=True), atol=1e-9)

    def test_whitened_covariance(self):
        fit = np.random.default_rng(2).normal([1, 2, 3], [1, 5, 0.2], (300, 3))
        mean, white = iv.whitening(fit)
        moved = (fit - mean) @ white.T
        assert np.linalg.norm(moved.mean(0)) < 1e-9
        assert np.linalg.eigvalsh(np.cov(moved, rowvar=False, bias=True)).max() <= 1.0 + 1e-9

    def test_rank_deficient_warns(self):
        fit = np.random.default_rng(3).normal(0, 1, (50, 2)) @ np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        with pytest.warns(RuntimeWarning, match="rank-deficient"):
            iv.spherical_norm(fit, fit)

    def test_too_few(self):
        with pytest.raises(DataError):
            iv.spherical_norm(np.ones((1, 3)), np.ones((1, 3)))


class TestEnroll:
    def test_single(self):
        v = np.array([0.6, 0.8])
        np.testing.assert_allclose(iv.enroll_speaker([v]), v, atol=1e-15)

    def test_identical(self):
        v = np.array([0.0, 0.6, 0.8])
        np.testing.assert_allclose(iv.enroll_speaker([v, v, v]), v, atol=1e-15)

    def test_antipodal(self):
        with pytest.raises(DataError, match="degenerate enrollment"):
            iv.enroll_speaker([[1.0, 0.0], [-1.0, 0.0]])

    def test_empty(self):
        with pytest.raises(DataError):
            iv.enroll_speaker(np.zeros((0, 3)))


def plda_draws(n_classes, per_class, mu, b, w, seed):
    """Sample the two-covariance model and also return the realized latents."""
    rng = np.random.default_rng(seed)
    ys = rng.multivariate_normal(mu, b, n_classes)
    noise = rng.multivariate_normal(np.zeros(mu.size), w, (n_classes, per_class))
    x = (ys[:, None, :] + noise).reshape(-1, mu.size)
    labels = np.repeat(np.arange(n_classes), per_class)
    return x, labels, ys, noise.reshape(-1, mu.size)


def plda_data(n_classes, per_class, mu, b, w, seed):
    x, labels, _, _ = plda_draws(n_classes, per_class, mu, b, w, seed)
    return x, labels


class TestPlda:
    R = 4
    MU = np.array([1.0, -1.0, 0.5, 0.0])
    B = np.array([[2.0, 0.5, 0.0, 0.0], [0.5, 1.5, 0.2, 0.0], [0.0, 0.2, 1.0, 0.1], [0.0, 0.0, 0.1, 0.8]])
    W = np.array([[1.0, 0.2, 0.0, 0.0], [0.2, 0.8, 0.0, 0.1], [0.0, 0.0, 0.6, 0.0], [0.0, 0.1, 0.0, 0.5]])

    @pytest.mark.parametrize("seed", range(5))
    def test_generative_recovery(self, seed):
        # Fifty latent draws cannot pin down the population B to 15% (the
        # sample covariance alone is typically 20-40% off), so the reference
        # is the covariance of the latents actually drawn.
        x, labels, ys, noise = plda_draws(50, 10, self.MU, self.B, self.W, seed=seed)
        model = iv.train_plda(x, labels, iterations=50)
        b_true = np.cov(ys, rowvar=False, bias=True)
        w_true = np.cov(noise, rowvar=False, bias=True)
        err_b = np.linalg.norm(model.between - b_true) / np.linalg.norm(b_true)
        err_w = np.linalg.norm(model.within - w_true) / np.linalg.norm(w_true)
        assert err_b < 0.15 and err_w < 0.15

    def test_objective_monotone(self):
        x, labels = plda_data(30, 5, self.MU, self.B, self.W, seed=1)
        trace = iv.train_plda(x, labels, iterations=20).objective_trace
        for a, b in zip(trace, trace[1:]):
            assert b - a >= -1e-6 * abs(a)

    def test_loglik_matches_joint_gaussian(self):
        x, labels = plda_data(3, 4, self.MU, self.B, self.W, seed=2)
        groups = iv._group(x, labels)
        ll = iv.plda_loglik(groups, self.MU, self.B, self.W)
        ref = 0.0
        for g in groups:
            n = g.shape[0]
            cov = np.kron(np.eye(n), self.W) + np.kron(np.ones((n, n)), self.B)
            ref += multivariate_normal(np.tile(self.MU, n), cov).logpdf(g.reshape(-1))
        assert ll == pytest.approx(ref, rel=1e-10)

    def test_no_between_class_variation(self):
        x, labels = plda_data(40, 8, self.MU, 1e-12 * np.eye(4), self.W, seed=3)
        model = iv.train_plda(x, labels, iterations=30)
        assert np.trace(model.between) < 0.05 * np.trace(model.within)

    def test_singletons(self):
        with pytest.raises(DataError):
            iv.train_plda(np.random.default_rng(0).normal(0, 1, (5, 2)), np.arange(5))
        with pytest.raises(DataError):
            iv.train_plda(np.random.default_rng(0).normal(0, 1, (5, 2)), np.zeros(5))

    def test_symmetry(self):
        model = iv.PldaModel(self.MU, self.B, self.W)
        rng = np.random.default_rng(4)
        for _ in range(20):
            a, b = rng.normal(0, 1, (2, 4))
            assert abs(model.score(a, b) - model.score(b, a)) < 1e-9

    def test_scalar_closed_form(self):
        model = iv.PldaModel(np.zeros(1), np.eye(1), np.eye(1))

        def oracle(a, b):
            same = multivariate_normal([0, 0], [[2, 1], [1, 2]]).logpdf([a, b])
            diff = multivariate_normal(0, 2).logpdf(a) + multivariate_normal(0, 2).logpdf(b)
            return same - diff

        for a, b in ((1, 1), (1, -1), (0.3, 2.0)):
            assert model.score([a], [b]) == pytest.approx(oracle(a, b), abs=1e-12)
        assert model.score([1], [1]) > model.score([1], [-1])

    def test_vanishing_between_class(self):
        model = iv.PldaModel(np.zeros(3), 1e-12 * np.eye(3), np.eye(3))
        rng = np.random.default_rng(5)
        for _ in range(5):
            assert abs(model.score(*rng.normal(0, 1, (2, 3)))) < 1e-9

    def test_monotone_in_cosine(self):
        model = iv.PldaModel(np.zeros(3), 2.0 * np.eye(3), 0.5 * np.eye(3))
        a = np.array([1.0, 0.0, 0.0])
        angles = np.linspace(0, np.pi, 25)
        scores = [model.score(a, [np.cos(t), np.sin(t), 0.0]) for t in angles]
        assert all(s1 >= s2 - 1e-12 for s1, s2 in zip(scores, scores[1:]))

    def test_batch_matches_single(self):
        model = iv.PldaModel(self.MU, self.B, self.W)
        rng = np.random.default_rng(6)
        e, t = rng.normal(0, 1, (3, 4)), rng.normal(0, 1, (5, 4))
        mat = model.score_many(e, t)
        for i in range(3):
            for j in range(5):
                assert mat[i, j] == pytest.approx(model.score(e[i], t[j]), abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DataError):
            iv.PldaModel(self.MU, self.B, self.W).score(np.ones(3), np.ones(4))

    def test_file_roundtrip(self, tmp_path):
        model = iv.PldaModel(self.MU, self.B, self.W)
        model.save(tmp_path / "p.vsvp")
        back = iv.PldaModel.load(tmp_path / "p.vsvp")
        assert back.score(np.ones(4), np.zeros(4)) == model.score(np.ones(4), np.zeros(4))
