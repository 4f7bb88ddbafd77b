import mpmath
import numpy as np
import pytest

from vtlsv import gmm
from vtlsv.errors import DataError
from vtlsv.gmm import DiagonalGmm, MapConfig


def random_gmm(k, d, seed):
    rng = np.random.default_rng(seed)
    w = rng.random(k) + 0.1
    return DiagonalGmm(w / w.sum(), rng.normal(0, 2, (k, d)), rng.uniform(0.3, 2.0, (k, d)))


def brute_loglik(model, x):
    """Per-frame log p(x) summed term by term at 50 digits."""
    mpmath.mp.dps = 50
    out = []
    for row in x:
        total = mpmath.mpf(0)
        for w, mu, var in zip(model.weights, model.means, model.variances):
            dens = mpmath.mpf(w)
            for xi, m, v in zip(row, mu, var):
                dens *= mpmath.exp(-(mpmath.mpf(xi) - m) ** 2 / (2 * mpmath.mpf(v))) / mpmath.sqrt(2 * mpmath.pi * v)
            total += dens
        out.append(float(mpmath.log(total)))
    return np.array(out)


class TestLikelihood:
    @pytest.mark.parametrize("k,d,seed", [(1, 1, 0), (3, 2, 1), (8, 4, 2), (5, 3, 3)])
    def test_logsumexp_matches_brute_force(self, k, d, seed):
        model = random_gmm(k, d, seed)
        x = np.random.default_rng(seed + 10).normal(0, 3, (6, d))
        np.testing.assert_allclose(model.frame_loglik(x), brute_loglik(model, x), rtol=0, atol=1e-10)

    def test_far_outlier_is_finite(self):
        model = random_gmm(4, 2, 0)
        assert np.isfinite(model.frame_loglik(np.array([[1e3, -1e3]]))).all()


def two_blobs(n=4000, seed=0):
    rng = np.random.default_rng(seed)
    a = rng.normal([-5.0, 0.0], 1.0, (n // 2, 2))
    b = rng.normal([5.0, 3.0], 1.0, (n // 2, 2))
    return np.vstack([a, b])


class TestUbm:
    def test_recovers_separated_gaussians(self):
        model = gmm.train_ubm_em(two_blobs(), 2, 20, seed=1)
        order = np.argsort(model.means[:, 0])
        np.testing.assert_allclose(model.means[order], [[-5.0, 0.0], [5.0, 3.0]], atol=0.1)
        np.testing.assert_allclose(model.weights, [0.5, 0.5], atol=0.05)

    def test_single_component_closed_form(self):
        x = np.random.default_rng(3).normal(2.0, 1.5, (500, 3))
        model = gmm.train_ubm_em(x, 1, 1, seed=0)
        np.testing.assert_allclose(model.means[0], x.mean(0), rtol=1e-12)
        np.testing.assert_allclose(model.variances[0], x.var(0), rtol=1e-10)

    def test_monotone_loglik(self):
        rng = np.random.default_rng(5)
        centers = rng.normal(0, 3, (8, 3))
        x = centers[rng.integers(8, size=5000)] + rng.normal(0, 1, (5000, 3))
        trace = gmm.train_ubm_em(x, 8, 15, seed=2).llk_trace
        assert len(trace) == 16
        for a, b in zip(trace, trace[1:]):
            assert b - a >= -1e-8 * abs(a)

    def test_deterministic(self):
        x = two_blobs(seed=4)
        a, b = gmm.train_ubm_em(x, 4, 5, seed=7), gmm.train_ubm_em(x, 4, 5, seed=7)
        assert np.array_equal(a.means, b.means)

    def test_variance_floor(self):
        x = np.random.default_rng(0).normal(0, 1, (2000, 2))
        x[:1000, 1] = 0.0
        model = gmm.train_ubm_em(x, 4, 10, seed=0)
        assert np.all(model.variances >= 1e-3 * x.var(0) - 1e-15)

    def test_too_few_frames(self):
        with pytest.raises(DataError):
            gmm.train_ubm_em(np.zeros((30, 2)), 4, 1)

    def test_accepts_feature_matrices(self):
        from vtlsv.frontend import FeatureMatrix
        x = two_blobs()
        feats = [FeatureMatrix(x[:2000].T), FeatureMatrix(x[2000:].T)]
        a = gmm.train_ubm_em(feats, 2, 3, seed=1)
        b = gmm.train_ubm_em(x, 2, 3, seed=1)
        assert np.array_equal(a.means, b.means)


class TestMap:
    def test_infinite_relevance_keeps_ubm(self):
        ubm = random_gmm(4, 3, 0)
        x = np.random.default_rng(1).normal(3, 1, (200, 3))
        model = gmm.map_adapt(ubm, x, MapConfig(relevance_factor=1e12))
        np.testing.assert_allclose(model.means, ubm.means, atol=1e-6)

    def test_single_component_closed_form(self):
        ubm = DiagonalGmm([1.0], [[0.5, -1.0]], [[1.0, 2.0]])
        x = np.random.default_rng(2).normal(2.0, 1.0, (37, 2))
        model = gmm.map_adapt(ubm, x, MapConfig(10.0, 1))
        expected = (37 * x.mean(0) + 10 * ubm.means[0]) / (37 + 10)
        np.testing.assert_allclose(model.means[0], expected, rtol=1e-13)
        assert np.array_equal(model.weights, ubm.weights)
        assert np.array_equal(model.variances, ubm.variances)

    def test_iterated_prior_is_previous_iterate(self):
        ubm = DiagonalGmm([1.0], [[0.0]], [[1.0]])
        x = np.full((10, 1), 4.0)
        mu = 0.0
        for _ in range(3):
            mu = (10 * 4.0 + 10 * mu) / 20
        assert gmm.map_adapt(ubm, x, MapConfig(10.0, 3)).means[0, 0] == pytest.approx(mu, rel=1e-14)

    def test_data_from_ubm_stays_close(self):
        ubm = DiagonalGmm([1.0], [[1.0, -2.0]], [[1.0, 4.0]])
        n = 20000
        x = np.random.default_rng(3).normal([1.0, -2.0], [1.0, 2.0], (n, 2))
        model = gmm.map_adapt(ubm, x, MapConfig(10.0, 1))
        # sample-mean standard error, 3 sigma
        assert np.all(np.abs(model.means[0] - ubm.means[0]) < 3 * np.sqrt([1.0, 4.0] / np.array(n)))

    def test_interpolation_bounds(self):
        ubm = random_gmm(3, 2, 4)
        x = np.random.default_rng(5).normal(0, 2, (50, 2))
        model = gmm.map_adapt(ubm, x, MapConfig(10.0, 1))
        r, _ = ubm.posteriors(x)
        ex = (r.T @ x) / r.sum(0)[:, None]
        lo = np.minimum(ubm.means, ex) - 1e-12
        hi = np.maximum(ubm.means, ex) + 1e-12
        assert np.all((model.means >= lo) & (model.means <= hi))

    def test_empty(self):
        with pytest.raises(DataError):
            gmm.map_adapt(random_gmm(2, 2, 0), np.zeros((0, 2)))


class TestLlr:
    def test_identical_models(self):
        ubm = random_gmm(4, 3, 0)
        x = np.random.default_rng(1).normal(0, 1, (30, 3))
        assert gmm.score_llr(x, ubm, ubm) == 0.0

    def test_hand_case(self):
        ubm = DiagonalGmm([1.0], [[0.0]], [[1.0]])
        model = DiagonalGmm([1.0], [[1.0]], [[1.0]])
        assert gmm.score_llr(np.array([[1.0]]), model, ubm) == pytest.approx(0.5, abs=1e-15)

    def test_duplication_and_order(self):
        ubm = random_gmm(4, 3, 2)
        model = gmm.map_adapt(ubm, np.random.default_rng(3).normal(1, 1, (40, 3)))
        x = np.random.default_rng(4).normal(0, 1, (25, 3))
        s = gmm.score_llr(x, model, ubm)
        assert abs(gmm.score_llr(np.vstack([x, x]), model, ubm) - s) < 1e-12
        assert abs(gmm.score_llr(x[::-1], model, ubm) - s) < 1e-12

    def test_many_matches_single(self):
        ubm = random_gmm(5, 3, 5)
        rng = np.random.default_rng(6)
        models = [gmm.map_adapt(ubm, rng.normal(i, 1, (30, 3))) for i in range(4)]
        x = rng.normal(0, 1, (20, 3))
        many = gmm.score_llr_many(x, np.array([m.means for m in models]), ubm)
        single = [gmm.score_llr(x, m, ubm) for m in models]
        np.testing.assert_allclose(many, single, atol=1e-10)

    def test_mismatch(self):
        with pytest.raises(DataError):
            gmm.score_llr(np.zeros((3, 2)), random_gmm(2, 3, 0), random_gmm(2, 3, 1))


def test_model_file_roundtrip(tmp_path):
    model = random_gmm(3, 4, 9)
    model.save(tmp_path / "m.vsvg")
    back = DiagonalGmm.load(tmp_path / "m.vsvg")
    assert (tmp_path / "m.vsvg").read_bytes()[:4] == b"VSVG"
    for a, b in ((model.weights, back.weights), (model.means, back.means),
                 (model.variances, back.variances)):
        assert np.array_equal(a, b)
