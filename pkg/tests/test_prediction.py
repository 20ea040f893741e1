"""MVN CDF engine and spatial prediction of new binary responses."""

import numpy as np
import pytest

from rfgp.core import SpatialDataset
from rfgp.covariance import CovarianceSpec
from rfgp.errors import DimensionCap
from rfgp.forest import Forest, ForestParams
from rfgp.link import SpatialParams, phi_cdf
from rfgp.nngp import WorkingCorrelationSpec
from rfgp.prediction import (
    MvnCdfProblem,
    RfgpModel,
    build_context,
    mvn_cdf,
    predict_batch,
    predict_probability,
)
from rfgp.tree import GlsTree


def mc_oracle(u, V, n_draws=1_000_000, seed=0, chunks=10):
    """Plain Monte Carlo estimate of P(N(0,V) <= u) with standard error."""
    rng = np.random.default_rng(seed)
    L = np.linalg.cholesky(V)
    hits = 0
    per = n_draws // chunks
    for _ in range(chunks):
        z = rng.standard_normal((per, len(u)))
        hits += int(np.sum(np.all(z @ L.T <= u, axis=1)))
    total = per * chunks
    p = hits / total
    se = np.sqrt(max(p * (1 - p), 1e-12) / total)
    return p, se


def random_spd_problem(k, seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(k, k))
    V = A @ A.T + k * np.eye(k)
    d = np.sqrt(np.diag(V))
    V = V / np.outer(d, d)  # correlation scale keeps probabilities moderate
    u = rng.uniform(-1.0, 1.5, size=k)
    return MvnCdfProblem(u, V)


class TestMvnCdf:
    def test_univariate(self):
        est, se = mvn_cdf(MvnCdfProblem(np.array([0.0]), np.array([[1.0]])))
        assert est == 0.5 and se == 0.0

    def test_univariate_scaled(self):
        est, _ = mvn_cdf(MvnCdfProblem(np.array([2.0]), np.array([[4.0]])))
        assert est == pytest.approx(phi_cdf(1.0), abs=1e-12)

    def test_bivariate_orthant_closed_form(self):
        V = np.array([[1.0, 0.5], [0.5, 1.0]])
        est, se = mvn_cdf(MvnCdfProblem(np.zeros(2), V), samples=4096, shifts=8, seed=0)
        assert est == pytest.approx(1.0 / 3.0, abs=5e-4)

    def test_random_problems_against_mc_oracle(self):
        for seed in range(5):
            prob = random_spd_problem(5, seed)
            est, se = mvn_cdf(prob, samples=4096, shifts=8, seed=seed)
            oracle, oracle_se = mc_oracle(prob.mean, prob.covariance, seed=seed + 1000)
            tol = 3.0 * np.sqrt(se**2 + oracle_se**2)
            assert abs(est - oracle) < max(tol, 1e-4)

    def test_monotone_in_mean(self):
        prob = random_spd_problem(4, 7)
        est1, se1 = mvn_cdf(prob, seed=0)
        u2 = prob.mean.copy()
        u2[2] += 0.5
        est2, se2 = mvn_cdf(MvnCdfProblem(u2, prob.covariance), seed=0)
        assert est2 >= est1 - 3 * (se1 + se2)

    def test_exchangeable_permutation_invariance(self):
        k = 4
        V = 0.4 * np.ones((k, k)) + 0.6 * np.eye(k)
        base, se_b = mvn_cdf(MvnCdfProblem(np.zeros(k), V), seed=1)
        perm = np.array([2, 0, 3, 1])
        permuted, se_p = mvn_cdf(
            MvnCdfProblem(np.zeros(k), V[np.ix_(perm, perm)]), seed=1
        )
        assert abs(base - permuted) <= 3 * (se_b + se_p) + 1e-12

    def test_dimension_cap(self):
        with pytest.raises(DimensionCap):
            mvn_cdf(MvnCdfProblem(np.zeros(201), np.eye(201)))

    def test_minimum_samples(self):
        with pytest.raises(ValueError):
            mvn_cdf(MvnCdfProblem(np.zeros(2), np.eye(2)), samples=10)

    def test_deterministic(self):
        prob = random_spd_problem(3, 11)
        assert mvn_cdf(prob, seed=5) == mvn_cdf(prob, seed=5)


def constant_model(p_value, sigma2, phi=2.0, zeta=4.0, n_tree=2):
    trees = [GlsTree([{"leaf": 0}], np.array([p_value]), np.arange(2), i)
             for i in range(n_tree)]
    forest = Forest(trees, ForestParams(n_tree=n_tree, t_c=1),
                    WorkingCorrelationSpec(np.inf))
    spar = SpatialParams(sigma2, phi, zeta)
    cov = CovarianceSpec("exponential", sigma2, phi) if sigma2 > 0 else None
    return RfgpModel(forest, spar, cov)


def toy_data(n=40, seed=0):
    rng = np.random.default_rng(seed)
    return SpatialDataset(rng.uniform(size=(n, 2)), rng.uniform(size=(n, 3)),
                          rng.integers(0, 2, size=n))


class TestBuildContext:
    def test_full_data_context(self):
        data = toy_data(12)
        model = constant_model(0.6, 2.0)
        ctx = build_context(model, data, [0.5, 0.5], k=12)
        assert ctx.k == 12

    def test_k_zero_rejected(self):
        data = toy_data(5)
        model = constant_model(0.6, 2.0)
        with pytest.raises(ValueError):
            build_context(model, data, [0.5, 0.5], k=0)

    def test_nearest_set_matches_brute_force(self):
        data = toy_data(50, seed=3)
        model = constant_model(0.6, 2.0)
        s_new = np.array([0.3, 0.7])
        k = 8
        ctx = build_context(model, data, s_new, k)
        dists = np.linalg.norm(data.locations - s_new, axis=1)
        expected = data.locations[np.argsort(dists)[:k]]
        assert np.array_equal(np.sort(ctx.locations, axis=0), np.sort(expected, axis=0))

    def test_sign_entries(self):
        data = toy_data(10, seed=4)
        model = constant_model(0.6, 2.0)
        ctx = build_context(model, data, [0.1, 0.1], k=10)
        assert set(np.unique(ctx.d_signs)) <= {-1.0, 1.0}


class TestPredictProbability:
    def test_sigma2_zero_collapses_to_marginal(self):
        model = constant_model(0.73, 0.0)
        data = toy_data(20, seed=5)
        ctx = build_context(model, data, [0.5, 0.5], k=10)
        p, se = predict_probability(ctx, [0.2, 0.2, 0.2], [0.5, 0.5], model)
        from rfgp.link import invert_link

        m_hat = invert_link(0.73, 0.0)
        assert p == pytest.approx(phi_cdf(m_hat), abs=1e-12)
        assert se == 0.0

    def test_k1_against_mc_oracle(self):
        # single conditioning point, m = 0 everywhere: 2x2 / 1x1 ratio
        sigma2 = 1.5
        model = constant_model(0.5, sigma2, phi=1.0)
        rng = np.random.default_rng(6)
        data = SpatialDataset(rng.uniform(size=(5, 2)), rng.uniform(size=(5, 3)),
                              np.array([1, 0, 1, 1, 0]))
        s_new = np.array([0.5, 0.5])
        ctx = build_context(model, data, s_new, k=1)
        p, se = predict_probability(ctx, [0.1, 0.1, 0.1], s_new, model,
                                    {"samples": 4096, "shifts": 8, "seed": 0})
        d = ctx.d_signs[0]
        c = CovarianceSpec("exponential", sigma2, 1.0)
        from rfgp.covariance import kernel

        r = float(kernel(c, np.linalg.norm(ctx.locations[0] - s_new)))
        C_star = np.array([[sigma2, r], [r, sigma2]])
        D = np.diag([d, 1.0])
        num, num_se = mc_oracle(np.zeros(2), np.eye(2) + D @ C_star @ D,
                                n_draws=2_000_000, seed=17)
        den = 0.5  # 1-dim CDF at 0 is exactly one half
        oracle = num / den
        oracle_se = num_se / den
        assert abs(p - oracle) < 3 * np.sqrt(se**2 + oracle_se**2) + 1e-3

    def test_complementary_events_sum_to_one(self):
        sigma2 = 2.0
        model = constant_model(0.62, sigma2, phi=1.5)
        data = toy_data(30, seed=7)
        s_new = np.array([0.4, 0.4])
        x_new = [0.3, 0.3, 0.3]
        ctx = build_context(model, data, s_new, k=10)
        qmc = {"samples": 4096, "shifts": 8, "seed": 0}
        p1, se1 = predict_probability(ctx, x_new, s_new, model, qmc)

        # complement: flip the new point's sign in the numerator by hand
        from rfgp.covariance import covariance_matrix
        from rfgp.prediction import MvnCdfProblem, mvn_cdf

        m_new = model.effect_estimator.effect(x_new)
        k = ctx.k
        cross = covariance_matrix(
            model.cov_spec, np.vstack([ctx.locations, s_new])
        )[:k, k]
        C_star = np.empty((k + 1, k + 1))
        C_star[:k, :k] = ctx.C_matrix
        C_star[:k, k] = cross
        C_star[k, :k] = cross
        C_star[k, k] = sigma2
        d_star = np.concatenate([ctx.d_signs, [-1.0]])
        m_star = np.concatenate([ctx.m_vec, [m_new]])
        num0, se_num0 = mvn_cdf(
            MvnCdfProblem(d_star * m_star, np.eye(k + 1) + np.outer(d_star, d_star) * C_star),
            seed=0,
        )
        den, se_den = mvn_cdf(
            MvnCdfProblem(ctx.d_signs * ctx.m_vec,
                          np.eye(k) + np.outer(ctx.d_signs, ctx.d_signs) * ctx.C_matrix),
            seed=0,
        )
        p0 = num0 / den
        tol = 2 * (se1 + se_num0 / den + se_den / den + 1e-4)
        assert abs((p1 + p0) - 1.0) < tol

    def test_sigma2_continuity(self):
        data = toy_data(25, seed=8)
        s_new = np.array([0.6, 0.6])
        x_new = [0.5, 0.5, 0.5]
        p_limit = None
        for sigma2 in (1e-2, 1e-4, 1e-6):
            model = constant_model(0.58, sigma2, phi=1.0)
            ctx = build_context(model, data, s_new, k=8)
            p, _ = predict_probability(ctx, x_new, s_new, model,
                                       {"samples": 4096, "shifts": 8, "seed": 0})
            zero_model = constant_model(0.58, 0.0)
            m_hat = zero_model.effect_estimator.effect(x_new)
            if p_limit is None:
                p_limit = phi_cdf(m_hat)
            assert abs(p - p_limit) < 5e-3

    def test_probability_in_unit_interval(self):
        model = constant_model(0.9, 3.0, phi=0.5)
        data = toy_data(30, seed=9)
        for seed in range(5):
            s_new = np.random.default_rng(seed).uniform(size=2)
            ctx = build_context(model, data, s_new, k=12)
            p, _ = predict_probability(ctx, [0.1, 0.9, 0.5], s_new, model,
                                       {"samples": 1024, "shifts": 4, "seed": seed})
            assert 0.0 <= p <= 1.0


class TestPredictBatch:
    def setup_method(self):
        self.model = constant_model(0.6, 1.0, phi=2.0)
        self.data = toy_data(30, seed=10)
        rng = np.random.default_rng(11)
        self.xs = rng.uniform(size=(6, 3))
        self.ss = rng.uniform(size=(6, 2))
        self.qmc = {"samples": 1024, "shifts": 4, "seed": 3}

    def test_batch_of_one_equals_scalar(self):
        p, se = predict_batch(self.model, self.data, self.xs[:1], self.ss[:1],
                              k=10, qmc=self.qmc)
        assert p.shape == (1,)

    def test_permutation_equivariance(self):
        p, _ = predict_batch(self.model, self.data, self.xs, self.ss, k=10, qmc=self.qmc)
        perm = np.array([3, 1, 5, 0, 2, 4])
        p_perm, _ = predict_batch(self.model, self.data, self.xs[perm], self.ss[perm],
                                  k=10, qmc=self.qmc)
        assert np.array_equal(p_perm, p[perm])

    def test_parallel_matches_serial(self):
        p1, se1 = predict_batch(self.model, self.data, self.xs, self.ss,
                                k=10, qmc=self.qmc, n_jobs=1)
        p2, se2 = predict_batch(self.model, self.data, self.xs, self.ss,
                                k=10, qmc=self.qmc, n_jobs=2)
        assert np.array_equal(p1, p2)
        assert np.array_equal(se1, se2)
