"""Spatial prediction of P(Y_new = 1) via a ratio of multivariate normal
CDFs over a nearest-neighbor conditioning set.

With latent residuals U ~ N(0, I + C) and sign matrix D = diag(2y - 1),
the probability of the observed labels is Phi_k(D m, I + D C D), the CDF
of a centered normal evaluated at D m.  Augmenting the conditioning set
with (Y_new = 1, x_new, s_new) gives the numerator; both CDFs are
estimated with common random numbers so the ratio's variance collapses.

The CDF engine is a separation-of-variables quasi-Monte-Carlo scheme:
variables are pre-sorted by increasing marginal probability, the
covariance is Cholesky-factored, and a Sobol point set under several
independent uniform shifts (mod 1) yields the estimate and its standard
error across shifts.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from joblib import Parallel, delayed
from scipy.stats import qmc

from .covariance import CovarianceSpec, covariance_matrix
from .errors import CholeskyFailure, DimensionCap
from .forest import Forest
from .link import CovariateEffectEstimator, SpatialParams, phi_cdf, phi_quantile

__all__ = [
    "MvnCdfProblem",
    "PredictionContext",
    "RfgpModel",
    "mvn_cdf",
    "build_context",
    "predict_probability",
    "predict_batch",
]

_MAX_DIM = 200
_PHI_CLIP = 1e-15


@dataclass(frozen=True)
class MvnCdfProblem:
    """Computes Phi_k(u, V) = P(N(0, V) <= u) componentwise."""

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.mean, dtype=float)
        V = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        if u.ndim != 1 or V.shape != (u.size, u.size):
            raise ValueError("mean/covariance shapes disagree")
        object.__setattr__(self, "mean", u)
        object.__setattr__(self, "covariance", V)


def _sobol_points(dim: int, samples: int) -> np.ndarray:
    m = max(1, int(np.ceil(np.log2(samples))))
    eng = qmc.Sobol(d=dim, scramble=False)
    return eng.random_base2(m)


def mvn_cdf(problem: MvnCdfProblem, samples: int = 4096, seed: int = 0,
            shifts: int = 8):
    """Randomized-QMC estimate of Phi_k(u, V); returns (estimate, std_error)."""
    u = problem.mean
    V = problem.covariance
    k = u.size
    if k > _MAX_DIM:
        raise DimensionCap(f"dimension {k} exceeds cap {_MAX_DIM}")
    if samples < 1000:
        raise ValueError("need at least 1000 QMC samples")
    if k == 1:
        return float(phi_cdf(u[0] / np.sqrt(V[0, 0]))), 0.0

    # variance reduction: integrate the least likely variables first
    order = np.argsort(u / np.sqrt(np.diag(V)), kind="stable")
    u = u[order]
    V = V[np.ix_(order, order)]
    try:
        L = np.linalg.cholesky(V)
    except np.linalg.LinAlgError as exc:
        raise CholeskyFailure("MVN covariance is not positive definite") from exc

    base = _sobol_points(k - 1, samples)
    npts = base.shape[0]
    rng = np.random.default_rng(seed)
    offsets = rng.random((shifts, k - 1))

    estimates = np.empty(shifts)
    for s in range(shifts):
        w = (base + offsets[s]) % 1.0
        prod = np.full(npts, phi_cdf(u[0] / L[0, 0]))
        ys = np.empty((npts, k - 1))
        e_prev = prod.copy()
        for j in range(1, k):
            z = np.clip(w[:, j - 1] * e_prev, _PHI_CLIP, 1.0 - _PHI_CLIP)
            ys[:, j - 1] = phi_quantile(z)
            t = (u[j] - ys[:, : j] @ L[j, : j]) / L[j, j]
            e_prev = phi_cdf(t)
            prod *= e_prev
        estimates[s] = prod.mean()
    est = float(estimates.mean())
    se = float(estimates.std(ddof=1) / np.sqrt(shifts)) if shifts > 1 else 0.0
    return est, se


@dataclass
class RfgpModel:
    """Fitted forest plus estimated spatial parameters; drives prediction."""

    forest: Forest
    params: SpatialParams
    cov_spec: CovarianceSpec | None  # None when sigma2 == 0
    clip_epsilon: float = 1e-6
    effect_estimator: CovariateEffectEstimator | None = None

    def __post_init__(self):
        if self.effect_estimator is None:
            self.effect_estimator = CovariateEffectEstimator(
                self.forest, self.params.sigma2, self.clip_epsilon
            )


@dataclass
class PredictionContext:
    """Conditioning data at the k nearest training locations."""

    m_vec: np.ndarray
    d_signs: np.ndarray  # entries 2y - 1
    C_matrix: np.ndarray
    locations: np.ndarray

    @property
    def k(self) -> int:
        return self.m_vec.size


def build_context(model: RfgpModel, data, s_new, k: int) -> PredictionContext:
    """Assemble (m, D, C) on the k nearest training locations to s_new."""
    if k < 1:
        raise ValueError("conditioning-set size k must be at least 1")
    if k > data.n:
        raise ValueError(f"k = {k} exceeds the number of training points {data.n}")
    s_new = np.asarray(s_new, dtype=float).ravel()
    dists = np.linalg.norm(data.locations - s_new, axis=1)
    nearest = np.lexsort((np.arange(data.n), dists))[:k]
    m_vec = model.effect_estimator.effect_batch(data.covariates[nearest])
    d_signs = 2.0 * data.labels[nearest] - 1.0
    if model.params.sigma2 > 0:
        C = covariance_matrix(model.cov_spec, data.locations[nearest])
    else:
        C = np.zeros((k, k))
    return PredictionContext(m_vec, d_signs, C, data.locations[nearest])


def predict_probability(ctx: PredictionContext, x_new, s_new, model: RfgpModel,
                        qmc_opts=None) -> tuple:
    """Predicted P(Y_new = 1); returns (probability, combined std error)."""
    qmc_opts = qmc_opts or {}
    samples = int(qmc_opts.get("samples", 4096))
    shifts = int(qmc_opts.get("shifts", 8))
    seed = int(qmc_opts.get("seed", 0))

    m_new = model.effect_estimator.effect(x_new)
    if model.params.sigma2 == 0:
        # C = 0: both CDFs factor into independent marginals and the ratio
        # collapses to the marginal probability of the new point
        return float(phi_cdf(m_new)), 0.0

    k = ctx.k
    s_new = np.asarray(s_new, dtype=float).ravel()
    cross = np.array([
        covariance_matrix(model.cov_spec, np.vstack([s, s_new]))[0, 1]
        if not np.allclose(s, s_new) else model.cov_spec.sigma2
        for s in ctx.locations
    ])
    C_star = np.empty((k + 1, k + 1))
    C_star[:k, :k] = ctx.C_matrix
    C_star[:k, k] = cross
    C_star[k, :k] = cross
    C_star[k, k] = model.cov_spec.sigma2

    d = ctx.d_signs
    d_star = np.concatenate([d, [1.0]])  # Y_new = 1 in the numerator
    m_star = np.concatenate([ctx.m_vec, [m_new]])

    num_problem = MvnCdfProblem(
        d_star * m_star, np.eye(k + 1) + np.outer(d_star, d_star) * C_star
    )
    den_problem = MvnCdfProblem(
        d * ctx.m_vec, np.eye(k) + np.outer(d, d) * ctx.C_matrix
    )
    # common random numbers: same seed for numerator and denominator
    num, num_se = mvn_cdf(num_problem, samples, seed, shifts)
    den, den_se = mvn_cdf(den_problem, samples, seed, shifts)
    if den <= 0:
        return 0.5, 1.0  # degenerate conditioning; no information
    p = num / den
    se = p * np.sqrt((num_se / max(num, 1e-300)) ** 2 + (den_se / den) ** 2)
    return float(np.clip(p, 0.0, 1.0)), float(se)


def _predict_one(model, data, x, s, k, qmc_opts):
    ctx = build_context(model, data, s, min(k, data.n))
    return predict_probability(ctx, x, s, model, qmc_opts)


def predict_batch(model: RfgpModel, data, xs, ss, k: int = 30, qmc=None,
                  n_jobs: int = 1):
    """Per-point spatial prediction with deterministic per-point seeds."""
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    ss = np.atleast_2d(np.asarray(ss, dtype=float))
    qmc = dict(qmc or {})
    base_seed = int(qmc.get("seed", 0))
    opts = []
    for i in range(xs.shape[0]):
        o = dict(qmc)
        # seed derives from the point itself, so permuting the batch
        # permutes the outputs bit-for-bit
        h = hashlib.blake2b(digest_size=8)
        h.update(base_seed.to_bytes(8, "little", signed=True))
        h.update(np.ascontiguousarray(xs[i]).tobytes())
        h.update(np.ascontiguousarray(ss[i]).tobytes())
        o["seed"] = int.from_bytes(h.digest(), "little")
        opts.append(o)
    if n_jobs == 1 or xs.shape[0] <= 1:
        results = [
            _predict_one(model, data, xs[i], ss[i], k, opts[i])
            for i in range(xs.shape[0])
        ]
    else:
        results = Parallel(n_jobs=n_jobs)(
            delayed(_predict_one)(model, data, xs[i], ss[i], k, opts[i])
            for i in range(xs.shape[0])
        )
    p = np.array([r[0] for r in results])
    se = np.array([r[1] for r in results])
    return p, se
