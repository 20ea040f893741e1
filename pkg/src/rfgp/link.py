"""Probit machinery and spatial-parameter estimation.

The marginal mean of a probit mixed model with stationary random-effect
variance sigma2 is p(x) = Phi(m(x) / sqrt(1 + sigma2)), so the covariate
effect is recovered as m(x) = sqrt(1 + sigma2) * Phi^{-1}(p(x)).  Raw
forest estimates of p can leave (0, 1); they are either clipped to
[eps, 1 - eps] or replaced by an auxiliary classical-forest interpolator
fitted on the in-range region.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erfc

from .errors import InsufficientInRangePoints, OutOfDomain, TooFewSamples
from .forest import Forest, ForestParams, fit_forest, predict_mean_batch
from .nngp import WorkingCorrelationSpec

__all__ = [
    "phi_cdf",
    "phi_quantile",
    "phi_density",
    "marginal_link",
    "invert_link",
    "SpatialParams",
    "CovariateEffectEstimator",
    "interpolate_out_of_range",
    "CvGrid",
    "CvOptions",
    "estimate_spatial_params",
    "estimate_covariate_effect",
]

_SQRT2 = np.sqrt(2.0)


def phi_cdf(z):
    """Standard normal CDF via the complementary error function."""
    z = np.asarray(z, dtype=float)
    out = 0.5 * erfc(-z / _SQRT2)
    return float(out) if out.ndim == 0 else out


def phi_density(z):
    z = np.asarray(z, dtype=float)
    out = np.exp(-0.5 * z * z) / np.sqrt(2.0 * np.pi)
    return float(out) if out.ndim == 0 else out


# Wichura's PPND16 rational approximations on three regimes of p.
_A = np.array([
    2.5090809287301226727e3, 3.3430575583588128105e4, 6.7265770927008700853e4,
    4.5921953931549871457e4, 1.3731693765509461125e4, 1.9715909503065514427e3,
    1.3314166789178437745e2, 3.3871328727963666080e0,
])
_B = np.array([
    5.2264952788528545610e3, 2.8729085735721942674e4, 3.9307895800092710610e4,
    2.1213794301586595867e4, 5.3941960214247511077e3, 6.8718700749205790830e2,
    4.2313330701600911252e1, 1.0,
])
_C = np.array([
    7.74545014278341407640e-4, 2.27238449892691845833e-2, 2.41780725177450611770e-1,
    1.27045825245236838258e0, 3.64784832476320460504e0, 5.76949722146069140550e0,
    4.63033784615654529590e0, 1.42343711074968357734e0,
])
_D = np.array([
    1.05075007164441684324e-9, 5.47593808499534494600e-4, 1.51986665636164571966e-2,
    1.48103976427480074590e-1, 6.89767334985100004550e-1, 1.67638483018380384940e0,
    2.05319162663775882187e0, 1.0,
])
_E = np.array([
    2.01033439929228813265e-7, 2.71155556874348757815e-5, 1.24266094738807843860e-3,
    2.65321895265761230930e-2, 2.96560571828504891230e-1, 1.78482653991729133580e0,
    5.46378491116411436990e0, 6.65790464350110377720e0,
])
_F = np.array([
    2.04426310338993978564e-15, 1.42151175831644588870e-7, 1.84631831751005468180e-5,
    7.86869131145613259100e-4, 1.48753612908506148525e-2, 1.36929880922735805310e-1,
    5.99832206555887937690e-1, 1.0,
])


def phi_quantile(p):
    """Standard normal quantile, absolute error below 1e-9 on (0, 1)."""
    p_arr = np.asarray(p, dtype=float)
    if np.any(p_arr <= 0.0) or np.any(p_arr >= 1.0):
        raise OutOfDomain("quantile argument must lie strictly in (0, 1)")
    q = p_arr - 0.5
    central = np.abs(q) <= 0.425
    out = np.empty_like(p_arr)

    r = 0.180625 - q * q
    out = np.where(central, q * np.polyval(_A, r) / np.polyval(_B, r), 0.0)

    r_tail = np.where(q < 0, p_arr, 1.0 - p_arr)
    # clamp so the masked-out central branch stays finite
    r_tail = np.sqrt(-np.log(np.clip(r_tail, 1e-300, 0.5)))
    near = r_tail <= 5.0
    rc = r_tail - 1.6
    re = r_tail - 5.0
    tail = np.where(
        near,
        np.polyval(_C, rc) / np.polyval(_D, rc),
        np.polyval(_E, re) / np.polyval(_F, re),
    )
    tail = np.where(q < 0, -tail, tail)
    out = np.where(central, out, tail)
    return float(out) if out.ndim == 0 else out


def marginal_link(m_val, sigma2: float):
    """Marginal success probability Phi(m / sqrt(1 + sigma2))."""
    if sigma2 < 0:
        raise ValueError("sigma2 must be nonnegative")
    return phi_cdf(np.asarray(m_val, dtype=float) / np.sqrt(1.0 + sigma2))


def invert_link(p_val, sigma2: float, clip_epsilon: float = 1e-6):
    """Recover the covariate effect sqrt(1 + sigma2) * Phi^{-1}(clipped p)."""
    if sigma2 < 0:
        raise ValueError("sigma2 must be nonnegative")
    if not 0 < clip_epsilon < 0.5:
        raise ValueError("clip_epsilon must lie in (0, 0.5)")
    p = np.clip(np.asarray(p_val, dtype=float), clip_epsilon, 1.0 - clip_epsilon)
    out = np.sqrt(1.0 + sigma2) * phi_quantile(p)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class SpatialParams:
    """Estimated spatial variance / decay plus the working-correlation decay."""

    sigma2: float
    phi: float
    zeta: float  # np.inf for the identity working covariance

    def __post_init__(self):
        if self.sigma2 < 0:
            raise ValueError("sigma2 must be nonnegative")
        if self.phi <= 0:
            raise ValueError("phi must be positive")

    def to_json(self) -> dict:
        return {
            "sigma2": self.sigma2,
            "phi": self.phi,
            "zeta": "inf" if np.isinf(self.zeta) else self.zeta,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SpatialParams":
        zeta = obj["zeta"]
        return cls(float(obj["sigma2"]), float(obj["phi"]),
                   np.inf if zeta in ("inf", None) else float(zeta))


# ---------------------------------------------------------------------------
# Out-of-range handling and the covariate-effect evaluator
# ---------------------------------------------------------------------------

def interpolate_out_of_range(forest: Forest, probe_points, seed: int):
    """Auxiliary classical-forest interpolator for out-of-(0,1) estimates.

    Fits a Q = I regression forest on probe points whose raw estimate lies
    in (0, 1); the returned evaluator substitutes the auxiliary prediction
    wherever the raw estimate leaves (0, 1).
    """
    probes = np.atleast_2d(np.asarray(probe_points, dtype=float))
    raw = predict_mean_batch(forest, probes)
    in_range = (raw > 0.0) & (raw < 1.0)
    if in_range.sum() < 10:
        raise InsufficientInRangePoints(
            f"only {int(in_range.sum())} probe points have in-range estimates"
        )
    X_fit = probes[in_range]
    y_fit = raw[in_range]
    n_fit = X_fit.shape[0]
    aux_params = ForestParams(
        n_tree=min(50, forest.params.n_tree),
        t_c=max(2, min(forest.params.t_c, n_fit // 4)),
        subsample_fraction=1.0,
        seed=seed,
    )
    fake_locs = np.arange(n_fit, dtype=float).reshape(-1, 1)
    aux = fit_forest(X_fit, y_fit, fake_locs, WorkingCorrelationSpec(np.inf), aux_params)

    def evaluator(xs):
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        p = predict_mean_batch(forest, xs)
        bad = (p <= 0.0) | (p >= 1.0)
        if bad.any():
            p = p.copy()
            p[bad] = predict_mean_batch(aux, xs[bad])
        return p

    return evaluator


@dataclass
class CovariateEffectEstimator:
    """Evaluates m_hat(x) = sqrt(1 + sigma2) * Phi^{-1}(corrected p_hat(x))."""

    forest: Forest
    sigma2: float
    clip_epsilon: float = 1e-6
    interpolation: str = "clip"  # "clip" | "forest"
    _corrected: object = field(default=None, repr=False)

    def __post_init__(self):
        if self.interpolation not in ("clip", "forest"):
            raise ValueError("interpolation must be 'clip' or 'forest'")

    def enable_forest_interpolation(self, probe_points, seed: int):
        self._corrected = interpolate_out_of_range(self.forest, probe_points, seed)
        self.interpolation = "forest"

    def mean_batch(self, xs) -> np.ndarray:
        """Corrected mean-function estimate (still unclipped into [0,1])."""
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        if self.interpolation == "forest" and self._corrected is not None:
            return self._corrected(xs)
        return predict_mean_batch(self.forest, xs)

    def effect_batch(self, xs) -> np.ndarray:
        return invert_link(self.mean_batch(xs), self.sigma2, self.clip_epsilon)

    def effect(self, x) -> float:
        return float(self.effect_batch(np.atleast_2d(x))[0])


def estimate_covariate_effect(forest: Forest, params: SpatialParams, x,
                              clip_epsilon: float = 1e-6) -> float:
    return CovariateEffectEstimator(forest, params.sigma2, clip_epsilon).effect(x)


# ---------------------------------------------------------------------------
# Cross-validated spatial-parameter estimation
# ---------------------------------------------------------------------------

def _default_fs():
    return (0.05, 0.25, 0.5, 0.75, 0.95)


@dataclass(frozen=True)
class CvGrid:
    """Grid over (zeta, sigma2, f) with phi = 3 / (sqrt(2) f)."""

    zetas: tuple = (1.0, 4.0, 7.0, 10.0, np.inf)
    sigma2s: tuple = (1.0, 2.5, 5.0, 7.5, 10.0, 12.5, 15.0, 17.5, 20.0, 25.0)
    fs: tuple = field(default_factory=_default_fs)

    @staticmethod
    def phi_of(f: float) -> float:
        return 3.0 / (np.sqrt(2.0) * f)

    def to_json(self) -> dict:
        return {
            "zetas": ["inf" if np.isinf(z) else z for z in self.zetas],
            "sigma2s": list(self.sigma2s),
            "fs": list(self.fs),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CvGrid":
        zetas = tuple(np.inf if z in ("inf", None) else float(z) for z in obj["zetas"])
        return cls(zetas, tuple(float(s) for s in obj["sigma2s"]),
                   tuple(float(f) for f in obj["fs"]))


@dataclass(frozen=True)
class CvOptions:
    q: int = 10
    use_spatial_prediction: bool = True
    prediction_k: int = 15
    qmc_samples: int = 1024
    qmc_shifts: int = 4
    clip_epsilon: float = 1e-6
    seed: int = 0
    n_jobs: int = 1
    max_eval: int | None = None  # cap on scored held-out points per fold


def _stratified_halves(labels, rng):
    """Random half/half split, stratified by label."""
    fold_a = []
    for value in (0, 1):
        idx = np.flatnonzero(labels == value)
        idx = rng.permutation(idx)
        fold_a.append(idx[: idx.size // 2 + (idx.size % 2) * int(rng.integers(2))])
    a = np.sort(np.concatenate(fold_a))
    mask = np.zeros(labels.size, dtype=bool)
    mask[a] = True
    return a, np.flatnonzero(~mask)


def estimate_spatial_params(data, grid: CvGrid, params: ForestParams,
                            options: CvOptions = CvOptions()):
    """2-fold CV over the (zeta, sigma2, f) grid against misclassification.

    For each zeta a forest is fitted per fold; each (sigma2, phi) cell is
    then scored by predicting the held-out fold (full spatial prediction
    by default, marginal mean when ``use_spatial_prediction`` is off).
    Ties break toward smaller sigma2, then larger f, then larger zeta.
    Returns (SpatialParams, table rows).
    """
    from . import prediction as pred_mod  # local import: prediction depends on link
    from .core import SpatialDataset
    from .covariance import CovarianceSpec

    n = data.n
    if n < 4 * params.t_c:
        raise TooFewSamples(f"need n >= 4*t_c = {4 * params.t_c}, got {n}")
    rng = np.random.default_rng(options.seed)
    idx_a, idx_b = _stratified_halves(data.labels, rng)
    folds = (idx_a, idx_b)

    def eval_subset(held):
        # the same scored subset is reused for every grid cell
        if options.max_eval is None or held.size <= options.max_eval:
            return held
        pick = rng.choice(held.size, size=options.max_eval, replace=False)
        return held[np.sort(pick)]

    eval_b, eval_a = eval_subset(idx_b), eval_subset(idx_a)

    table = []
    best_key = None
    best_cell = None
    for zeta in grid.zetas:
        wspec = WorkingCorrelationSpec(zeta, q=options.q)
        fold_forests = []
        for fi, fit_idx in enumerate(folds):
            fold_params = ForestParams(
                n_tree=params.n_tree, t_c=params.t_c, m_try=params.m_try,
                subsample_fraction=params.subsample_fraction,
                max_leaves=params.max_leaves,
                seed=params.seed + fi, n_jobs=options.n_jobs,
            )
            fold_forests.append(
                fit_forest(data.covariates[fit_idx], data.labels[fit_idx],
                           data.locations[fit_idx], wspec, fold_params)
            )
        for sigma2 in grid.sigma2s:
            for f in grid.fs:
                phi = grid.phi_of(f)
                errs = []
                for fi, (fit_idx, held_idx) in enumerate(((idx_a, eval_b), (idx_b, eval_a))):
                    forest = fold_forests[fi]
                    if options.use_spatial_prediction:
                        spar = SpatialParams(sigma2, phi, zeta)
                        cov = CovarianceSpec("exponential", sigma2, phi)
                        model = pred_mod.RfgpModel(
                            forest, spar, cov, clip_epsilon=options.clip_epsilon
                        )
                        fit_data = SpatialDataset(
                            data.locations[fit_idx], data.covariates[fit_idx],
                            data.labels[fit_idx],
                        )
                        p_hat = pred_mod.predict_batch(
                            model, fit_data,
                            data.covariates[held_idx], data.locations[held_idx],
                            k=options.prediction_k,
                            qmc={"samples": options.qmc_samples,
                                 "shifts": options.qmc_shifts,
                                 "seed": options.seed},
                            n_jobs=options.n_jobs,
                        )[0]
                    else:
                        raw = predict_mean_batch(forest, data.covariates[held_idx])
                        p_hat = np.clip(raw, 0.0, 1.0)
                    errs.append(float(np.mean((p_hat >= 0.5) != data.labels[held_idx])))
                mean_err = 0.5 * (errs[0] + errs[1])
                table.append({
                    "zeta": zeta, "sigma2": sigma2, "phi": phi, "f": f,
                    "fold1_err": errs[0], "fold2_err": errs[1], "mean_err": mean_err,
                })
                key = (mean_err, sigma2, -f, -zeta)
                if best_key is None or key < best_key:
                    best_key = key
                    best_cell = (sigma2, phi, zeta)
    sigma2, phi, zeta = best_cell
    return SpatialParams(sigma2, phi, zeta), table
