"""Ground-truth data generation, baseline methods and the benchmark harness.

Data follow the probit spatial mixed model: locations uniform on the unit
square, covariates uniform on [0,1]^5, random effects from an exponential
GP with C(d) = sigma2 * exp(-phi d) and phi = 3 / (sqrt(2) f), labels
Bernoulli(Phi(m(X) + w)).  The covariate effect is a rescaled Friedman
function.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np
from joblib import Parallel, delayed
from scipy.spatial.distance import cdist

from .core import SpatialDataset, mise, misclassification, relative_mse
from .covariance import CovarianceSpec, sample_gp
from .errors import OutOfDomain
from .forest import ForestParams, fit_forest, predict_mean_batch
from .link import (
    CvGrid,
    CvOptions,
    estimate_spatial_params,
    marginal_link,
    phi_cdf,
)
from .nngp import WorkingCorrelationSpec
from .prediction import RfgpModel, predict_batch

__all__ = [
    "SimulationConfig",
    "friedman_m",
    "generate_dataset",
    "fit_baseline",
    "run_benchmark",
    "repeated_split_benchmark",
]

BASELINES = ("RF", "RF_Loc", "RF_Sp", "RF_GP")


def friedman_m(x) -> float:
    """Rescaled Friedman function on [0,1]^5."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != 5 or np.any(x < 0) or np.any(x > 1):
        raise OutOfDomain("friedman_m expects points in [0,1]^5")
    return (
        10.0 * np.sin(np.pi * x[..., 0] * x[..., 1])
        + 20.0 * (x[..., 2] - 0.5) ** 2
        + 10.0 * x[..., 3]
        + 5.0 * x[..., 4]
        - 14.4
    ) / 5.0


@dataclass(frozen=True)
class SimulationConfig:
    n: int = 1000
    sigma2: float = 1.0
    f: float = 0.75
    seed: int = 0
    test_fraction: float = 0.2
    replicates: int = 20

    def __post_init__(self):
        if self.n < 50:
            raise ValueError("n must be at least 50")
        if not 0 < self.test_fraction < 1:
            raise ValueError("test_fraction must lie in (0, 1)")

    @property
    def phi(self) -> float:
        return 3.0 / (np.sqrt(2.0) * self.f)


@dataclass
class SimulationTruth:
    m_values: np.ndarray
    w_values: np.ndarray
    p_values: np.ndarray  # Phi(m + w), conditional on the random effect
    marginal_p: np.ndarray  # Phi(m / sqrt(1 + sigma2))


def generate_dataset(config: SimulationConfig):
    """Simulate one replicate; returns (train, test, train_truth, test_truth)."""
    rng = np.random.default_rng(config.seed)
    n = config.n
    locs = rng.uniform(size=(n, 2))
    X = rng.uniform(size=(n, 5))
    m = friedman_m(X)
    if config.sigma2 > 0:
        spec = CovarianceSpec("exponential", config.sigma2, config.phi)
        w = sample_gp(spec, locs, seed=int(rng.integers(2**31)))
    else:
        w = np.zeros(n)
    p = phi_cdf(m + w)
    y = (rng.uniform(size=n) < p).astype(np.int64)
    marg = marginal_link(m, config.sigma2)

    n_test = int(round(config.test_fraction * n))
    perm = rng.permutation(n)
    test_idx, train_idx = perm[:n_test], perm[n_test:]

    def subset(idx):
        ds = SpatialDataset(locs[idx], X[idx], y[idx])
        truth = SimulationTruth(m[idx], w[idx], p[idx], marg[idx])
        return ds, truth

    train, train_truth = subset(np.sort(train_idx))
    test, test_truth = subset(np.sort(test_idx))
    return train, test, train_truth, test_truth


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------

@dataclass
class BaselineFit:
    """Probability evaluator for one fitted method.

    ``predict(X, s)`` returns estimates of E(Y | X, s) at test points;
    ``mean_estimate(X)`` the marginal mean p(X) where the method offers
    one (RF and RF_GP only).
    """

    kind: str
    _predict: object
    _mean: object = None
    _effect: object = None

    def predict(self, X, s):
        return self._predict(np.atleast_2d(X), np.atleast_2d(s))

    def mean_estimate(self, X):
        if self._mean is None:
            raise ValueError(f"{self.kind} offers no marginal mean estimate")
        return self._mean(np.atleast_2d(X))

    def effect_estimate(self, X):
        if self._effect is None:
            raise ValueError(f"{self.kind} offers no covariate-effect estimate")
        return self._effect(np.atleast_2d(X))


def _identity_spec(q: int = 10) -> WorkingCorrelationSpec:
    return WorkingCorrelationSpec(np.inf, q=q)


def fit_baseline(method: str, train: SpatialDataset, params: ForestParams,
                 rfgp_grid: CvGrid | None = None,
                 rfgp_options: CvOptions | None = None) -> BaselineFit:
    """Fit one of RF, RF_Loc, RF_Sp (all classical, Q = I) or the full RF_GP."""
    X, y, locs = train.covariates, train.labels, train.locations
    if method == "RF":
        forest = fit_forest(X, y, locs, _identity_spec(), params)

        def mean_fn(Xq):
            return np.clip(predict_mean_batch(forest, Xq), 0.0, 1.0)

        # the marginal model carries no location information
        return BaselineFit("RF", lambda Xq, sq: mean_fn(Xq), mean_fn)

    if method == "RF_Loc":
        feats = np.hstack([X, locs])
        forest = fit_forest(feats, y, locs, _identity_spec(), params)

        def predict_loc(Xq, sq):
            return np.clip(predict_mean_batch(forest, np.hstack([Xq, sq])), 0.0, 1.0)

        return BaselineFit("RF_Loc", predict_loc)

    if method == "RF_Sp":
        anchors = locs.copy()
        feats = np.hstack([X, cdist(locs, anchors)])
        forest = fit_forest(feats, y, locs, _identity_spec(), params)

        def predict_sp(Xq, sq):
            return np.clip(
                predict_mean_batch(forest, np.hstack([Xq, cdist(sq, anchors)])), 0.0, 1.0
            )

        return BaselineFit("RF_Sp", predict_sp)

    if method == "RF_GP":
        grid = rfgp_grid or CvGrid()
        options = rfgp_options or CvOptions(seed=params.seed)
        spar, _ = estimate_spatial_params(train, grid, params, options)
        forest = fit_forest(X, y, locs, WorkingCorrelationSpec(spar.zeta, q=options.q), params)
        cov = CovarianceSpec("exponential", spar.sigma2, spar.phi) if spar.sigma2 > 0 else None
        model = RfgpModel(forest, spar, cov, clip_epsilon=options.clip_epsilon)

        def predict_gp(Xq, sq):
            return predict_batch(
                model, train, Xq, sq, k=options.prediction_k,
                qmc={"samples": options.qmc_samples, "shifts": options.qmc_shifts,
                     "seed": options.seed},
                n_jobs=options.n_jobs,
            )[0]

        def mean_gp(Xq):
            return np.clip(predict_mean_batch(forest, Xq), 0.0, 1.0)

        def effect_gp(Xq):
            return model.effect_estimator.effect_batch(Xq)

        return BaselineFit("RF_GP", predict_gp, mean_gp, effect_gp)

    raise ValueError(f"unknown baseline {method!r}")


# ---------------------------------------------------------------------------
# Benchmark harness
# ---------------------------------------------------------------------------

def _run_replicate(config, methods, params, grid, options, n_probe):
    train, test, _, test_truth = generate_dataset(config)
    probe_rng = np.random.default_rng(config.seed + 900_000)
    probes = probe_rng.uniform(size=(n_probe, 5))
    probe_m = friedman_m(probes)
    probe_p = marginal_link(probe_m, config.sigma2)
    rows = []
    for method in methods:
        try:
            fit = fit_baseline(method, train, params, grid, options)
            p_hat = fit.predict(test.covariates, test.locations)
            rows.append((method, "RelativeMSE",
                         relative_mse(p_hat, test_truth.p_values).value))
            rows.append((method, "Misclassification",
                         misclassification(p_hat, test.labels).value))
            if method in ("RF", "RF_GP"):
                rows.append((method, "MISE_p",
                             mise(fit.mean_estimate(probes), probe_p).value))
                if method == "RF":
                    # plain RF has no spatial-variance estimate: invert at sigma2 = 0
                    m_hat = _clipped_quantile(fit.mean_estimate(probes))
                else:
                    m_hat = fit.effect_estimate(probes)
                rows.append((method, "MISE_m", mise(m_hat, probe_m).value))
        except Exception as exc:  # partial failures recorded, run continues
            rows.append((method, "error", float("nan")))
    return rows


def _clipped_quantile(p, eps: float = 1e-6):
    from .link import invert_link

    return invert_link(p, 0.0, eps)


def _one_split(data, methods, params, grid, options, test_fraction, seed):
    rng = np.random.default_rng(seed)
    n_test = int(round(test_fraction * data.n))
    perm = rng.permutation(data.n)
    test_idx, train_idx = np.sort(perm[:n_test]), np.sort(perm[n_test:])
    train = SpatialDataset(data.locations[train_idx], data.covariates[train_idx],
                           data.labels[train_idx])
    test = SpatialDataset(data.locations[test_idx], data.covariates[test_idx],
                          data.labels[test_idx])
    out = {}
    for method in methods:
        fit = fit_baseline(method, train, params, grid, options)
        p_hat = fit.predict(test.covariates, test.locations)
        out[method] = misclassification(p_hat, test.labels).value
    return out


def repeated_split_benchmark(data: SpatialDataset, methods, params: ForestParams | None = None,
                             n_splits: int = 100, test_fraction: float = 0.2, seed: int = 0,
                             grid: CvGrid | None = None, options: CvOptions | None = None,
                             n_jobs: int = 1):
    """Repeated random test/train splits on a real dataset.

    Each split holds out ``test_fraction`` of the rows, fits every method
    on the rest and scores test misclassification.  Returns (medians per
    method, long rows of (split, method, error)).
    """
    params = params or ForestParams()
    if n_jobs == 1:
        results = [
            _one_split(data, methods, params, grid, options, test_fraction, seed + r)
            for r in range(n_splits)
        ]
    else:
        results = Parallel(n_jobs=n_jobs)(
            delayed(_one_split)(data, methods, params, grid, options, test_fraction, seed + r)
            for r in range(n_splits)
        )
    long_rows = [(r, m, res[m]) for r, res in enumerate(results) for m in methods]
    medians = {
        m: float(np.median([res[m] for res in results])) for m in methods
    }
    return medians, long_rows


def run_benchmark(configs, methods, out_dir, params: ForestParams | None = None,
                  grid: CvGrid | None = None, options: CvOptions | None = None,
                  n_probe: int = 2000, n_jobs: int = 1):
    """Run all (config, replicate, method) cells; write long and median CSVs."""
    params = params or ForestParams()
    os.makedirs(out_dir, exist_ok=True)
    tasks = []
    for config in configs:
        for r in range(config.replicates):
            rep_config = SimulationConfig(
                n=config.n, sigma2=config.sigma2, f=config.f,
                seed=config.seed + r, test_fraction=config.test_fraction,
                replicates=1,
            )
            tasks.append((config, r, rep_config))
    opt = options or CvOptions(seed=params.seed)
    if n_jobs == 1:
        results = [
            _run_replicate(rc, methods, params, grid, opt, n_probe)
            for (_, _, rc) in tasks
        ]
    else:
        results = Parallel(n_jobs=n_jobs)(
            delayed(_run_replicate)(rc, methods, params, grid, opt, n_probe)
            for (_, _, rc) in tasks
        )

    long_rows = []
    for (config, r, _), rows in zip(tasks, results):
        for method, metric, value in rows:
            long_rows.append({
                "replicate": r, "method": method, "metric": metric,
                "sigma2": config.sigma2, "f": config.f, "value": value,
            })
    long_path = os.path.join(out_dir, "long_results.csv")
    with open(long_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["replicate", "method", "metric", "sigma2", "f", "value"])
        writer.writeheader()
        writer.writerows(long_rows)

    medians = {}
    for row in long_rows:
        if row["metric"] == "error" or not np.isfinite(row["value"]):
            continue
        key = (row["method"], row["metric"], row["sigma2"], row["f"])
        medians.setdefault(key, []).append(row["value"])
    summary_path = os.path.join(out_dir, "summary_medians.csv")
    with open(summary_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["method", "metric", "sigma2", "f", "median", "n_replicates"])
        writer.writeheader()
        for (method, metric, sigma2, f), values in sorted(medians.items()):
            writer.writerow({
                "method": method, "metric": metric, "sigma2": sigma2, "f": f,
                "median": float(np.median(values)), "n_replicates": len(values),
            })
    return long_path, summary_path
