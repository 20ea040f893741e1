"""Ensemble of GLS trees with per-tree subsampling.

Each tree draws its own subsample without replacement (duplicated
locations would make GP correlation matrices singular), rebuilds the
working precision factor on that subsample, and grows with a seed derived
from (master_seed, tree_index) so the fit is identical regardless of how
many workers run.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np
from joblib import Parallel, delayed

from .errors import TooFewSamples
from .nngp import WorkingCorrelationSpec, restrict_factor
from .tree import GlsTree, GrowParams, grow_tree

__all__ = ["ForestParams", "Forest", "fit_forest", "predict_mean", "predict_mean_batch"]


@dataclass(frozen=True)
class ForestParams:
    n_tree: int = 100
    t_c: int = 20
    m_try: int | None = None  # default max(1, D // 3)
    subsample_fraction: float = 0.5
    max_leaves: int | None = None
    seed: int = 0
    n_jobs: int = 1

    def __post_init__(self):
        if self.n_tree < 1:
            raise ValueError("n_tree must be at least 1")
        if not 0 < self.subsample_fraction <= 1:
            raise ValueError("subsample_fraction must lie in (0, 1]")
        if self.t_c < 1:
            raise ValueError("t_c must be at least 1")

    def to_json(self) -> dict:
        return {
            "n_tree": self.n_tree,
            "t_c": self.t_c,
            "m_try": self.m_try,
            "subsample_fraction": self.subsample_fraction,
            "max_leaves": self.max_leaves,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ForestParams":
        return cls(
            n_tree=int(obj["n_tree"]),
            t_c=int(obj["t_c"]),
            m_try=obj.get("m_try"),
            subsample_fraction=float(obj["subsample_fraction"]),
            max_leaves=obj.get("max_leaves"),
            seed=int(obj["seed"]),
        )


@dataclass
class Forest:
    trees: list
    params: ForestParams
    working_spec: WorkingCorrelationSpec

    def to_json(self) -> dict:
        return {
            "trees": [t.to_json() for t in self.trees],
            "params": self.params.to_json(),
            "working_spec": self.working_spec.to_json(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Forest":
        return cls(
            trees=[GlsTree.from_json(t) for t in obj["trees"]],
            params=ForestParams.from_json(obj["params"]),
            working_spec=WorkingCorrelationSpec.from_json(obj["working_spec"]),
        )

    def digest(self) -> str:
        payload = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()


def _tree_seed(master_seed: int, b: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([master_seed & 0xFFFFFFFF, b]))


def _fit_one_tree(X, y, locs, working_spec, params, n_sub, b):
    rng = _tree_seed(params.seed, b)
    n = y.size
    subsample = np.sort(rng.choice(n, size=n_sub, replace=False))
    factor = None
    if not working_spec.identity_flag:
        factor = restrict_factor(working_spec, subsample, locs)
    grow = GrowParams(
        t_c=params.t_c,
        m_try=params.m_try,
        max_leaves=params.max_leaves,
        seed=params.seed,
    )
    tree = grow_tree(X[subsample], y[subsample], factor, grow, rng=rng)
    tree.subsample = subsample
    tree.seed = b
    return tree


def fit_forest(X, y, locs, working_spec: WorkingCorrelationSpec, params: ForestParams) -> Forest:
    """Fit the ensemble on covariates X, labels/targets y and locations."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    locs = np.atleast_2d(np.asarray(locs, dtype=float))
    n = y.size
    n_sub = int(np.ceil(params.subsample_fraction * n))
    if n_sub < 2 * params.t_c:
        raise TooFewSamples(
            f"subsample size {n_sub} below 2*t_c = {2 * params.t_c}"
        )
    if params.n_jobs == 1:
        trees = [
            _fit_one_tree(X, y, locs, working_spec, params, n_sub, b)
            for b in range(params.n_tree)
        ]
    else:
        trees = Parallel(n_jobs=params.n_jobs)(
            delayed(_fit_one_tree)(X, y, locs, working_spec, params, n_sub, b)
            for b in range(params.n_tree)
        )
    return Forest(trees, params, working_spec)


def fit_forest_dataset(data, working_spec: WorkingCorrelationSpec, params: ForestParams) -> Forest:
    return fit_forest(data.covariates, data.labels, data.locations, working_spec, params)


def predict_mean(forest: Forest, x) -> float:
    """Arithmetic mean of the trees' leaf values; deliberately unclipped."""
    total = 0.0
    for tree in forest.trees:
        total += tree.predict(x)
    return total / len(forest.trees)


def predict_mean_batch(forest: Forest, xs) -> np.ndarray:
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    if xs.shape[0] == 0:
        return np.empty(0)
    acc = np.zeros(xs.shape[0])
    for tree in forest.trees:
        acc += tree.predict_batch(xs)
    return acc / len(forest.trees)
