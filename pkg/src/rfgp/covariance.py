"""Spatial kernels (exponential and half-integer Matern), dense covariance
assembly, and exact GP sampling for simulation.

Two decay conventions coexist on purpose and are never converted silently:

* ``exponential``: C(d) = sigma2 * exp(-phi * d)
* ``matern``:      C(d) = sigma2 * closed_form_nu(sqrt(2) * phi * d)

so matern with nu = 0.5 equals exponential with decay sqrt(2) * phi.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .errors import CholeskyFailure, DuplicateLocation, InvalidSmoothness

__all__ = ["CovarianceSpec", "kernel", "covariance_matrix", "sample_gp"]

_SUPPORTED_NU = (0.5, 1.5, 2.5)


@dataclass(frozen=True)
class CovarianceSpec:
    """Kernel family plus (sigma2, phi[, nu])."""

    family: str  # "exponential" | "matern"
    sigma2: float
    phi: float
    nu: float | None = None

    def __post_init__(self):
        if self.family not in ("exponential", "matern"):
            raise ValueError(f"unknown kernel family {self.family!r}")
        if self.sigma2 <= 0:
            raise ValueError("sigma2 must be positive")
        if self.phi <= 0:
            raise ValueError("phi must be positive")
        if self.family == "matern":
            if self.nu not in _SUPPORTED_NU:
                raise InvalidSmoothness(
                    f"nu must be one of {_SUPPORTED_NU}, got {self.nu}"
                )

    def to_json(self) -> dict:
        out = {"family": self.family, "sigma2": self.sigma2, "phi": self.phi}
        if self.family == "matern":
            out["nu"] = self.nu
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "CovarianceSpec":
        return cls(obj["family"], obj["sigma2"], obj["phi"], obj.get("nu"))


def kernel(spec: CovarianceSpec, d):
    """Covariance at distance(s) ``d`` (scalar or array, d >= 0)."""
    d = np.asarray(d, dtype=float)
    if np.any(d < 0) or not np.isfinite(d).all():
        raise ValueError("distances must be finite and nonnegative")
    if spec.family == "exponential":
        return spec.sigma2 * np.exp(-spec.phi * d)
    x = np.sqrt(2.0) * spec.phi * d
    if spec.nu == 0.5:
        shape = np.exp(-x)
    elif spec.nu == 1.5:
        shape = (1.0 + x) * np.exp(-x)
    elif spec.nu == 2.5:
        shape = (1.0 + x + x * x / 3.0) * np.exp(-x)
    else:  # pragma: no cover - guarded in the constructor
        raise InvalidSmoothness(f"unsupported nu {spec.nu}")
    return spec.sigma2 * shape


def covariance_matrix(spec: CovarianceSpec, locs) -> np.ndarray:
    """Dense covariance matrix over a location set (no duplicates)."""
    locs = np.atleast_2d(np.asarray(locs, dtype=float))
    dists = cdist(locs, locs)
    n = locs.shape[0]
    if n > 1:
        off = dists.copy()
        np.fill_diagonal(off, np.inf)
        if np.min(off) == 0.0:
            raise DuplicateLocation("duplicate locations give a singular matrix")
    return kernel(spec, dists)


def _cholesky_with_jitter(C: np.ndarray, sigma2: float) -> np.ndarray:
    try:
        return np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        pass
    # One jittered retry; a second failure is a real error.
    try:
        return np.linalg.cholesky(C + 1e-10 * sigma2 * np.eye(C.shape[0]))
    except np.linalg.LinAlgError as exc:
        raise CholeskyFailure("covariance matrix is numerically singular") from exc


def sample_gp(spec: CovarianceSpec, locs, seed: int) -> np.ndarray:
    """Draw one GP realization: L z with L the lower Cholesky of C(spec)."""
    C = covariance_matrix(spec, locs)
    L = _cholesky_with_jitter(C, spec.sigma2)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(C.shape[0])
    return L @ z
