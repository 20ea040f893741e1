"""Sparse Cholesky factor of the working precision matrix via
nearest-neighbor Gaussian-process conditioning.

The working correlation is the unit-variance exponential family
R_ij = exp(-zeta * d_ij).  Row i of the lower-triangular factor V carries

    rho_i = (1, -C_{i,N[i]} C_{N[i],N[i]}^{-1})
            / sqrt(1 - C_{i,N[i]} C_{N[i],N[i]}^{-1} C_{N[i],i})

at positions (i, N[i]), where N[i] are the q nearest already-ordered
neighbors.  The induced precision is Q = V^T V.  zeta = inf is an exact
identity factor (Q = I), not a large-decay stand-in.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.spatial.distance import cdist

from .errors import DuplicateLocation, LengthMismatch, SingularNeighborSystem

__all__ = [
    "WorkingCorrelationSpec",
    "NeighborOrdering",
    "SparseCholeskyFactor",
    "order_locations",
    "build_factor",
    "apply_Q",
    "check_diagonal_dominance",
    "leaf_value_bound",
    "restrict_factor",
]

DEFAULT_NEIGHBORS = 10


@dataclass(frozen=True)
class WorkingCorrelationSpec:
    """Exponential working correlation with decay zeta; zeta = inf means Q = I."""

    zeta: float
    q: int = DEFAULT_NEIGHBORS

    def __post_init__(self):
        if not (self.zeta > 0):
            raise ValueError("zeta must be positive (use inf for identity)")
        if self.q < 1:
            raise ValueError("q must be at least 1")

    @property
    def identity_flag(self) -> bool:
        return np.isinf(self.zeta)

    def to_json(self) -> dict:
        return {"zeta": "inf" if self.identity_flag else self.zeta, "q": self.q}

    @classmethod
    def from_json(cls, obj: dict) -> "WorkingCorrelationSpec":
        zeta = obj["zeta"]
        return cls(np.inf if zeta in ("inf", None) else float(zeta), int(obj.get("q", DEFAULT_NEIGHBORS)))


@dataclass(frozen=True)
class NeighborOrdering:
    """Permutation of sample indices plus per-position neighbor sets.

    ``permutation[i]`` is the original index of the i-th ordered location;
    ``neighbor_sets[i]`` holds ordered-position indices in {0..i-1}, sorted
    by increasing distance (ties to the smaller index).
    """

    permutation: np.ndarray
    neighbor_sets: tuple


def order_locations(locs, q: int = DEFAULT_NEIGHBORS) -> NeighborOrdering:
    """Coordinate-sum ordering with exact nearest-neighbor search."""
    locs = np.atleast_2d(np.asarray(locs, dtype=float))
    n = locs.shape[0]
    dists = cdist(locs, locs)
    if n > 1:
        off = dists.copy()
        np.fill_diagonal(off, np.inf)
        if np.min(off) == 0.0:
            raise DuplicateLocation("duplicate locations")
    sums = locs.sum(axis=1)
    perm = np.lexsort((np.arange(n), locs[:, 0], sums))
    ordered = locs[perm]
    odists = cdist(ordered, ordered)
    sets = []
    for i in range(n):
        m = min(q, i)
        if m == 0:
            sets.append(np.empty(0, dtype=np.int64))
            continue
        cand = odists[i, :i]
        # stable argsort on (distance, index) -> ties break to smaller index
        order = np.lexsort((np.arange(i), cand))
        sets.append(order[:m].astype(np.int64))
    return NeighborOrdering(perm.astype(np.int64), tuple(sets))


class SparseCholeskyFactor:
    """Row-sparse lower-triangular V with Q = V^T V, in the ordered frame.

    ``permutation`` maps ordered positions back to the caller's sample order:
    vectors passed to :func:`apply_Q` are in original order and permuted
    internally, so Q acts on the original indexing.
    """

    def __init__(self, n, q, rows, permutation):
        self.n = n
        self.q = q
        self.rows = rows  # list of (indices, values) per ordered row
        self.permutation = np.asarray(permutation, dtype=np.int64)
        data, ri, ci = [], [], []
        for i, (idx, vals) in enumerate(rows):
            ri.extend([i] * len(idx))
            ci.extend(idx)
            data.extend(vals)
        V = sp.csr_matrix((data, (ri, ci)), shape=(n, n))
        self._V = V
        self._Q = (V.T @ V).tocsr()
        inv = np.empty(n, dtype=np.int64)
        inv[self.permutation] = np.arange(n)
        self._inverse_perm = inv

    @property
    def V(self) -> sp.csr_matrix:
        return self._V

    def Q_ordered(self) -> sp.csr_matrix:
        """Precision matrix in the ordered frame."""
        return self._Q

    def Q_original(self) -> sp.csr_matrix:
        """Precision matrix in the caller's original sample order."""
        P = sp.csr_matrix(
            (np.ones(self.n), (self.permutation, np.arange(self.n))),
            shape=(self.n, self.n),
        )
        # row/col permute: Q_orig[a,b] = Q_ord[pos(a), pos(b)]
        return (P @ self._Q @ P.T).tocsr()

    def dense_Q(self) -> np.ndarray:
        return self.Q_original().toarray()


def build_factor(spec: WorkingCorrelationSpec, ordering: NeighborOrdering, locs) -> SparseCholeskyFactor:
    """NNGP factor of the working correlation on the given ordering."""
    locs = np.atleast_2d(np.asarray(locs, dtype=float))
    n = locs.shape[0]
    if spec.identity_flag:
        rows = [(np.array([i]), np.array([1.0])) for i in range(n)]
        return SparseCholeskyFactor(n, spec.q, rows, ordering.permutation)
    ordered = locs[ordering.permutation]
    rows = []
    for i in range(n):
        nbrs = ordering.neighbor_sets[i]
        if len(nbrs) == 0:
            rows.append((np.array([i]), np.array([1.0])))
            continue
        pts = ordered[nbrs]
        c = np.exp(-spec.zeta * np.linalg.norm(ordered[i] - pts, axis=1))
        C_nn = np.exp(-spec.zeta * cdist(pts, pts))
        try:
            a = np.linalg.solve(C_nn, c)
        except np.linalg.LinAlgError as exc:
            raise SingularNeighborSystem(f"neighbor system singular at row {i}") from exc
        f = 1.0 - float(c @ a)
        if f <= 0:
            raise SingularNeighborSystem(f"nonpositive conditional variance at row {i}")
        d = 1.0 / np.sqrt(f)
        rows.append((np.concatenate(([i], nbrs)), np.concatenate(([d], -a * d))))
    return SparseCholeskyFactor(n, spec.q, rows, ordering.permutation)


def apply_Q(factor: SparseCholeskyFactor, v) -> np.ndarray:
    """Compute Q v (original sample order) in O(n q) via V^T (V v)."""
    v = np.asarray(v, dtype=float)
    if v.shape[0] != factor.n:
        raise LengthMismatch("vector length does not match factor size")
    v_ord = v[factor.permutation]
    out_ord = factor.V.T @ (factor.V @ v_ord)
    out = np.empty_like(out_ord)
    out[factor.permutation] = out_ord
    return out


def check_diagonal_dominance(factor: SparseCholeskyFactor):
    """Minimum dominance margin Q_dd - sum_{l != d} |Q_dl| over rows.

    Returns (dominant, xi).  Failure is informational: dominance is a
    sufficient condition for the leaf-value bound, not a runtime requirement.
    """
    Q = factor.Q_ordered()
    diag = Q.diagonal()
    abs_row_sums = np.asarray(np.abs(Q).sum(axis=1)).ravel()
    margins = 2.0 * diag - abs_row_sums  # diag entries are positive
    xi = float(margins.min())
    return xi > 0.0, xi


def leaf_value_bound(factor: SparseCholeskyFactor) -> float:
    """Upper bound on |GLS leaf values| for binary labels when Q is
    diagonally dominant: (max_d sum_l |Q_dl|) / xi.  Returns inf when the
    dominance margin is nonpositive."""
    dominant, xi = check_diagonal_dominance(factor)
    if not dominant:
        return np.inf
    Q = factor.Q_ordered()
    row_sums = np.asarray(np.abs(Q).sum(axis=1)).ravel()
    return float(row_sums.max()) / xi


def restrict_factor(spec: WorkingCorrelationSpec, subsample, locs) -> SparseCholeskyFactor:
    """Rebuild (not slice) the factor on a subsample's locations."""
    subsample = np.asarray(subsample, dtype=np.int64)
    if subsample.size == 0:
        raise ValueError("subsample must be nonempty")
    if len(np.unique(subsample)) != subsample.size:
        raise ValueError("subsample contains duplicate indices")
    locs = np.atleast_2d(np.asarray(locs, dtype=float))[subsample]
    ordering = order_locations(locs, spec.q)
    return build_factor(spec, ordering, locs)
