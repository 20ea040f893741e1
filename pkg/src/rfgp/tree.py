"""Single regression tree grown by the GLS split criterion.

Node splits maximize the decrease of the global quadratic-form loss

    (Y - Z beta)^T Q (Y - Z beta),   beta = (Z^T Q Z)^{-1} Z^T Q Y,

over candidate cuts, where Z is the global leaf-membership matrix.  With
Q = I this reduces exactly to the classical Gini / variance-reduction
criteria, which are also provided here as local computations and serve as
test oracles.

Candidate cutoffs are midpoints between consecutive distinct sorted
in-node covariate values; left children take values <= c.  Growth is
best-first: every leaf's best cut is re-evaluated after each split (the
GLS criterion is global, so a split elsewhere perturbs all values) and
the largest positive criterion wins.  Ties break to the smaller
coordinate index, then the smaller cutoff, then the smaller leaf id.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_factor, cho_solve

from .errors import EmptyChild, EmptyNode, SingularSystem, TooFewSamples
from .nngp import SparseCholeskyFactor

__all__ = [
    "Cut",
    "MembershipMatrix",
    "GrowParams",
    "GlsTree",
    "gini_impurity",
    "classification_split_criterion",
    "regression_split_criterion",
    "gls_beta",
    "gls_split_criterion",
    "grow_tree",
    "predict_tree",
]

# criterion values within this absolute tolerance count as tied, so the
# GLS path (quadratic-form arithmetic) and the Gini path (exact counts)
# resolve ties identically
_TIE_TOL = 1e-10


@dataclass(frozen=True)
class Cut:
    d: int
    c: float


@dataclass(frozen=True)
class MembershipMatrix:
    """Leaf id per in-bag sample plus the number of leaves."""

    assignment: np.ndarray
    leaf_count: int

    def __post_init__(self):
        a = np.asarray(self.assignment, dtype=np.int64)
        object.__setattr__(self, "assignment", a)
        counts = np.bincount(a, minlength=self.leaf_count)
        if len(counts) != self.leaf_count or (counts == 0).any():
            raise EmptyNode("every leaf must contain at least one sample")


@dataclass(frozen=True)
class GrowParams:
    t_c: int = 20
    m_try: int | None = None  # default max(1, D // 3)
    max_leaves: int | None = None
    seed: int = 0
    criterion: str = "gls"  # "gls" | "gini" (local-oracle growth, Q ignored)


# ---------------------------------------------------------------------------
# Local split criteria (oracles and Q = I special cases)
# ---------------------------------------------------------------------------

def gini_impurity(labels) -> float:
    """2 p (1 - p) with p the fraction of ones in the node."""
    y = np.asarray(labels, dtype=float)
    if y.size == 0:
        raise EmptyNode("gini impurity of an empty node")
    p = y.mean()
    return float(2.0 * p * (1.0 - p))


def _split_masks(X, cut: Cut):
    x = np.asarray(X, dtype=float)
    left = x[:, cut.d] <= cut.c
    if not left.any() or left.all():
        raise EmptyChild(f"cut {cut} produces an empty child")
    return left


def classification_split_criterion(X, labels, cut: Cut) -> float:
    """Gini impurity decrease I(T) - (nL/nT) I(L) - (nR/nT) I(R)."""
    y = np.asarray(labels, dtype=float)
    left = _split_masks(X, cut)
    n = y.size
    n_l = int(left.sum())
    return float(
        gini_impurity(y)
        - (n_l / n) * gini_impurity(y[left])
        - ((n - n_l) / n) * gini_impurity(y[~left])
    )


def regression_split_criterion(X, labels, cut: Cut) -> float:
    """Per-node normalized variance reduction of a regression-tree split."""
    y = np.asarray(labels, dtype=float)
    left = _split_masks(X, cut)

    def sse(v):
        return float(np.sum((v - v.mean()) ** 2))

    return (sse(y) - sse(y[left]) - sse(y[~left])) / y.size


# ---------------------------------------------------------------------------
# Global GLS quantities
# ---------------------------------------------------------------------------

def _as_sparse_Q(Q_or_factor, n: int) -> sp.csc_matrix:
    if Q_or_factor is None:
        return sp.identity(n, format="csc")
    if isinstance(Q_or_factor, SparseCholeskyFactor):
        return Q_or_factor.Q_original().tocsc()
    return sp.csc_matrix(Q_or_factor)


def _normal_equations(Q: sp.spmatrix, assignment: np.ndarray, K: int, y: np.ndarray):
    n = y.size
    Z = sp.csr_matrix(
        (np.ones(n), (np.arange(n), assignment)), shape=(n, K)
    )
    A = (Z.T @ (Q @ Z)).toarray()
    b = Z.T @ (Q @ y)
    return A, np.asarray(b).ravel()


def gls_beta(Q_or_factor, membership: MembershipMatrix, labels) -> np.ndarray:
    """Exact GLS solve (Z^T Q Z)^{-1} Z^T Q Y over the current leaves."""
    y = np.asarray(labels, dtype=float)
    Q = _as_sparse_Q(Q_or_factor, y.size)
    A, b = _normal_equations(Q, membership.assignment, membership.leaf_count, y)
    try:
        return np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem("Z^T Q Z is singular") from exc


def _gls_loss(Q, assignment, K, y):
    A, b = _normal_equations(Q, assignment, K, y)
    try:
        beta = np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem("Z^T Q Z is singular") from exc
    r = y - beta[assignment]
    return float(r @ (Q @ r))


def gls_split_criterion(Q_or_factor, membership: MembershipMatrix, leaf_id: int, cut: Cut, X, labels) -> float:
    """Loss decrease per sample from splitting one leaf at ``cut``.

    Reference (non-incremental) implementation: both losses refit beta
    over all leaves.  The grower reproduces these values through
    incremental normal-equation updates.
    """
    y = np.asarray(labels, dtype=float)
    x = np.asarray(X, dtype=float)
    Q = _as_sparse_Q(Q_or_factor, y.size)
    assign = membership.assignment
    in_leaf = assign == leaf_id
    left = (x[:, cut.d] <= cut.c) & in_leaf
    right = in_leaf & ~left
    if not left.any() or not right.any():
        raise EmptyChild(f"cut {cut} leaves an empty child in leaf {leaf_id}")
    new_assign = assign.copy()
    new_assign[right] = membership.leaf_count
    before = _gls_loss(Q, assign, membership.leaf_count, y)
    after = _gls_loss(Q, new_assign, membership.leaf_count + 1, y)
    return (before - after) / y.size


# ---------------------------------------------------------------------------
# Tree structure
# ---------------------------------------------------------------------------

@dataclass
class GlsTree:
    """Fitted piecewise-constant estimator.

    ``nodes`` is a flat list: internal nodes are dicts with keys
    (d, c, left, right); leaves carry their leaf id.  ``leaf_values[k]``
    is the GLS estimate for leaf k.
    """

    nodes: list
    leaf_values: np.ndarray
    subsample: np.ndarray
    seed: int

    def leaf_index(self, x) -> int:
        x = np.asarray(x, dtype=float)
        node = self.nodes[0]
        while "leaf" not in node:
            node = self.nodes[node["left"] if x[node["d"]] <= node["c"] else node["right"]]
        return node["leaf"]

    def predict(self, x) -> float:
        return float(self.leaf_values[self.leaf_index(x)])

    def predict_batch(self, xs) -> np.ndarray:
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        out_leaf = np.zeros(xs.shape[0], dtype=np.int64)
        stack = [(0, np.arange(xs.shape[0]))]
        while stack:
            node_id, idx = stack.pop()
            node = self.nodes[node_id]
            if "leaf" in node:
                out_leaf[idx] = node["leaf"]
                continue
            go_left = xs[idx, node["d"]] <= node["c"]
            stack.append((node["left"], idx[go_left]))
            stack.append((node["right"], idx[~go_left]))
        return self.leaf_values[out_leaf]

    def to_json(self) -> dict:
        return {
            "nodes": self.nodes,
            "leaf_values": [float(v) for v in self.leaf_values],
            "subsample": [int(i) for i in self.subsample],
            "seed": int(self.seed),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "GlsTree":
        return cls(
            nodes=obj["nodes"],
            leaf_values=np.asarray(obj["leaf_values"], dtype=float),
            subsample=np.asarray(obj["subsample"], dtype=np.int64),
            seed=int(obj["seed"]),
        )


def predict_tree(tree: GlsTree, x) -> float:
    return tree.predict(x)


# ---------------------------------------------------------------------------
# Growth
# ---------------------------------------------------------------------------

class _Grower:
    def __init__(self, X, y, Q: sp.csc_matrix, params: GrowParams, rng: np.random.Generator,
                 identity_fast: bool = False):
        self.X = X
        self.y = y
        self.Q = Q
        self.identity_fast = identity_fast
        self.Qdiag = Q.diagonal()
        self.Qy = np.asarray(Q @ y).ravel()
        self.params = params
        self.rng = rng
        self.n, self.D = X.shape
        self.m_try = params.m_try if params.m_try is not None else max(1, self.D // 3)
        self.assignment = np.zeros(self.n, dtype=np.int64)
        self.leaves = {0: np.arange(self.n)}
        self.leaf_coords = {0: self._draw_coords()}
        self.nodes = [{"leaf": 0}]
        self.node_of_leaf = {0: 0}
        self.K = 1
        self._refresh_normal_eqs()

    def _draw_coords(self):
        coords = self.rng.choice(self.D, size=min(self.m_try, self.D), replace=False)
        return np.sort(coords)

    def _refresh_normal_eqs(self):
        # full recompute after every accepted split caps incremental drift
        self.A, self.b = _normal_equations(self.Q, self.assignment, self.K, self.y)

    def _qcol(self, i):
        Q = self.Q
        lo, hi = Q.indptr[i], Q.indptr[i + 1]
        return Q.indices[lo:hi], Q.data[lo:hi]

    @staticmethod
    def _select(crits, ds, cs):
        """Shared tie rule: first candidate in scan order within tolerance
        of the maximum, so every criterion path resolves ties alike."""
        crits = np.asarray(crits)
        if crits.size == 0:
            return None
        top = crits.max()
        i = int(np.argmax(crits > top - _TIE_TOL))
        return (float(crits[i]), int(ds[i]), float(cs[i]))

    def _evaluate_leaf(self, leaf_id):
        """Best (criterion, d, c) for one leaf, or None if unsplittable."""
        idx = self.leaves[leaf_id]
        t_c = self.params.t_c
        if idx.size < 2 * t_c:
            return None
        if self.params.criterion == "gini":
            return self._evaluate_leaf_gini(leaf_id, idx)
        if self.identity_fast:
            return self._evaluate_leaf_ols(leaf_id, idx)
        return self._evaluate_leaf_gls(leaf_id, idx)

    def _candidate_positions(self, xs_sorted, n_t):
        t_c = self.params.t_c
        n_l = np.arange(1, n_t)
        return (
            (xs_sorted[:-1] != xs_sorted[1:])
            & (n_l >= t_c)
            & (n_t - n_l >= t_c)
        )

    def _evaluate_leaf_gini(self, leaf_id, idx):
        """Local Gini scan, scaled by node share to match the global loss."""
        y = self.y[idx]
        n_t = idx.size
        ones_t = y.sum()
        crits, ds, cs = [], [], []
        for d in self.leaf_coords[leaf_id]:
            xs = self.X[idx, d]
            order = np.argsort(xs, kind="stable")
            xs_sorted = xs[order]
            y_sorted = y[order]
            valid = self._candidate_positions(xs_sorted, n_t)
            ones_left = 0.0
            for p in range(n_t - 1):
                ones_left += y_sorted[p]
                if not valid[p]:
                    continue
                n_l = p + 1
                n_r = n_t - n_l
                c = 0.5 * (xs_sorted[p] + xs_sorted[p + 1])
                ones_right = ones_t - ones_left
                # n_T * v_RT / n == global OLS loss decrease per sample
                sse_t = ones_t * (1.0 - ones_t / n_t)
                sse_l = ones_left * (1.0 - ones_left / n_l)
                sse_r = ones_right * (1.0 - ones_right / n_r)
                crits.append((sse_t - sse_l - sse_r) / self.n)
                ds.append(d)
                cs.append(c)
        return self._select(crits, ds, cs)

    def _evaluate_leaf_ols(self, leaf_id, idx):
        """Vectorized identity-Q scan: the global loss decrease reduces to
        the local SSE decrease, valid for any (not only binary) targets."""
        y = self.y[idx]
        n_t = idx.size
        tot = y.sum()
        tot2 = float(y @ y)
        sse_t = tot2 - tot * tot / n_t
        crits, ds, cs = [], [], []
        for d in self.leaf_coords[leaf_id]:
            xs = self.X[idx, d]
            order = np.argsort(xs, kind="stable")
            xs_sorted = xs[order]
            y_sorted = y[order]
            valid = self._candidate_positions(xs_sorted, n_t)
            if not valid.any():
                continue
            n_l = np.arange(1, n_t)
            cum = np.cumsum(y_sorted)[:-1]
            cum2 = np.cumsum(y_sorted * y_sorted)[:-1]
            sse_l = cum2 - cum * cum / n_l
            sse_r = (tot2 - cum2) - (tot - cum) ** 2 / (n_t - n_l)
            crit = (sse_t - sse_l - sse_r) / self.n
            mids = 0.5 * (xs_sorted[:-1] + xs_sorted[1:])
            crits.append(crit[valid])
            ds.append(np.full(int(valid.sum()), d))
            cs.append(mids[valid])
        if not crits:
            return None
        return self._select(np.concatenate(crits), np.concatenate(ds), np.concatenate(cs))

    def _evaluate_leaf_gls(self, leaf_id, idx):
        t_c = self.params.t_c
        K, n = self.K, self.n
        l = leaf_id
        others = np.array([k for k in range(K) if k != l], dtype=np.int64)
        A_oo = self.A[np.ix_(others, others)]
        a_ol = self.A[others, l]
        A_ll = self.A[l, l]
        b_o = self.b[others]
        b_l = self.b[l]
        if others.size:
            try:
                cho = cho_factor(A_oo)
            except np.linalg.LinAlgError as exc:
                raise SingularSystem("Z^T Q Z block is singular") from exc
            g = cho_solve(cho, b_o)
            h = cho_solve(cho, a_ol)
        else:
            cho = None
            g = np.empty(0)
            h = np.empty(0)
        c0 = float(b_o @ g)
        den = A_ll - float(a_ol @ h)
        if den <= 0:
            raise SingularSystem("nonpositive Schur complement in before-loss")
        before_term = c0 + (b_l - float(a_ol @ g)) ** 2 / den

        crits, ds, cs = [], [], []
        in_left = np.zeros(n, dtype=bool)
        for d in self.leaf_coords[leaf_id]:
            xs = self.X[idx, d]
            order = np.argsort(xs, kind="stable")
            sorted_idx = idx[order]
            xs_sorted = xs[order]
            u_full = np.zeros(K)
            s11 = 0.0
            sY1 = 0.0
            in_left[:] = False
            n_t = idx.size
            for p in range(n_t - 1):
                i = sorted_idx[p]
                cols, vals = self._qcol(i)
                s11 += 2.0 * float(vals[in_left[cols]].sum()) + self.Qdiag[i]
                np.add.at(u_full, self.assignment[cols], vals)
                sY1 += self.Qy[i]
                in_left[i] = True
                if xs_sorted[p] == xs_sorted[p + 1]:
                    continue
                n_l = p + 1
                if n_l < t_c or n_t - n_l < t_c:
                    continue
                c = 0.5 * (xs_sorted[p] + xs_sorted[p + 1])
                u_o = u_full[others]
                u_l = u_full[l]
                t_vec = np.array([sY1, b_l - sY1])
                # 2x2 Schur complement of the split columns against the
                # unchanged leaves
                s12 = u_l - s11
                s22 = A_ll - 2.0 * u_l + s11
                if others.size:
                    U = np.column_stack([u_o, a_ol - u_o])
                    M = cho_solve(cho, U)
                    UtM = U.T @ M
                    sc11 = s11 - UtM[0, 0]
                    sc12 = s12 - UtM[0, 1]
                    sc22 = s22 - UtM[1, 1]
                    r = t_vec - U.T @ g
                else:
                    sc11, sc12, sc22 = s11, s12, s22
                    r = t_vec
                det = sc11 * sc22 - sc12 * sc12
                if det <= 0 or sc11 <= 0:
                    continue
                quad = (sc22 * r[0] ** 2 - 2.0 * sc12 * r[0] * r[1] + sc11 * r[1] ** 2) / det
                crits.append((c0 + quad - before_term) / self.n)
                ds.append(d)
                cs.append(c)
            in_left[idx] = False
        return self._select(crits, ds, cs)

    def grow(self) -> GlsTree:
        params = self.params
        max_leaves = params.max_leaves or np.inf
        while self.K < max_leaves:
            # global criterion: every leaf is re-evaluated each round, and
            # the cross-leaf winner obeys the same tie rule as within leaves
            entries = []
            for leaf_id in sorted(self.leaves):
                ev = self._evaluate_leaf(leaf_id)
                if ev is None or ev[0] <= _TIE_TOL:
                    continue
                entries.append((ev[0], leaf_id, ev[1], ev[2]))
            if not entries:
                break
            vals = np.array([e[0] for e in entries])
            pick = entries[int(np.argmax(vals > vals.max() - _TIE_TOL))]
            self._split(pick[1], pick[2], pick[3])
        beta = gls_beta(self.Q, MembershipMatrix(self.assignment, self.K), self.y)
        return GlsTree(self.nodes, beta, np.arange(self.n), params.seed)

    def _split(self, leaf_id, d, c):
        idx = self.leaves[leaf_id]
        left_mask = self.X[idx, d] <= c
        left_idx = idx[left_mask]
        right_idx = idx[~left_mask]
        new_id = self.K
        self.K += 1
        self.assignment[right_idx] = new_id
        self.leaves[leaf_id] = left_idx
        self.leaves[new_id] = right_idx
        node_id = self.node_of_leaf.pop(leaf_id)
        left_node_id = len(self.nodes)
        right_node_id = left_node_id + 1
        self.nodes[node_id] = {"d": int(d), "c": float(c), "left": left_node_id, "right": right_node_id}
        self.nodes.append({"leaf": int(leaf_id)})
        self.nodes.append({"leaf": int(new_id)})
        self.node_of_leaf[leaf_id] = left_node_id
        self.node_of_leaf[new_id] = right_node_id
        # left child first: coordinate draws follow leaf-creation order
        self.leaf_coords[leaf_id] = self._draw_coords()
        self.leaf_coords[new_id] = self._draw_coords()
        self._refresh_normal_eqs()


def grow_tree(X, y, Q_or_factor, params: GrowParams, rng: np.random.Generator | None = None) -> GlsTree:
    """Grow one GLS tree on in-bag arrays (Q in the same sample order)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    if X.shape[0] != y.size:
        raise ValueError("X and y disagree in length")
    if y.size < 2 * params.t_c:
        raise TooFewSamples(
            f"need at least 2*t_c = {2 * params.t_c} in-bag samples, got {y.size}"
        )
    Q = _as_sparse_Q(Q_or_factor, y.size)
    if rng is None:
        rng = np.random.default_rng(params.seed)
    # Q omitted entirely (= identity) admits a vectorized local scan with
    # identical selections; an explicit identity matrix still exercises the
    # full GLS machinery
    identity_fast = params.criterion == "gls" and Q_or_factor is None
    return _Grower(X, y, Q, params, rng, identity_fast=identity_fast).grow()
