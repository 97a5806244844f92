"""
Differential operator on point clouds.

Gradients are reconstructed per node by least squares over its neighbors:
the rows x_j - x_i are stacked into A(x_i), its rank-d' truncated SVD gives the
pseudoinverse A(x_i)^+, and the columns of A(x_i)^+ are stored as per-edge
weights. Applying the operator is then one message-passing sweep.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor_core as tc
from .error_utils import PCNOError, shape_error

DEFAULT_SV_REL_TOL = 1e-8


@dataclass
class GradientEdgeWeights:
    indptr: np.ndarray          # (N+1,)
    indices: np.ndarray         # (E,) neighbor j of each edge
    weights: np.ndarray         # (E, d) column of A(x_i)^+ for neighbor j
    effective_rank: np.ndarray  # (N,)
    rank_deficient: np.ndarray  # node indices whose stencil lost rank

    @property
    def n_nodes(self) -> int:
        return self.indptr.shape[0] - 1

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    @property
    def rows(self) -> np.ndarray:
        """Owning node i of every edge."""
        return np.repeat(np.arange(self.n_nodes, dtype=np.int64), np.diff(self.indptr))


def build_pseudoinverse_weights(points: np.ndarray, indptr: np.ndarray, indices: np.ndarray, intrinsic_dim: int,
                                sv_rel_tol: float = DEFAULT_SV_REL_TOL, node_mask: Optional[np.ndarray] = None,
                                node_rank: Optional[np.ndarray] = None) -> GradientEdgeWeights:
    """
    Per-edge least-squares gradient weights.

    Args:
        points: (N, d) node coordinates
        indptr, indices: neighbor lists in compressed layout
        intrinsic_dim: truncation rank d'
        sv_rel_tol: singular values below sv_rel_tol * sigma_max are dropped
        node_mask: nodes to build stencils for (others get no edges)
        node_rank: optional per-node truncation rank (defaults to d')
    """
    if not 0.0 < sv_rel_tol < 1.0:
        raise PCNOError("INVALID_CONFIG", f"sv_rel_tol must lie in (0, 1), got {sv_rel_tol}")
    points = np.asarray(points, dtype=np.float64)
    n, d = points.shape
    node_mask = np.ones(n, dtype=bool) if node_mask is None else np.asarray(node_mask, dtype=bool)
    rank_target = np.full(n, intrinsic_dim, dtype=np.int64) if node_rank is None else np.asarray(node_rank, dtype=np.int64)
    rank_target = np.minimum(rank_target, d)

    degree = np.diff(indptr)
    short = np.flatnonzero(node_mask & (degree < rank_target))
    if short.size:
        i = int(short[0])
        raise PCNOError("INSUFFICIENT_NEIGHBORS", f"node {i} has {int(degree[i])} neighbors, needs {int(rank_target[i])}",
                        {"node_index": i, "count": int(short.size)})

    weights = np.zeros((indices.size, d))
    effective_rank = np.zeros(n, dtype=np.int64)
    for m in np.unique(degree[node_mask]):
        nodes = np.flatnonzero(node_mask & (degree == m))
        edge_idx = indptr[nodes][:, None] + np.arange(m)[None, :]          # (B, m)
        A = points[indices[edge_idx]] - points[nodes][:, None, :]          # (B, m, d)
        U, s, Vt = np.linalg.svd(A, full_matrices=False)                   # (B,m,r) (B,r) (B,r,d)
        r = s.shape[1]
        keep = (np.arange(r)[None, :] < rank_target[nodes][:, None]) & (s > sv_rel_tol * s[:, :1])
        inv_s = np.where(keep, 1.0 / np.where(keep, s, 1.0), 0.0)
        # A^+ = V diag(1/s) U^T, stored transposed as (B, m, d): row j is the column for neighbor j
        pinv_t = np.einsum("bmr,br,brd->bmd", U, inv_s, Vt)
        weights[edge_idx.reshape(-1)] = pinv_t.reshape(-1, d)
        effective_rank[nodes] = keep.sum(axis=1)

    deficient = np.flatnonzero(node_mask & (effective_rank < rank_target))
    if deficient.size:
        logging.warning(f"Degenerate gradient stencils at {deficient.size} node(s) (first: {deficient[:5].tolist()}); "
                        f"proceeding at reduced rank")
    return GradientEdgeWeights(indptr=np.asarray(indptr, dtype=np.int64), indices=np.asarray(indices, dtype=np.int64),
                               weights=weights, effective_rank=effective_rank, rank_deficient=deficient)


def apply_gradient(weights: GradientEdgeWeights, f: tc.Tensor) -> tc.Tensor:
    """
    grad f(x_i) = sum_j w_ij (f(x_j) - f(x_i)) for every channel, as (N, d, c).
    """
    f = tc.as_tensor(f)
    if f.ndim != 2 or f.shape[0] != weights.n_nodes:
        raise shape_error("apply_gradient", f.shape, (weights.n_nodes, weights.dim))
    rows = weights.rows
    w = weights.weights.astype(f.dtype, copy=False)
    diff = tc.sub(tc.gather(f, weights.indices), tc.gather(f, rows))
    messages = tc.outer_rows(tc.Tensor(w), diff)
    return tc.segment_sum(messages, rows, weights.n_nodes)


def softsign_smooth(g: tc.Tensor) -> tc.Tensor:
    """Bound every gradient component to (-1, 1)."""
    return tc.softsign(g)
