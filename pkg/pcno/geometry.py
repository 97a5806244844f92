"""
Point-cloud geometry: per-node measures, neighbor structure and densities.

A sample is a point cloud plus (optional) mesh topology. Vertex-centered
samples store field values at mesh vertices (`nodes`); cell-centered samples
store them at cell centroids and keep the mesh vertices in `vertices`.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sps
from scipy.spatial import Delaunay

from .error_utils import PCNOError, geometry_error, validation_error

# Relative threshold below which a cell measure counts as degenerate
DEGENERATE_TOL = 1e-14
NORMALIZATION_TOL = 1e-12


@dataclass
class GeometryFeatures:
    dOmega: np.ndarray            # (N,) cell-measure share per node
    rho: np.ndarray               # (N,) density
    indptr: np.ndarray            # (N+1,) neighbor lists, compressed
    indices: np.ndarray           # (E,)
    domain_measure: np.ndarray    # (S,) |Omega_s|
    density_mode: str = "uniform"
    centering: str = "vertex"

    def neighbors(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i]:self.indptr[i + 1]]


@dataclass
class PointCloudSample:
    nodes: np.ndarray                      # (N, d)
    cell_nodes: np.ndarray                 # (sum of cell sizes,) flat node (or vertex) indices
    cell_offsets: np.ndarray               # (C+1,)
    cell_dims: np.ndarray                  # (C,)
    intrinsic_dim: int
    a: np.ndarray                          # (N, d_a)
    u: Optional[np.ndarray] = None         # (N, d_u)
    node_mask: Optional[np.ndarray] = None
    subdomain_id: Optional[np.ndarray] = None
    vertices: Optional[np.ndarray] = None  # cell-centered meshes only
    label: str = ""
    params: Dict[str, float] = field(default_factory=dict)
    features: Optional[GeometryFeatures] = None
    gradient: Any = None                   # gradop.GradientEdgeWeights

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=np.float64)
        if self.nodes.ndim == 1:
            self.nodes = self.nodes[:, None]
        n = self.nodes.shape[0]
        self.cell_nodes = np.asarray(self.cell_nodes, dtype=np.int64)
        self.cell_offsets = np.asarray(self.cell_offsets, dtype=np.int64)
        self.cell_dims = np.asarray(self.cell_dims, dtype=np.int64)
        self.a = np.asarray(self.a, dtype=np.float64).reshape(n, -1)
        if self.u is not None:
            self.u = np.asarray(self.u, dtype=np.float64).reshape(n, -1)
        self.node_mask = np.ones(n, dtype=bool) if self.node_mask is None else np.asarray(self.node_mask, dtype=bool)
        self.subdomain_id = (np.zeros(n, dtype=np.int64) if self.subdomain_id is None
                             else np.asarray(self.subdomain_id, dtype=np.int64))
        if self.vertices is not None:
            self.vertices = np.asarray(self.vertices, dtype=np.float64)
            if self.vertices.ndim == 1:
                self.vertices = self.vertices[:, None]

    @classmethod
    def from_cells(cls, nodes, cells: Sequence[Sequence[int]], cell_dims, intrinsic_dim: int, a, u=None, **kwargs):
        """Build a sample from a list of cell tuples and their dimensions (scalar or per-cell)."""
        cells = [tuple(int(v) for v in c) for c in cells]
        sizes = np.array([len(c) for c in cells], dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        flat = np.fromiter((v for c in cells for v in c), dtype=np.int64, count=int(sizes.sum()))
        dims = np.broadcast_to(np.asarray(cell_dims, dtype=np.int64), (len(cells),)).copy()
        return cls(nodes=nodes, cell_nodes=flat, cell_offsets=offsets, cell_dims=dims,
                   intrinsic_dim=intrinsic_dim, a=a, u=u, **kwargs)

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def dim(self) -> int:
        return self.nodes.shape[1]

    @property
    def n_cells(self) -> int:
        return self.cell_dims.shape[0]

    @property
    def d_a(self) -> int:
        return self.a.shape[1]

    @property
    def d_u(self) -> int:
        return 0 if self.u is None else self.u.shape[1]

    @property
    def n_subdomains(self) -> int:
        active = self.subdomain_id[self.node_mask]
        return int(active.max()) + 1 if active.size else 0

    @property
    def centering(self) -> str:
        return "cell" if self.vertices is not None else "vertex"

    def cells(self) -> List[Tuple[int, ...]]:
        return [tuple(self.cell_nodes[self.cell_offsets[c]:self.cell_offsets[c + 1]].tolist())
                for c in range(self.n_cells)]

    def validate(self) -> None:
        n, d = self.nodes.shape
        if not 1 <= self.intrinsic_dim <= d:
            raise geometry_error("INCONSISTENT_DIMS", f"intrinsic dimension {self.intrinsic_dim} not in [1, {d}]")
        if self.cell_offsets.shape != (self.n_cells + 1,) or self.cell_offsets[-1] != self.cell_nodes.size:
            raise geometry_error("INCONSISTENT_DIMS", "cell offsets do not match the flat cell array")
        if self.n_cells and self.cell_dims.max() > self.intrinsic_dim:
            raise geometry_error("INCONSISTENT_DIMS", f"cell dimension {int(self.cell_dims.max())} exceeds intrinsic dimension {self.intrinsic_dim}")
        for name, arr in (("node_mask", self.node_mask), ("subdomain_id", self.subdomain_id), ("a", self.a)):
            if arr.shape[0] != n:
                raise geometry_error("INCONSISTENT_DIMS", f"{name} has {arr.shape[0]} rows, expected {n}")
        if self.u is not None and self.u.shape[0] != n:
            raise geometry_error("INCONSISTENT_DIMS", f"u has {self.u.shape[0]} rows, expected {n}")
        if self.centering == "vertex" and self.cell_nodes.size:
            if self.cell_nodes.min() < 0 or self.cell_nodes.max() >= n:
                raise geometry_error("INCONSISTENT_DIMS", "cell index outside the node range")
            if not np.all(self.node_mask[self.cell_nodes]):
                raise geometry_error("INCONSISTENT_DIMS", "cell refers to a padded node")
        pad = ~self.node_mask
        if pad.any():
            fields = [self.nodes, self.a] + ([self.u] if self.u is not None else [])
            if any(np.any(f[pad] != 0) for f in fields):
                raise geometry_error("INCONSISTENT_DIMS", "padded rows must carry zeros")

    def without_features(self) -> "PointCloudSample":
        return replace(self, features=None, gradient=None)


# --- CELL MEASURES ---

def _simplex_measures(coords: np.ndarray) -> np.ndarray:
    """Volumes of k-simplices given as (C, k+1, d) vertex coordinates (Gram determinant)."""
    k = coords.shape[1] - 1
    edges = coords[:, 1:, :] - coords[:, :1, :]
    gram = np.einsum("cid,cjd->cij", edges, edges)
    det = np.clip(np.linalg.det(gram), 0.0, None) if k > 1 else gram[:, 0, 0]
    return np.sqrt(det) / math.factorial(k)


def cell_measures(points: np.ndarray, cell_nodes: np.ndarray, cell_offsets: np.ndarray, cell_dims: np.ndarray) -> np.ndarray:
    """
    Measure (length, area, volume) of every cell. Polygonal 2-cells are
    fan-triangulated from their lowest-index vertex, keeping cyclic order.
    """
    n_cells = cell_dims.shape[0]
    sizes = np.diff(cell_offsets)
    measures = np.zeros(n_cells)
    for key in sorted(set(zip(cell_dims.tolist(), sizes.tolist()))):
        dim, size = key
        cells = np.flatnonzero((cell_dims == dim) & (sizes == size))
        idx = cell_offsets[cells][:, None] + np.arange(size)[None, :]
        conn = cell_nodes[idx]
        if size == dim + 1:
            measures[cells] = _simplex_measures(points[conn])
        elif dim == 2 and size > 3:
            shift = np.argmin(conn, axis=1)
            rolled = np.take_along_axis(conn, (shift[:, None] + np.arange(size)[None, :]) % size, axis=1)
            total = np.zeros(cells.size)
            for t in range(1, size - 1):
                tri = rolled[:, [0, t, t + 1]]
                total += _simplex_measures(points[tri])
            measures[cells] = total
        else:
            raise geometry_error("DEGENERATE_CELL", f"unsupported cell: dimension {dim} with {size} nodes",
                                 cell_index=int(cells[0]))
        scale = np.ptp(points[conn], axis=1).max(axis=1) ** dim
        bad = measures[cells] <= DEGENERATE_TOL * np.maximum(scale, np.finfo(float).tiny)
        if bad.any():
            first = int(cells[np.flatnonzero(bad)[0]])
            raise geometry_error("DEGENERATE_CELL", f"cell {first} has zero measure", cell_index=first)
    return measures


def _incidence(sample: PointCloudSample) -> sps.csr_matrix:
    """Cell x node incidence matrix (vertex-centered) or cell x vertex (cell-centered)."""
    n_cols = sample.n_nodes if sample.centering == "vertex" else sample.vertices.shape[0]
    rows = np.repeat(np.arange(sample.n_cells), np.diff(sample.cell_offsets))
    data = np.ones(rows.size)
    inc = sps.csr_matrix((data, (rows, sample.cell_nodes)), shape=(sample.n_cells, n_cols))
    inc.sum_duplicates()
    inc.data[:] = 1.0
    return inc


def node_top_dimension(sample: PointCloudSample) -> np.ndarray:
    """Highest cell dimension touching each node (0 for nodes in no cell)."""
    top = np.zeros(sample.n_nodes, dtype=np.int64)
    if sample.centering == "cell":
        return sample.cell_dims.copy()
    counts = np.diff(sample.cell_offsets)
    np.maximum.at(top, sample.cell_nodes, np.repeat(sample.cell_dims, counts))
    return top


def compute_measures(sample: PointCloudSample, centering: str = "vertex") -> np.ndarray:
    """
    Per-node measure dOmega.

    Vertex-centered: every cell's measure is shared equally among its nodes;
    a node only collects shares from cells of its own highest dimension so
    lengths and areas never mix. Cell-centered: the node's own cell measure.
    """
    if sample.n_cells == 0:
        raise geometry_error("ISOLATED_NODE", "sample has no topology")
    if centering == "cell":
        if sample.vertices is None or sample.n_cells != sample.n_nodes:
            raise geometry_error("INCONSISTENT_DIMS", "cell-centered samples need vertices and one cell per node")
        measures = cell_measures(sample.vertices, sample.cell_nodes, sample.cell_offsets, sample.cell_dims)
        return np.where(sample.node_mask, measures, 0.0)

    measures = cell_measures(sample.nodes, sample.cell_nodes, sample.cell_offsets, sample.cell_dims)
    counts = np.diff(sample.cell_offsets)
    top = node_top_dimension(sample)
    cell_of_entry = np.repeat(np.arange(sample.n_cells), counts)
    share = (measures / counts)[cell_of_entry]
    keep = sample.cell_dims[cell_of_entry] == top[sample.cell_nodes]
    dOmega = np.zeros(sample.n_nodes)
    np.add.at(dOmega, sample.cell_nodes[keep], share[keep])

    orphans = np.flatnonzero(sample.node_mask & (dOmega <= 0))
    if orphans.size:
        raise geometry_error("ISOLATED_NODE", f"node {int(orphans[0])} belongs to no cell",
                             node_index=int(orphans[0]), count=int(orphans.size))
    return dOmega


def compute_connectivity(sample: PointCloudSample, centering: str = "vertex",
                         top_dimension_only: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """
    Neighbor lists in compressed layout (indptr, indices), self excluded,
    deduplicated and sorted ascending.

    Vertex-centered: nodes sharing a cell. Cell-centered: cells sharing a
    vertex. With `top_dimension_only`, a node only looks through cells of its
    own highest dimension.
    """
    inc = _incidence(sample)
    if centering == "cell":
        adj = (inc @ inc.T).tocsr()
    else:
        if top_dimension_only:
            top = node_top_dimension(sample)
            coo = inc.tocoo()
            keep = sample.cell_dims[coo.row] == top[coo.col]
            inc_top = sps.csr_matrix((coo.data[keep], (coo.row[keep], coo.col[keep])), shape=inc.shape)
            adj = (inc_top.T @ inc).tocsr()
        else:
            adj = (inc.T @ inc).tocsr()
    adj.setdiag(0)
    adj.eliminate_zeros()
    adj.sort_indices()
    indptr = adj.indptr.astype(np.int64)
    indices = adj.indices.astype(np.int64)

    degree = np.diff(indptr)
    isolated = np.flatnonzero(sample.node_mask & (degree == 0))
    if isolated.size:
        raise geometry_error("ISOLATED_NODE", f"node {int(isolated[0])} has no neighbors",
                             node_index=int(isolated[0]), count=int(isolated.size))
    return indptr, indices


def compute_density(dOmega: np.ndarray, subdomain_id: np.ndarray, node_mask: np.ndarray,
                    mode: str = "uniform") -> Tuple[np.ndarray, np.ndarray]:
    """
    Density rho per node and measure |Omega_s| per subdomain.

    With S subdomains every subdomain carries total mass 1/S, so the global
    quadrature sum of rho * dOmega is 1.
    """
    if mode not in ("uniform", "pointcloud"):
        raise validation_error(f"unknown density mode {mode!r}")
    active = subdomain_id[node_mask]
    n_sub = int(active.max()) + 1 if active.size else 0
    if n_sub == 0:
        raise PCNOError("EMPTY_SUBDOMAIN", "sample has no unmasked nodes")
    counts = np.bincount(active, minlength=n_sub)
    if np.any(counts == 0):
        missing = int(np.flatnonzero(counts == 0)[0])
        raise PCNOError("EMPTY_SUBDOMAIN", f"subdomain {missing} has no unmasked nodes", {"subdomain": missing})

    domain_measure = np.array([np.sum(dOmega[node_mask & (subdomain_id == s)]) for s in range(n_sub)])
    if np.any(domain_measure <= 0):
        bad = int(np.flatnonzero(domain_measure <= 0)[0])
        raise PCNOError("ZERO_MEASURE", f"subdomain {bad} has zero measure", {"subdomain": bad})

    rho = np.zeros_like(dOmega)
    sub = subdomain_id[node_mask]
    if mode == "uniform":
        rho[node_mask] = 1.0 / (n_sub * domain_measure[sub])
    else:
        rho[node_mask] = 1.0 / (n_sub * counts[sub] * dOmega[node_mask])
    return rho, domain_measure


def quadrature_total(features: GeometryFeatures, node_mask: np.ndarray) -> float:
    return math.fsum((features.rho * features.dOmega)[node_mask])


def compute_features(sample: PointCloudSample, density_mode: str = "uniform", centering: Optional[str] = None) -> GeometryFeatures:
    centering = centering or sample.centering
    dOmega = compute_measures(sample, centering)
    indptr, indices = compute_connectivity(sample, centering)
    rho, domain_measure = compute_density(dOmega, sample.subdomain_id, sample.node_mask, density_mode)
    features = GeometryFeatures(dOmega=dOmega, rho=rho, indptr=indptr, indices=indices,
                                domain_measure=domain_measure, density_mode=density_mode, centering=centering)
    total = quadrature_total(features, sample.node_mask)
    if abs(total - 1.0) > NORMALIZATION_TOL:
        raise PCNOError("INVALID_DENSITY", f"quadrature normalization violated: sum(rho*dOmega) = {total!r}",
                        {"total": total})
    return features


def preprocess_sample(sample: PointCloudSample, config) -> PointCloudSample:
    """
    Attach geometry features and gradient weights (config: PreprocessConfig).
    """
    from .gradop import build_pseudoinverse_weights

    sample.validate()
    intrinsic_dim = sample.intrinsic_dim if config.intrinsic_dim is None else config.intrinsic_dim
    if intrinsic_dim != sample.intrinsic_dim:
        raise geometry_error("INCONSISTENT_DIMS",
                             f"preprocessing for d'={intrinsic_dim} but sample '{sample.label}' has d'={sample.intrinsic_dim}",
                             expected=sample.intrinsic_dim, found=intrinsic_dim)
    centering = config.centering
    features = compute_features(sample, config.density_mode, centering)
    if centering == "vertex" and len(set(sample.cell_dims.tolist())) > 1:
        grad_indptr, grad_indices = compute_connectivity(sample, centering, top_dimension_only=True)
    else:
        grad_indptr, grad_indices = features.indptr, features.indices
    node_rank = np.minimum(intrinsic_dim, node_top_dimension(sample))
    points = sample.nodes
    weights = build_pseudoinverse_weights(points, grad_indptr, grad_indices, intrinsic_dim,
                                          sv_rel_tol=config.sv_rel_tol, node_mask=sample.node_mask,
                                          node_rank=node_rank)
    logging.debug(f"Preprocessed sample '{sample.label}': {sample.n_nodes} nodes, {grad_indices.size} gradient edges")
    return replace(sample, features=features, gradient=weights)


# --- MESH-FREE FALLBACK ---

def delaunay_topology(nodes: np.ndarray, intrinsic_dim: int) -> Tuple[List[Tuple[int, ...]], int]:
    """
    Tessellate a mesh-free, full-dimensional point cloud. Returns (cells, cell_dim).
    Only d' = 1 (sorted chain) and d' = 2 (Delaunay triangles) are supported.
    """
    nodes = np.asarray(nodes, dtype=np.float64)
    if nodes.ndim == 1:
        nodes = nodes[:, None]
    d = nodes.shape[1]
    if intrinsic_dim == 1 and d == 1:
        order = np.argsort(nodes[:, 0], kind="stable")
        return [tuple(sorted((int(a), int(b)))) for a, b in zip(order[:-1], order[1:])], 1
    if intrinsic_dim == 2 and d == 2:
        tri = Delaunay(nodes)
        simplices = tri.simplices.astype(np.int64)
        area = _simplex_measures(nodes[simplices])
        scale = np.ptp(nodes, axis=0).max() ** 2
        keep = area > DEGENERATE_TOL * scale
        return [tuple(int(v) for v in s) for s in simplices[keep]], 2
    raise validation_error(f"Delaunay fallback needs a full-dimensional cloud with d' in (1, 2); got d={d}, d'={intrinsic_dim}")


# --- SAMPLE UTILITIES ---

def bounding_box(samples: Sequence[PointCloudSample]) -> Tuple[np.ndarray, np.ndarray]:
    lo, hi = None, None
    for s in samples:
        pts = s.nodes[s.node_mask]
        if pts.size == 0:
            continue
        lo = pts.min(axis=0) if lo is None else np.minimum(lo, pts.min(axis=0))
        hi = pts.max(axis=0) if hi is None else np.maximum(hi, pts.max(axis=0))
    if lo is None:
        raise PCNOError("EMPTY_DATASET", "no unmasked nodes to bound")
    return lo, hi


def permute_sample(sample: PointCloudSample, perm: np.ndarray) -> PointCloudSample:
    """Relabel nodes: new node i is old node perm[i]. Features must be recomputed."""
    perm = np.asarray(perm, dtype=np.int64)
    inverse = np.empty_like(perm)
    inverse[perm] = np.arange(perm.size)
    if sample.centering == "cell":
        # node i is cell i, so the cells themselves are reordered
        cells = sample.cells()
        cells = [cells[p] for p in perm]
        sizes = np.array([len(c) for c in cells], dtype=np.int64)
        cell_nodes = np.array([v for c in cells for v in c], dtype=np.int64)
        cell_offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        cell_dims = sample.cell_dims[perm]
    else:
        cell_nodes, cell_offsets, cell_dims = inverse[sample.cell_nodes], sample.cell_offsets, sample.cell_dims
    return replace(sample, nodes=sample.nodes[perm], a=sample.a[perm],
                   u=None if sample.u is None else sample.u[perm],
                   node_mask=sample.node_mask[perm], subdomain_id=sample.subdomain_id[perm],
                   cell_nodes=cell_nodes, cell_offsets=cell_offsets, cell_dims=cell_dims,
                   features=None, gradient=None)
