# FILE: pcno/datagen.py

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Optional, Sequence, TypeVar

import numpy as np
import scipy.sparse as sps
from scipy import fft
from scipy.linalg import LinAlgError, solve_banded
from scipy.sparse.linalg import spsolve

from .error_utils import PCNOError, validation_error
from .geometry import PointCloudSample
from .pydantic_models import AdvDiffCase, GRFSpec1D
from .random_fields import (dirichlet_grf_coefficients, eval_sine_series, sample_grf_2d_cosine,
                            sample_grf_periodic_1d, threshold_field)

T = TypeVar("T")
R = TypeVar("R")

MESH_KINDS = ("uniform", "exponential", "linear")
UNIFORM_SPACING = 2e-3
EXPONENTIAL_MIN_SPACING = 1e-4
EXPONENTIAL_GROWTH = 1.05
MAX_SPACING = 1e-2
LINEAR_RIGHT_SPACING = 1e-3

BURGERS_VISCOSITY = 0.1
DARCY_HIGH, DARCY_LOW = 12.0, 3.0


def parallel_map(fn: Callable[[T], R], items: Sequence[T], threads: int = 1) -> List[R]:
    """Order-preserving map over a thread pool; runs inline for a single thread."""
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def _chain_cells(n: int) -> List[tuple]:
    return [(i, i + 1) for i in range(n - 1)]


# --- 1D MESHES ---

def _march_from_right(length: float, next_spacing: Callable[[float, Optional[float]], float]) -> np.ndarray:
    spacings, x, prev = [], length, None
    while x > 0.0:
        h = next_spacing(x, prev)
        spacings.append(h)
        x -= h
        prev = h
    # last (leftmost) cell ends exactly at 0; a sliver under half a cell is merged into its neighbor
    remainder = spacings[-1] + x
    if remainder < 0.5 * spacings[-1] and len(spacings) > 1:
        spacings.pop()
        spacings[-1] += remainder
    else:
        spacings[-1] = remainder
    nodes = length - np.concatenate([[0.0], np.cumsum(spacings)])
    nodes = nodes[::-1].copy()
    nodes[0], nodes[-1] = 0.0, length
    return nodes


def make_mesh_1d(kind: str, length: float) -> np.ndarray:
    """Node coordinates on [0, length]; first node 0 and last node length exactly."""
    if length <= 0:
        raise validation_error(f"mesh length must be positive, got {length}")
    if kind == "uniform":
        n_cells = max(1, int(round(length / UNIFORM_SPACING)))
        nodes = np.linspace(0.0, length, n_cells + 1)
        nodes[-1] = length
        return nodes
    if kind == "exponential":
        return _march_from_right(length, lambda x, prev: EXPONENTIAL_MIN_SPACING if prev is None
                                 else min(prev * EXPONENTIAL_GROWTH, MAX_SPACING))
    if kind == "linear":
        slope = (LINEAR_RIGHT_SPACING - MAX_SPACING) / length
        return _march_from_right(length, lambda x, prev: MAX_SPACING + slope * x)
    raise validation_error(f"unknown mesh kind '{kind}', expected one of {MESH_KINDS}")


# --- ADVECTION-DIFFUSION ---

def solve_adv_diff(f: np.ndarray, diffusivity: float, u_left: float, nodes: np.ndarray) -> np.ndarray:
    """
    u' - D u'' = f on [0, L], u(0) = u_left, u(L) = 0. Three-point central
    differences on the nonuniform grid, tridiagonal solve.
    """
    nodes = np.asarray(nodes, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    if diffusivity <= 0:
        raise PCNOError("INVALID_COEFFICIENT", f"diffusivity must be positive, got {diffusivity}")
    h = np.diff(nodes)
    if np.any(h <= 0):
        raise validation_error("nodes must be strictly increasing")
    n = nodes.size
    u = np.zeros(n)
    u[0] = u_left
    if n == 2:
        return u

    hm, hp = h[:-1], h[1:]
    lower = -hp / (hm * (hm + hp)) - diffusivity * 2.0 / (hm * (hm + hp))
    diag = (hp - hm) / (hm * hp) + diffusivity * 2.0 / (hm * hp)
    upper = hm / (hp * (hm + hp)) - diffusivity * 2.0 / (hp * (hm + hp))

    rhs = f[1:-1].copy()
    rhs[0] -= lower[0] * u_left
    banded = np.zeros((3, n - 2))
    banded[0, 1:] = upper[:-1]
    banded[1, :] = diag
    banded[2, :-1] = lower[1:]
    try:
        interior = solve_banded((1, 1), banded, rhs)
    except LinAlgError as e:
        raise PCNOError("SINGULAR_SYSTEM", f"advection-diffusion system is singular: {e}")
    if not np.all(np.isfinite(interior)):
        raise PCNOError("SINGULAR_SYSTEM", "advection-diffusion solve produced non-finite values")
    u[1:-1] = interior
    return u


def adv_diff_exact_homogeneous(nodes: np.ndarray, diffusivity: float, u_left: float) -> np.ndarray:
    """Closed form for f = 0, written to stay finite for small D."""
    nodes = np.asarray(nodes, dtype=np.float64)
    length = nodes[-1]
    return u_left * -np.expm1((nodes - length) / diffusivity) / -np.expm1(-length / diffusivity)


def draw_advdiff_case(rng: np.random.Generator, mesh_kind: str) -> AdvDiffCase:
    return AdvDiffCase(length=rng.uniform(10.0, 15.0), u_left=rng.uniform(0.0, 1.0),
                       diffusivity=rng.uniform(5e-3, 5e-2), source_length=rng.uniform(5.0, 8.0),
                       grf_seed=int(rng.integers(0, 2 ** 31 - 1)), mesh_kind=mesh_kind)


def advdiff_source(case: AdvDiffCase, nodes: np.ndarray, spec: Optional[GRFSpec1D] = None) -> np.ndarray:
    """f(x) = |g(x / L_f)| on [0, L_f], zero beyond."""
    coeffs = dirichlet_grf_coefficients(spec or GRFSpec1D(), case.grf_seed)
    inside = nodes <= case.source_length
    f = np.zeros_like(nodes)
    f[inside] = np.abs(eval_sine_series(coeffs, nodes[inside] / case.source_length))
    return f


def advdiff_sample(case: AdvDiffCase, spec: Optional[GRFSpec1D] = None) -> PointCloudSample:
    nodes = make_mesh_1d(case.mesh_kind, case.length)
    f = advdiff_source(case, nodes, spec)
    u = solve_adv_diff(f, case.diffusivity, case.u_left, nodes)
    a = np.column_stack([f, np.full_like(f, case.diffusivity), np.full_like(f, case.u_left)])
    params = {"length": case.length, "u_left": case.u_left, "diffusivity": case.diffusivity,
              "source_length": case.source_length, "grf_seed": float(case.grf_seed)}
    return PointCloudSample.from_cells(nodes, _chain_cells(nodes.size), 1, 1, a, u, label=case.mesh_kind, params=params)


def gen_advdiff_dataset(n_samples: int, seed: int = 0, threads: int = 1,
                        kinds: Optional[Sequence[str]] = None) -> List[PointCloudSample]:
    """
    Samples cycle through the given mesh kinds (default: uniform, exponential,
    linear, uniform, ...). A single kind gives a one-mesh-family dataset.
    """
    kinds = tuple(MESH_KINDS if kinds is None else kinds)
    unknown = [k for k in kinds if k not in MESH_KINDS]
    if not kinds or unknown:
        raise validation_error(f"mesh kinds must be a non-empty subset of {MESH_KINDS}, got {list(kinds)}")

    def build(i: int) -> PointCloudSample:
        return advdiff_sample(draw_advdiff_case(_sample_rng(seed, i), kinds[i % len(kinds)]))

    samples = parallel_map(build, list(range(n_samples)), threads)
    logging.info(f"Generated {len(samples)} advection-diffusion samples on {'/'.join(kinds)} meshes (seed {seed})")
    return samples


# --- DARCY ---

def solve_darcy_unit_square(a: np.ndarray, source: float = 1.0) -> np.ndarray:
    """
    -div(a grad u) = source on the unit square, u = 0 on the boundary, with
    a and u given on the n x n vertex grid. Five-point stencil with
    harmonic-mean face coefficients, sparse direct solve.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 3:
        raise PCNOError("SHAPE_MISMATCH", f"coefficient must be an n x n grid with n >= 3, got {a.shape}")
    if np.any(a <= 0) or not np.all(np.isfinite(a)):
        raise PCNOError("INVALID_COEFFICIENT", "coefficient must be positive and finite everywhere")
    n = a.shape[0]
    h2 = (1.0 / (n - 1)) ** 2
    m = n - 2
    idx = np.arange(m * m).reshape(m, m)

    def face(p, q):
        return 2.0 * p * q / (p + q)

    inner = a[1:-1, 1:-1]
    west, east = face(inner, a[:-2, 1:-1]), face(inner, a[2:, 1:-1])
    south, north = face(inner, a[1:-1, :-2]), face(inner, a[1:-1, 2:])
    rows, cols, vals = [idx.ravel()], [idx.ravel()], [(west + east + south + north).ravel() / h2]
    for coeff, di, dj in ((west, -1, 0), (east, 1, 0), (south, 0, -1), (north, 0, 1)):
        i0, i1 = max(0, -di), m - max(0, di)
        j0, j1 = max(0, -dj), m - max(0, dj)
        rows.append(idx[i0:i1, j0:j1].ravel())
        cols.append(idx[i0 + di:i1 + di, j0 + dj:j1 + dj].ravel())
        vals.append(-coeff[i0:i1, j0:j1].ravel() / h2)
    matrix = sps.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(m * m, m * m))
    interior = spsolve(matrix.tocsc(), np.full(m * m, float(source)))
    if not np.all(np.isfinite(interior)):
        raise PCNOError("SINGULAR_SYSTEM", "Darcy solve produced non-finite values")
    u = np.zeros((n, n))
    u[1:-1, 1:-1] = interior.reshape(m, m)
    return u


def grid_triangles(n: int) -> List[tuple]:
    """Two triangles per square of the n x n vertex grid (row-major vertex ids)."""
    cells = []
    for i in range(n - 1):
        for j in range(n - 1):
            v00, v01, v10, v11 = i * n + j, i * n + j + 1, (i + 1) * n + j, (i + 1) * n + j + 1
            cells.append((v00, v10, v11))
            cells.append((v00, v11, v01))
    return cells


def darcy_sample(a: np.ndarray, u: np.ndarray) -> PointCloudSample:
    n = a.shape[0]
    x = np.linspace(0.0, 1.0, n)
    xx, yy = np.meshgrid(x, x, indexing="ij")
    nodes = np.column_stack([xx.ravel(), yy.ravel()])
    return PointCloudSample.from_cells(nodes, grid_triangles(n), 2, 2, a.reshape(-1, 1), u.reshape(-1, 1),
                                       label=f"grid{n}")


def gen_darcy_dataset(n_samples: int, n: int = 65, seed: int = 0, threads: int = 1) -> List[PointCloudSample]:
    def build(i: int) -> PointCloudSample:
        a = threshold_field(sample_grf_2d_cosine(n, _sample_rng(seed, i)), DARCY_HIGH, DARCY_LOW)
        return darcy_sample(a, solve_darcy_unit_square(a))

    samples = parallel_map(build, list(range(n_samples)), threads)
    logging.info(f"Generated {len(samples)} Darcy samples on a {n}x{n} grid (seed {seed})")
    return samples


# --- BURGERS ---

def _is_power_of_two(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def stable_burgers_step(u0: np.ndarray, cfl: float = 0.4) -> float:
    dx = 1.0 / u0.size
    return cfl * dx / max(float(np.max(np.abs(u0))), 1e-12)


def solve_burgers_periodic(u0: np.ndarray, nu: float = BURGERS_VISCOSITY, t_end: float = 1.0,
                           dt: Optional[float] = None, cfl: float = 0.4) -> np.ndarray:
    """
    u_t + (u^2/2)_x = nu u_xx on the periodic unit interval. Pseudo-spectral in
    space with 2/3 dealiasing; integrating-factor fourth-order Runge-Kutta in
    time, so diffusion is exact and only advection limits the step.
    """
    u0 = np.asarray(u0, dtype=np.float64)
    n = u0.size
    if not _is_power_of_two(n) or n < 256:
        raise validation_error(f"resolution must be a power of two >= 256, got {n}")
    stable = stable_burgers_step(u0, cfl)
    if dt is None:
        dt = stable
    elif dt > stable:
        logging.warning(f"Requested Burgers step {dt:.3e} exceeds the stable step {stable:.3e}; reducing")
        dt = stable
    n_steps = max(1, math.ceil(t_end / dt - 1e-12))
    dt = t_end / n_steps

    kappa = 2.0 * np.pi * np.arange(n // 2 + 1)
    keep = np.arange(n // 2 + 1) <= n // 3
    e_full = np.exp(-nu * kappa ** 2 * dt)
    e_half = np.exp(-nu * kappa ** 2 * dt / 2.0)

    def nonlinear(u_hat):
        u = fft.irfft(u_hat, n=n)
        return -0.5j * kappa * fft.rfft(u * u) * keep

    u_hat = fft.rfft(u0)
    for _ in range(n_steps):
        k1 = nonlinear(u_hat)
        k2 = nonlinear(e_half * (u_hat + 0.5 * dt * k1))
        k3 = nonlinear(e_half * u_hat + 0.5 * dt * k2)
        k4 = nonlinear(e_full * u_hat + dt * e_half * k3)
        u_hat = e_full * u_hat + dt / 6.0 * (e_full * k1 + 2.0 * e_half * (k2 + k3) + k4)
    return fft.irfft(u_hat, n=n)


def burgers_sample(u0: np.ndarray, u1: np.ndarray) -> PointCloudSample:
    n = u0.size
    nodes = np.arange(n, dtype=np.float64) / n
    return PointCloudSample.from_cells(nodes, _chain_cells(n), 1, 1, u0.reshape(-1, 1), u1.reshape(-1, 1),
                                       label=f"res{n}")


def gen_burgers_dataset(n_samples: int, resolution: int = 256, seed: int = 0, solve_resolution: int = 1024,
                        threads: int = 1) -> List[PointCloudSample]:
    """Initial conditions are solved at solve_resolution and subsampled to resolution."""
    if solve_resolution % resolution:
        raise validation_error(f"solve resolution {solve_resolution} is not a multiple of {resolution}")
    stride = solve_resolution // resolution

    def build(i: int) -> PointCloudSample:
        u0 = sample_grf_periodic_1d(solve_resolution, _sample_rng(seed, i))
        u1 = solve_burgers_periodic(u0)
        return burgers_sample(u0[::stride].copy(), u1[::stride].copy())

    samples = parallel_map(build, list(range(n_samples)), threads)
    logging.info(f"Generated {len(samples)} Burgers samples at resolution {resolution} (seed {seed})")
    return samples
