"""
Gaussian random field samplers with covariance scale * (-Laplacian + tau^2)^(-alpha),
expanded in Laplacian eigenfunctions: Dirichlet sines on [0, 1], Neumann
cosines on the unit square, Fourier modes on the periodic interval.
"""

from typing import Optional, Tuple

import numpy as np
from scipy import fft

from .error_utils import validation_error
from .pydantic_models import GRFSpec1D


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


# --- DIRICHLET 1D ---

def dirichlet_grf_coefficients(spec: GRFSpec1D, seed) -> np.ndarray:
    """Coefficients xi_m * sqrt(scale) * (pi^2 m^2 + tau^2)^(-alpha/2), m = 1..n_terms."""
    m = np.arange(1, spec.n_terms + 1, dtype=np.float64)
    decay = np.sqrt(spec.scale) * (np.pi ** 2 * m ** 2 + spec.tau ** 2) ** (-spec.alpha / 2.0)
    return _rng(seed).standard_normal(spec.n_terms) * decay


def eval_sine_series(coeffs: np.ndarray, x: np.ndarray) -> np.ndarray:
    """g(x) = sum_m coeffs[m] * sqrt(2) sin(pi m x); exactly zero at x = 0 and x = 1."""
    x = np.asarray(x, dtype=np.float64)
    m = np.arange(1, coeffs.size + 1, dtype=np.float64)
    values = np.sqrt(2.0) * np.sin(np.pi * np.multiply.outer(x, m)) @ coeffs
    return np.where((x == 0.0) | (x == 1.0), 0.0, values)


def sample_grf_1d(spec: Optional[GRFSpec1D] = None, seed=0, resolution: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    One zero-boundary field on a uniform reference grid of [0, 1].

    Returns:
        (grid, values), both of length resolution + 1
    """
    spec = spec or GRFSpec1D()
    resolution = spec.resolution if resolution is None else resolution
    if resolution < 512:
        raise validation_error(f"reference grid resolution must be at least 512, got {resolution}")
    grid = np.linspace(0.0, 1.0, resolution + 1)
    return grid, eval_sine_series(dirichlet_grf_coefficients(spec, seed), grid)


def pointwise_variance_1d(spec: GRFSpec1D, x: float) -> float:
    """Variance of the truncated series at x."""
    m = np.arange(1, spec.n_terms + 1, dtype=np.float64)
    decay = np.sqrt(spec.scale) * (np.pi ** 2 * m ** 2 + spec.tau ** 2) ** (-spec.alpha / 2.0)
    return float(np.sum((decay * np.sqrt(2.0) * np.sin(np.pi * m * x)) ** 2))


# --- NEUMANN 2D (unit square) ---

def sample_grf_2d_cosine(n: int, seed, tau: float = 3.0, alpha: float = 2.0, n_modes: Optional[int] = None) -> np.ndarray:
    """
    Zero-mean field on the n x n vertex grid of [0, 1]^2 from a cosine
    expansion; the constant mode is dropped.
    """
    n_modes = n if n_modes is None else n_modes
    k = np.arange(n_modes, dtype=np.float64)
    k1, k2 = np.meshgrid(k, k, indexing="ij")
    decay = tau ** (alpha - 1.0) * (np.pi ** 2 * (k1 ** 2 + k2 ** 2) + tau ** 2) ** (-alpha / 2.0)
    decay[0, 0] = 0.0
    coeffs = _rng(seed).standard_normal((n_modes, n_modes)) * decay
    x = np.linspace(0.0, 1.0, n)
    basis = np.cos(np.pi * np.outer(x, k))                     # (n, n_modes)
    return basis @ coeffs @ basis.T


def threshold_field(field: np.ndarray, high: float = 12.0, low: float = 3.0) -> np.ndarray:
    """Piecewise-constant coefficient: high where the field is non-negative, low elsewhere."""
    return np.where(field >= 0.0, high, low)


# --- PERIODIC 1D ---

def sample_grf_periodic_1d(resolution: int, seed, tau: float = 5.0, alpha: float = 2.0) -> np.ndarray:
    """Zero-mean periodic field on resolution points of [0, 1), scaled to unit sup-norm."""
    k = np.arange(resolution // 2 + 1, dtype=np.float64)
    decay = (4.0 * np.pi ** 2 * k ** 2 + tau ** 2) ** (-alpha / 2.0)
    decay[0] = 0.0
    if resolution % 2 == 0:
        decay[-1] = 0.0
    rng = _rng(seed)
    coeffs = (rng.standard_normal(k.size) + 1j * rng.standard_normal(k.size)) * decay
    values = fft.irfft(coeffs, n=resolution)
    peak = np.max(np.abs(values))
    return values / peak if peak > 0 else values
