"""
Low-rank Fourier integral operator on point clouds.

For each retained mode k the kernel exp(2 pi i (k/L).(x - y)) factors into a
forward transform (a density-weighted quadrature over the nodes) and an inverse
transform evaluated at the same nodes, so one application costs
O(N * |K+| * d_in * d_out). Only a half-space representative set K+ of modes is
parameterized; the conjugate partners are folded in with weight 2, which makes
the output exactly real.
"""

import itertools
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from . import tensor_core as tc
from .error_utils import PCNOError, shape_error


@dataclass
class FourierModeSet:
    modes: np.ndarray   # (K, d) integer modes, k = 0 first
    k_max: int

    @property
    def dim(self) -> int:
        return self.modes.shape[1]

    @property
    def size(self) -> int:
        return self.modes.shape[0]

    @property
    def fold(self) -> np.ndarray:
        """Conjugate-pair folding weights: 1 for k = 0, 2 otherwise."""
        weights = np.full(self.size, 2.0)
        weights[0] = 1.0
        return weights

    @property
    def full_size(self) -> int:
        return (2 * self.k_max + 1) ** self.dim


def _lexicographically_positive(k) -> bool:
    for component in k:
        if component != 0:
            return component > 0
    return False


def make_mode_set(k_max: int, dim: int) -> FourierModeSet:
    if k_max < 0 or dim < 1:
        raise PCNOError("INVALID_CONFIG", f"invalid mode set: k_max={k_max}, dim={dim}")
    grid = itertools.product(range(-k_max, k_max + 1), repeat=dim)
    positive = [k for k in grid if _lexicographically_positive(k)]
    modes = np.array([(0,) * dim] + positive, dtype=np.int64).reshape(-1, dim)
    return FourierModeSet(modes=modes, k_max=k_max)


@dataclass
class FourierIntegralParams:
    weight_re: List[tc.Tensor]   # per subdomain, (K, d_out, d_in)
    weight_im: List[tc.Tensor]
    log_length: tc.Tensor        # (d,)
    modes: FourierModeSet

    @property
    def n_subdomains(self) -> int:
        return len(self.weight_re)

    @property
    def length(self) -> np.ndarray:
        return np.exp(self.log_length.data)

    def complex_weights(self, subdomain: int) -> tc.Tensor:
        # the k = 0 block is kept real so that W_{-k} = conj(W_k) holds for the whole spectrum
        im_mask = np.ones(self.weight_im[subdomain].shape, dtype=self.weight_im[subdomain].dtype)
        im_mask[0] = 0.0
        return tc.complex_from(self.weight_re[subdomain], tc.mul(self.weight_im[subdomain], tc.Tensor(im_mask)))


def init_fourier_params(d_in: int, d_out: int, modes: FourierModeSet, n_subdomains: int, length_init,
                        rng: np.random.Generator, dtype=np.float64) -> FourierIntegralParams:
    """Independent complex Gaussian weights with scale 1/(d_in * |K+|); L stored as log L."""
    scale = 1.0 / (d_in * modes.size)
    weight_re, weight_im = [], []
    for _ in range(n_subdomains):
        re = scale * rng.standard_normal((modes.size, d_out, d_in))
        im = scale * rng.standard_normal((modes.size, d_out, d_in))
        im[0] = 0.0
        weight_re.append(tc.Tensor(re.astype(dtype), requires_grad=True))
        weight_im.append(tc.Tensor(im.astype(dtype), requires_grad=True))
    length = np.broadcast_to(np.asarray(length_init, dtype=np.float64), (modes.dim,))
    if np.any(length <= 0):
        raise PCNOError("INVALID_CONFIG", "length scales must be positive")
    log_length = tc.Tensor(np.log(length).astype(dtype), requires_grad=True)
    return FourierIntegralParams(weight_re=weight_re, weight_im=weight_im, log_length=log_length, modes=modes)


def quadrature_weights(rho: np.ndarray, dOmega: np.ndarray, node_mask: np.ndarray,
                       subdomain_id: Optional[np.ndarray] = None, subdomain: Optional[int] = None) -> np.ndarray:
    """rho_i * dOmega_i on unmasked nodes (of one subdomain, if given), zero elsewhere."""
    node_mask = np.asarray(node_mask, dtype=bool)
    if np.any(rho[node_mask] <= 0) or np.any(dOmega[node_mask] <= 0):
        raise PCNOError("INVALID_DENSITY", "density and measure must be positive on unmasked nodes")
    active = node_mask if subdomain is None else node_mask & (subdomain_id == subdomain)
    if subdomain is not None and not active.any():
        raise PCNOError("EMPTY_SUBDOMAIN", f"subdomain {subdomain} has no unmasked nodes", {"subdomain": subdomain})
    return np.where(active, rho * dOmega, 0.0)


def _forward_coefficients(params: FourierIntegralParams, e_minus_t: tc.Tensor, f_in: tc.Tensor,
                          weights: np.ndarray, subdomain: int) -> tc.Tensor:
    """G_{s,k} = W_{s,k} sum_i exp(-2 pi i (k/L).x_i) f_in(x_i) rho_i dOmega_i."""
    coeffs = tc.matmul(e_minus_t, tc.scale_rows(f_in, tc.Tensor(weights.astype(f_in.dtype, copy=False))))
    return tc.mode_mix(params.complex_weights(subdomain), coeffs)


def _inverse_transform(params: FourierIntegralParams, e_plus: tc.Tensor, mixed: tc.Tensor) -> tc.Tensor:
    folded = tc.scale_rows(mixed, tc.Tensor(params.modes.fold.astype(mixed.data.real.dtype, copy=False)))
    return tc.real_part(tc.matmul(e_plus, folded))


def _transforms(params: FourierIntegralParams, coords: np.ndarray):
    theta = tc.phase_angles(coords, params.log_length, params.modes.modes)
    return tc.transpose(tc.cexp(theta, -1)), tc.cexp(theta, 1)


def _check_inputs(params: FourierIntegralParams, coords: np.ndarray, f_in: tc.Tensor) -> None:
    if coords.ndim != 2 or coords.shape[1] != params.modes.dim or f_in.ndim != 2 or f_in.shape[0] != coords.shape[0]:
        raise shape_error("integral_apply", coords.shape, f_in.shape)
    d_in = params.weight_re[0].shape[2]
    if f_in.shape[1] != d_in:
        raise shape_error("integral_apply", f_in.shape, params.weight_re[0].shape)


def integral_apply(params: FourierIntegralParams, rho: np.ndarray, dOmega: np.ndarray, coords: np.ndarray,
                   f_in: tc.Tensor, node_mask: np.ndarray, subdomain_id: Optional[np.ndarray] = None,
                   subdomain: int = 0) -> tc.Tensor:
    """
    Integral over subdomain `subdomain` (the whole cloud when subdomain_id is
    None) evaluated at every node.
    """
    f_in = tc.as_tensor(f_in)
    coords = np.asarray(coords)
    _check_inputs(params, coords, f_in)
    if subdomain_id is None:
        weights = quadrature_weights(rho, dOmega, node_mask)
    else:
        weights = quadrature_weights(rho, dOmega, node_mask, subdomain_id, subdomain)
    e_minus_t, e_plus = _transforms(params, coords)
    return _inverse_transform(params, e_plus, _forward_coefficients(params, e_minus_t, f_in, weights, subdomain))


def multi_domain_apply(params: FourierIntegralParams, rho: np.ndarray, dOmega: np.ndarray, coords: np.ndarray,
                       f_in: tc.Tensor, node_mask: np.ndarray, subdomain_id: np.ndarray) -> tc.Tensor:
    """
    Sum over subdomains of their integrals, each evaluated at all nodes. The
    mixed coefficients are summed before one shared inverse transform, which
    is the same linear map as summing per-subdomain outputs.
    """
    f_in = tc.as_tensor(f_in)
    coords = np.asarray(coords)
    _check_inputs(params, coords, f_in)
    node_mask = np.asarray(node_mask, dtype=bool)
    active = subdomain_id[node_mask]
    n_sub = int(active.max()) + 1 if active.size else 0
    if n_sub > params.n_subdomains:
        raise PCNOError("INCONSISTENT_DIMS", f"sample has {n_sub} subdomains, operator has {params.n_subdomains}")

    e_minus_t, e_plus = _transforms(params, coords)
    mixed = None
    for s in range(n_sub):
        weights = quadrature_weights(rho, dOmega, node_mask, subdomain_id, s)
        g = _forward_coefficients(params, e_minus_t, f_in, weights, s)
        mixed = g if mixed is None else tc.add(mixed, g)
    if mixed is None:
        raise PCNOError("EMPTY_SUBDOMAIN", "no unmasked nodes to integrate over")
    return _inverse_transform(params, e_plus, mixed)


def full_spectrum_weights(params: FourierIntegralParams, subdomain: int = 0):
    """Yield (k, W_k) over the full mode grid, with W_{-k} = conj(W_k)."""
    w = params.weight_re[subdomain].data + 1j * params.weight_im[subdomain].data
    w[0] = w[0].real
    lookup = {tuple(k): i for i, k in enumerate(params.modes.modes.tolist())}
    for k in itertools.product(range(-params.modes.k_max, params.modes.k_max + 1), repeat=params.modes.dim):
        if k in lookup:
            yield np.array(k), w[lookup[k]]
        else:
            yield np.array(k), np.conj(w[lookup[tuple(-c for c in k)]])


def dense_kernel_apply(params: FourierIntegralParams, rho: np.ndarray, dOmega: np.ndarray, coords: np.ndarray,
                       f_in: np.ndarray, node_mask: np.ndarray, subdomain_id: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Reference O(N^2) evaluation: explicit kernel matrix per mode over the full
    spectrum, summed over subdomains.
    """
    coords = np.asarray(coords, dtype=np.float64)
    f_in = np.asarray(f_in, dtype=np.float64)
    node_mask = np.asarray(node_mask, dtype=bool)
    subdomain_id = np.zeros(coords.shape[0], dtype=np.int64) if subdomain_id is None else subdomain_id
    inv_length = 1.0 / params.length
    diff = coords[:, None, :] - coords[None, :, :]                     # (N_out, N_in, d)
    out = np.zeros((coords.shape[0], params.weight_re[0].shape[1]), dtype=np.complex128)
    for s in range(int(subdomain_id[node_mask].max()) + 1):
        w = quadrature_weights(rho, dOmega, node_mask, subdomain_id, s)
        weighted = f_in * w[:, None]
        for k, w_k in full_spectrum_weights(params, s):
            kernel = np.exp(2j * np.pi * diff @ (k * inv_length))
            out += kernel @ (weighted @ w_k.T)
    return out.real
