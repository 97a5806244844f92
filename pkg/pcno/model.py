"""
The point cloud neural operator: input construction, lifting, a stack of
point cloud neural layers and a two-layer projection.

Each layer maps f_in to
    gelu(W_l f_in + b + K(f_in) + W_g softsign(grad f_in))
where K is the Fourier integral operator of fourier_integral.py and grad is
the least-squares gradient of gradop.py. Padded nodes are zeroed after every
layer.
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import tensor_core as tc
from .dataset_io import Batch, pad_and_batch
from .error_utils import PCNOError
from .fourier_integral import FourierIntegralParams, FourierModeSet, init_fourier_params, make_mode_set, multi_domain_apply
from .geometry import PointCloudSample, bounding_box
from .gradop import apply_gradient, softsign_smooth
from .pydantic_models import ModelConfig

STD_FLOOR = 1e-12


# --- NORMALIZATION ---

@dataclass
class NormStats:
    a_mean: np.ndarray
    a_std: np.ndarray
    coord_lo: np.ndarray
    coord_hi: np.ndarray
    rho_mean: float
    rho_std: float
    u_mean: np.ndarray
    u_std: np.ndarray

    def to_dict(self) -> Dict[str, list]:
        return {k: np.asarray(v).tolist() for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, data: Dict[str, list]) -> "NormStats":
        return cls(a_mean=np.asarray(data["a_mean"], dtype=np.float64), a_std=np.asarray(data["a_std"], dtype=np.float64),
                   coord_lo=np.asarray(data["coord_lo"], dtype=np.float64), coord_hi=np.asarray(data["coord_hi"], dtype=np.float64),
                   rho_mean=float(data["rho_mean"]), rho_std=float(data["rho_std"]),
                   u_mean=np.asarray(data["u_mean"], dtype=np.float64), u_std=np.asarray(data["u_std"], dtype=np.float64))


def _floored(std: np.ndarray) -> np.ndarray:
    std = np.asarray(std, dtype=np.float64)
    return np.where(std > STD_FLOOR, std, 1.0)


def compute_norm_stats(samples: Sequence[PointCloudSample]) -> NormStats:
    """Per-channel mean/std over unmasked training nodes; coordinates use the global bounding box."""
    if not samples:
        raise PCNOError("EMPTY_DATASET", "cannot compute normalization statistics of zero samples")
    if any(s.features is None for s in samples):
        raise PCNOError("MISSING_FEATURES", "normalization needs preprocessed samples")
    a = np.concatenate([s.a[s.node_mask] for s in samples], axis=0)
    rho = np.concatenate([s.features.rho[s.node_mask] for s in samples])
    lo, hi = bounding_box(samples)
    if all(s.u is not None for s in samples):
        u = np.concatenate([s.u[s.node_mask] for s in samples], axis=0)
        u_mean, u_std = u.mean(axis=0), _floored(u.std(axis=0))
    else:
        u_mean, u_std = np.zeros(samples[0].d_u), np.ones(samples[0].d_u)
    return NormStats(a_mean=a.mean(axis=0), a_std=_floored(a.std(axis=0)), coord_lo=lo, coord_hi=hi,
                     rho_mean=float(rho.mean()), rho_std=float(_floored(rho.std())),
                     u_mean=u_mean, u_std=u_std)


# --- PARAMETERS ---

@dataclass
class LayerParams:
    linear_weight: tc.Tensor    # (C_in, C_out), applied as f @ W
    linear_bias: tc.Tensor      # (C_out,)
    gradient_weight: tc.Tensor  # (d * C_in, C_out)
    fourier: FourierIntegralParams

    @property
    def d_in(self) -> int:
        return self.linear_weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.linear_weight.shape[1]


@dataclass
class ModelParams:
    config: ModelConfig
    modes: FourierModeSet
    lift_weight: tc.Tensor
    lift_bias: tc.Tensor
    layers: List[LayerParams]
    proj_hidden_weight: tc.Tensor
    proj_hidden_bias: tc.Tensor
    proj_out_weight: tc.Tensor
    proj_out_bias: tc.Tensor
    norm_stats: Optional[NormStats] = None

    def named_parameters(self) -> "OrderedDict[str, tc.Tensor]":
        params = OrderedDict()
        params["lift.weight"] = self.lift_weight
        params["lift.bias"] = self.lift_bias
        for l, layer in enumerate(self.layers):
            params[f"layers.{l}.linear.weight"] = layer.linear_weight
            params[f"layers.{l}.linear.bias"] = layer.linear_bias
            params[f"layers.{l}.gradient.weight"] = layer.gradient_weight
            params[f"layers.{l}.fourier.log_length"] = layer.fourier.log_length
            for s in range(layer.fourier.n_subdomains):
                params[f"layers.{l}.fourier.weight_re.{s}"] = layer.fourier.weight_re[s]
                params[f"layers.{l}.fourier.weight_im.{s}"] = layer.fourier.weight_im[s]
        params["proj.hidden.weight"] = self.proj_hidden_weight
        params["proj.hidden.bias"] = self.proj_hidden_bias
        params["proj.out.weight"] = self.proj_out_weight
        params["proj.out.bias"] = self.proj_out_bias
        return params

    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, t.data.copy()) for name, t in self.named_parameters().items())

    def load_state(self, arrays: Dict[str, np.ndarray]) -> None:
        for name, tensor in self.named_parameters().items():
            if name not in arrays:
                raise PCNOError("INCONSISTENT_DIMS", f"missing parameter '{name}'")
            value = np.asarray(arrays[name])
            if value.shape != tensor.shape:
                raise PCNOError("INCONSISTENT_DIMS", f"parameter '{name}' has shape {value.shape}, expected {tensor.shape}")
            tensor.data = value.astype(tensor.dtype, copy=True)

    def copy(self) -> "ModelParams":
        twin = init_params(self.config, seed=0)
        twin.load_state(self.state_arrays())
        twin.norm_stats = self.norm_stats
        return twin

    @property
    def n_parameters(self) -> int:
        return int(sum(t.data.size for t in self.named_parameters().values()))


def _uniform(rng: np.random.Generator, d_in: int, shape, dtype) -> tc.Tensor:
    bound = 1.0 / np.sqrt(d_in)
    return tc.Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def _zeros(n: int, dtype) -> tc.Tensor:
    return tc.Tensor(np.zeros(n, dtype=dtype), requires_grad=True)


def init_params(config: ModelConfig, seed: int, length_init=None) -> ModelParams:
    """
    Deterministic initialization: affine weights uniform in +-1/sqrt(d_in),
    zero biases, Fourier weights complex Gaussian.
    """
    if not isinstance(config, ModelConfig):
        config = ModelConfig(**config)
    dtype = tc.DTYPES[config.dtype]
    rng = np.random.default_rng(seed)
    if length_init is None:
        length_init = config.length_init if config.length_init is not None else np.ones(config.dim)
    modes = make_mode_set(config.k_max, config.dim)

    c, d = config.width, config.dim
    d_lift = config.d_a + d + 1
    lift_weight = _uniform(rng, d_lift, (d_lift, c), dtype)
    layers = []
    for _ in range(config.layers):
        layers.append(LayerParams(
            linear_weight=_uniform(rng, c, (c, c), dtype),
            linear_bias=_zeros(c, dtype),
            gradient_weight=_uniform(rng, d * c, (d * c, c), dtype),
            fourier=init_fourier_params(c, c, modes, config.n_subdomains, length_init, rng, dtype)))
    return ModelParams(
        config=config, modes=modes, lift_weight=lift_weight, lift_bias=_zeros(c, dtype), layers=layers,
        proj_hidden_weight=_uniform(rng, c, (c, config.proj_width), dtype), proj_hidden_bias=_zeros(config.proj_width, dtype),
        proj_out_weight=_uniform(rng, config.proj_width, (config.proj_width, config.d_u), dtype),
        proj_out_bias=_zeros(config.d_u, dtype))


# --- FORWARD ---

def build_input(batch: Batch, norm_stats: Optional[NormStats], d_a: int, dtype=np.float64) -> np.ndarray:
    """
    Rows [a, x, rho] per node, normalized; padded rows are exactly zero.
    Returns a (B*N, d_a + d + 1) array.
    """
    if batch.a.shape[2] != d_a:
        raise PCNOError("INCONSISTENT_DIMS", f"sample has {batch.a.shape[2]} input channels, model expects {d_a}",
                        {"expected": d_a, "found": int(batch.a.shape[2])})
    a, x, rho = batch.a, batch.nodes, batch.rho[..., None]
    if norm_stats is not None:
        a = (a - norm_stats.a_mean) / norm_stats.a_std
        x = (x - norm_stats.coord_lo) / _floored(norm_stats.coord_hi - norm_stats.coord_lo)
        rho = (rho - norm_stats.rho_mean) / norm_stats.rho_std
    rows = np.concatenate([a, x, rho], axis=2)
    rows = np.where(batch.mask[..., None], rows, 0.0)
    return rows.reshape(-1, rows.shape[2]).astype(dtype)


def _mask_rows(f: tc.Tensor, batch: Batch) -> tc.Tensor:
    return tc.scale_rows(f, tc.Tensor(batch.flat_mask.astype(f.dtype)))


def integral_term(layer: LayerParams, batch: Batch, f_in: tc.Tensor) -> tc.Tensor:
    n = batch.n_max
    parts = []
    for b in range(batch.batch_size):
        coords = np.where(batch.mask[b][:, None], batch.nodes[b], 0.0)
        parts.append(multi_domain_apply(layer.fourier, batch.rho[b], batch.dOmega[b], coords,
                                        tc.slice_rows(f_in, b * n, (b + 1) * n), batch.mask[b], batch.subdomain_id[b]))
    return parts[0] if len(parts) == 1 else tc.concat_rows(parts)


def gradient_term(layer: LayerParams, batch: Batch, f_in: tc.Tensor) -> tc.Tensor:
    grad = softsign_smooth(apply_gradient(batch.gradient, f_in))        # (B*N, d, C)
    flat = tc.reshape(grad, (grad.shape[0], grad.shape[1] * grad.shape[2]))
    return tc.matmul(flat, layer.gradient_weight)


def layer_forward(layer: LayerParams, batch: Batch, f_in: tc.Tensor) -> tc.Tensor:
    local = tc.add_bias(tc.matmul(f_in, layer.linear_weight), layer.linear_bias)
    total = tc.add(tc.add(local, integral_term(layer, batch, f_in)), gradient_term(layer, batch, f_in))
    return _mask_rows(tc.gelu(total), batch)


def model_forward(model: ModelParams, batch: Batch) -> tc.Tensor:
    """(B*N, d_u) predictions in physical units, zero on padded rows."""
    dtype = model.lift_weight.dtype
    x = tc.Tensor(build_input(batch, model.norm_stats, model.config.d_a, dtype))
    f = _mask_rows(tc.gelu(tc.add_bias(tc.matmul(x, model.lift_weight), model.lift_bias)), batch)
    for layer in model.layers:
        f = layer_forward(layer, batch, f)
    hidden = tc.gelu(tc.add_bias(tc.matmul(f, model.proj_hidden_weight), model.proj_hidden_bias))
    out = tc.add_bias(tc.matmul(hidden, model.proj_out_weight), model.proj_out_bias)
    if model.norm_stats is not None:
        std = np.diag(model.norm_stats.u_std).astype(dtype)
        out = tc.add_bias(tc.matmul(out, tc.Tensor(std)), tc.Tensor(model.norm_stats.u_mean.astype(dtype)))
    return _mask_rows(out, batch)


def predict(model: ModelParams, sample: PointCloudSample) -> np.ndarray:
    """Single-sample inference; returns the (N, d_u) prediction."""
    batch = pad_and_batch([sample])
    out = model_forward(model, batch).numpy()
    logging.debug(f"Predicted sample '{sample.label}' with {sample.n_nodes} nodes")
    return out[:sample.n_nodes].astype(np.float64)
