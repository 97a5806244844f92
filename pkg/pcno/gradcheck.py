"""
Finite-difference verification of every tape primitive, the two geometric
operators and a small end-to-end model.
"""

import logging
import math
from typing import Dict, Optional

import numpy as np

from . import tensor_core as tc
from .dataset_io import pad_and_batch
from .fourier_integral import init_fourier_params, integral_apply, make_mode_set
from .geometry import PointCloudSample, preprocess_sample
from .gradop import apply_gradient
from .model import compute_norm_stats, init_params, model_forward
from .pydantic_models import GradcheckReport, ModelConfig, PreprocessConfig

DEFAULT_TOLERANCE = 1e-5
FD_STEP = 1e-6
# denominators are floored relative to the largest analytic entry
RELATIVE_FLOOR = 1e-6
MODEL_RELATIVE_FLOOR = 1e-4


def _projected(out: tc.Tensor, weights: np.ndarray) -> tc.Tensor:
    if out.is_complex:
        out = tc.real_part(out)
    return tc.sum_all(tc.mul(out, tc.Tensor(weights)))


def random_chain_sample(n_nodes: int, rng: np.random.Generator, d_a: int = 1) -> PointCloudSample:
    """Sorted random points on [0, 1] joined into a segment chain, with random fields."""
    nodes = np.sort(rng.uniform(0.0, 1.0, n_nodes))
    nodes = nodes + np.arange(n_nodes) * 1e-3  # keeps neighbours apart
    cells = [(i, i + 1) for i in range(n_nodes - 1)]
    return PointCloudSample.from_cells(nodes, cells, 1, 1, rng.standard_normal((n_nodes, d_a)),
                                       rng.standard_normal((n_nodes, 1)), label="random")


def primitive_cases(rng: np.random.Generator) -> Dict[str, tuple]:
    """op name -> (scalar function of x, evaluation point)."""
    n, c = 6, 3
    b = rng.standard_normal((c, 4))
    r_nc, r_n4 = rng.standard_normal((n, c)), rng.standard_normal((n, 4))
    partner = rng.standard_normal((n, c))
    rows = rng.standard_normal(n)
    index = rng.integers(0, n, size=9)
    segments = rng.integers(0, 4, size=n)
    mask = rng.uniform(size=n) > 0.3
    mask[0] = True
    modes = make_mode_set(2, 2)
    coords = rng.uniform(0.0, 1.0, (n, 2))
    w_cplx = rng.standard_normal((modes.size, 2, c)) + 1j * rng.standard_normal((modes.size, 2, c))
    coeff_cplx = rng.standard_normal((modes.size, c)) + 1j * rng.standard_normal((modes.size, c))
    x = rng.standard_normal((n, c))

    def const(a):
        return tc.Tensor(a)

    return {
        "matmul": (lambda t: _projected(tc.matmul(t, const(b)), r_n4), x),
        "add": (lambda t: _projected(tc.add(t, const(partner)), r_nc), x),
        "sub": (lambda t: _projected(tc.sub(const(partner), t), r_nc), x),
        "mul": (lambda t: _projected(tc.mul(t, t), r_nc), x),
        "add_bias": (lambda t: _projected(tc.add_bias(const(partner), t), r_nc), rng.standard_normal(c)),
        "scale": (lambda t: _projected(tc.scale(t, -1.7), r_nc), x),
        "scale_rows": (lambda t: _projected(tc.scale_rows(const(partner), t), r_nc), rows),
        "gelu": (lambda t: _projected(tc.gelu(t), r_nc), x),
        "softsign": (lambda t: _projected(tc.softsign(t), r_nc), x),
        "sqrt": (lambda t: _projected(tc.sqrt(t), r_nc), np.abs(x) + 0.5),
        "gather": (lambda t: _projected(tc.gather(t, index), rng_fixed(9, c)), x),
        "segment_sum": (lambda t: _projected(tc.segment_sum(t, segments, 4), rng_fixed(4, c)), x),
        "masked_sum": (lambda t: _projected(tc.masked_sum(t, mask), rng_fixed(1, c)[0]), x),
        "transpose": (lambda t: _projected(tc.transpose(t), r_nc.T.copy()), x),
        "reshape": (lambda t: _projected(tc.reshape(t, (c, n)), rng_fixed(c, n)), x),
        "slice_concat": (lambda t: _projected(tc.concat_rows([tc.slice_rows(t, 2, n), tc.slice_rows(t, 0, 2)]),
                                              r_nc), x),
        "outer_rows": (lambda t: _projected(tc.outer_rows(t, const(partner)), rng_fixed(n, c, c)), x),
        "complex_from": (lambda t: _projected(tc.mul(tc.complex_from(t, tc.scale(t, 0.5)), const(partner + 1j * r_nc)),
                                              np.ones((n, c))), x),
        "phase_angles": (lambda t: _projected(tc.phase_angles(coords, t, modes.modes), rng_fixed(n, modes.size)),
                         np.log(np.array([1.3, 0.8]))),
        "cexp": (lambda t: _projected(tc.mul(tc.cexp(t, -1), const(r_nc + 1j * partner)), np.ones((n, c))), x),
        "mode_mix": (lambda t: _projected(tc.mode_mix(tc.complex_from(t, const(w_cplx.imag)), const(coeff_cplx)),
                                          rng_fixed(modes.size, 2)), w_cplx.real.copy()),
    }


_FIXED_RNG_SEED = 1234


def rng_fixed(*shape) -> np.ndarray:
    return np.random.default_rng([_FIXED_RNG_SEED, *shape]).standard_normal(shape)


def operator_cases(rng: np.random.Generator) -> Dict[str, tuple]:
    sample = preprocess_sample(random_chain_sample(12, rng), PreprocessConfig(intrinsic_dim=1))
    feats = sample.features
    modes = make_mode_set(3, 1)
    params = init_fourier_params(2, 2, modes, 1, [1.4], rng)
    f = rng.standard_normal((sample.n_nodes, 2))
    r = rng.standard_normal((sample.n_nodes, 2))
    r_grad = rng.standard_normal((sample.n_nodes, 1, 2))

    def integral_of_f(t):
        return _projected(integral_apply(params, feats.rho, feats.dOmega, sample.nodes, t, sample.node_mask), r)

    def integral_of_length(t):
        params.log_length = t
        return _projected(integral_apply(params, feats.rho, feats.dOmega, sample.nodes, tc.Tensor(f),
                                         sample.node_mask), r)

    return {
        "apply_gradient": (lambda t: _projected(apply_gradient(sample.gradient, t), r_grad), f),
        "integral_apply": (integral_of_f, f),
        "integral_length": (integral_of_length, params.log_length.data.copy()),
    }


def check_cases(cases: Dict[str, tuple], step: float = FD_STEP) -> Dict[str, float]:
    results = {}
    for name, (fn, point) in cases.items():
        _, analytic = tc.value_and_grad(fn, point)
        floor = RELATIVE_FLOOR * max(1.0, float(np.max(np.abs(analytic))))
        results[name] = tc.finite_diff_check(fn, point, step=step, floor=floor)
        logging.debug(f"gradcheck {name}: {results[name]:.3e}")
    return results


def model_gradcheck(seed: int = 0, n_nodes: int = 30, width: int = 8, k_max: int = 2, coords_per_param: int = 4,
                    step: float = FD_STEP) -> Dict[str, float]:
    """
    Compare tape gradients of a fixed random linear functional of the
    prediction with central differences for a random subset of coordinates
    of every parameter tensor. The functional is summed exactly (math.fsum)
    so the finite differences only see the rounding of the forward pass.
    """
    rng = np.random.default_rng(seed)
    sample = preprocess_sample(random_chain_sample(n_nodes, rng), PreprocessConfig(intrinsic_dim=1))
    config = ModelConfig(dim=1, d_a=1, d_u=1, width=width, k_max=k_max, proj_width=width)
    model = init_params(config, seed, length_init=[1.2])
    model.norm_stats = compute_norm_stats([sample])
    batch = pad_and_batch([sample])
    functional_weights = rng.standard_normal((batch.flat_mask.size, config.d_u)) * batch.flat_mask[:, None]
    params = model.named_parameters()

    def objective_value() -> float:
        return math.fsum((model_forward(model, batch).numpy() * functional_weights).ravel().tolist())

    with tc.Tape() as tape:
        objective = _projected(model_forward(model, batch), functional_weights)
        grads = tape.backward(objective, params)
    scale = max(float(np.max(np.abs(g))) for g in grads.values())
    floor = MODEL_RELATIVE_FLOOR * max(scale, 1e-12)

    results = {}
    for name, tensor in params.items():
        flat = tensor.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(coords_per_param, flat.size), replace=False)
        worst = 0.0
        for c in picks:
            original = flat[c]
            flat[c] = original + step
            f_plus = objective_value()
            flat[c] = original - step
            f_minus = objective_value()
            flat[c] = original
            numeric = (f_plus - f_minus) / (2.0 * step)
            analytic = float(grads[name].reshape(-1)[c])
            worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor))
        results[f"model:{name}"] = worst
    return results


def run_gradcheck(seed: int = 0, tolerance: float = DEFAULT_TOLERANCE, include_model: bool = True,
                  step: float = FD_STEP, model_nodes: Optional[int] = None) -> GradcheckReport:
    rng = np.random.default_rng(seed)
    per_op = check_cases(primitive_cases(rng), step)
    per_op.update(check_cases(operator_cases(rng), step))
    if include_model:
        per_op.update(model_gradcheck(seed, n_nodes=model_nodes or 30, step=step))
    worst_op = max(per_op, key=per_op.get)
    report = GradcheckReport(passed=per_op[worst_op] <= tolerance, tolerance=tolerance, per_op=per_op,
                             worst_op=worst_op, worst_discrepancy=per_op[worst_op])
    log = logging.info if report.passed else logging.error
    log(f"Gradient check {'passed' if report.passed else 'FAILED'}: worst op {worst_op} at {per_op[worst_op]:.3e}")
    return report
