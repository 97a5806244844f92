"""
Dense real/complex tensors with a reverse-mode differentiation tape.

Only the primitives the PCNO forward pass and its loss need are provided. Every
primitive computes its value with numpy and, when a tape is active on the
current thread and any input requires a gradient, records a node whose backward
rule is looked up by op name in BACKWARD_RULES at backward time.

Complex adjoint convention: the adjoint stored for a complex tensor z is
d(loss)/d(Re z) + i d(loss)/d(Im z). Real inputs keep the real part of whatever
adjoint flows into them.
"""

import logging
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.special import erf

from .error_utils import PCNOError, numerical_error, shape_error

try:
    from settings import STRICT_FINITE as _STRICT_DEFAULT
except ImportError:  # library used outside the repository root
    _STRICT_DEFAULT = False

DTYPES = {"real64": np.float64, "real32": np.float32, "complex128": np.complex128}

# python floats: single-precision inputs must not be promoted
_SQRT_2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

# Thread-local storage: each thread owns its stack of active tapes
_tape_local = threading.local()
_strict_mode = {"enabled": _STRICT_DEFAULT}


def set_strict_mode(enabled: bool) -> None:
    """Reject non-finite primitive inputs when enabled."""
    _strict_mode["enabled"] = bool(enabled)


def strict_mode() -> bool:
    return _strict_mode["enabled"]


class Tensor:
    """A dense row-major array plus the bookkeeping the tape needs."""

    __slots__ = ("data", "requires_grad", "name", "grad")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if arr.dtype.kind in "biu":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise PCNOError("NOT_SCALAR", f"item() on tensor of shape {self.shape}")
        return self.data.reshape(()).item()

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"<Tensor{label} shape={self.shape} dtype={self.dtype} requires_grad={self.requires_grad}>"

    def __add__(self, other): return add(self, other)
    def __sub__(self, other): return sub(self, other)
    def __mul__(self, other): return mul(self, other)
    def __matmul__(self, other): return matmul(self, other)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


@dataclass
class Node:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    saved: Dict[str, object] = field(default_factory=dict)


class Tape:
    """
    Ordered record of primitive applications. Use as a context manager; the
    tape is active for the current thread only.
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self._outputs = set()

    def __enter__(self):
        stack = getattr(_tape_local, "stack", None)
        if stack is None:
            stack = _tape_local.stack = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_local.stack.pop()
        return False

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, saved: Dict[str, object]) -> None:
        self.nodes.append(Node(op, tuple(inputs), output, saved))
        self._outputs.add(id(output))

    def backward(self, loss: Tensor, params: Optional[Mapping[str, Tensor]] = None) -> Dict[str, np.ndarray]:
        """
        Propagate adjoints from a scalar loss back through the recorded nodes.

        Args:
            loss: Scalar tensor produced on this tape
            params: Name -> leaf tensor map whose adjoints are returned

        Returns:
            Name -> d(loss)/d(param), zeros for parameters the loss does not reach
        """
        if loss.data.size != 1:
            raise PCNOError("NOT_SCALAR", f"backward on non-scalar of shape {loss.shape}", {"shape": list(loss.shape)})
        if id(loss) not in self._outputs:
            raise PCNOError("NOT_SCALAR", "loss was not produced on this tape")

        adjoints: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = adjoints.pop(id(node.output), None)
            if g is None:
                continue
            rule = BACKWARD_RULES[node.op]
            input_grads = rule(g, node)
            for inp, ig in zip(node.inputs, input_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if not np.iscomplexobj(inp.data) and np.iscomplexobj(ig):
                    ig = ig.real
                if ig.shape != inp.shape:
                    raise shape_error(f"backward:{node.op}", ig.shape, inp.shape)
                key = id(inp)
                if key in adjoints:
                    adjoints[key] = adjoints[key] + ig
                else:
                    adjoints[key] = ig

        grads: Dict[str, np.ndarray] = {}
        for name, tensor in (params or {}).items():
            g = adjoints.get(id(tensor))
            g = np.zeros_like(tensor.data) if g is None else g.astype(tensor.dtype, copy=False)
            tensor.grad = g
            grads[name] = g
        return grads


def current_tape() -> Optional[Tape]:
    stack = getattr(_tape_local, "stack", None)
    return stack[-1] if stack else None


def _check_finite(op: str, inputs: Sequence[Tensor]) -> None:
    for t in inputs:
        if not np.all(np.isfinite(t.data)):
            raise numerical_error(f"{op}: non-finite input", op=op, shape=list(t.shape))


def _apply(op: str, inputs: Sequence[Tensor], value: np.ndarray, **saved) -> Tensor:
    if _strict_mode["enabled"]:
        _check_finite(op, inputs)
    out = Tensor(value, requires_grad=any(t.requires_grad for t in inputs))
    tape = current_tape()
    if tape is not None and out.requires_grad:
        tape.record(op, inputs, out, saved)
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise shape_error(op, a.shape, b.shape)


# --- PRIMITIVES ---

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise shape_error("matmul", a.shape, b.shape)
    return _apply("matmul", (a, b), a.data @ b.data)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return _apply("add", (a, b), a.data + b.data)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return _apply("sub", (a, b), a.data - b.data)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    return _apply("mul", (a, b), a.data * b.data)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """x[n, c] + bias[c] for every row n."""
    x, bias = as_tensor(x), as_tensor(bias)
    if x.ndim != 2 or bias.ndim != 1 or x.shape[1] != bias.shape[0]:
        raise shape_error("add_bias", x.shape, bias.shape)
    return _apply("add_bias", (x, bias), x.data + bias.data[None, :])


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a constant scalar."""
    x = as_tensor(x)
    return _apply("scale", (x,), x.data * factor, factor=factor)


def scale_rows(x: Tensor, weights: Tensor) -> Tensor:
    """x[n, ...] * weights[n]."""
    x, weights = as_tensor(x), as_tensor(weights)
    if weights.ndim != 1 or x.ndim < 1 or x.shape[0] != weights.shape[0]:
        raise shape_error("scale_rows", x.shape, weights.shape)
    w = weights.data.reshape((-1,) + (1,) * (x.ndim - 1))
    return _apply("scale_rows", (x, weights), x.data * w)


def gelu(x: Tensor) -> Tensor:
    """Exact GeLU: x * Phi(x) with the erf form of the normal CDF."""
    x = as_tensor(x)
    return _apply("gelu", (x,), 0.5 * x.data * (1.0 + erf(x.data / _SQRT_2)))


def softsign(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _apply("softsign", (x,), x.data / (1.0 + np.abs(x.data)))


def sqrt(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data < 0):
        raise numerical_error("sqrt of negative value", op="sqrt")
    return _apply("sqrt", (x,), np.sqrt(x.data))


def gather(x: Tensor, index: np.ndarray) -> Tensor:
    """Rows x[index[e]]."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 1 or (index.size and (index.min() < 0 or index.max() >= x.shape[0])):
        raise shape_error("gather", x.shape, index.shape)
    return _apply("gather", (x,), x.data[index], index=index, n_rows=x.shape[0])


def _segment_sum_array(values: np.ndarray, segments: np.ndarray, n_segments: int) -> np.ndarray:
    out = np.zeros((n_segments,) + values.shape[1:], dtype=values.dtype)
    # np.add.at accumulates sequentially in index order, so results are deterministic
    np.add.at(out, segments, values)
    return out


def segment_sum(values: Tensor, segments: np.ndarray, n_segments: int) -> Tensor:
    """Scatter-add rows of `values` into `n_segments` buckets."""
    values = as_tensor(values)
    segments = np.asarray(segments, dtype=np.int64)
    if segments.ndim != 1 or segments.shape[0] != values.shape[0]:
        raise shape_error("segment_sum", values.shape, segments.shape)
    if segments.size and (segments.min() < 0 or segments.max() >= n_segments):
        raise PCNOError("SHAPE_MISMATCH", f"segment_sum: segment ids outside [0, {n_segments})")
    return _apply("segment_sum", (values,), _segment_sum_array(values.data, segments, n_segments), segments=segments)


def masked_sum(x: Tensor, mask: np.ndarray) -> Tensor:
    """Sum over rows where mask is true; keeps trailing dimensions."""
    x = as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape[:1]:
        raise shape_error("masked_sum", x.shape, mask.shape)
    return _apply("masked_sum", (x,), x.data[mask].sum(axis=0), mask=mask)


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise PCNOError("EMPTY_SUBDOMAIN", "masked_mean over an empty mask")
    return scale(masked_sum(x, mask), 1.0 / count)


def sum_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _apply("sum_all", (x,), np.sum(x.data).reshape(()))


def transpose(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise shape_error("transpose", x.shape)
    return _apply("transpose", (x,), x.data.T.copy())


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    try:
        value = x.data.reshape(shape)
    except ValueError:
        raise shape_error("reshape", x.shape, shape)
    return _apply("reshape", (x,), value, in_shape=x.shape)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    if not 0 <= start <= stop <= x.shape[0]:
        raise PCNOError("SHAPE_MISMATCH", f"slice_rows [{start}:{stop}] outside {x.shape[0]} rows")
    return _apply("slice_rows", (x,), x.data[start:stop].copy(), start=start, stop=stop)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    trailing = {p.shape[1:] for p in parts}
    if len(trailing) != 1:
        raise shape_error("concat_rows", *[p.shape for p in parts])
    return _apply("concat_rows", tuple(parts), np.concatenate([p.data for p in parts], axis=0),
                  sizes=[p.shape[0] for p in parts])


def outer_rows(w: Tensor, v: Tensor) -> Tensor:
    """Per-row outer product: out[e, a, c] = w[e, a] * v[e, c]."""
    w, v = as_tensor(w), as_tensor(v)
    if w.ndim != 2 or v.ndim != 2 or w.shape[0] != v.shape[0]:
        raise shape_error("outer_rows", w.shape, v.shape)
    return _apply("outer_rows", (w, v), w.data[:, :, None] * v.data[:, None, :])


def real_part(z: Tensor) -> Tensor:
    z = as_tensor(z)
    return _apply("real_part", (z,), np.real(z.data).copy())


def complex_from(re: Tensor, im: Tensor) -> Tensor:
    re, im = as_tensor(re), as_tensor(im)
    _same_shape("complex_from", re, im)
    return _apply("complex_from", (re, im), re.data + 1j * im.data)


def phase_angles(coords: np.ndarray, log_length: Tensor, modes: np.ndarray) -> Tensor:
    """theta[n, k] = 2*pi * sum_d coords[n, d] * modes[k, d] / exp(log_length[d])."""
    log_length = as_tensor(log_length)
    real = log_length.dtype if log_length.dtype.kind == "f" else np.float64
    coords = np.asarray(coords, dtype=real)
    modes = np.asarray(modes, dtype=real)
    if coords.ndim != 2 or modes.ndim != 2 or coords.shape[1] != modes.shape[1] or log_length.shape != (coords.shape[1],):
        raise shape_error("phase_angles", coords.shape, log_length.shape, modes.shape)
    inv_length = np.exp(-log_length.data)
    if not np.all(np.isfinite(inv_length)) or np.any(inv_length == 0.0):
        raise PCNOError("LENGTH_UNDERFLOW", "length scale out of representable range",
                        {"log_length": log_length.data.tolist()})
    scaled_modes = modes * inv_length[None, :]
    theta = 2.0 * np.pi * (coords @ scaled_modes.T)
    return _apply("phase_angles", (log_length,), theta, coords=coords, scaled_modes=scaled_modes)


def cexp(theta: Tensor, sign: int = 1) -> Tensor:
    """Complex exponential weighting exp(sign * i * theta) for real theta."""
    theta = as_tensor(theta)
    if sign not in (1, -1):
        raise PCNOError("SHAPE_MISMATCH", f"cexp sign must be +1 or -1, got {sign}")
    if theta.is_complex:
        raise PCNOError("SHAPE_MISMATCH", "cexp expects real phase angles")
    return _apply("cexp", (theta,), np.exp(1j * sign * theta.data), sign=sign)


def mode_mix(weights: Tensor, coeffs: Tensor) -> Tensor:
    """Per-mode matrix-vector product: out[k, o] = sum_i weights[k, o, i] * coeffs[k, i]."""
    weights, coeffs = as_tensor(weights), as_tensor(coeffs)
    if weights.ndim != 3 or coeffs.ndim != 2 or weights.shape[0] != coeffs.shape[0] or weights.shape[2] != coeffs.shape[1]:
        raise shape_error("mode_mix", weights.shape, coeffs.shape)
    return _apply("mode_mix", (weights, coeffs), np.einsum("koi,ki->ko", weights.data, coeffs.data))


# --- BACKWARD RULES ---
# Each rule maps (output adjoint, node) to one adjoint per input (None = no flow).

def _matmul_backward(g, node):
    a, b = node.inputs
    return g @ np.conj(b.data).T, np.conj(a.data).T @ g


def _mul_backward(g, node):
    a, b = node.inputs
    return g * np.conj(b.data), g * np.conj(a.data)


def _scale_rows_backward(g, node):
    x, w = node.inputs
    w_b = w.data.reshape((-1,) + (1,) * (x.ndim - 1))
    gw = (g * np.conj(x.data)).reshape(x.shape[0], -1).sum(axis=1)
    return g * np.conj(w_b), gw


def _gelu_backward(g, node):
    x = node.inputs[0].data
    cdf = 0.5 * (1.0 + erf(x / _SQRT_2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return (g * (cdf + x * pdf),)


def _softsign_backward(g, node):
    x = node.inputs[0].data
    return (g / (1.0 + np.abs(x)) ** 2,)


def _sqrt_backward(g, node):
    y = node.output.data
    safe = np.where(y > 0, y, 1.0)
    return (np.where(y > 0, g / (2.0 * safe), 0.0),)


def _gather_backward(g, node):
    return (_segment_sum_array(g, node.saved["index"], node.saved["n_rows"]),)


def _masked_sum_backward(g, node):
    x = node.inputs[0]
    out = np.zeros(x.shape, dtype=np.result_type(x.dtype, g.dtype))
    out[node.saved["mask"]] = g
    return (out,)


def _concat_rows_backward(g, node):
    bounds = np.cumsum([0] + node.saved["sizes"])
    return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(node.inputs)))


def _slice_rows_backward(g, node):
    x = node.inputs[0]
    out = np.zeros(x.shape, dtype=np.result_type(x.dtype, g.dtype))
    out[node.saved["start"]:node.saved["stop"]] = g
    return (out,)


def _outer_rows_backward(g, node):
    w, v = node.inputs
    return (np.einsum("eac,ec->ea", g, np.conj(v.data)), np.einsum("eac,ea->ec", g, np.conj(w.data)))


def _phase_angles_backward(g, node):
    # d theta[n,k] / d log_length[d] = -2*pi * coords[n,d] * scaled_modes[k,d]
    coords, scaled_modes = node.saved["coords"], node.saved["scaled_modes"]
    return (-2.0 * np.pi * np.einsum("nk,nd,kd->d", np.real(g), coords, scaled_modes),)


def _cexp_backward(g, node):
    z = node.output.data
    dz = 1j * node.saved["sign"] * z
    return (np.real(np.conj(g) * dz),)


def _mode_mix_backward(g, node):
    w, c = node.inputs
    return (np.einsum("ko,ki->koi", g, np.conj(c.data)), np.einsum("koi,ko->ki", np.conj(w.data), g))


BACKWARD_RULES: Dict[str, Callable] = {
    "matmul": _matmul_backward,
    "add": lambda g, node: (g, g),
    "sub": lambda g, node: (g, -g),
    "mul": _mul_backward,
    "add_bias": lambda g, node: (g, g.sum(axis=0)),
    "scale": lambda g, node: (g * node.saved["factor"],),
    "scale_rows": _scale_rows_backward,
    "gelu": _gelu_backward,
    "softsign": _softsign_backward,
    "sqrt": _sqrt_backward,
    "gather": _gather_backward,
    "segment_sum": lambda g, node: (g[node.saved["segments"]],),
    "masked_sum": _masked_sum_backward,
    "sum_all": lambda g, node: (np.broadcast_to(g, node.inputs[0].shape).copy(),),
    "transpose": lambda g, node: (g.T.copy(),),
    "reshape": lambda g, node: (g.reshape(node.saved["in_shape"]),),
    "slice_rows": _slice_rows_backward,
    "concat_rows": _concat_rows_backward,
    "outer_rows": _outer_rows_backward,
    "real_part": lambda g, node: (g.astype(np.result_type(g.dtype, np.complex64)),),
    "complex_from": lambda g, node: (np.real(g), np.imag(g)),
    "phase_angles": _phase_angles_backward,
    "cexp": _cexp_backward,
    "mode_mix": _mode_mix_backward,
}


# --- DIFFERENTIATION HELPERS ---

def value_and_grad(fn: Callable[[Tensor], Tensor], point: np.ndarray) -> Tuple[float, np.ndarray]:
    """Evaluate fn at `point` on a fresh tape and return (value, d fn / d point)."""
    x = Tensor(np.array(point, dtype=np.float64, copy=True), requires_grad=True, name="x")
    with Tape() as tape:
        y = fn(x)
        grads = tape.backward(y, {"x": x})
    return float(np.real(y.item())), grads["x"]


def finite_diff_check(fn: Callable[[Tensor], Tensor], point: np.ndarray, step: float = 1e-6,
                      max_coords: Optional[int] = None, floor: float = 1e-12,
                      rng: Optional[np.random.Generator] = None) -> float:
    """
    Compare tape adjoints of a scalar function against central differences.

    Returns:
        The worst per-coordinate |analytic - numeric| / max(|analytic|, |numeric|, floor)
    """
    if step <= 0:
        raise PCNOError("INVALID_CONFIG", f"finite-difference step must be positive, got {step}")
    point = np.array(point, dtype=np.float64, copy=True)
    value, analytic = value_and_grad(fn, point)
    if not np.isfinite(value):
        raise numerical_error("function value is not finite at the check point")

    flat = point.reshape(-1)
    coords = np.arange(flat.size)
    if max_coords is not None and flat.size > max_coords:
        rng = rng or np.random.default_rng(0)
        coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))

    def evaluate(p):
        out = fn(Tensor(p.reshape(point.shape)))
        v = float(np.real(out.item()))
        if not np.isfinite(v):
            raise numerical_error("function value is not finite during finite differencing")
        return v

    worst = 0.0
    analytic_flat = analytic.reshape(-1)
    for c in coords:
        shifted = flat.copy()
        shifted[c] += step
        f_plus = evaluate(shifted)
        shifted[c] -= 2.0 * step
        f_minus = evaluate(shifted)
        numeric = (f_plus - f_minus) / (2.0 * step)
        a = float(analytic_flat[c])
        denom = max(abs(a), abs(numeric), floor)
        worst = max(worst, abs(a - numeric) / denom)
    logging.debug(f"finite_diff_check: {coords.size} coordinates, worst relative discrepancy {worst:.3e}")
    return worst
