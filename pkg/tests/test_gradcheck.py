import numpy as np
import pytest

from pcno import tensor_core as tc
from pcno.gradcheck import check_cases, model_gradcheck, operator_cases, primitive_cases, run_gradcheck


def test_every_primitive_is_covered():
    cases = primitive_cases(np.random.default_rng(0))
    for op in ("matmul", "gelu", "softsign", "segment_sum", "phase_angles", "cexp", "mode_mix", "complex_from"):
        assert op in cases
    assert set(operator_cases(np.random.default_rng(0))) == {"apply_gradient", "integral_apply", "integral_length"}


def test_operators_pass_without_model():
    report = run_gradcheck(seed=0, include_model=False)
    assert report.passed
    assert report.worst_discrepancy <= 1e-5
    assert report.per_op[report.worst_op] == report.worst_discrepancy


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_full_gradcheck_passes(seed):
    report = run_gradcheck(seed=seed)
    assert report.passed, f"{report.worst_op}: {report.worst_discrepancy:.3e}"
    assert any(name.startswith("model:layers.0.fourier") for name in report.per_op)


@pytest.mark.parametrize("seed", [1, 2, 5])
def test_model_gradcheck_meets_tolerance_at_default_step(seed):
    results = model_gradcheck(seed=seed, n_nodes=30, width=8, k_max=2, step=1e-6)
    worst = max(results, key=results.get)
    assert results[worst] <= 1e-5, f"{worst}: {results[worst]:.3e}"


def test_model_gradcheck_visits_every_parameter():
    results = model_gradcheck(seed=2, n_nodes=16, width=4)
    assert "model:lift.weight" in results and "model:proj.out.bias" in results
    assert all(np.isfinite(v) for v in results.values())


def test_corrupted_rule_is_reported(monkeypatch):
    monkeypatch.setitem(tc.BACKWARD_RULES, "gelu", lambda g, node: (0.5 * g,))
    report = run_gradcheck(seed=0, include_model=False)
    assert not report.passed
    assert report.worst_op == "gelu"
    assert report.worst_discrepancy > 1e-2


def test_tiny_tolerance_fails():
    report = run_gradcheck(seed=0, tolerance=1e-30, include_model=False)
    assert report.tolerance == 1e-30
    assert not report.passed


def test_check_cases_on_custom_function():
    results = check_cases({"cube": (lambda t: tc.sum_all(tc.mul(tc.mul(t, t), t)), np.array([0.5, -1.5, 2.0]))})
    assert results["cube"] < 1e-6
