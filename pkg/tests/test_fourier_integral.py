import numpy as np
import pytest
from hypothesis import given, settings as hyp_settings
from hypothesis import strategies as st

from pcno import tensor_core as tc
from pcno.error_utils import PCNOError
from pcno.fourier_integral import (dense_kernel_apply, full_spectrum_weights, init_fourier_params, integral_apply,
                                   make_mode_set, multi_domain_apply, quadrature_weights)
from pcno.geometry import PointCloudSample, compute_features, delaunay_topology


def random_cloud_1d(n, seed, density_mode="uniform"):
    rng = np.random.default_rng(seed)
    nodes = np.sort(rng.uniform(0.0, 2.0, n)) + np.arange(n) * 1e-3
    sample = PointCloudSample.from_cells(nodes, [(i, i + 1) for i in range(n - 1)], 1, 1, np.zeros((n, 1)))
    return sample, compute_features(sample, density_mode)


def random_cloud_2d(n, seed, density_mode="uniform"):
    nodes = np.random.default_rng(seed).uniform(size=(n, 2))
    cells, dim = delaunay_topology(nodes, 2)
    sample = PointCloudSample.from_cells(nodes, cells, dim, 2, np.zeros((n, 1)))
    return sample, compute_features(sample, density_mode)


def relative(a, b):
    return float(np.max(np.abs(a - b)) / np.max(np.abs(b)))


# --- MODE SETS ---

@given(st.integers(0, 5), st.integers(1, 3))
def test_half_space_mode_set(k_max, dim):
    modes = make_mode_set(k_max, dim)
    as_tuples = [tuple(k) for k in modes.modes.tolist()]
    assert as_tuples[0] == (0,) * dim
    assert modes.size == ((2 * k_max + 1) ** dim + 1) // 2
    for k in as_tuples[1:]:
        assert tuple(-c for c in k) not in as_tuples
    assert modes.fold[0] == 1.0 and np.all(modes.fold[1:] == 2.0)


def test_full_spectrum_is_conjugate_symmetric():
    modes = make_mode_set(2, 2)
    params = init_fourier_params(2, 3, modes, 1, [1.0, 1.0], np.random.default_rng(0))
    spectrum = {tuple(k): w for k, w in full_spectrum_weights(params)}
    assert len(spectrum) == modes.full_size
    for k, w in spectrum.items():
        np.testing.assert_array_equal(spectrum[tuple(-c for c in k)], np.conj(w))
    assert np.all(spectrum[(0, 0)].imag == 0.0)


def test_invalid_mode_set():
    with pytest.raises(PCNOError):
        make_mode_set(-1, 1)


# --- SINGLE DOMAIN ---

def test_constant_kernel_gives_the_mean():
    sample, features = random_cloud_1d(30, seed=0)
    params = init_fourier_params(1, 1, make_mode_set(0, 1), 1, [2.0], np.random.default_rng(0))
    params.weight_re[0].data = np.ones((1, 1, 1))
    params.weight_im[0].data = np.zeros((1, 1, 1))
    f = np.cos(sample.nodes)
    out = integral_apply(params, features.rho, features.dOmega, sample.nodes, tc.Tensor(f), sample.node_mask).numpy()
    mean = np.sum(f[:, 0] * features.dOmega) / features.dOmega.sum()
    np.testing.assert_allclose(out, np.full((30, 1), mean), rtol=1e-12)


def test_zero_input_gives_zero_output():
    sample, features = random_cloud_1d(20, seed=1)
    params = init_fourier_params(2, 3, make_mode_set(4, 1), 1, [2.0], np.random.default_rng(1))
    out = integral_apply(params, features.rho, features.dOmega, sample.nodes, tc.Tensor(np.zeros((20, 2))),
                         sample.node_mask).numpy()
    assert np.all(out == 0.0)


@pytest.mark.parametrize("density_mode", ["uniform", "pointcloud"])
def test_matches_dense_kernel_1d(density_mode):
    sample, features = random_cloud_1d(40, seed=2, density_mode=density_mode)
    rng = np.random.default_rng(2)
    params = init_fourier_params(3, 2, make_mode_set(4, 1), 1, [2.3], rng)
    f = rng.standard_normal((40, 3))
    out = integral_apply(params, features.rho, features.dOmega, sample.nodes, tc.Tensor(f), sample.node_mask).numpy()
    reference = dense_kernel_apply(params, features.rho, features.dOmega, sample.nodes, f, sample.node_mask)
    assert not np.iscomplexobj(out)
    assert relative(out, reference) <= 1e-10


def test_single_precision_stays_single_precision():
    sample, features = random_cloud_1d(40, seed=6)
    rng = np.random.default_rng(6)
    params = init_fourier_params(3, 2, make_mode_set(4, 1), 1, [2.3], rng, dtype=np.float32)
    f = rng.standard_normal((40, 3)).astype(np.float32)
    out = integral_apply(params, features.rho, features.dOmega, sample.nodes, tc.Tensor(f), sample.node_mask).numpy()
    assert out.dtype == np.float32
    reference = dense_kernel_apply(params, features.rho, features.dOmega, sample.nodes, f, sample.node_mask)
    assert relative(out, reference) <= 1e-4


@pytest.mark.parametrize("density_mode", ["uniform", "pointcloud"])
def test_matches_dense_kernel_2d(density_mode):
    sample, features = random_cloud_2d(50, seed=3, density_mode=density_mode)
    rng = np.random.default_rng(3)
    params = init_fourier_params(2, 2, make_mode_set(3, 2), 1, [1.1, 0.9], rng)
    f = rng.standard_normal((50, 2))
    out = integral_apply(params, features.rho, features.dOmega, sample.nodes, tc.Tensor(f), sample.node_mask).numpy()
    reference = dense_kernel_apply(params, features.rho, features.dOmega, sample.nodes, f, sample.node_mask)
    assert relative(out, reference) <= 1e-10


@given(st.permutations(list(range(15))))
@hyp_settings(max_examples=20, deadline=None)
def test_outputs_follow_node_relabeling(perm):
    perm = np.array(perm)
    sample, features = random_cloud_1d(15, seed=4)
    rng = np.random.default_rng(4)
    params = init_fourier_params(2, 2, make_mode_set(3, 1), 1, [2.0], rng)
    f = rng.standard_normal((15, 2))
    base = integral_apply(params, features.rho, features.dOmega, sample.nodes, tc.Tensor(f), sample.node_mask).numpy()
    moved = integral_apply(params, features.rho[perm], features.dOmega[perm], sample.nodes[perm], tc.Tensor(f[perm]),
                           sample.node_mask[perm]).numpy()
    np.testing.assert_allclose(moved, base[perm], rtol=1e-10, atol=1e-12)


def test_padded_rows_are_excluded_from_the_sum():
    sample, features = random_cloud_1d(12, seed=5)
    rng = np.random.default_rng(5)
    params = init_fourier_params(1, 1, make_mode_set(2, 1), 1, [2.0], rng)
    f = rng.standard_normal((12, 1))
    coords = np.vstack([sample.nodes, np.zeros((3, 1))])
    mask = np.concatenate([np.ones(12, dtype=bool), np.zeros(3, dtype=bool)])
    rho, dOmega = np.concatenate([features.rho, np.zeros(3)]), np.concatenate([features.dOmega, np.zeros(3)])
    base = integral_apply(params, features.rho, features.dOmega, sample.nodes, tc.Tensor(f), sample.node_mask).numpy()
    padded = integral_apply(params, rho, dOmega, coords, tc.Tensor(np.vstack([f, rng.standard_normal((3, 1))])),
                            mask).numpy()
    np.testing.assert_allclose(padded[:12], base, rtol=1e-12)


def test_non_positive_density_is_rejected():
    with pytest.raises(PCNOError) as exc:
        quadrature_weights(np.array([1.0, 0.0]), np.array([1.0, 1.0]), np.ones(2, dtype=bool))
    assert exc.value.error_code == "INVALID_DENSITY"


def test_input_width_must_match_weights():
    sample, features = random_cloud_1d(10, seed=6)
    params = init_fourier_params(2, 2, make_mode_set(1, 1), 1, [2.0], np.random.default_rng(6))
    with pytest.raises(PCNOError) as exc:
        integral_apply(params, features.rho, features.dOmega, sample.nodes, tc.Tensor(np.zeros((10, 3))),
                       sample.node_mask)
    assert exc.value.error_code == "SHAPE_MISMATCH"


def test_length_scale_gradient_matches_finite_differences():
    sample, features = random_cloud_1d(16, seed=7)
    rng = np.random.default_rng(7)
    params = init_fourier_params(2, 2, make_mode_set(3, 1), 1, [1.7], rng)
    f, r = rng.standard_normal((16, 2)), rng.standard_normal((16, 2))

    def objective(t):
        params.log_length = t
        out = integral_apply(params, features.rho, features.dOmega, sample.nodes, tc.Tensor(f), sample.node_mask)
        return tc.sum_all(tc.mul(out, tc.Tensor(r)))

    assert tc.finite_diff_check(objective, np.log([1.7]), floor=1e-6) <= 1e-5


# --- MULTIPLE SUBDOMAINS ---

def test_single_subdomain_matches_integral_apply():
    sample, features = random_cloud_1d(25, seed=8)
    rng = np.random.default_rng(8)
    params = init_fourier_params(2, 2, make_mode_set(3, 1), 1, [2.0], rng)
    f = tc.Tensor(rng.standard_normal((25, 2)))
    single = integral_apply(params, features.rho, features.dOmega, sample.nodes, f, sample.node_mask).numpy()
    multi = multi_domain_apply(params, features.rho, features.dOmega, sample.nodes, f, sample.node_mask,
                               sample.subdomain_id).numpy()
    np.testing.assert_allclose(multi, single, rtol=1e-13, atol=1e-15)


def test_silent_second_subdomain():
    rng = np.random.default_rng(9)
    nodes = np.sort(rng.uniform(0.0, 2.0, 20)) + np.arange(20) * 1e-3
    sub = (np.arange(20) >= 12).astype(np.int64)
    sample = PointCloudSample.from_cells(nodes, [(i, i + 1) for i in range(19) if i != 11], 1, 1,
                                         np.zeros((20, 1)), subdomain_id=sub)
    features = compute_features(sample)
    params = init_fourier_params(1, 2, make_mode_set(3, 1), 2, [2.0], rng)
    params.weight_re[1].data[:] = 0.0
    params.weight_im[1].data[:] = 0.0
    f = tc.Tensor(rng.standard_normal((20, 1)))
    multi = multi_domain_apply(params, features.rho, features.dOmega, sample.nodes, f, sample.node_mask, sub).numpy()
    first = integral_apply(params, features.rho, features.dOmega, sample.nodes, f, sample.node_mask, sub, 0).numpy()
    np.testing.assert_allclose(multi, first, rtol=1e-13, atol=1e-15)
    dense = dense_kernel_apply(params, features.rho, features.dOmega, sample.nodes, f.numpy(), sample.node_mask, sub)
    assert relative(multi, dense) <= 1e-10


def test_line_plus_square_constant_mode():
    nodes = np.array([[2.0, 0.0], [2.5, 0.0], [3.0, 0.0], [0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    sub = np.array([0, 0, 0, 1, 1, 1, 1])
    sample = PointCloudSample.from_cells(nodes, [(0, 1), (1, 2), (3, 4, 5), (4, 6, 5)], [1, 1, 2, 2], 2,
                                         np.zeros((7, 1)), subdomain_id=sub)
    features = compute_features(sample)
    params = init_fourier_params(1, 2, make_mode_set(0, 2), 2, [4.0, 4.0], np.random.default_rng(10))
    w1, w2 = np.array([[[3.0], [1.0]]]), np.array([[[-2.0], [5.0]]])
    params.weight_re[0].data, params.weight_re[1].data = w1, w2
    out = multi_domain_apply(params, features.rho, features.dOmega, nodes, tc.Tensor(np.ones((7, 1))),
                             sample.node_mask, sub).numpy()
    expected = (w1[0, :, 0] + w2[0, :, 0]) / 2.0
    np.testing.assert_allclose(out, np.broadcast_to(expected, (7, 2)), rtol=1e-12)


def test_empty_subdomain_is_rejected():
    with pytest.raises(PCNOError) as exc:
        quadrature_weights(np.ones(3), np.ones(3), np.ones(3, dtype=bool), np.array([0, 0, 0]), 1)
    assert exc.value.error_code == "EMPTY_SUBDOMAIN"


def test_more_subdomains_than_weight_blocks():
    sample, features = random_cloud_1d(6, seed=11)
    params = init_fourier_params(1, 1, make_mode_set(1, 1), 1, [2.0], np.random.default_rng(11))
    with pytest.raises(PCNOError) as exc:
        multi_domain_apply(params, features.rho, features.dOmega, sample.nodes, tc.Tensor(np.ones((6, 1))),
                           sample.node_mask, np.array([0, 0, 0, 1, 1, 1]))
    assert exc.value.error_code == "INCONSISTENT_DIMS"
