import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pcno import tensor_core as tc
from pcno.datagen import grid_triangles
from pcno.error_utils import PCNOError
from pcno.geometry import PointCloudSample, compute_connectivity, delaunay_topology, permute_sample, preprocess_sample
from pcno.gradop import apply_gradient, build_pseudoinverse_weights, softsign_smooth
from pcno.pydantic_models import PreprocessConfig


def weights_for(sample, intrinsic_dim):
    indptr, indices = compute_connectivity(sample)
    return build_pseudoinverse_weights(sample.nodes, indptr, indices, intrinsic_dim)


def chain_sample(nodes):
    nodes = np.asarray(nodes, dtype=np.float64)
    return PointCloudSample.from_cells(nodes, [(i, i + 1) for i in range(nodes.size - 1)], 1, 1,
                                       np.zeros((nodes.size, 1)))


def gradient_of(weights, values):
    return apply_gradient(weights, tc.Tensor(np.asarray(values, dtype=np.float64).reshape(weights.n_nodes, -1))).numpy()


def test_symmetric_1d_stencil_weights():
    w = weights_for(chain_sample([0.4, 0.5, 0.6]), 1)
    edges = w.weights[w.indptr[1]:w.indptr[2], 0]
    np.testing.assert_allclose(edges, [-5.0, 5.0], rtol=1e-12)
    assert w.effective_rank.tolist() == [1, 1, 1]


def test_symmetric_stencil_cancels_curvature():
    x = np.array([0.4, 0.5, 0.6])
    grad = gradient_of(weights_for(chain_sample(x), 1), x ** 2)
    assert grad[1, 0, 0] == pytest.approx(1.0, rel=1e-12)


def test_constant_field_has_zero_gradient(grid_sample):
    grad = gradient_of(grid_sample.gradient, np.full(grid_sample.n_nodes, 3.7))
    assert np.all(grad == 0.0)


def test_planar_three_neighbor_stencil():
    points = np.array([[0.0, 0.0], [1.0, 0.2], [-0.3, 1.0], [-0.5, -0.8]])
    w = build_pseudoinverse_weights(points, np.array([0, 3, 3, 3, 3]), np.array([1, 2, 3]), 2,
                                    node_mask=np.array([True, False, False, False]))
    c = np.array([1.7, -0.4])
    grad = gradient_of(w, points @ c + 0.3)
    np.testing.assert_allclose(grad[0, :, 0], c, rtol=1e-12)


def _affine_error(weights, points, rng, n_fields=50):
    worst = 0.0
    for _ in range(n_fields):
        c = rng.standard_normal(points.shape[1])
        grad = gradient_of(weights, points @ c + rng.standard_normal())[:, :, 0]
        worst = max(worst, float(np.max(np.linalg.norm(grad - c, axis=1)) / np.linalg.norm(c)))
    return worst


def test_affine_exactness_on_grid(grid_factory):
    sample = preprocess_sample(grid_factory(7), PreprocessConfig(intrinsic_dim=2))
    assert _affine_error(sample.gradient, sample.nodes, np.random.default_rng(0)) <= 1e-10


def test_affine_exactness_on_delaunay_cloud():
    rng = np.random.default_rng(1)
    nodes = rng.uniform(size=(60, 2))
    cells, dim = delaunay_topology(nodes, 2)
    sample = PointCloudSample.from_cells(nodes, cells, dim, 2, np.zeros((60, 1)))
    assert _affine_error(weights_for(sample, 2), nodes, rng) <= 1e-10


def test_affine_exactness_on_irregular_1d_cloud(chain_factory):
    sample = chain_factory(40, seed=2)
    w = weights_for(sample, 1)
    assert _affine_error(w, sample.nodes, np.random.default_rng(2)) <= 1e-10


def test_tangential_gradient_on_tilted_plane():
    x = np.linspace(0.0, 1.0, 5)
    xx, yy = np.meshgrid(x, x, indexing="ij")
    flat = np.column_stack([xx.ravel(), yy.ravel()])
    points = np.column_stack([flat, 0.3 * flat[:, 0] + 0.2 * flat[:, 1]])
    sample = PointCloudSample.from_cells(points, grid_triangles(5), 2, 2, np.zeros((25, 1)))
    w = weights_for(sample, 2)
    normal = np.array([-0.3, -0.2, 1.0]) / np.linalg.norm([-0.3, -0.2, 1.0])
    c = np.array([0.5, -1.0, 2.0])
    grad = gradient_of(w, points @ c)[:, :, 0]
    tangential = c - normal * (normal @ c)
    np.testing.assert_allclose(grad, np.broadcast_to(tangential, grad.shape), atol=1e-10 * np.linalg.norm(c))


def test_circle_weights_are_tangent():
    n = 64
    theta = 2.0 * np.pi * np.arange(n) / n
    points = np.column_stack([np.cos(theta), np.sin(theta)])
    cells = [(i, (i + 1) % n) for i in range(n)]
    sample = PointCloudSample.from_cells(points, cells, 1, 1, np.zeros((n, 1)))
    w = weights_for(sample, 1)
    normals = points[w.rows]
    normal_part = np.abs(np.sum(normals * w.weights, axis=1))
    assert np.all(normal_part <= 1e-8 * np.linalg.norm(w.weights, axis=1))
    assert np.all(w.effective_rank == 1)


def test_sphere_equatorial_stencil_is_tangent():
    delta = 0.1
    c, s = np.cos(delta), np.sin(delta)
    points = np.array([[1.0, 0.0, 0.0], [c, s, 0.0], [c, -s, 0.0], [c, 0.0, s], [c, 0.0, -s]])
    w = build_pseudoinverse_weights(points, np.array([0, 4, 4, 4, 4, 4]), np.array([1, 2, 3, 4]), 2,
                                    node_mask=np.array([True, False, False, False, False]))
    normal_part = np.abs(w.weights @ np.array([1.0, 0.0, 0.0]))
    assert np.all(normal_part <= 1e-8 * np.linalg.norm(w.weights, axis=1))
    assert w.effective_rank[0] == 2


def test_rank_deficient_stencil_warns_and_proceeds(caplog):
    points = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    with caplog.at_level(logging.WARNING):
        w = build_pseudoinverse_weights(points, np.array([0, 0, 2, 2]), np.array([0, 2]), 2,
                                        node_mask=np.array([False, True, False]))
    assert w.effective_rank[1] == 1
    assert w.rank_deficient.tolist() == [1]
    assert "Degenerate gradient stencils" in caplog.text
    grad = gradient_of(w, points @ np.array([2.0, 5.0]))
    np.testing.assert_allclose(grad[1, :, 0], [2.0, 0.0], atol=1e-12)


def test_too_few_neighbors_is_rejected():
    points = np.array([[0.0, 0.0], [1.0, 0.0]])
    with pytest.raises(PCNOError) as exc:
        build_pseudoinverse_weights(points, np.array([0, 1, 2]), np.array([1, 0]), 2)
    assert exc.value.error_code == "INSUFFICIENT_NEIGHBORS"
    assert exc.value.details["node_index"] == 0


@pytest.mark.parametrize("tol", [0.0, 1.0, -1e-3])
def test_invalid_singular_value_tolerance(tol):
    with pytest.raises(PCNOError) as exc:
        build_pseudoinverse_weights(np.zeros((2, 1)), np.array([0, 1, 2]), np.array([1, 0]), 1, sv_rel_tol=tol)
    assert exc.value.error_code == "INVALID_CONFIG"


def test_apply_gradient_shape_mismatch(chain_sample):
    with pytest.raises(PCNOError) as exc:
        apply_gradient(chain_sample.gradient, tc.Tensor(np.zeros((chain_sample.n_nodes + 1, 2))))
    assert exc.value.error_code == "SHAPE_MISMATCH"


def test_apply_gradient_is_permutation_equivariant(grid_factory):
    config = PreprocessConfig(intrinsic_dim=2)
    raw = grid_factory(5, seed=8)
    perm = np.random.default_rng(8).permutation(raw.n_nodes)
    f = np.random.default_rng(9).standard_normal((raw.n_nodes, 3))
    base = preprocess_sample(raw, config)
    moved = preprocess_sample(permute_sample(raw, perm), config)
    np.testing.assert_allclose(gradient_of(moved.gradient, f[perm]), gradient_of(base.gradient, f)[perm], atol=1e-12)


def test_apply_gradient_adjoint(chain_sample):
    rng = np.random.default_rng(4)
    r = rng.standard_normal((chain_sample.n_nodes, 1, 2))
    point = rng.standard_normal((chain_sample.n_nodes, 2))
    worst = tc.finite_diff_check(
        lambda t: tc.sum_all(tc.mul(apply_gradient(chain_sample.gradient, t), tc.Tensor(r))), point, step=1e-3,
        floor=1e-6)
    assert worst <= 1e-6


def test_softsign_examples():
    out = softsign_smooth(tc.Tensor(np.array([0.0, 1.0, -1.0, 1e6]))).numpy()
    np.testing.assert_allclose(out[:3], [0.0, 0.5, -0.5])
    assert 0.999998 < out[3] < 1.0


@given(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6))
def test_softsign_is_monotone(a, b):
    lo, hi = sorted((a, b))
    out = softsign_smooth(tc.Tensor(np.array([lo, hi]))).numpy()
    assert out[0] <= out[1]
    if hi - lo > 1e-6 and max(abs(lo), abs(hi)) < 1e3:
        assert out[0] < out[1]
