import numpy as np
import pytest
from hypothesis import given, settings as hyp_settings
from hypothesis import strategies as st

from pcno.error_utils import PCNOError
from pcno.geometry import (PointCloudSample, bounding_box, compute_connectivity, compute_density, compute_features,
                           compute_measures, delaunay_topology, permute_sample, preprocess_sample, quadrature_total)
from pcno.pydantic_models import PreprocessConfig


def chain(nodes, **kwargs):
    nodes = np.asarray(nodes, dtype=np.float64)
    return PointCloudSample.from_cells(nodes, [(i, i + 1) for i in range(nodes.size - 1)], 1, 1,
                                       np.zeros((nodes.size, 1)), **kwargs)


def unit_square():
    nodes = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    return PointCloudSample.from_cells(nodes, [(0, 1, 2), (1, 3, 2)], 2, 2, np.zeros((4, 1)))


def quad_grid_3x3():
    x = np.array([0.0, 0.5, 1.0])
    nodes = np.array([[xi, yj] for yj in x for xi in x])
    cells = [(0, 1, 4, 3), (1, 2, 5, 4), (3, 4, 7, 6), (4, 5, 8, 7)]
    return PointCloudSample.from_cells(nodes, cells, 2, 2, np.zeros((9, 1)))


# --- MEASURES ---

def test_half_segment_shares():
    np.testing.assert_allclose(compute_measures(chain([0.0, 0.5, 1.0])), [0.25, 0.5, 0.25])


def test_single_triangle_shares_area_equally():
    nodes = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 3.0]])
    sample = PointCloudSample.from_cells(nodes, [(0, 1, 2)], 2, 2, np.zeros((3, 1)))
    np.testing.assert_allclose(compute_measures(sample), np.full(3, 1.0))


def test_unit_square_diagonal_nodes_collect_most():
    np.testing.assert_allclose(compute_measures(unit_square()), [1 / 6, 1 / 3, 1 / 3, 1 / 6])


def test_quad_cells_are_fan_triangulated():
    dOmega = compute_measures(quad_grid_3x3())
    assert dOmega.sum() == pytest.approx(1.0, abs=1e-14)
    assert dOmega[4] == pytest.approx(0.25)
    assert dOmega[0] == pytest.approx(0.0625)


def test_surface_triangle_in_3d():
    nodes = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 1.0], [0.0, 1.0, 1.0]])
    sample = PointCloudSample.from_cells(nodes, [(0, 1, 2)], 2, 2, np.zeros((3, 1)))
    np.testing.assert_allclose(compute_measures(sample), np.full(3, 1.0 / 6.0))


def test_mixed_dimensions_never_mix_units():
    nodes = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 3.0]])
    sample = PointCloudSample.from_cells(nodes, [(0, 1, 2), (2, 3)], [2, 1], 2, np.zeros((4, 1)))
    dOmega = compute_measures(sample)
    np.testing.assert_allclose(dOmega[:3], np.full(3, 0.5 / 3.0))
    assert dOmega[3] == pytest.approx(1.0)


def test_refinement_keeps_total_measure():
    coarse = compute_measures(chain(np.linspace(0.0, 2.0, 11)))
    fine = compute_measures(chain(np.linspace(0.0, 2.0, 21)))
    assert abs(coarse.sum() - 2.0) < 1e-12
    assert abs(fine.sum() - 2.0) < 1e-12


def test_cell_centered_measures():
    vertices = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    centroids = np.array([vertices[[0, 1, 2]].mean(axis=0), vertices[[1, 3, 2]].mean(axis=0)])
    sample = PointCloudSample.from_cells(centroids, [(0, 1, 2), (1, 3, 2)], 2, 2, np.zeros((2, 1)), vertices=vertices)
    assert sample.centering == "cell"
    np.testing.assert_allclose(compute_measures(sample, "cell"), [0.5, 0.5])
    indptr, indices = compute_connectivity(sample, "cell")
    assert indices[indptr[0]:indptr[1]].tolist() == [1]
    assert indices[indptr[1]:indptr[2]].tolist() == [0]


def test_degenerate_cell_is_rejected_with_index():
    nodes = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [0.0, 1.0]])
    sample = PointCloudSample.from_cells(nodes, [(0, 1, 3), (0, 1, 2)], 2, 2, np.zeros((4, 1)))
    with pytest.raises(PCNOError) as exc:
        compute_measures(sample)
    assert exc.value.error_code == "DEGENERATE_CELL"
    assert exc.value.details["cell_index"] == 1


def test_node_in_no_cell_is_rejected():
    sample = PointCloudSample.from_cells(np.array([0.0, 1.0, 5.0]), [(0, 1)], 1, 1, np.zeros((3, 1)))
    with pytest.raises(PCNOError) as exc:
        compute_measures(sample)
    assert exc.value.error_code == "ISOLATED_NODE"
    assert exc.value.details["node_index"] == 2


# --- CONNECTIVITY ---

def test_path_graph_neighbors():
    indptr, indices = compute_connectivity(chain([0.0, 1.0, 2.0]))
    assert indices[indptr[1]:indptr[2]].tolist() == [0, 2]


def test_shared_edge_nodes_have_three_neighbors():
    indptr, indices = compute_connectivity(unit_square())
    degree = np.diff(indptr)
    assert degree.tolist() == [2, 3, 3, 2]
    assert indices[indptr[1]:indptr[2]].tolist() == [0, 2, 3]


def test_quad_grid_center_sees_all_eight():
    indptr, indices = compute_connectivity(quad_grid_3x3())
    assert indices[indptr[4]:indptr[5]].tolist() == [0, 1, 2, 3, 5, 6, 7, 8]


def test_isolated_node_has_no_neighbors():
    sample = PointCloudSample.from_cells(np.array([0.0, 1.0, 5.0]), [(0, 1)], 1, 1, np.zeros((3, 1)))
    with pytest.raises(PCNOError) as exc:
        compute_connectivity(sample)
    assert exc.value.error_code == "ISOLATED_NODE"


# --- DENSITY ---

def test_uniform_density_is_inverse_measure():
    sample = chain(np.linspace(0.0, 2.0, 9))
    features = compute_features(sample, "uniform")
    np.testing.assert_allclose(features.rho, np.full(9, 0.5))
    np.testing.assert_allclose(features.domain_measure, [2.0])


def test_pointcloud_density_is_monte_carlo():
    sample = chain(np.linspace(0.0, 1.0, 17))
    features = compute_features(sample, "pointcloud")
    np.testing.assert_allclose(features.rho * features.dOmega, np.full(17, 1.0 / 17), rtol=1e-14)


def test_two_subdomains_each_carry_half_mass():
    dOmega = np.array([0.5, 0.5, 2.0, 2.0])
    rho, measure = compute_density(dOmega, np.array([0, 0, 1, 1]), np.ones(4, dtype=bool), "uniform")
    np.testing.assert_allclose(measure, [1.0, 4.0])
    np.testing.assert_allclose(rho, [0.5, 0.5, 0.125, 0.125])
    assert abs(np.sum(rho * dOmega) - 1.0) < 1e-12


def test_empty_subdomain_is_rejected():
    with pytest.raises(PCNOError) as exc:
        compute_density(np.ones(3), np.array([0, 0, 2]), np.ones(3, dtype=bool))
    assert exc.value.error_code == "EMPTY_SUBDOMAIN"


def test_unknown_density_mode():
    with pytest.raises(PCNOError) as exc:
        compute_density(np.ones(2), np.zeros(2, dtype=np.int64), np.ones(2, dtype=bool), "adaptive")
    assert exc.value.error_code == "INVALID_CONFIG"


@pytest.mark.parametrize("mode", ["uniform", "pointcloud"])
@given(st.lists(st.floats(min_value=1e-3, max_value=10.0), min_size=2, max_size=40), st.integers(1, 3))
@hyp_settings(max_examples=40, deadline=None)
def test_normalization_identity(mode, gaps, n_sub):
    nodes = np.concatenate([[0.0], np.cumsum(gaps)])
    sub = (np.arange(nodes.size) * n_sub) // nodes.size
    sample = chain(nodes, subdomain_id=sub)
    features = compute_features(sample, mode)
    assert abs(quadrature_total(features, sample.node_mask) - 1.0) <= 1e-12
    assert np.all(features.dOmega > 0)


def test_padded_rows_do_not_change_features():
    nodes = np.array([0.0, 0.3, 1.0, 0.0])
    mask = np.array([True, True, True, False])
    base = PointCloudSample.from_cells(nodes, [(0, 1), (1, 2)], 1, 1, np.zeros((4, 1)), node_mask=mask)
    noisy = PointCloudSample.from_cells(np.array([0.0, 0.3, 1.0, 7.0]), [(0, 1), (1, 2)], 1, 1,
                                        np.array([[0.0], [0.0], [0.0], [9.0]]), node_mask=mask)
    f1, f2 = compute_features(base), compute_features(noisy)
    np.testing.assert_array_equal(f1.dOmega, f2.dOmega)
    np.testing.assert_array_equal(f1.rho, f2.rho)
    np.testing.assert_array_equal(f1.indices, f2.indices)
    assert f1.rho[3] == 0.0 and f1.dOmega[3] == 0.0


@given(st.permutations(list(range(7))))
@hyp_settings(max_examples=30, deadline=None)
def test_permutation_equivariance(perm):
    perm = np.array(perm)
    sample = unit_square_strip()
    permuted = permute_sample(sample, perm)
    f, g = compute_features(sample), compute_features(permuted)
    np.testing.assert_allclose(g.dOmega, f.dOmega[perm], rtol=1e-14)
    np.testing.assert_allclose(g.rho, f.rho[perm], rtol=1e-14)
    inverse = np.empty_like(perm)
    inverse[perm] = np.arange(perm.size)
    for i in range(perm.size):
        expected = sorted(inverse[f.neighbors(perm[i])].tolist())
        assert g.neighbors(i).tolist() == expected


def unit_square_strip():
    nodes = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [0.0, 1.0], [1.0, 1.2], [2.0, 1.0], [3.0, 0.5]])
    cells = [(0, 1, 3), (1, 4, 3), (1, 2, 4), (2, 5, 4), (2, 6, 5)]
    return PointCloudSample.from_cells(nodes, cells, 2, 2, np.arange(7.0)[:, None])


# --- SAMPLE CHECKS & FALLBACK ---

def test_validate_rejects_cell_above_intrinsic_dim():
    nodes = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    sample = PointCloudSample.from_cells(nodes, [(0, 1, 2)], 2, 1, np.zeros((3, 1)))
    with pytest.raises(PCNOError) as exc:
        sample.validate()
    assert exc.value.error_code == "INCONSISTENT_DIMS"


def test_validate_rejects_nonzero_padding():
    mask = np.array([True, True, False])
    sample = PointCloudSample.from_cells(np.array([0.0, 1.0, 0.0]), [(0, 1)], 1, 1,
                                         np.array([[1.0], [2.0], [3.0]]), node_mask=mask)
    with pytest.raises(PCNOError):
        sample.validate()


def test_preprocess_attaches_features_and_gradient(grid_factory):
    sample = preprocess_sample(grid_factory(5), PreprocessConfig(intrinsic_dim=2))
    assert sample.features is not None and sample.gradient is not None
    assert sample.gradient.weights.shape == (sample.features.indices.size, 2)
    assert abs(quadrature_total(sample.features, sample.node_mask) - 1.0) < 1e-12


def test_preprocess_takes_intrinsic_dim_from_sample(grid_factory):
    sample = preprocess_sample(grid_factory(5), PreprocessConfig())
    assert sample.gradient.effective_rank.tolist() == [2] * sample.n_nodes


def test_preprocess_rejects_mismatched_intrinsic_dim(grid_factory):
    with pytest.raises(PCNOError) as exc:
        preprocess_sample(grid_factory(5), PreprocessConfig(intrinsic_dim=1))
    assert exc.value.error_code == "INCONSISTENT_DIMS"
    assert exc.value.details == {"expected": 2, "found": 1}


def test_delaunay_fallback_1d_sorts_chain():
    cells, dim = delaunay_topology(np.array([0.7, 0.1, 0.4]), 1)
    assert dim == 1
    assert sorted(cells) == [(0, 2), (1, 2)]


def test_delaunay_fallback_2d_covers_every_node():
    rng = np.random.default_rng(5)
    nodes = rng.uniform(size=(30, 2))
    cells, dim = delaunay_topology(nodes, 2)
    assert dim == 2
    assert set(v for c in cells for v in c) == set(range(30))
    sample = PointCloudSample.from_cells(nodes, cells, 2, 2, np.zeros((30, 1)))
    features = compute_features(sample)
    lo, hi = nodes.min(axis=0), nodes.max(axis=0)
    assert features.dOmega.sum() <= np.prod(hi - lo)


def test_delaunay_fallback_rejects_manifolds():
    with pytest.raises(PCNOError) as exc:
        delaunay_topology(np.zeros((4, 3)), 2)
    assert exc.value.error_code == "INVALID_CONFIG"


def test_bounding_box_ignores_padding():
    mask = np.array([True, True, False])
    s = PointCloudSample.from_cells(np.array([0.2, 0.9, 0.0]), [(0, 1)], 1, 1, np.zeros((3, 1)), node_mask=mask)
    t = chain([-1.0, 0.5])
    lo, hi = bounding_box([s, t])
    assert lo.tolist() == [-1.0] and hi.tolist() == [0.9]
