import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dlct.geometry import (
    DELTA_EPS,
    OMEGA_FLOOR,
    BoundingBox,
    GeometryError,
    GridLayout,
    build_alignment_graph,
    complete_bipartite_graph,
    geometry_bias,
    geometry_features,
    grid_positional_encoding,
    region_positional_encoding,
    relative_geometry_embed,
    relative_geometry_matrix,
    relative_geometry_raw,
)
from dlct.numerics import Tensor, grad_check, mul, sum_

from oracles import exact_overlap, random_boxes


def test_box_validation():
    with pytest.raises(GeometryError):
        BoundingBox(0.5, 0.1, 0.5, 0.2)
    with pytest.raises(GeometryError):
        BoundingBox(-0.1, 0.0, 0.5, 0.5)
    assert BoundingBox(0.2, 0.2, 0.4, 0.6).center == pytest.approx((0.3, 0.4, 0.2, 0.4))


def test_layout_parse_and_cells():
    layout = GridLayout.parse("4x3")
    assert (layout.rows, layout.cols, layout.size, str(layout)) == (4, 3, 12, "4x3")
    np.testing.assert_allclose(layout.boxes()[4], layout.cell(1, 1).as_array())


def test_grid_encoding_reference_shape_and_formula():
    pe = grid_positional_encoding(GridLayout(7, 7), 512)
    assert pe.shape == (49, 512)
    half = 256
    # cell (row 3, col 5) is row-major index 26
    for k in (0, 1, 7, 127):
        angle_r = 3 / 10000 ** (2 * k / half)
        angle_c = 5 / 10000 ** (2 * k / half)
        assert pe[26, 2 * k] == pytest.approx(math.sin(angle_r), abs=1e-12)
        assert pe[26, 2 * k + 1] == pytest.approx(math.cos(angle_r), abs=1e-12)
        assert pe[26, half + 2 * k] == pytest.approx(math.sin(angle_c), abs=1e-12)
        assert pe[26, half + 2 * k + 1] == pytest.approx(math.cos(angle_c), abs=1e-12)


def test_grid_encoding_needs_multiple_of_four():
    with pytest.raises(GeometryError):
        grid_positional_encoding(GridLayout(2, 2), 30)


def test_region_encoding_is_linear_and_differentiable(rng):
    boxes = np.array([[0.1, 0.2, 0.5, 0.6], [0.0, 0.0, 1.0, 1.0]])
    w = Tensor(rng.standard_normal((8, 4)))
    np.testing.assert_allclose(region_positional_encoding(boxes, w).data, boxes @ w.data.T)
    weights = rng.standard_normal((2, 8))
    assert grad_check(lambda t: sum_(mul(region_positional_encoding(boxes, t), weights)), [w]).passed


def test_relative_geometry_hand_example():
    raw = relative_geometry_raw((0.5, 0.5, 0.2, 0.2), (0.7, 0.6, 0.4, 0.1))
    np.testing.assert_allclose(raw, [0.0, math.log(0.5), math.log(0.5), math.log(2.0)], atol=1e-12)


def test_relative_geometry_clamps_coincident_centres():
    box = BoundingBox(0.2, 0.2, 0.4, 0.4)
    raw = relative_geometry_raw(box, box)
    assert raw[0] == pytest.approx(math.log(DELTA_EPS / 0.2))
    assert raw[2] == 0.0 and raw[3] == 0.0


def test_matrix_matches_pairwise(rng):
    a = np.array([[0.1, 0.1, 0.3, 0.4], [0.5, 0.5, 0.9, 0.7]])
    b = np.array([[0.0, 0.0, 0.5, 0.5], [0.2, 0.6, 0.3, 0.9], [0.6, 0.1, 0.8, 0.3]])
    m = relative_geometry_matrix(a, b)
    for i in range(2):
        for j in range(3):
            np.testing.assert_allclose(m[i, j], relative_geometry_raw(BoundingBox(*a[i]), BoundingBox(*b[j])))


def test_geometry_is_asymmetric():
    r = BoundingBox(0.1, 0.1, 0.5, 0.3)
    g = BoundingBox(0.0, 0.0, 0.25, 0.25)
    rg = relative_geometry_raw(r, g)
    gr = relative_geometry_raw(g, r)
    # size ratios flip sign, offsets are normalised by different boxes
    np.testing.assert_allclose(rg[2:], -gr[2:])
    assert not np.allclose(rg[:2], gr[:2])
    w = Tensor(np.random.default_rng(0).standard_normal((64, 2)))
    fwd = relative_geometry_embed(relative_geometry_matrix(r.as_array()[None], g.as_array()[None]), w)
    bwd = relative_geometry_embed(relative_geometry_matrix(g.as_array()[None], r.as_array()[None]), w)
    assert fwd.shape == bwd.shape == (2, 1, 1)
    assert not np.allclose(fwd.data, bwd.data)


def test_bias_positive_and_floored(rng):
    boxes = np.array([[0.1, 0.1, 0.3, 0.4], [0.5, 0.5, 0.9, 0.7], [0.2, 0.6, 0.3, 0.9]])
    feats = geometry_features(relative_geometry_matrix(boxes, boxes))
    omega = geometry_bias(feats, Tensor(rng.standard_normal((64, 4))))
    assert omega.shape == (4, 3, 3)
    assert np.all(omega.data >= OMEGA_FLOOR)
    assert np.any(omega.data == OMEGA_FLOOR)  # random weights push some pairs below the floor


def test_bias_gradient_away_from_floor(rng):
    boxes = np.array([[0.1, 0.1, 0.3, 0.4], [0.5, 0.5, 0.9, 0.7], [0.2, 0.6, 0.3, 0.9]])
    feats = geometry_features(relative_geometry_matrix(boxes, boxes))
    w = Tensor(np.abs(rng.standard_normal((64, 2))) * 0.1)
    w.data[1::2] = np.abs(w.data[1::2]) + 0.5  # cos slots of low frequency keep the bias clear of the kink
    assert np.all(geometry_bias(feats, w).data > 10 * OMEGA_FLOOR)
    weights = rng.standard_normal((2, 3, 3))
    assert grad_check(lambda t: sum_(mul(geometry_bias(feats, t), weights)), [w]).passed


# -- alignment graph -------------------------------------------------------

def test_quadrant_example():
    graph = build_alignment_graph([BoundingBox(0.0, 0.0, 0.5, 0.5)], GridLayout(2, 2))
    assert graph.region_grid.tolist() == [[True, False, False, False]]
    assert graph.neighbors(0).tolist() == [0, 1]


def test_complete_bipartite():
    g = complete_bipartite_graph(2, GridLayout(2, 2))
    assert g.region_grid.all() and g.grid_region.all()
    assert not g.adj[0, 1] and not g.adj[2, 3]


def test_alignment_graph_properties_1000_sets():
    r = np.random.default_rng(2024)
    for _ in range(1000):
        layout = GridLayout(int(r.integers(1, 6)), int(r.integers(1, 6)))
        boxes = random_boxes(r, int(r.integers(0, 7)))
        g = build_alignment_graph(boxes, layout)
        nr = len(boxes)
        assert np.array_equal(g.adj, g.adj.T)
        assert g.adj.diagonal().all()
        off = g.adj & ~np.eye(len(g.adj), dtype=bool)
        assert not off[:nr, :nr].any() and not off[nr:, nr:].any()
        cells = layout.boxes()
        for i in range(nr):
            for j in range(layout.size):
                assert g.region_grid[i, j] == exact_overlap(boxes[i], cells[j])


@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 10_000))
def test_every_region_touches_some_cell(rows, cols, seed):
    boxes = random_boxes(np.random.default_rng(seed), 3)
    g = build_alignment_graph(boxes, GridLayout(rows, cols))
    assert g.region_grid.any(axis=1).all()
