import numpy as np
import pytest

from hytnas import search_space as ss
from hytnas.tensor import Tensor, grad_check


def test_menus_have_eight_candidates_each():
    assert len(ss.SPA_CANDIDATES) == 8
    assert len(ss.SPE_CANDIDATES) == 8
    assert set(ss.SPA_CANDIDATES) & set(ss.SPE_CANDIDATES) == {
        "con_3-3", "con_3-5", "skip_connection", "discarding"}


def test_shared_candidates_have_identical_geometry():
    for name in ("con_3-3", "con_3-5"):
        assert ss.OP_SPECS[name][0] == "conv2"
    assert ss.OP_SPECS["con_3-3"][1] == ((1, 3, 3), (3, 1, 1))
    assert ss.OP_SPECS["con_3-5"][1] == ((1, 3, 3), (5, 1, 1))


def test_skip_and_discarding_behaviour():
    x = Tensor(np.random.default_rng(0).normal(size=(1, 8, 2, 4, 4)))
    skip = ss.build_candidate("skip_connection", 8)
    np.testing.assert_array_equal(skip(x).data, x.data)
    zero = ss.build_candidate("discarding", 8)
    np.testing.assert_array_equal(zero(x).data, np.zeros_like(x.data))


def test_unknown_candidate_rejected():
    with pytest.raises(ValueError):
        ss.build_candidate("not_an_op", 8)


def test_candidate_parameter_counts():
    op = ss.build_candidate("con_3-5", 4)
    total = sum(p.size for p in op.parameters())
    assert total == 4 * 4 * 9 + 4 * 4 * 5 + 2 * 4 == 232


@pytest.mark.parametrize("name", [n for n in ss.OP_SPECS if n not in ("skip_connection", "discarding")])
def test_candidates_preserve_shape(name):
    rng = np.random.default_rng(1)
    op = ss.build_candidate(name, 4, rng=rng)
    x = Tensor(rng.normal(size=(2, 4, 3, 6, 6)))
    assert op(x).shape == x.shape


def test_mixed_edge_saturated_softmax_selects_skip():
    rng = np.random.default_rng(2)
    edge = ss.MixedEdge("spa", 4, rng=rng)
    k = edge.menu.index("skip_connection")
    edge.omega.data[:] = -20.0
    edge.omega.data[k] = 20.0
    x = Tensor(rng.normal(size=(1, 4, 2, 5, 5)))
    out = edge(x)
    assert np.abs(out.data - x.data).max() < 1e-6


def test_mixed_edge_matches_manual_weighted_sum():
    rng = np.random.default_rng(3)
    edge = ss.MixedEdge("spe", 4, rng=rng)
    edge.omega.data[:] = rng.normal(size=8)
    x = Tensor(rng.normal(size=(1, 4, 2, 4, 4)))
    got = edge(x).data

    w = np.exp(edge.omega.data - edge.omega.data.max())
    w = w / w.sum()
    expect = np.zeros_like(x.data)
    for j, op in enumerate(edge.ops):
        expect = expect + w[j] * op(x).data
    assert np.abs(got - expect).max() < 1e-6


def test_mixed_edge_is_linear_in_candidate_outputs():
    # scaling all candidate outputs by c scales the edge output by c;
    # exercised through a two-op stub where candidates are skip and zero
    rng = np.random.default_rng(4)
    edge = ss.MixedEdge("spa", 4, rng=rng)
    skip_idx = edge.menu.index("skip_connection")
    zero_idx = edge.menu.index("discarding")
    edge.omega.data[:] = -40.0
    edge.omega.data[skip_idx] = 0.0
    edge.omega.data[zero_idx] = 0.0
    x = Tensor(rng.normal(size=(1, 4, 1, 3, 3)))
    out = edge(x).data
    np.testing.assert_allclose(out, 0.5 * x.data, atol=1e-8)


def test_mixed_edge_arch_gradient_flows():
    rng = np.random.default_rng(5)
    edge = ss.MixedEdge("spa", 2, rng=rng)
    x = Tensor(rng.normal(size=(1, 2, 1, 3, 3)))
    omega = Tensor(rng.normal(size=8))

    def fn(om):
        edge.omega = om
        y = edge(x)
        return (y * y).sum()

    assert grad_check(fn, [omega]) < 1e-6


def _force_all_edges(cell, name):
    for _, _, edge in cell.edge_iter():
        edge.omega.data[:] = -20.0
        edge.omega.data[edge.menu.index(name)] = 20.0


def test_cell_with_all_discarding_outputs_zeros():
    rng = np.random.default_rng(6)
    cell = ss.SuperCell("spa", 3, 2, (2, 2), (1, 1), rng=rng)
    _force_all_edges(cell, "discarding")
    x = Tensor(rng.normal(size=(1, 2, 2, 4, 4)))
    out = cell(x, x)
    assert out.shape == (1, 6, 2, 4, 4)
    assert np.abs(out.data).max() < 1e-6


def test_single_node_skip_cell_sums_inputs():
    rng = np.random.default_rng(7)
    cell = ss.SuperCell("spa", 1, 3, (3, 3), (1, 1), rng=rng)
    _force_all_edges(cell, "skip_connection")
    a = Tensor(rng.normal(size=(1, 3, 2, 4, 4)))
    b = Tensor(rng.normal(size=(1, 3, 2, 4, 4)))
    out = cell(a, b).data
    # preprocessing is a learned projection, so compare against it directly
    pre = cell.pre0(a).data + cell.pre1(b).data
    assert np.abs(out - pre).max() < 1e-5


def test_cell_output_concatenates_nodes():
    rng = np.random.default_rng(8)
    cell = ss.SuperCell("spe", 3, 2, (2, 2), (1, 1), rng=rng)
    x = Tensor(rng.normal(size=(2, 2, 3, 5, 5)))
    out = cell(x, x)
    assert out.shape == (2, 6, 3, 5, 5)


def test_cell_edge_topology_counts():
    rng = np.random.default_rng(9)
    cell = ss.SuperCell("spa", 3, 2, (2, 2), (1, 1), rng=rng)
    per_node = {}
    for i, j, _ in cell.edge_iter():
        per_node.setdefault(i, []).append(j)
    assert {i: len(v) for i, v in per_node.items()} == {0: 2, 1: 3, 2: 4}
    assert sum(len(v) for v in per_node.values()) == 9


def test_cell_rejects_channel_mismatch():
    rng = np.random.default_rng(10)
    cell = ss.SuperCell("spa", 1, 2, (2, 2), (1, 1), rng=rng)
    bad = Tensor(np.zeros((1, 3, 2, 4, 4)))
    good = Tensor(np.zeros((1, 2, 2, 4, 4)))
    with pytest.raises(ValueError):
        cell(bad, good)


def test_layer_fusion_saturated_and_symmetric():
    rng = np.random.default_rng(11)
    layer = ss.SuperLayer(2, 2, (2, 2), (1, 1), rng=rng)
    x = Tensor(rng.normal(size=(1, 2, 2, 4, 4)))
    spa = layer.spa(x, x).data
    spe = layer.spe(x, x).data

    layer.alpha_beta.data[:] = (20.0, -20.0)
    np.testing.assert_allclose(layer(x, x).data, spa, atol=1e-6)

    layer.alpha_beta.data[:] = (0.7, 0.7)
    np.testing.assert_allclose(layer(x, x).data, 0.5 * (spa + spe), atol=1e-6)


def test_layer_fusion_of_equal_points_is_identity():
    # convex combination of equal cell outputs returns that output
    rng = np.random.default_rng(12)
    layer = ss.SuperLayer(1, 2, (2, 2), (1, 1), rng=rng)
    x = Tensor(rng.normal(size=(1, 2, 1, 3, 3)))
    for cell in (layer.spa, layer.spe):
        _force_all_edges(cell, "skip_connection")
    # with all-skip edges the cell output depends only on the projections,
    # so aligning those makes the two cells agree
    layer.spe.pre0.load_state_dict(layer.spa.pre0.state_dict())
    layer.spe.pre1.load_state_dict(layer.spa.pre1.state_dict())
    a = layer.spa(x, x).data
    b = layer.spe(x, x).data
    np.testing.assert_allclose(a, b, atol=1e-12)
    layer.alpha_beta.data[:] = (1.3, -0.4)
    np.testing.assert_allclose(layer(x, x).data, a, atol=1e-6)


def test_argmax_stable_under_softmax():
    rng = np.random.default_rng(13)
    for _ in range(50):
        logits = rng.normal(size=8)
        w = np.exp(logits - logits.max())
        w /= w.sum()
        assert int(np.argmax(w)) == int(np.argmax(logits))


def test_menu_dump_structure():
    menus = ss.menu_as_dict()
    assert set(menus) == {"spa", "spe"}
    spa_names = [e["name"] for e in menus["spa"]]
    assert spa_names == list(ss.SPA_CANDIDATES)
    lookup = {e["name"]: e["pipeline"] for e in menus["spe"]}
    assert lookup["econ_5-1"] == ["lrelu", "conv 5x1x1", "bn"]
    assert lookup["skip_connection"] == ["identity"]
