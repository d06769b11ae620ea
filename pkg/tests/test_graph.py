import numpy as np
import pytest

from pwlsi import (GraphError, PwlGraph, PwlNode, assemble_detector, forward,
                   forward_errors, reconstruct)
from pwlsi.graph import affine_node, mean_filter_node
from pwlsi.operators import mean_filter_matrix

from conftest import train_quick


def identity_detector(n, lam=1.2):
    """Reconstruction equal to the input: every error is exactly zero."""
    nodes = [
        affine_node(np.eye(n), None),
        PwlNode("concat", (0, -1), 2 * n, 2 * n),
        affine_node(np.hstack([np.eye(n), -np.eye(n)]), None, inputs=(1,), kind="matmul_left"),
        PwlNode("abs", (2,), n, n),
        PwlNode("threshold", (3,), n, n, lam=lam),
    ]
    return PwlGraph(nodes, n)


def zero_detector(n, lam=1.2, filter_window=1):
    """Reconstruction identically zero: the error field is |x|."""
    nodes = [
        affine_node(np.zeros((n, n)), None),
        PwlNode("concat", (0, -1), 2 * n, 2 * n),
        affine_node(np.hstack([np.eye(n), -np.eye(n)]), None, inputs=(1,), kind="matmul_left"),
        PwlNode("abs", (2,), n, n),
    ]
    if filter_window > 1:
        side = int(round(np.sqrt(n)))
        nodes.append(mean_filter_node(side, side, filter_window, inputs=(3,)))
    nodes.append(PwlNode("threshold", (len(nodes) - 1,), n, n, lam=lam))
    return PwlGraph(nodes, n)


class TestForward:
    def test_identity_reconstruction(self):
        g = identity_detector(4)
        errors, region = forward(g, np.array([3.0, -1.0, 0.5, 2.0]))
        np.testing.assert_array_equal(errors, np.zeros(4))
        assert region.size == 0

    def test_zero_reconstruction(self):
        g = zero_detector(2, lam=1.2)
        errors, region = forward(g, np.array([2.0, 0.5]))
        np.testing.assert_array_equal(errors, [2.0, 0.5])
        assert region.indices.tolist() == [0]

    def test_threshold_tie_is_in_region(self):
        g = zero_detector(2, lam=1.2)
        _, region = forward(g, np.array([1.2, 0.0]))
        assert region.indices.tolist() == [0]

    def test_trained_vae_matches_direct_recomputation(self, mlp16, graph16):
        rng = np.random.default_rng(4)
        for _ in range(5):
            x = rng.standard_normal(16)
            errors, region = forward(graph16, x)
            direct = np.abs(x - reconstruct(mlp16, x))
            np.testing.assert_allclose(errors, direct, atol=1e-12)
            np.testing.assert_array_equal(region.mask, direct >= 1.2)

    def test_batch_matches_single(self, graph16):
        rng = np.random.default_rng(5)
        batch = rng.standard_normal((16, 7))
        stacked = forward_errors(graph16, batch)
        for j in range(7):
            np.testing.assert_allclose(stacked[:, j], forward_errors(graph16, batch[:, j]))

    def test_shape_mismatch(self, graph16):
        with pytest.raises(GraphError):
            forward(graph16, np.zeros(15))


class TestAssembleDetector:
    def test_no_filter_node_for_window_one(self, mlp16):
        g = assemble_detector(mlp16, lam=1.2, filter_window=1)
        assert all(node.kind != "meanfilter" for node in g.nodes)

    def test_filter_on_constant_error_field(self):
        g = zero_detector(16, lam=1.2, filter_window=3)
        x = np.full(16, 0.7)
        errors, region = forward(g, x)
        np.testing.assert_allclose(errors, np.full(16, 0.7))
        assert region.size == 0

    def test_filtered_graph_matches_manual_filter(self, mlp16):
        g = assemble_detector(mlp16, lam=1.2, filter_window=3)
        mat = mean_filter_matrix(4, 4, 3)
        rng = np.random.default_rng(6)
        x = rng.standard_normal(16)
        errors, _ = forward(g, x)
        direct = mat @ np.abs(x - reconstruct(mlp16, x))
        np.testing.assert_allclose(errors, direct, atol=1e-12)

    def test_random_vae_matches_composition(self):
        from pwlsi import VaeModel

        model = VaeModel.init(16, m=3, seed=9)
        g = assemble_detector(model, lam=0.8, filter_window=1)
        rng = np.random.default_rng(7)
        x = rng.standard_normal(16)
        errors, _ = forward(g, x)
        np.testing.assert_allclose(errors, np.abs(x - reconstruct(model, x)), atol=1e-12)

    def test_conv_variant_matches_reconstruct(self):
        model = train_quick(16, 3, epochs=5, seed=3, conv=True)
        g = assemble_detector(model, lam=1.2, filter_window=1)
        rng = np.random.default_rng(8)
        x = rng.standard_normal(16)
        errors, _ = forward(g, x)
        np.testing.assert_allclose(errors, np.abs(x - reconstruct(model, x)), atol=1e-12)

    def test_bad_parameters(self, mlp16):
        with pytest.raises(GraphError):
            assemble_detector(mlp16, lam=0.0)
        with pytest.raises(GraphError):
            assemble_detector(mlp16, lam=1.2, filter_window=2)


class TestNodes:
    def test_maxpool_matches_hinge_identity(self):
        # max(u, v) = u * [u >= v] + v * [v > u] on two-cell windows
        node = PwlNode("maxpool", (-1,), 4, 2, windows=[[0, 1], [2, 3]])
        g = PwlGraph(
            [node, PwlNode("threshold", (0,), 2, 2, lam=1.0)], 4
        )
        rng = np.random.default_rng(9)
        for _ in range(20):
            x = rng.standard_normal(4)
            got = forward_errors(g, x)
            u, v = x[0], x[1]
            expected0 = u * (u >= v) + v * (v > u)
            u, v = x[2], x[3]
            expected1 = u * (u >= v) + v * (v > u)
            np.testing.assert_allclose(got, [expected0, expected1])

    def test_meanpool_node_averages_windows(self):
        from pwlsi.graph import meanpool_node

        node = meanpool_node(4, 4, 2)
        g = PwlGraph([node, PwlNode("threshold", (0,), 4, 4, lam=1.0)], 16)
        rng = np.random.default_rng(10)
        x = rng.standard_normal(16)
        got = forward_errors(g, x)
        expected = x.reshape(2, 2, 2, 2).mean(axis=(1, 3)).ravel()
        np.testing.assert_allclose(got, expected)

    def test_smooth_activation_rejected(self):
        with pytest.raises(GraphError):
            PwlNode("sigmoid", (-1,), 4, 4)
        with pytest.raises(GraphError):
            PwlNode("tanh", (-1,), 4, 4)

    def test_threshold_must_be_terminal(self):
        thresh = PwlNode("threshold", (-1,), 4, 4, lam=1.0)
        relu = PwlNode("relu", (0,), 4, 4)
        with pytest.raises(GraphError):
            PwlGraph([thresh, relu], 4)

    def test_dangling_node_rejected(self):
        a = affine_node(np.eye(4), None)
        b = affine_node(np.eye(4), None)  # never consumed
        thresh = PwlNode("threshold", (0,), 4, 4, lam=1.0)
        with pytest.raises(GraphError):
            PwlGraph([a, b, thresh], 4)

    def test_topological_order_enforced(self):
        bad = affine_node(np.eye(4), None, inputs=(2,))
        thresh = PwlNode("threshold", (0,), 4, 4, lam=1.0)
        with pytest.raises(GraphError):
            PwlGraph([bad, thresh], 4)
