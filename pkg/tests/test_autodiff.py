"""Forward/backward engine tests: node kinds, chain rule, finite differences."""
import numpy as np
import pytest

from gatesearch import (NetworkGraph, StateError, StructuralError,
                        ConfigurationError, backward,
                        finite_difference_check, forward)
from gatesearch.graph import Node
from gatesearch.rng import make_rng
from gatesearch import ops


# frozen from the scalar re-implementation in
# TestForward.test_two_layer_mlp_matches_scalar_reimplementation
PINNED_MLP_LOSS = 0.8168946762877826


def dense_chain(widths, in_features, classes, bias=True, seed=0):
    g = NetworkGraph()
    g.add_node(Node("in", "input", channels=in_features))
    prev = "in"
    for i, w in enumerate(widths):
        g.add_node(Node(f"h{i}", "dense", [prev], {"units": w, "bias": bias}))
        g.add_node(Node(f"h{i}.act", "relu", [f"h{i}"]))
        prev = f"h{i}.act"
    g.add_node(Node("out", "dense", [prev], {"units": classes, "bias": bias}))
    g.add_node(Node("loss", "softmax_xent", ["out"]))
    g.init_parameters(make_rng(seed))
    return g


def mini_cnn(seed=0):
    g = NetworkGraph()
    g.add_node(Node("in", "input", channels=2))
    g.nodes["in"].height = g.nodes["in"].width = 8
    g.add_node(Node("c1", "conv2d", ["in"], {"units": 4, "kernel": 3, "stride": 2}))
    g.add_node(Node("c1.bn", "batchnorm", ["c1"]))
    g.add_node(Node("c1.act", "relu", ["c1.bn"]))
    g.add_node(Node("dw", "depthwise_conv2d", ["c1.act"], {"kernel": 3, "stride": 1}))
    g.add_node(Node("c2", "conv2d", ["dw"], {"units": 3, "kernel": 1, "stride": 1}))
    g.add_node(Node("c2.bn", "batchnorm", ["c2"]))
    g.add_node(Node("c2.act", "relu", ["c2.bn"]))
    g.add_node(Node("pool", "avgpool", ["c2.act"], {"kernel": 2, "stride": 2}))
    g.add_node(Node("gp", "global_pool", ["pool"]))
    g.add_node(Node("fc", "dense", ["gp"], {"units": 3, "bias": True}))
    g.add_node(Node("loss", "softmax_xent", ["fc"]))
    g.init_parameters(make_rng(seed))
    return g


class TestForward:
    def test_identity_dense_passthrough(self):
        # identity weights, all mask values 1: the layer reproduces its input
        g = NetworkGraph()
        g.add_node(Node("in", "input", channels=3))
        g.add_node(Node("fc", "dense", ["in"], {"units": 3, "bias": False}))
        g.add_node(Node("m", "mask", ["fc"]))
        g.add_node(Node("loss", "softmax_xent", ["m"]))
        g.params["fc.w"] = np.eye(3)
        x = make_rng(0).standard_normal((5, 3))
        ones = {gid: 1.0 for gid in g.nodes["m"].attrs["groups"]}
        res = forward(g, x, np.zeros(5, dtype=int), mask_values=ones)
        np.testing.assert_array_equal(res.activations["m"], x)

    def test_zero_mask_annihilates_output(self):
        g = NetworkGraph()
        g.add_node(Node("in", "input", channels=3))
        g.add_node(Node("fc", "dense", ["in"], {"units": 3, "bias": False}))
        g.add_node(Node("m", "mask", ["fc"]))
        g.add_node(Node("loss", "softmax_xent", ["m"]))
        g.params["fc.w"] = np.eye(3)
        x = make_rng(0).standard_normal((5, 3))
        y = np.zeros(5, dtype=int)
        zeros = {gid: 0.0 for gid in g.nodes["m"].attrs["groups"]}
        res = forward(g, x, y, mask_values=zeros)
        assert np.all(res.activations["m"] == 0.0)
        # loss equals the loss of all-zero logits: uniform prediction
        assert res.loss == pytest.approx(np.log(3.0))

    def test_two_layer_mlp_matches_scalar_reimplementation(self):
        # independent oracle: the same forward written with python loops
        g = dense_chain([4, 3], in_features=3, classes=2, seed=11)
        x = make_rng(12).standard_normal((4, 3))
        y = np.array([0, 1, 1, 0])
        res = forward(g, x, y, mode="eval", retain=False)

        import math
        def dense(xrow, w, b):
            return [sum(xrow[i] * w[i][j] for i in range(len(xrow))) + b[j]
                    for j in range(len(b))]
        losses = []
        for n in range(4):
            h = dense(list(x[n]), g.params["h0.w"].tolist(), g.params["h0.b"].tolist())
            h = [max(v, 0.0) for v in h]
            h = dense(h, g.params["h1.w"].tolist(), g.params["h1.b"].tolist())
            h = [max(v, 0.0) for v in h]
            z = dense(h, g.params["out.w"].tolist(), g.params["out.b"].tolist())
            m = max(z)
            lse = m + math.log(sum(math.exp(v - m) for v in z))
            losses.append(lse - z[y[n]])
        oracle = sum(losses) / 4
        assert res.loss == pytest.approx(oracle, rel=1e-12)
        # pinned regression constant, computed once with the oracle above
        assert res.loss == pytest.approx(PINNED_MLP_LOSS, abs=1e-12)

    def test_batch_shape_mismatch_names_node(self):
        g = dense_chain([4], in_features=3, classes=2)
        with pytest.raises(StructuralError, match="'in'"):
            forward(g, np.zeros((2, 5)), np.zeros(2, dtype=int))

    def test_missing_mask_value_is_configuration_error(self):
        g = NetworkGraph()
        g.add_node(Node("in", "input", channels=2))
        g.add_node(Node("fc", "dense", ["in"], {"units": 2}))
        g.add_node(Node("m", "mask", ["fc"]))
        g.add_node(Node("loss", "softmax_xent", ["m"]))
        with pytest.raises(ConfigurationError, match="no mask value"):
            forward(g, np.zeros((1, 2)), np.zeros(1, dtype=int))


class TestBackward:
    def test_linear_gradient(self):
        # dL/dw for a single dense unit: gradient equals input when dL/dy = 1
        x = np.array([[2.0]])
        w = np.array([[1.5]])
        dx, dw, db = ops.dense_backward(np.array([[1.0]]), x, w, False)
        assert dw[0, 0] == 2.0
        assert dx[0, 0] == 1.5

    def test_mask_chain_rule_matches_fd(self):
        # one masked unit: dL/dm and the relaxation factor m(1-m)/tau
        from gatesearch.gates import relaxed_mask, mask_logit_grad
        g = NetworkGraph()
        g.add_node(Node("in", "input", channels=1))
        g.add_node(Node("fc", "dense", ["in"], {"units": 1, "bias": False}))
        g.add_node(Node("m", "mask", ["fc"]))
        g.add_node(Node("out", "dense", ["m"], {"units": 2, "bias": False}))
        g.add_node(Node("loss", "softmax_xent", ["out"]))
        g.init_parameters(make_rng(3))
        gid = g.nodes["m"].attrs["groups"][0]
        x = np.array([[1.7]])
        y = np.array([1])
        nu, ell, tau = 0.3, -0.2, 0.5

        def loss_at(nu_val):
            mv = {gid: float(relaxed_mask(nu_val, ell, tau))}
            return forward(g, x, y, mask_values=mv).loss

        m = float(relaxed_mask(nu, ell, tau))
        res = forward(g, x, y, mask_values={gid: m})
        grads = backward(g, res)
        analytic = grads.masks[gid] * float(mask_logit_grad(m, tau))
        h = 1e-4
        fd = (loss_at(nu + h) - loss_at(nu - h)) / (2 * h)
        assert analytic == pytest.approx(fd, rel=1e-6)

    def test_backward_requires_retained_train_forward(self):
        g = dense_chain([3], in_features=2, classes=2)
        res = forward(g, np.zeros((2, 2)), np.zeros(2, dtype=int),
                      mode="eval", retain=False)
        with pytest.raises(StateError):
            backward(g, res)

    def test_buffers_untouched_by_backward(self):
        g = mini_cnn()
        x = make_rng(5).standard_normal((4, 2, 8, 8))
        y = np.array([0, 1, 2, 0])
        res = forward(g, x, y)
        saved = {k: v.copy() for k, v in g.buffers.items()}
        backward(g, res)
        for k, v in g.buffers.items():
            np.testing.assert_array_equal(v, saved[k])


class TestFiniteDifferences:
    def test_linear_scalar_graph_error_tiny(self):
        # loss linear in w: central differences are exact up to roundoff
        rng = make_rng(0)
        x = rng.standard_normal((4, 3))
        w = rng.standard_normal((3, 2))
        probe = rng.standard_normal((4, 2))

        def loss(wv):
            return float((ops.dense_forward(x, wv, None) * probe).sum())

        analytic = x.T @ probe
        worst = 0.0
        for flat in range(w.size):
            orig = w.flat[flat]
            w.flat[flat] = orig + 1e-4
            lp = loss(w)
            w.flat[flat] = orig - 1e-4
            lm = loss(w)
            w.flat[flat] = orig
            fd = (lp - lm) / 2e-4
            a = analytic.flat[flat]
            worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), 1e-12))
        assert worst < 1e-9

    def test_graph_level_check_near_machine_precision(self):
        g = dense_chain([4], in_features=3, classes=2, seed=1)
        x = make_rng(1).standard_normal((6, 3))
        y = np.array([0, 1, 0, 1, 1, 0])
        rep = finite_difference_check(g, x, y, step=1e-5)
        assert rep.max_rel_error < 1e-7
        assert rep.nan_count == 0

    def test_mini_cnn_all_kinds_within_tolerance(self):
        g = mini_cnn(seed=7)
        x = make_rng(8).standard_normal((4, 2, 8, 8))
        y = np.array([0, 1, 2, 1])
        rep = finite_difference_check(g, x, y, step=1e-4,
                                      rng=make_rng(9), max_coordinates=200)
        assert rep.max_rel_error < 1e-3

    def test_buffers_restored_after_check(self):
        g = mini_cnn()
        x = make_rng(5).standard_normal((4, 2, 8, 8))
        y = np.array([0, 1, 2, 0])
        forward(g, x, y)  # move running stats off their init
        saved = {k: v.copy() for k, v in g.buffers.items()}
        finite_difference_check(g, x, y, max_coordinates=10)
        for k, v in g.buffers.items():
            np.testing.assert_array_equal(v, saved[k])


class TestInvariantProperties:
    def test_identical_seed_identical_loss(self):
        losses = []
        for _ in range(2):
            g = mini_cnn(seed=3)
            x = make_rng(4).standard_normal((4, 2, 8, 8))
            y = np.array([0, 1, 2, 1])
            losses.append(forward(g, x, y).loss)
        assert losses[0] == losses[1]

    def test_all_ones_masks_equal_maskless_graph(self):
        from gatesearch import insert_masks
        from gatesearch.spaces import SpaceConfig, build_space
        cfg = SpaceConfig(kind="oneshot_cell", classes=3, input_shape=(1, 8, 8),
                          cells=1, blocks=2, base_width=3,
                          operators=("conv1x1", "sep3"), aggregator="concat",
                          stem_width=3, stem_stride=1)
        space = build_space(cfg)
        plain = space.graph.clone()
        plain.init_parameters(make_rng(0))
        masked = insert_masks(plain)
        x = make_rng(1).standard_normal((3, 1, 8, 8))
        ones = {gid: 1.0 for m in masked.mask_nodes()
                for gid in m.attrs["groups"]}
        a = forward(plain, x, mode="eval", retain=False)
        b = forward(masked, x, mode="eval", mask_values=ones, retain=False)
        np.testing.assert_array_equal(a.activations[plain.output_id],
                                      b.activations[masked.output_id])
