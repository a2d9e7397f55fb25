import numpy as np
import pytest

from nncompress import tensor as T
from nncompress.graph import (
    ExecContext,
    GraphError,
    Hook,
    HookPosition,
    INPUT_ID,
    ModelGraph,
    NodeSpec,
)
from nncompress.tensor import ShapeError, Tensor


def conv_node(nid, src, cin, cout, k, stride=1, padding=0, w=None, b=None):
    w = w if w is not None else np.zeros((cout, cin, k, k))
    b = b if b is not None else np.zeros(cout)
    return NodeSpec(
        id=nid,
        kind="Conv2D",
        inputs=[src],
        attrs={"in_channels": cin, "out_channels": cout, "kernel": k, "stride": stride, "padding": padding},
        params={"weight": Tensor(w, requires_grad=True), "bias": Tensor(b, requires_grad=True)},
    )


def fc_node(nid, src, fin, fout, w=None, b=None):
    w = w if w is not None else np.zeros((fout, fin))
    b = b if b is not None else np.zeros(fout)
    return NodeSpec(
        id=nid,
        kind="FullyConnected",
        inputs=[src],
        attrs={"in_features": fin, "out_features": fout},
        params={"weight": Tensor(w, requires_grad=True), "bias": Tensor(b, requires_grad=True)},
    )


def bn_node(nid, src, c):
    return NodeSpec(
        id=nid,
        kind="BatchNorm",
        inputs=[src],
        attrs={"num_features": c},
        params={
            "gamma": Tensor(np.ones(c), requires_grad=True),
            "beta": Tensor(np.zeros(c), requires_grad=True),
            "running_mean": Tensor(np.zeros(c)),
            "running_var": Tensor(np.ones(c)),
        },
    )


def test_flatten_identity_graph():
    g = ModelGraph(input_shape=(4,))
    g.add_node(NodeSpec(id="flat", kind="Flatten", inputs=[INPUT_ID]))
    x = np.array([[1.0, 2.0, 3.0, 4.0]])
    out = g.run(Tensor(x))
    np.testing.assert_array_equal(out.data, x)


def test_conv_graph_hand_computed():
    g = ModelGraph(input_shape=(1, 3, 3))
    g.add_node(conv_node("c", INPUT_ID, 1, 1, 2, w=np.ones((1, 1, 2, 2))))
    out = g.run(Tensor(np.ones((1, 1, 3, 3))))
    np.testing.assert_allclose(out.data, np.full((1, 1, 2, 2), 4.0))


def test_zero_weight_hook_leaves_bias():
    g = ModelGraph(input_shape=(1, 3, 3))
    g.add_node(conv_node("c", INPUT_ID, 1, 1, 2, w=np.ones((1, 1, 2, 2)), b=np.array([0.5])))
    g.insert_hook(Hook("c", HookPosition.PRE_PARAM, "zero", lambda t, ctx: T.mul(t, 0.0), param_name="weight"))
    out = g.run(Tensor(np.ones((1, 1, 3, 3))))
    np.testing.assert_allclose(out.data, np.full((1, 1, 2, 2), 0.5))


def test_hook_order_is_registration_order():
    def build(order):
        g = ModelGraph(input_shape=(2,))
        g.add_node(NodeSpec(id="flat", kind="Flatten", inputs=[INPUT_ID]))
        for fam, fn in order:
            g.insert_hook(Hook("flat", HookPosition.POST_OUTPUT, fam, fn))
        return g.run(Tensor(np.array([[1.0, 2.0]]))).data

    double = lambda t, ctx: T.mul(t, 2.0)
    plus_one = lambda t, ctx: T.add(t, 1.0)
    np.testing.assert_array_equal(build([("a", double), ("b", plus_one)]), [[3.0, 5.0]])
    np.testing.assert_array_equal(build([("a", plus_one), ("b", double)]), [[4.0, 6.0]])


def test_duplicate_family_hook_rejected():
    g = ModelGraph(input_shape=(2,))
    g.add_node(NodeSpec(id="flat", kind="Flatten", inputs=[INPUT_ID]))
    g.insert_hook(Hook("flat", HookPosition.POST_OUTPUT, "fam", lambda t, ctx: t))
    with pytest.raises(GraphError, match="duplicate"):
        g.insert_hook(Hook("flat", HookPosition.POST_OUTPUT, "fam", lambda t, ctx: t))
    # a different family at the same point stacks fine
    g.insert_hook(Hook("flat", HookPosition.POST_OUTPUT, "other", lambda t, ctx: t))


def test_hook_on_unknown_node_rejected():
    g = ModelGraph(input_shape=(2,))
    g.add_node(NodeSpec(id="flat", kind="Flatten", inputs=[INPUT_ID]))
    with pytest.raises(GraphError, match="unknown node"):
        g.insert_hook(Hook("nope", HookPosition.POST_OUTPUT, "fam", lambda t, ctx: t))
    with pytest.raises(GraphError, match="no parameter"):
        g.insert_hook(Hook("flat", HookPosition.PRE_PARAM, "fam", lambda t, ctx: t, param_name="weight"))


def test_identity_hooks_are_transparent():
    rng = np.random.default_rng(0)
    w = rng.normal(size=(2, 3))
    x = rng.normal(size=(4, 3))
    plain = ModelGraph(input_shape=(3,))
    plain.add_node(fc_node("fc", INPUT_ID, 3, 2, w=w))
    hooked = ModelGraph(input_shape=(3,))
    hooked.add_node(fc_node("fc", INPUT_ID, 3, 2, w=w))
    hooked.insert_hook(Hook("fc", HookPosition.PRE_PARAM, "id", lambda t, ctx: t, param_name="weight"))
    hooked.insert_hook(Hook("fc", HookPosition.POST_OUTPUT, "id", lambda t, ctx: t))
    hooked.insert_hook(Hook(INPUT_ID, HookPosition.POST_OUTPUT, "id", lambda t, ctx: t))
    a = plain.run(Tensor(x)).data
    b = hooked.run(Tensor(x)).data
    assert np.array_equal(a, b)


def test_nodes_must_reference_existing_ids():
    g = ModelGraph(input_shape=(2,))
    with pytest.raises(GraphError, match="undefined input"):
        g.add_node(NodeSpec(id="a", kind="Flatten", inputs=["later"]))
    g.add_node(NodeSpec(id="a", kind="Flatten", inputs=[INPUT_ID]))
    with pytest.raises(GraphError, match="duplicate or reserved"):
        g.add_node(NodeSpec(id="a", kind="Flatten", inputs=[INPUT_ID]))
    with pytest.raises(GraphError, match="duplicate or reserved"):
        g.add_node(NodeSpec(id=INPUT_ID, kind="Flatten", inputs=[INPUT_ID]))


def test_shape_inference_and_mismatch_errors():
    g = ModelGraph(input_shape=(1, 8, 8))
    g.add_node(conv_node("c1", INPUT_ID, 1, 4, 3, padding=1))
    g.add_node(bn_node("bn", "c1", 4))
    g.add_node(NodeSpec(id="r", kind="ReLU", inputs=["bn"]))
    g.add_node(NodeSpec(id="p", kind="MaxPool2D", inputs=["r"], attrs={"kernel": 2}))
    g.add_node(NodeSpec(id="flat", kind="Flatten", inputs=["p"]))
    g.add_node(fc_node("fc", "flat", 64, 2))
    shapes = g.infer_shapes()
    assert shapes["c1"] == (4, 8, 8)
    assert shapes["p"] == (4, 4, 4)
    assert shapes["flat"] == (64,)
    assert shapes["fc"] == (2,)

    bad = ModelGraph(input_shape=(1, 8, 8))
    with pytest.raises(GraphError, match="in_channels"):
        bad.add_node(conv_node("c1", INPUT_ID, 3, 4, 3))


def test_input_batch_shape_checked():
    g = ModelGraph(input_shape=(3,))
    g.add_node(NodeSpec(id="flat", kind="Flatten", inputs=[INPUT_ID]))
    with pytest.raises(ShapeError, match="graph input"):
        g.run(Tensor(np.zeros((2, 4))))


def test_single_output_node_enforced():
    g = ModelGraph(input_shape=(2,))
    g.add_node(NodeSpec(id="a", kind="ReLU", inputs=[INPUT_ID]))
    g.add_node(NodeSpec(id="b", kind="ReLU", inputs=[INPUT_ID]))
    with pytest.raises(GraphError, match="exactly one output"):
        g.run(Tensor(np.zeros((1, 2))))


def test_add_skip_connection():
    g = ModelGraph(input_shape=(2,))
    g.add_node(NodeSpec(id="r", kind="ReLU", inputs=[INPUT_ID]))
    g.add_node(NodeSpec(id="s", kind="Add", inputs=["r", INPUT_ID]))
    out = g.run(Tensor(np.array([[-1.0, 2.0]])))
    np.testing.assert_array_equal(out.data, [[-1.0, 4.0]])


def test_pre_input_hook_targets_one_edge():
    g = ModelGraph(input_shape=(2,))
    g.add_node(NodeSpec(id="r", kind="ReLU", inputs=[INPUT_ID]))
    g.add_node(NodeSpec(id="s", kind="Add", inputs=["r", INPUT_ID]))
    g.insert_hook(Hook("s", HookPosition.PRE_INPUT, "scale", lambda t, ctx: T.mul(t, 10.0), input_index=1))
    out = g.run(Tensor(np.array([[1.0, 2.0]])))
    np.testing.assert_array_equal(out.data, [[11.0, 22.0]])
    with pytest.raises(GraphError, match="input index"):
        g.insert_hook(Hook("s", HookPosition.PRE_INPUT, "oob", lambda t, ctx: t, input_index=2))


def test_batchnorm_train_normalizes_and_tracks():
    g = ModelGraph(input_shape=(2, 4, 4))
    g.add_node(bn_node("bn", INPUT_ID, 2))
    rng = np.random.default_rng(1)
    x = rng.normal(loc=3.0, scale=2.0, size=(8, 2, 4, 4))
    out = g.run(Tensor(x), mode="train")
    mean = out.data.mean(axis=(0, 2, 3))
    var = out.data.var(axis=(0, 2, 3))
    np.testing.assert_allclose(mean, 0.0, atol=1e-10)
    np.testing.assert_allclose(var, 1.0, atol=1e-3)
    node = g.nodes["bn"]
    expected_rm = 0.1 * x.mean(axis=(0, 2, 3))
    np.testing.assert_allclose(node.params["running_mean"].data, expected_rm)

    # eval mode uses the tracked statistics, not the batch
    y = np.zeros((2, 2, 4, 4))
    out_eval = g.run(Tensor(y), mode="eval")
    rm = node.params["running_mean"].data.reshape(1, 2, 1, 1)
    rv = node.params["running_var"].data.reshape(1, 2, 1, 1)
    np.testing.assert_allclose(out_eval.data, (y - rm) / np.sqrt(rv + 1e-5), atol=1e-12)


def test_gradients_flow_through_graph_and_hooks():
    g = ModelGraph(input_shape=(3,))
    w = np.arange(6.0).reshape(2, 3)
    g.add_node(fc_node("fc", INPUT_ID, 3, 2, w=w))
    mask = Tensor(np.array([[1.0, 0.0, 1.0], [1.0, 1.0, 0.0]]))
    g.insert_hook(Hook("fc", HookPosition.PRE_PARAM, "mask", lambda t, ctx: T.mul(t, mask), param_name="weight"))
    x = np.ones((1, 3))
    out = g.run(Tensor(x), mode="train")
    loss = T.tsum(out)
    T.backward(loss)
    wt = g.nodes["fc"].params["weight"]
    # masked entries receive no gradient, surviving ones see the input
    np.testing.assert_array_equal(wt.grad, mask.data * x[0])


def test_flops_per_node():
    g = ModelGraph(input_shape=(1, 8, 8))
    g.add_node(conv_node("c1", INPUT_ID, 1, 4, 3, padding=1))
    g.add_node(NodeSpec(id="flat", kind="Flatten", inputs=["c1"]))
    g.add_node(fc_node("fc", "flat", 256, 2))
    flops = g.flops_per_node()
    assert flops["c1"] == 3 * 3 * 1 * 4 * 8 * 8
    assert flops["fc"] == 256 * 2
    assert "flat" not in flops


def test_copy_is_independent():
    g = ModelGraph(input_shape=(3,))
    g.add_node(fc_node("fc", INPUT_ID, 3, 2, w=np.ones((2, 3))))
    h = g.copy()
    h.nodes["fc"].params["weight"].data[:] = 0.0
    assert g.nodes["fc"].params["weight"].data.sum() == 6.0


def test_mode_validated():
    g = ModelGraph(input_shape=(2,))
    g.add_node(NodeSpec(id="r", kind="ReLU", inputs=[INPUT_ID]))
    with pytest.raises(GraphError, match="unknown mode"):
        g.run(Tensor(np.zeros((1, 2))), mode="predict")
