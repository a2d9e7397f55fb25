"""Built-in model presets sized for minutes-scale CPU training."""

from __future__ import annotations

import numpy as np

from .graph import INPUT_ID, ModelGraph, NodeSpec
from .tensor import Tensor
from .util import make_rng

PRESETS = ("mlp-small", "cnn-small", "cnn-residual")


def _conv(nid, src, cin, cout, k, rng, stride=1, padding=0):
    fan_in = cin * k * k
    w = rng.normal(size=(cout, cin, k, k)) * np.sqrt(2.0 / fan_in)
    return NodeSpec(
        id=nid,
        kind="Conv2D",
        inputs=[src],
        attrs={"in_channels": cin, "out_channels": cout, "kernel": k, "stride": stride, "padding": padding},
        params={
            "weight": Tensor(w, requires_grad=True),
            "bias": Tensor(np.zeros(cout), requires_grad=True),
        },
    )


def _fc(nid, src, fin, fout, rng):
    w = rng.normal(size=(fout, fin)) * np.sqrt(2.0 / fin)
    return NodeSpec(
        id=nid,
        kind="FullyConnected",
        inputs=[src],
        attrs={"in_features": fin, "out_features": fout},
        params={
            "weight": Tensor(w, requires_grad=True),
            "bias": Tensor(np.zeros(fout), requires_grad=True),
        },
    )


def _bn(nid, src, c):
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


def _op(nid, kind, src, **attrs):
    return NodeSpec(id=nid, kind=kind, inputs=[src], attrs=attrs)


def mlp_small(seed: int = 0) -> ModelGraph:
    rng = make_rng(seed)
    g = ModelGraph(input_shape=(8,))
    g.add_node(_fc("fc1", INPUT_ID, 8, 16, rng))
    g.add_node(_op("relu1", "ReLU", "fc1"))
    g.add_node(_fc("fc2", "relu1", 16, 2, rng))
    return g


def cnn_small(seed: int = 0) -> ModelGraph:
    rng = make_rng(seed)
    g = ModelGraph(input_shape=(1, 8, 8))
    g.add_node(_conv("conv1", INPUT_ID, 1, 4, 3, rng, padding=1))
    g.add_node(_bn("bn1", "conv1", 4))
    g.add_node(_op("relu1", "ReLU", "bn1"))
    g.add_node(_op("pool1", "MaxPool2D", "relu1", kernel=2, stride=2))
    g.add_node(_conv("conv2", "pool1", 4, 8, 3, rng, padding=1))
    g.add_node(_op("relu2", "ReLU", "conv2"))
    g.add_node(_op("pool2", "MaxPool2D", "relu2", kernel=2, stride=2))
    g.add_node(_op("flat", "Flatten", "pool2"))
    g.add_node(_fc("fc", "flat", 8 * 2 * 2, 2, rng))
    return g


def cnn_residual(seed: int = 0) -> ModelGraph:
    rng = make_rng(seed)
    g = ModelGraph(input_shape=(1, 8, 8))
    g.add_node(_conv("stem", INPUT_ID, 1, 8, 3, rng, padding=1))
    g.add_node(_bn("bn_stem", "stem", 8))
    g.add_node(_op("relu_stem", "ReLU", "bn_stem"))
    g.add_node(_conv("conv_a", "relu_stem", 8, 8, 3, rng, padding=1))
    g.add_node(_bn("bn_a", "conv_a", 8))
    g.add_node(_op("relu_a", "ReLU", "bn_a"))
    g.add_node(_conv("conv_b", "relu_a", 8, 8, 3, rng, padding=1))
    g.add_node(_bn("bn_b", "conv_b", 8))
    g.add_node(NodeSpec(id="add", kind="Add", inputs=["relu_stem", "bn_b"]))
    g.add_node(_op("relu_out", "ReLU", "add"))
    g.add_node(_op("pool", "MaxPool2D", "relu_out", kernel=2, stride=2))
    g.add_node(_op("flat", "Flatten", "pool"))
    g.add_node(_fc("fc", "flat", 8 * 4 * 4, 2, rng))
    return g


def build_model(name: str, seed: int = 0) -> ModelGraph:
    if name == "mlp-small":
        return mlp_small(seed)
    if name == "cnn-small":
        return cnn_small(seed)
    if name == "cnn-residual":
        return cnn_residual(seed)
    raise ValueError(f"unknown model preset {name!r}; choose from {PRESETS}")
