"""Explicit layer DAGs with hook-based transformation points.

Models are declared as a sequence of nodes whose inputs must already exist,
which keeps every graph acyclic by construction.  Compression algorithms act
on a graph exclusively by inserting hooks at three kinds of points:

* ``PRE_PARAM``   wraps a named parameter right before the op consumes it
* ``PRE_INPUT``   wraps one incoming activation of a node
* ``POST_OUTPUT`` wraps the node's output activation

Hooks of different families stack and compose in registration order.
"""

from __future__ import annotations

import copy as _copy
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

INPUT_ID = "input"

NODE_KINDS = ("Conv2D", "FullyConnected", "BatchNorm", "ReLU", "Add", "MaxPool2D", "Flatten")


class GraphError(ValueError):
    """Malformed graph structure or invalid mutation."""


class HookPosition(Enum):
    PRE_PARAM = "pre_param"
    PRE_INPUT = "pre_input"
    POST_OUTPUT = "post_output"


@dataclass
class ExecContext:
    """Per-run state handed to every hook transform."""

    mode: str = "eval"  # "train" | "eval"
    rng: Optional[np.random.Generator] = None


@dataclass
class Hook:
    node_id: str
    position: HookPosition
    family: str
    transform: Callable[[Tensor, ExecContext], Tensor]
    param_name: Optional[str] = None  # PRE_PARAM only
    input_index: int = 0  # PRE_INPUT only

    def point(self) -> tuple:
        return (self.node_id, self.position, self.param_name, self.input_index)


@dataclass
class NodeSpec:
    id: str
    kind: str
    inputs: List[str] = field(default_factory=list)
    attrs: Dict = field(default_factory=dict)
    params: Dict[str, Tensor] = field(default_factory=dict)


def _prod(shape) -> int:
    out = 1
    for s in shape:
        out *= int(s)
    return out


class ModelGraph:
    """Directed acyclic graph of layer nodes with named parameter tensors."""

    def __init__(self, input_shape: Tuple[int, ...]):
        self.input_shape = tuple(int(s) for s in input_shape)
        self.nodes: Dict[str, NodeSpec] = {}
        self.hooks: List[Hook] = []

    # -- construction -----------------------------------------------------

    def add_node(self, spec: NodeSpec) -> NodeSpec:
        if spec.id == INPUT_ID or spec.id in self.nodes:
            raise GraphError(f"duplicate or reserved node id {spec.id!r}")
        if spec.kind not in NODE_KINDS:
            raise GraphError(f"unknown node kind {spec.kind!r}")
        for ref in spec.inputs:
            if ref != INPUT_ID and ref not in self.nodes:
                raise GraphError(f"node {spec.id!r} references undefined input {ref!r}")
        self._check_arity(spec)
        self.nodes[spec.id] = spec
        self.infer_shapes()  # validates shape compatibility eagerly
        return spec

    def _check_arity(self, spec: NodeSpec):
        n = len(spec.inputs)
        if spec.kind == "Add":
            if n != 2:
                raise GraphError(f"Add node {spec.id!r} needs exactly 2 inputs, got {n}")
        elif n != 1:
            raise GraphError(f"{spec.kind} node {spec.id!r} needs exactly 1 input, got {n}")

    def consumers(self, node_id: str) -> List[NodeSpec]:
        return [n for n in self.nodes.values() if node_id in n.inputs]

    def output_id(self) -> str:
        terminals = [nid for nid in self.nodes if not self.consumers(nid)]
        if len(terminals) != 1:
            raise GraphError(f"graph must have exactly one output node, found {terminals}")
        return terminals[0]

    def copy(self) -> "ModelGraph":
        return _copy.deepcopy(self)

    def parameters(self, trainable_only: bool = True) -> List[Tuple[str, str, Tensor]]:
        """(node_id, param_name, tensor) triples in topological order."""
        out = []
        for nid, node in self.nodes.items():
            for name, t in node.params.items():
                if not trainable_only or t.requires_grad:
                    out.append((nid, name, t))
        return out

    def num_params(self) -> int:
        return sum(t.size for _, _, t in self.parameters(trainable_only=False))

    # -- hooks ------------------------------------------------------------

    def insert_hook(self, hook: Hook):
        if hook.node_id != INPUT_ID and hook.node_id not in self.nodes:
            raise GraphError(f"hook references unknown node {hook.node_id!r}")
        if hook.position is HookPosition.PRE_PARAM:
            node = self.nodes[hook.node_id]
            if hook.param_name not in node.params:
                raise GraphError(f"node {hook.node_id!r} has no parameter {hook.param_name!r}")
        if hook.position is HookPosition.PRE_INPUT:
            node = self.nodes[hook.node_id]
            if not 0 <= hook.input_index < len(node.inputs):
                raise GraphError(f"node {hook.node_id!r} has no input index {hook.input_index}")
        for existing in self.hooks:
            if existing.point() == hook.point() and existing.family == hook.family:
                raise GraphError(
                    f"duplicate {hook.family!r} hook at {hook.node_id}/{hook.position.value}"
                )
        self.hooks.append(hook)

    def hooks_at(self, node_id, position, param_name=None, input_index=0) -> List[Hook]:
        return [
            h
            for h in self.hooks
            if h.point() == (node_id, position, param_name, input_index)
        ]

    def _apply_hooks(self, value: Tensor, hooks: List[Hook], ctx: ExecContext) -> Tensor:
        for h in hooks:
            value = h.transform(value, ctx)
        return value

    # -- shape inference ---------------------------------------------------

    def infer_shapes(self) -> Dict[str, Tuple[int, ...]]:
        """Per-node output shapes, batch dimension excluded."""
        shapes: Dict[str, Tuple[int, ...]] = {INPUT_ID: self.input_shape}
        for nid, node in self.nodes.items():
            ins = [shapes[ref] for ref in node.inputs]
            shapes[nid] = self._infer_node(node, ins)
        return shapes

    def _infer_node(self, node: NodeSpec, ins: List[Tuple[int, ...]]) -> Tuple[int, ...]:
        kind, a = node.kind, node.attrs
        if kind == "Conv2D":
            c, h, w = self._expect_rank(node, ins[0], 3)
            if c != a["in_channels"]:
                raise GraphError(
                    f"Conv2D {node.id!r}: input channels {c} != in_channels {a['in_channels']}"
                )
            k, s, p = a["kernel"], a.get("stride", 1), a.get("padding", 0)
            oh, ow = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
            if oh < 1 or ow < 1:
                raise GraphError(f"Conv2D {node.id!r}: kernel {k} does not fit input {h}x{w}")
            return (a["out_channels"], oh, ow)
        if kind == "FullyConnected":
            (f,) = self._expect_rank(node, ins[0], 1)
            if f != a["in_features"]:
                raise GraphError(
                    f"FullyConnected {node.id!r}: input features {f} != in_features {a['in_features']}"
                )
            return (a["out_features"],)
        if kind == "BatchNorm":
            shape = ins[0]
            c = shape[0]
            if c != a["num_features"]:
                raise GraphError(
                    f"BatchNorm {node.id!r}: input channels {c} != num_features {a['num_features']}"
                )
            return shape
        if kind == "ReLU":
            return ins[0]
        if kind == "Add":
            if ins[0] != ins[1]:
                raise GraphError(f"Add {node.id!r}: input shapes {ins[0]} and {ins[1]} differ")
            return ins[0]
        if kind == "MaxPool2D":
            c, h, w = self._expect_rank(node, ins[0], 3)
            k = a["kernel"]
            s = a.get("stride", k)
            if h < k or w < k:
                raise GraphError(f"MaxPool2D {node.id!r}: window {k} does not fit input {h}x{w}")
            return (c, (h - k) // s + 1, (w - k) // s + 1)
        if kind == "Flatten":
            return (_prod(ins[0]),)
        raise GraphError(f"unknown node kind {kind!r}")

    @staticmethod
    def _expect_rank(node: NodeSpec, shape: Tuple[int, ...], rank: int) -> Tuple[int, ...]:
        if len(shape) != rank:
            raise GraphError(f"{node.kind} {node.id!r}: expected rank-{rank} input, got {shape}")
        return shape

    # -- execution ---------------------------------------------------------

    def run(self, x: Tensor, mode: str = "eval", rng: Optional[np.random.Generator] = None) -> Tensor:
        """Execute the graph on a batched input [N, *input_shape]."""
        if mode not in ("train", "eval"):
            raise GraphError(f"unknown mode {mode!r}")
        x = T.as_tensor(x)
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(
                f"graph input: expected [N, {', '.join(map(str, self.input_shape))}], got {x.shape}"
            )
        for h in self.hooks:
            if h.node_id != INPUT_ID and h.node_id not in self.nodes:
                raise GraphError(f"dangling hook on removed node {h.node_id!r}")
        ctx = ExecContext(mode=mode, rng=rng)
        values: Dict[str, Tensor] = {}
        values[INPUT_ID] = self._apply_hooks(
            x, self.hooks_at(INPUT_ID, HookPosition.POST_OUTPUT), ctx
        )
        for nid, node in self.nodes.items():
            ins = []
            for i, ref in enumerate(node.inputs):
                v = values[ref]
                v = self._apply_hooks(
                    v, self.hooks_at(nid, HookPosition.PRE_INPUT, input_index=i), ctx
                )
                ins.append(v)
            params = {}
            for name, p in node.params.items():
                params[name] = self._apply_hooks(
                    p, self.hooks_at(nid, HookPosition.PRE_PARAM, param_name=name), ctx
                )
            out = self._exec_node(node, ins, params, ctx)
            out = self._apply_hooks(out, self.hooks_at(nid, HookPosition.POST_OUTPUT), ctx)
            values[nid] = out
        return values[self.output_id()]

    def _exec_node(self, node: NodeSpec, ins: List[Tensor], params: Dict[str, Tensor], ctx: ExecContext) -> Tensor:
        kind, a = node.kind, node.attrs
        if kind == "Conv2D":
            return T.conv2d(
                ins[0], params["weight"], params.get("bias"),
                stride=a.get("stride", 1), padding=a.get("padding", 0),
            )
        if kind == "FullyConnected":
            return T.linear(ins[0], params["weight"], params.get("bias"))
        if kind == "BatchNorm":
            return self._batchnorm(node, ins[0], params, ctx)
        if kind == "ReLU":
            return T.relu(ins[0])
        if kind == "Add":
            return T.add(ins[0], ins[1])
        if kind == "MaxPool2D":
            return T.maxpool2d(ins[0], a["kernel"], a.get("stride", a["kernel"]))
        if kind == "Flatten":
            n = ins[0].shape[0]
            return T.reshape(ins[0], (n, _prod(ins[0].shape[1:])))
        raise GraphError(f"unknown node kind {kind!r}")

    def _batchnorm(self, node: NodeSpec, x: Tensor, params: Dict[str, Tensor], ctx: ExecContext) -> Tensor:
        a = node.attrs
        eps = a.get("eps", 1e-5)
        momentum = a.get("momentum", 0.1)
        c = a["num_features"]
        pshape = (1, c) + (1,) * (x.ndim - 2)
        axes = (0,) if x.ndim == 2 else (0, 2, 3)
        gamma, beta = params["gamma"], params["beta"]
        if ctx.mode == "train":
            mu = T.tmean(x, axis=axes, keepdims=True)
            xc = T.sub(x, T.broadcast_to(mu, x.shape))
            var = T.tmean(T.mul(xc, xc), axis=axes, keepdims=True)
            # running buffers track batch statistics outside the tape
            rm = node.params["running_mean"]
            rv = node.params["running_var"]
            rm.data = (1 - momentum) * rm.data + momentum * mu.data.reshape(c)
            rv.data = (1 - momentum) * rv.data + momentum * var.data.reshape(c)
        else:
            mu = T.reshape(node.params["running_mean"].detach(), pshape)
            var = T.reshape(node.params["running_var"].detach(), pshape)
            xc = T.sub(x, T.broadcast_to(mu, x.shape))
        inv = T.div(1.0, T.tsqrt(T.add(var, eps)))
        xhat = T.mul(xc, T.broadcast_to(inv, x.shape))
        out = T.add(
            T.mul(xhat, T.broadcast_to(T.reshape(gamma, pshape), x.shape)),
            T.broadcast_to(T.reshape(beta, pshape), x.shape),
        )
        return out

    # -- derived metrics ---------------------------------------------------

    def flops_per_node(self) -> Dict[str, int]:
        """Multiply-accumulate counts for the parameterized layers."""
        shapes = self.infer_shapes()
        out = {}
        for nid, node in self.nodes.items():
            if node.kind == "Conv2D":
                a = node.attrs
                _, oh, ow = shapes[nid]
                out[nid] = a["kernel"] * a["kernel"] * a["in_channels"] * a["out_channels"] * oh * ow
            elif node.kind == "FullyConnected":
                out[nid] = node.attrs["in_features"] * node.attrs["out_features"]
        return out
