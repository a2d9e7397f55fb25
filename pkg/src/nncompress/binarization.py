"""Binary weights and activations for convolutional layers.

Weights collapse to ``scale * sign(W)`` where the scale is the mean absolute
value of the float weights, taken over the whole tensor or per input
channel.  Activations pass through ``s * H(x - s*t)`` with a trainable
amplitude ``s`` and per-channel thresholds ``t``.  Both use straight-through
gradients, and both switch on gradually over a four-stage schedule.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from fnmatch import fnmatch
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import serialize, tensor as T
from .base import CompressionBuilder, CompressionController, CompressionScheduler
from .graph import Hook, HookPosition, INPUT_ID, ModelGraph
from .tensor import ShapeError, Tensor

WEIGHT_SCHEMES = ("xnor", "dorefa")


def _sign(data: np.ndarray) -> np.ndarray:
    # sign(0) := +1 so the output never leaves the two-point set {-a, +a}
    return np.where(data >= 0, 1.0, -1.0)


def binarize_weights(w: Tensor, scheme: str) -> Tensor:
    """Collapse a conv weight to signs scaled by mean absolute magnitude.

    DoReFa uses one scalar scale for the whole tensor; XNOR computes one
    scale per input channel.  Scales are recomputed from the current float
    weights on every call and do not receive gradients; the sign itself is
    straight-through.
    """
    w = T.as_tensor(w)
    if w.ndim != 4:
        raise ShapeError(f"binarize_weights: expected 4-D conv weight, got {w.shape}")
    if scheme not in WEIGHT_SCHEMES:
        raise ValueError(f"unknown weight scheme {scheme!r}")
    if scheme == "dorefa":
        alpha = np.full(w.shape, np.mean(np.abs(w.data)))
    else:
        per_in = np.abs(w.data).mean(axis=(0, 2, 3))
        alpha = np.broadcast_to(per_in.reshape(1, -1, 1, 1), w.shape).copy()
    sgn = T.ste_apply(w, _sign, name="sign_ste")
    return T.mul(sgn, Tensor(alpha))


def binarize_activations(x: Tensor, s: Tensor, t: Tensor) -> Tensor:
    """Two-level activation: ``s * H(x - s * t_c)`` with H(0) = 0.

    The step function is straight-through, which yields the standard
    surrogate gradients: ``s`` sees ``H(z) - s*t_c`` per element, each
    threshold sees ``-s^2`` per element of its channel, and the input sees
    a uniform factor of ``s``.
    """
    x, s, t = T.as_tensor(x), T.as_tensor(s), T.as_tensor(t)
    if x.ndim != 4:
        raise ShapeError(f"binarize_activations: expected 4-D activation, got {x.shape}")
    if t.ndim != 1 or t.shape[0] != x.shape[1]:
        raise ShapeError(
            f"binarize_activations: {t.shape} thresholds for {x.shape[1]} channels"
        )
    s_b = T.broadcast_to(s, x.shape)
    t_b = T.broadcast_to(T.reshape(t, (t.shape[0], 1, 1)), x.shape)
    z = T.sub(x, T.mul(s_b, t_b))
    h = T.ste_apply(z, lambda d: (d > 0).astype(np.float64), name="heaviside_ste")
    return T.mul(s_b, h)


# -- training schedule -----------------------------------------------------


@dataclass
class BinarizationStage:
    stage: int
    activations_on: bool
    weights_on: bool
    lr_scale: float
    weight_decay_on: bool


def binarization_stage_at(epoch: int, stage_durations: Sequence[int]) -> BinarizationStage:
    """Stage flags for an epoch under the four-stage ramp.

    Stage 1 trains the float model, stage 2 binarizes activations only,
    stage 3 adds weights, and stage 4 keeps both while decaying the
    learning rate quadratically to zero and switching weight decay off.
    """
    durations = [int(d) for d in stage_durations]
    if len(durations) != 4:
        raise ValueError(f"expected 4 stage durations, got {len(durations)}")
    if any(d < 0 for d in durations):
        raise ValueError(f"negative stage duration in {durations}")
    d1, d2, d3, d4 = durations
    if epoch < d1:
        return BinarizationStage(1, False, False, 1.0, True)
    if epoch < d1 + d2:
        return BinarizationStage(2, True, False, 1.0, True)
    if epoch < d1 + d2 + d3:
        return BinarizationStage(3, True, True, 1.0, True)
    progress = (epoch - (d1 + d2 + d3)) / d4 if d4 > 0 else 1.0
    progress = min(progress, 1.0)
    return BinarizationStage(4, True, True, (1.0 - progress) ** 2, False)


# -- hook transforms -------------------------------------------------------


class WeightBinarizer:
    codec_kind = "binarize_weights"

    def __init__(self, scheme: str):
        if scheme not in WEIGHT_SCHEMES:
            raise ValueError(f"unknown weight scheme {scheme!r}")
        self.scheme = scheme
        self.enabled = False

    def __call__(self, w: Tensor, ctx=None) -> Tensor:
        if not self.enabled:
            return w
        return binarize_weights(w, self.scheme)

    def codec_state(self):
        return {"scheme": self.scheme, "enabled": self.enabled}, {}


class ActivationBinarizer:
    codec_kind = "binarize_activations"

    def __init__(self, channels: int):
        self.scale = Tensor(np.asarray(1.0), requires_grad=True)
        self.thresholds = Tensor(np.zeros(int(channels)), requires_grad=True)
        self.enabled = False

    def __call__(self, x: Tensor, ctx=None) -> Tensor:
        if not self.enabled:
            return x
        return binarize_activations(x, self.scale, self.thresholds)

    def codec_state(self):
        return {"enabled": self.enabled}, {"scale": self.scale, "thresholds": self.thresholds}


def _decode_weight_binarizer(attrs, params):
    wb = WeightBinarizer(attrs["scheme"])
    wb.enabled = bool(attrs["enabled"])
    return wb


def _decode_activation_binarizer(attrs, params):
    ab = ActivationBinarizer(params["thresholds"].shape[0])
    ab.scale = params["scale"]
    ab.thresholds = params["thresholds"]
    ab.enabled = bool(attrs["enabled"])
    return ab


serialize.register_hook_codec(WeightBinarizer.codec_kind, _decode_weight_binarizer)
serialize.register_hook_codec(ActivationBinarizer.codec_kind, _decode_activation_binarizer)


# -- layer selection -------------------------------------------------------


_WEIGHTED = ("Conv2D", "FullyConnected")


def _weighted_layers_after(graph: ModelGraph, start: str) -> set:
    """Weighted nodes reachable from ``start`` through unweighted ones."""
    found, stack, seen = set(), [start], set()
    while stack:
        nid = stack.pop()
        for consumer in graph.consumers(nid):
            if consumer.id in seen:
                continue
            seen.add(consumer.id)
            if consumer.kind in _WEIGHTED:
                found.add(consumer.id)
            else:
                stack.append(consumer.id)
    return found


def default_denylist(graph: ModelGraph) -> List[str]:
    """Convolutions kept at full precision by default.

    Binarizing the layer that reads raw network input or the one whose
    output feeds the classifier head costs disproportionate accuracy, so
    both ends of the network are excluded unless asked for explicitly.
    """
    excluded = []
    input_layers = _weighted_layers_after(graph, INPUT_ID)
    for node in graph.nodes.values():
        if node.kind != "Conv2D":
            continue
        if node.id in input_layers:
            excluded.append(node.id)
            continue
        downstream = _weighted_layers_after(graph, node.id)
        if any(graph.nodes[d].kind == "FullyConnected" for d in downstream):
            excluded.append(node.id)
    return excluded


def _match_any(name: str, patterns: Sequence[str]) -> bool:
    return any(fnmatch(name, p) for p in patterns)


def select_binarized_layers(
    graph: ModelGraph,
    allowlist: Optional[Sequence[str]] = None,
    denylist: Optional[Sequence[str]] = None,
) -> List[str]:
    convs = [n.id for n in graph.nodes.values() if n.kind == "Conv2D"]
    allow = list(allowlist) if allowlist is not None else ["*"]
    chosen = [c for c in convs if _match_any(c, allow)]
    if allowlist is not None and not chosen:
        warnings.warn(f"binarization allowlist {allow} matches no convolution")
    if denylist is not None:
        deny = [c for c in convs if _match_any(c, denylist)]
        if not deny:
            warnings.warn(f"binarization denylist {list(denylist)} matches no convolution")
    else:
        deny = default_denylist(graph)
    return [c for c in chosen if c not in deny]


def apply_binarization(
    graph: ModelGraph,
    weight_scheme: str = "xnor",
    allowlist: Optional[Sequence[str]] = None,
    denylist: Optional[Sequence[str]] = None,
    family: str = "binarization",
) -> Dict[str, Tuple[WeightBinarizer, ActivationBinarizer]]:
    """Hook selected convolutions with weight and input binarizers."""
    handles = {}
    shapes = graph.infer_shapes()
    for nid in select_binarized_layers(graph, allowlist, denylist):
        node = graph.nodes[nid]
        wb = WeightBinarizer(weight_scheme)
        ab = ActivationBinarizer(channels=shapes[node.inputs[0]][0])
        graph.insert_hook(Hook(nid, HookPosition.PRE_PARAM, family, wb, param_name="weight"))
        graph.insert_hook(Hook(nid, HookPosition.PRE_INPUT, family, ab, input_index=0))
        handles[nid] = (wb, ab)
    return handles


# -- algorithm wiring ------------------------------------------------------


class BinarizationScheduler(CompressionScheduler):
    def __init__(self, controller: "BinarizationController", stage_epochs: Sequence[int]):
        super().__init__()
        self.controller = controller
        self.stage_epochs = [int(d) for d in stage_epochs]
        binarization_stage_at(0, self.stage_epochs)  # validate eagerly

    def epoch_step(self, metric=None):
        super().epoch_step()
        self.controller.apply_stage(binarization_stage_at(self.epoch, self.stage_epochs))


class BinarizationController(CompressionController):
    name = "binarization"

    def __init__(self, graph: ModelGraph, handles: dict, config: dict):
        super().__init__(graph)
        self.handles = handles
        self.config = config
        self.stage = binarization_stage_at(0, [1, 0, 0, 0])  # pre-training: everything off
        self.scheduler = BinarizationScheduler(self, config.get("stage_epochs", [2, 2, 2, 4]))

    def apply_stage(self, stage: BinarizationStage):
        self.stage = stage
        for wb, ab in self.handles.values():
            wb.enabled = stage.weights_on
            ab.enabled = stage.activations_on

    @property
    def lr_scale(self) -> float:
        return self.stage.lr_scale

    @property
    def weight_decay_on(self) -> bool:
        return self.stage.weight_decay_on

    def extra_params(self):
        out = []
        for nid, (_, ab) in self.handles.items():
            out.append((f"binarization:{nid}:scale", ab.scale, 1.0))
            out.append((f"binarization:{nid}:thresholds", ab.thresholds, 1.0))
        return out

    def statistics(self) -> dict:
        return {
            "stage": self.stage.stage,
            "activations_on": self.stage.activations_on,
            "weights_on": self.stage.weights_on,
            "lr_scale": self.stage.lr_scale,
            "weight_decay_on": self.stage.weight_decay_on,
            "layers": {
                nid: {"scheme": wb.scheme, "scale": float(ab.scale.data)}
                for nid, (wb, ab) in self.handles.items()
            },
        }


class BinarizationBuilder(CompressionBuilder):
    name = "binarization"

    def apply_to(self, graph: ModelGraph) -> BinarizationController:
        handles = apply_binarization(
            graph,
            weight_scheme=self.config.get("weight_scheme", "xnor"),
            allowlist=self.config.get("allowlist"),
            denylist=self.config.get("denylist"),
        )
        return BinarizationController(graph, handles, self.config)
