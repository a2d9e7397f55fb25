"""Unstructured weight sparsity.

Two methods share the hook mechanics but differ in how zeros are chosen:

* magnitude: weights with the smallest per-layer-normalized magnitude are
  masked, with the level ramped by a schedule (polynomial, exponential,
  multistep, or adaptive-to-validation-loss)
* regularization-based: every weight gets a trainable score driving a
  stochastic binary gate; a squared penalty steers the mean gate
  probability toward the target density, and evaluation thresholds the
  scores deterministically
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import serialize, tensor as T
from .base import CompressionBuilder, CompressionController, CompressionLoss, CompressionScheduler
from .graph import Hook, HookPosition, ModelGraph
from .tensor import Tensor

SPARSIFIABLE_KINDS = ("Conv2D", "FullyConnected")


# -- schedules -------------------------------------------------------------


@dataclass
class SparsityScheduleSpec:
    mode: str = "polynomial"
    init: float = 0.0
    target: float = 0.5
    epochs: int = 10
    power: float = 1.0
    steps: Optional[List[Tuple[int, float]]] = None  # multistep only
    patience: float = 1e-3  # adaptive only
    step: float = 0.05  # adaptive only

    def __post_init__(self):
        if self.mode not in ("polynomial", "exponential", "multistep", "adaptive"):
            raise ValueError(f"unknown sparsity schedule mode {self.mode!r}")
        if not 0.0 <= self.init <= self.target < 1.0:
            raise ValueError(
                f"need 0 <= init <= target < 1, got init={self.init}, target={self.target}"
            )
        if self.mode in ("polynomial", "exponential"):
            if self.epochs == 0 and self.init != self.target:
                raise ValueError("a zero-epoch ramp cannot move init to a different target")
            if self.epochs < 0:
                raise ValueError("epoch span must be nonnegative")
        if self.mode == "multistep":
            steps = self.steps or []
            if not steps:
                raise ValueError("multistep schedule needs at least one step")
            epochs = [e for e, _ in steps]
            levels = [l for _, l in steps]
            if epochs != sorted(epochs) or levels != sorted(levels):
                raise ValueError("multistep steps must have nondecreasing epochs and levels")
            if levels[-1] != self.target:
                raise ValueError("final multistep level must equal the target")


def sparsity_level_at_epoch(
    spec: SparsityScheduleSpec, epoch: int, metrics: Optional[Sequence[float]] = None
) -> float:
    """Scheduled sparsity level for an epoch.

    ``metrics`` is the history of the monitored validation losses from the
    epochs already finished; only the adaptive mode reads it.
    """
    e, target, init = epoch, spec.target, spec.init
    if spec.mode == "polynomial":
        if spec.epochs == 0 or e >= spec.epochs:
            return target
        return init + (target - init) * (e / spec.epochs) ** spec.power
    if spec.mode == "exponential":
        if spec.epochs == 0 or e >= spec.epochs:
            return target
        return target - (target - init) * math.exp(-5.0 * e / spec.epochs)
    if spec.mode == "multistep":
        level = init
        for step_epoch, step_level in spec.steps:
            if e >= step_epoch:
                level = step_level
        return level
    # adaptive: bump the level every time the monitored loss stalls
    level = init
    prev = None
    for m in metrics or []:
        if prev is not None and (prev - m) < spec.patience:
            level = min(level + spec.step, target)
        prev = m
    return level


# -- magnitude method ------------------------------------------------------


def magnitude_masks(weights: Dict[str, np.ndarray], level: float):
    """Global bottom-k masks over per-layer-normalized weight magnitudes.

    Importance of a weight is |w| divided by its layer's Frobenius norm;
    the round(level * N) least important weights across all layers are
    zeroed, ties resolved toward earlier layers and indices.  Returns the
    cut threshold and a {layer: 0/1 mask} map.
    """
    if not 0.0 <= level < 1.0:
        raise ValueError(f"sparsity level must be in [0, 1), got {level}")
    order_ids = list(weights)
    imps = []
    for nid in order_ids:
        w = np.asarray(weights[nid], dtype=np.float64)
        norm = np.linalg.norm(w)
        imps.append(np.abs(w).ravel() / norm if norm > 0 else np.zeros(w.size))
    flat = np.concatenate(imps) if imps else np.zeros(0)
    n = flat.size
    k = int(round(level * n))
    keep = np.ones(n, dtype=np.float64)
    if k > 0:
        order = np.argsort(flat, kind="stable")
        keep[order[:k]] = 0.0
        threshold = float(flat[order[k - 1]])
    else:
        threshold = 0.0
    masks = {}
    offset = 0
    for nid in order_ids:
        size = weights[nid].size
        masks[nid] = keep[offset : offset + size].reshape(weights[nid].shape).copy()
        offset += size
    return threshold, masks


class ParamMask:
    """Multiplies a parameter by a fixed 0/1 mask; masked entries get no gradient."""

    codec_kind = "param_mask"

    def __init__(self, mask: np.ndarray):
        self.mask = Tensor(np.asarray(mask, dtype=np.float64))

    def set_mask(self, mask: np.ndarray):
        self.mask = Tensor(np.asarray(mask, dtype=np.float64))

    def __call__(self, p: Tensor, ctx=None) -> Tensor:
        return T.mul(p, T.broadcast_to(self.mask, p.shape))

    def codec_state(self):
        return {}, {"mask": self.mask}


serialize.register_hook_codec(ParamMask.codec_kind, lambda attrs, params: ParamMask(params["mask"].data))


class MagnitudeSparsityScheduler(CompressionScheduler):
    def __init__(self, controller: "MagnitudeSparsityController", spec: SparsityScheduleSpec):
        super().__init__()
        self.controller = controller
        self.spec = spec
        self.metric_history: List[float] = []

    def epoch_step(self, metric: Optional[float] = None):
        if metric is not None:
            self.metric_history.append(float(metric))
        super().epoch_step()
        self.controller.set_level(sparsity_level_at_epoch(self.spec, self.epoch, self.metric_history))

    def state_dict(self):
        d = super().state_dict()
        d["metric_history"] = list(self.metric_history)
        return d

    def load_state_dict(self, state):
        super().load_state_dict(state)
        self.metric_history = list(state.get("metric_history", []))


class MagnitudeSparsityController(CompressionController):
    name = "magnitude_sparsity"

    def __init__(self, graph: ModelGraph, hooks: Dict[str, ParamMask], config: dict):
        super().__init__(graph)
        self.hooks = hooks
        self.config = config
        self.level = 0.0
        self.threshold = 0.0
        self.scheduler = MagnitudeSparsityScheduler(self, schedule_from_config(config.get("schedule", {})))

    def set_level(self, level: float):
        weights = {nid: self.graph.nodes[nid].params["weight"].data for nid in self.hooks}
        self.threshold, masks = magnitude_masks(weights, level)
        for nid, mask in masks.items():
            self.hooks[nid].set_mask(mask)
        self.level = level

    def statistics(self) -> dict:
        total = sum(m.mask.size for m in self.hooks.values())
        zeros = sum(int((m.mask.data == 0).sum()) for m in self.hooks.values())
        return {
            "scheduled_level": self.level,
            "threshold": self.threshold,
            "achieved_sparsity": zeros / total if total else 0.0,
            "per_layer": {
                nid: float((m.mask.data == 0).mean()) for nid, m in self.hooks.items()
            },
        }

    def prepare_export(self, graph: ModelGraph) -> ModelGraph:
        """Bake masks into the weights and drop the hooks."""
        kept = []
        for h in graph.hooks:
            if h.family == self.name and isinstance(h.transform, ParamMask):
                p = graph.nodes[h.node_id].params[h.param_name]
                p.data = p.data * h.transform.mask.data
            else:
                kept.append(h)
        graph.hooks = kept
        return graph


class MagnitudeSparsityBuilder(CompressionBuilder):
    name = "magnitude_sparsity"

    def apply_to(self, graph: ModelGraph) -> MagnitudeSparsityController:
        hooks = {}
        for node in graph.nodes.values():
            if node.kind in SPARSIFIABLE_KINDS:
                pm = ParamMask(np.ones(node.params["weight"].shape))
                graph.insert_hook(Hook(node.id, HookPosition.PRE_PARAM, self.name, pm, param_name="weight"))
                hooks[node.id] = pm
        return MagnitudeSparsityController(graph, hooks, self.config)


def schedule_from_config(cfg: dict) -> SparsityScheduleSpec:
    steps = cfg.get("steps")
    if steps is not None:
        steps = [(int(e), float(l)) for e, l in steps]
    return SparsityScheduleSpec(
        mode=cfg.get("mode", "polynomial"),
        init=cfg.get("init", 0.0),
        target=cfg.get("target", 0.5),
        epochs=cfg.get("epochs", 10),
        power=cfg.get("power", 1.0),
        steps=steps,
        patience=cfg.get("patience", 1e-3),
        step=cfg.get("step", 0.05),
    )


# -- regularization-based method -------------------------------------------


def sample_gates(scores: Tensor, rng: np.random.Generator) -> Tensor:
    """Stochastic binary gates: sigmoid(score + logit(u)) thresholded at 0.5.

    Equivalent to Bernoulli(sigmoid(score)) draws, but the sigmoid keeps a
    differentiable path: the indicator is straight-through, so each score's
    gradient carries the local sigmoid slope.
    """
    u = np.clip(rng.uniform(size=scores.shape), 1e-12, 1.0 - 1e-12)
    shift = Tensor(np.log(u) - np.log1p(-u))
    q = T.sigmoid(T.add(scores, shift))
    return T.ste_apply(q, lambda d: (d > 0.5).astype(np.float64), name="gate_ste")


def rb_regularizer_loss(score_tensors: Sequence[Tensor], level: float) -> Tensor:
    """Squared gap between mean gate probability and the target density 1 - level."""
    total = None
    n = 0
    for s in score_tensors:
        n += s.size
        part = T.tsum(T.sigmoid(s))
        total = part if total is None else T.add(total, part)
    if total is None:
        raise ValueError("no score tensors given")
    gap = T.sub(T.mul(total, 1.0 / n), 1.0 - level)
    return T.mul(gap, gap)


def rb_eval_mask(scores: Tensor) -> np.ndarray:
    """Deterministic test-time mask: keep a weight iff its score is positive."""
    return (scores.data > 0).astype(np.float64)


class RBGate:
    """Weight hook: stochastic gates in training, thresholded scores in eval."""

    codec_kind = "rb_gate"

    def __init__(self, scores: np.ndarray):
        self.scores = Tensor(np.asarray(scores, dtype=np.float64), requires_grad=True)

    def __call__(self, p: Tensor, ctx=None) -> Tensor:
        if ctx is not None and ctx.mode == "train":
            if ctx.rng is None:
                raise RuntimeError("sampling stochastic gates needs an rng on the run context")
            return T.mul(p, sample_gates(self.scores, ctx.rng))
        return T.mul(p, Tensor(rb_eval_mask(self.scores)))

    def codec_state(self):
        return {}, {"scores": self.scores}


def _decode_rb_gate(attrs, params):
    gate = RBGate.__new__(RBGate)
    gate.scores = params["scores"]
    return gate


serialize.register_hook_codec(RBGate.codec_kind, _decode_rb_gate)


class RBSparsityLoss(CompressionLoss):
    def __init__(self, controller: "RBSparsityController"):
        self.controller = controller

    def __call__(self) -> Tensor:
        scores = [g.scores for g in self.controller.gates.values()]
        return rb_regularizer_loss(scores, self.controller.level)


class RBSparsityScheduler(CompressionScheduler):
    def __init__(self, controller: "RBSparsityController", spec: SparsityScheduleSpec):
        super().__init__()
        self.controller = controller
        self.spec = spec

    def epoch_step(self, metric: Optional[float] = None):
        super().epoch_step()
        self.controller.level = sparsity_level_at_epoch(self.spec, self.epoch)


class RBSparsityController(CompressionController):
    name = "rb_sparsity"

    def __init__(self, graph: ModelGraph, gates: Dict[str, RBGate], config: dict):
        super().__init__(graph)
        self.gates = gates
        self.config = config
        schedule = config.get("schedule", {})
        spec = schedule_from_config(schedule)
        if "init" not in schedule and "mode" not in schedule:
            # default: hold the target level from the start
            spec = SparsityScheduleSpec(mode="polynomial", init=spec.target, target=spec.target, epochs=0)
        self.level = spec.target
        self.scheduler = RBSparsityScheduler(self, spec)
        self.loss = RBSparsityLoss(self)

    def extra_params(self):
        mult = float(self.config.get("score_lr_multiplier", 1.0))
        return [(f"rb_sparsity:{nid}:scores", g.scores, mult) for nid, g in self.gates.items()]

    def statistics(self) -> dict:
        total = sum(g.scores.size for g in self.gates.values())
        off = sum(int((g.scores.data <= 0).sum()) for g in self.gates.values())
        probs = np.concatenate([1.0 / (1.0 + np.exp(-g.scores.data.ravel())) for g in self.gates.values()])
        return {
            "target_level": self.level,
            "eval_sparsity": off / total if total else 0.0,
            "mean_gate_probability": float(probs.mean()),
        }

    def prepare_export(self, graph: ModelGraph) -> ModelGraph:
        kept = []
        for h in graph.hooks:
            if h.family == self.name and isinstance(h.transform, RBGate):
                p = graph.nodes[h.node_id].params[h.param_name]
                p.data = p.data * rb_eval_mask(h.transform.scores)
            else:
                kept.append(h)
        graph.hooks = kept
        return graph


class RBSparsityBuilder(CompressionBuilder):
    name = "rb_sparsity"

    def apply_to(self, graph: ModelGraph) -> RBSparsityController:
        score_init = float(self.config.get("score_init", 3.0))
        gates = {}
        for node in graph.nodes.values():
            if node.kind in SPARSIFIABLE_KINDS:
                gate = RBGate(np.full(node.params["weight"].shape, score_init))
                graph.insert_hook(Hook(node.id, HookPosition.PRE_PARAM, self.name, gate, param_name="weight"))
                gates[node.id] = gate
        return RBSparsityController(graph, gates, self.config)
