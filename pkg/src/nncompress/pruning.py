"""Structured pruning of convolution output filters.

Whole filters are zeroed during training through weight/bias mask hooks,
then physically removed at export.  Removal is only legal where every
downstream consumer can absorb the smaller channel count, so channel masks
are propagated through the graph first and convolutions whose masks reach
an unwilling consumer (or the network output) fall back to dense.
"""

from __future__ import annotations

import fnmatch
import math
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .base import CompressionBuilder, CompressionController, CompressionScheduler
from .graph import Hook, HookPosition, INPUT_ID, ModelGraph
from .quantization import FakeQuantizer
from .sparsity import ParamMask
from .tensor import Tensor

CRITERIA = ("l1", "l2", "geometric_median")
PASSTHROUGH_KINDS = ("BatchNorm", "ReLU", "MaxPool2D")


def filter_importance(weight: np.ndarray, criterion: str) -> np.ndarray:
    """Per-filter importance scores; lower scores are pruned first."""
    w = np.asarray(weight, dtype=np.float64)
    n = w.shape[0]
    flat = w.reshape(n, -1)
    if criterion == "l1":
        return np.abs(flat).sum(axis=1)
    if criterion == "l2":
        return np.sqrt((flat * flat).sum(axis=1))
    if criterion == "geometric_median":
        if n < 2:
            raise ValueError("geometric_median needs at least 2 filters")
        dists = np.sqrt(((flat[:, None, :] - flat[None, :, :]) ** 2).sum(axis=2))
        return dists.sum(axis=1)
    raise ValueError(f"unknown importance criterion {criterion!r}")


def filter_mask(scores: np.ndarray, rate: float) -> np.ndarray:
    """Keep-mask zeroing the floor(rate * n) lowest scores, ties to lower index."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"pruning rate must be in [0, 1), got {rate}")
    n = len(scores)
    # nudge past float error so e.g. 0.3 * 10 floors to 3, not 2
    k = int(math.floor(rate * n + 1e-9))
    keep = np.ones(n, dtype=bool)
    if k:
        order = np.argsort(scores, kind="stable")
        keep[order[:k]] = False
    return keep


def pruning_rate_at_epoch(
    mode: str, epoch: int, target: float, warmup_epochs: int = 0, epochs: int = 5,
    initial: float = 0.0,
) -> Tuple[float, bool]:
    """Scheduled rate and whether the pruned subset is frozen from here on.

    ``baseline`` jumps to the target right after warmup and freezes;
    ``exponential`` ramps from ``initial`` over ``epochs`` and freezes only
    once the target is reached.  The subset is re-selected at every rate
    change until frozen.
    """
    if not 0.0 <= target < 1.0:
        raise ValueError(f"target pruning rate must be in [0, 1), got {target}")
    if mode == "baseline":
        if epoch < warmup_epochs:
            return 0.0, False
        return target, True
    if mode == "exponential":
        if epoch < warmup_epochs:
            return 0.0, False
        t = epoch - warmup_epochs
        if epochs <= 0 or t >= epochs:
            return target, True
        return target - (target - initial) * math.exp(-5.0 * t / epochs), False
    raise ValueError(f"unknown pruning scheduler mode {mode!r}")


# -- mask propagation ------------------------------------------------------


@dataclass
class PruningMaskMap:
    """Channel keep-masks along every edge after propagation."""

    output_masks: Dict[str, np.ndarray]
    input_masks: Dict[str, List[np.ndarray]]
    verdicts: Dict[str, bool] = field(default_factory=dict)


def propagate_pruning_masks(graph: ModelGraph, conv_masks: Dict[str, np.ndarray]) -> PruningMaskMap:
    """Push per-conv output masks through the graph.

    Rules: a conv consumes its input mask (weights lose input channels) and
    emits its own mask; normalization, activation, and pooling pass masks
    through; Flatten expands a channel mask to feature positions; a fully
    connected layer absorbs any mask by column-pruning.  An Add joint
    accepts only identical masks on both inputs; on a mismatch, pruning is
    cancelled for every conv feeding the joint.  A mask reaching the graph
    output is likewise cancelled.  Verdict per conv: whether its mask
    survived.
    """
    for cid, mask in conv_masks.items():
        node = graph.nodes.get(cid)
        if node is None or node.kind != "Conv2D":
            raise ValueError(f"mask given for {cid!r}, which is not a Conv2D node")
        if len(mask) != node.attrs["out_channels"]:
            raise ValueError(
                f"mask length {len(mask)} != out_channels {node.attrs['out_channels']} on {cid!r}"
            )
    shapes = graph.infer_shapes()
    cancelled: set = set()
    while True:
        out_masks: Dict[str, np.ndarray] = {
            INPUT_ID: np.ones(shapes[INPUT_ID][0], dtype=bool)
        }
        origins: Dict[str, frozenset] = {INPUT_ID: frozenset()}
        in_masks: Dict[str, List[np.ndarray]] = {}
        conflict_origins = None
        for nid, node in graph.nodes.items():
            ins = [out_masks[ref] for ref in node.inputs]
            in_masks[nid] = ins
            in_orig = [origins[ref] for ref in node.inputs]
            if node.kind == "Conv2D":
                if nid in conv_masks and nid not in cancelled:
                    out_masks[nid] = np.asarray(conv_masks[nid], dtype=bool)
                    origins[nid] = frozenset([nid])
                else:
                    out_masks[nid] = np.ones(node.attrs["out_channels"], dtype=bool)
                    origins[nid] = frozenset()
            elif node.kind == "FullyConnected":
                out_masks[nid] = np.ones(node.attrs["out_features"], dtype=bool)
                origins[nid] = frozenset()
            elif node.kind in PASSTHROUGH_KINDS:
                out_masks[nid] = ins[0]
                origins[nid] = in_orig[0]
            elif node.kind == "Flatten":
                src_shape = shapes[node.inputs[0]]
                if len(src_shape) == 3:
                    out_masks[nid] = np.repeat(ins[0], src_shape[1] * src_shape[2])
                else:
                    out_masks[nid] = ins[0]
                origins[nid] = in_orig[0]
            elif node.kind == "Add":
                if np.array_equal(ins[0], ins[1]):
                    out_masks[nid] = ins[0]
                    origins[nid] = in_orig[0] | in_orig[1]
                else:
                    conflict_origins = in_orig[0] | in_orig[1]
                    break
            else:
                raise ValueError(f"no mask propagation rule for kind {node.kind!r}")
        if conflict_origins is None:
            out_id = graph.output_id()
            if not out_masks[out_id].all():
                conflict_origins = origins[out_id]
        if conflict_origins is None:
            verdicts = {cid: cid not in cancelled for cid in conv_masks}
            return PruningMaskMap(out_masks, in_masks, verdicts)
        cancelled |= conflict_origins


def apply_filter_masks(
    graph: ModelGraph, mask_map: PruningMaskMap, family: str = "filter_pruning"
) -> Dict[str, Dict[str, ParamMask]]:
    """Install weight/bias mask hooks realizing a propagated mask map.

    Convolutions get their output masks on weight and bias; batch-norm
    layers get their incoming channel mask on gamma and beta so a masked
    channel stays exactly zero through normalization.
    """
    hooks: Dict[str, Dict[str, ParamMask]] = {}
    for nid, node in graph.nodes.items():
        if node.kind == "Conv2D" and nid in mask_map.verdicts:
            mask = mask_map.output_masks[nid].astype(np.float64)
            if len(mask) != node.attrs["out_channels"]:
                raise ValueError(f"mask length mismatch on {nid!r}")
            wm = ParamMask(mask.reshape(-1, 1, 1, 1))
            bm = ParamMask(mask)
            graph.insert_hook(Hook(nid, HookPosition.PRE_PARAM, family, wm, param_name="weight"))
            graph.insert_hook(Hook(nid, HookPosition.PRE_PARAM, family, bm, param_name="bias"))
            hooks[nid] = {"weight": wm, "bias": bm}
        elif node.kind == "BatchNorm":
            mask = mask_map.input_masks[nid][0].astype(np.float64)
            gm = ParamMask(mask)
            bm = ParamMask(mask)
            graph.insert_hook(Hook(nid, HookPosition.PRE_PARAM, family, gm, param_name="gamma"))
            graph.insert_hook(Hook(nid, HookPosition.PRE_PARAM, family, bm, param_name="beta"))
            hooks[nid] = {"gamma": gm, "beta": bm}
    return hooks


def strip_pruned_filters(
    graph: ModelGraph, mask_map: PruningMaskMap, mask_family: str = "filter_pruning"
) -> ModelGraph:
    """Physically remove masked channels; mutates and returns the graph.

    Weight tensors are sliced along the masked axes, channel attrs updated,
    per-channel hook state (quantizer scales, parameter masks) sliced to
    match, and the realized mask hooks dropped.  Stripping must not change
    the graph's output, so a mask that would reach the output is rejected.
    """
    out_id = graph.output_id()
    final = mask_map.output_masks.get(out_id)
    if final is not None and not np.asarray(final).all():
        raise ValueError(f"cannot strip: output node {out_id!r} would lose channels")
    for nid, node in graph.nodes.items():
        ins = mask_map.input_masks.get(nid)
        if ins is None:
            continue
        if node.kind == "Add" and not np.array_equal(ins[0], ins[1]):
            raise ValueError(f"cannot strip: Add node {nid!r} has mismatched input masks")

    for nid, node in graph.nodes.items():
        if node.kind == "Conv2D":
            keep_out = np.asarray(mask_map.output_masks[nid], dtype=bool)
            keep_in = np.asarray(mask_map.input_masks[nid][0], dtype=bool)
            w = node.params["weight"]
            if w.shape[0] != len(keep_out) or w.shape[1] != len(keep_in):
                raise ValueError(f"mask shapes do not match conv {nid!r} weight {w.shape}")
            w.data = w.data[keep_out][:, keep_in]
            node.params["bias"].data = node.params["bias"].data[keep_out]
            node.attrs["out_channels"] = int(keep_out.sum())
            node.attrs["in_channels"] = int(keep_in.sum())
            _slice_hook_state(graph, nid, keep_out, keep_in, mask_family)
        elif node.kind == "BatchNorm":
            keep = np.asarray(mask_map.input_masks[nid][0], dtype=bool)
            for pname in ("gamma", "beta", "running_mean", "running_var"):
                node.params[pname].data = node.params[pname].data[keep]
            node.attrs["num_features"] = int(keep.sum())
        elif node.kind == "FullyConnected":
            keep = np.asarray(mask_map.input_masks[nid][0], dtype=bool)
            w = node.params["weight"]
            if w.shape[1] != len(keep):
                raise ValueError(f"mask length does not match fc {nid!r} columns")
            w.data = w.data[:, keep]
            node.attrs["in_features"] = int(keep.sum())

    graph.hooks = [h for h in graph.hooks if h.family != mask_family]
    graph.infer_shapes()  # validates the sliced graph end to end
    return graph


def _slice_hook_state(graph: ModelGraph, nid: str, keep_out, keep_in, mask_family: str):
    """Adjust per-channel state of hooks that survive stripping."""
    for h in graph.hooks:
        if h.node_id != nid or h.family == mask_family:
            continue
        tr = h.transform
        if h.position == HookPosition.PRE_PARAM and h.param_name == "weight":
            if isinstance(tr, FakeQuantizer):
                tr.slice_output_channels(keep_out)
            elif isinstance(tr, ParamMask) and tr.mask.data.ndim == 4:
                tr.set_mask(tr.mask.data[keep_out][:, keep_in])
        elif h.position == HookPosition.PRE_INPUT and hasattr(tr, "thresholds"):
            tr.thresholds.data = tr.thresholds.data[keep_in]


# -- controller ------------------------------------------------------------


class PruningScheduler(CompressionScheduler):
    def __init__(self, controller: "PruningController", cfg: dict, target: float):
        super().__init__()
        self.controller = controller
        self.mode = cfg.get("mode", "baseline")
        self.warmup_epochs = int(cfg.get("warmup_epochs", 0))
        self.span = int(cfg.get("epochs", 5))
        self.target = target
        pruning_rate_at_epoch(self.mode, 0, target, self.warmup_epochs, self.span)

    def epoch_step(self, metric=None):
        super().epoch_step()
        rate, frozen = pruning_rate_at_epoch(
            self.mode, self.epoch, self.target, self.warmup_epochs, self.span
        )
        if not self.controller.frozen and rate != self.controller.rate:
            self.controller.set_rate(rate)
        self.controller.frozen = frozen


class PruningController(CompressionController):
    name = "filter_pruning"

    def __init__(self, graph: ModelGraph, prunable: List[str], hooks, config: dict):
        super().__init__(graph)
        self.prunable = prunable
        self.hooks = hooks
        self.config = config
        self.criterion = config.get("criterion", "l2")
        if self.criterion not in CRITERIA:
            raise ValueError(f"unknown importance criterion {self.criterion!r}")
        self.rate = 0.0
        self.frozen = False
        self.conv_masks: Dict[str, np.ndarray] = {
            nid: np.ones(graph.nodes[nid].attrs["out_channels"], dtype=bool) for nid in prunable
        }
        self.mask_map = propagate_pruning_masks(graph, self.conv_masks)
        target = float(config["pruning_rate"])
        self.scheduler = PruningScheduler(self, config.get("scheduler", {}), target)

    def plan_masks(self, rate: float) -> Dict[str, np.ndarray]:
        masks = {}
        for nid in self.prunable:
            w = self.graph.nodes[nid].params["weight"].data
            try:
                scores = filter_importance(w, self.criterion)
            except ValueError as err:
                warnings.warn(f"skipping {nid!r}: {err}")
                masks[nid] = np.ones(w.shape[0], dtype=bool)
                continue
            masks[nid] = filter_mask(scores, rate)
        return masks

    def set_rate(self, rate: float):
        """Re-select the pruned subset from current weights at a new rate."""
        self.conv_masks = self.plan_masks(rate)
        self.mask_map = propagate_pruning_masks(self.graph, self.conv_masks)
        for nid, parts in self.hooks.items():
            node = self.graph.nodes[nid]
            if node.kind == "Conv2D":
                mask = self.mask_map.output_masks[nid].astype(np.float64)
                parts["weight"].set_mask(mask.reshape(-1, 1, 1, 1))
                parts["bias"].set_mask(mask)
            else:
                mask = self.mask_map.input_masks[nid][0].astype(np.float64)
                parts["gamma"].set_mask(mask)
                parts["beta"].set_mask(mask)
        self.rate = rate

    def zero_pruned_gradients(self):
        """Clear pruned-filter gradients; run after backward when frozen."""
        for nid in self.prunable:
            keep = self.mask_map.output_masks[nid]
            node = self.graph.nodes[nid]
            for pname in ("weight", "bias"):
                g = node.params[pname].grad
                if g is not None:
                    g[~keep] = 0.0

    def statistics(self) -> dict:
        per_layer = {}
        for nid in self.prunable:
            keep = self.mask_map.output_masks[nid]
            per_layer[nid] = {"pruned": int((~keep).sum()), "total": int(len(keep))}
        return {
            "rate": self.rate,
            "frozen": self.frozen,
            "criterion": self.criterion,
            "per_layer": per_layer,
            "prunable": {nid: self.mask_map.verdicts.get(nid, False) for nid in self.prunable},
        }

    def prepare_export(self, graph: ModelGraph) -> ModelGraph:
        mask_map = propagate_pruning_masks(graph, self.conv_masks)
        return strip_pruned_filters(graph, mask_map)


class PruningBuilder(CompressionBuilder):
    name = "filter_pruning"

    def apply_to(self, graph: ModelGraph) -> PruningController:
        if "pruning_rate" not in self.config:
            raise ValueError("filter pruning config needs a pruning_rate")
        exclude = list(self.config.get("exclude", []))
        for pattern in exclude:
            if not any(fnmatch.fnmatch(nid, pattern) for nid in graph.nodes):
                warnings.warn(f"exclude pattern {pattern!r} matches no node")
        prunable = [
            nid
            for nid, node in graph.nodes.items()
            if node.kind == "Conv2D" and not any(fnmatch.fnmatch(nid, p) for p in exclude)
        ]
        masks = {nid: np.ones(graph.nodes[nid].attrs["out_channels"], dtype=bool) for nid in prunable}
        mask_map = propagate_pruning_masks(graph, masks)
        hooks = apply_filter_masks(graph, mask_map)
        return PruningController(graph, prunable, hooks, self.config)
