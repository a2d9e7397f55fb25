"""Quantization-aware training via fake-quantize hooks.

Weights and activations pass through simulated integer grids during
training.  The rounding is non-differentiable, so the forward is built from
engine primitives whose straight-through backward yields the standard
gradient contracts: range parameters learn from the rounding residual
(symmetric) or from boundary clipping (asymmetric), and the input gradient
is passed inside the representable range and cut outside it.
"""

from __future__ import annotations

from typing import Dict, List, Optional, Tuple

import numpy as np

from . import serialize, tensor as T
from .base import CompressionBuilder, CompressionController
from .graph import Hook, HookPosition, INPUT_ID, ModelGraph
from .tensor import Tensor

RANGE_FLOOR = 1e-8

WEIGHTED_KINDS = ("Conv2D", "FullyConnected")
VALUE_PRODUCING_KINDS = ("Conv2D", "FullyConnected", "BatchNorm", "ReLU", "Add")


def quant_grid(bits: int, kind: str) -> Tuple[int, int]:
    """Integer level range for a bit width.

    Weights use a symmetric grid with the lowest level dropped so zero sits
    exactly in the middle; signed activations keep the full two's-complement
    range; unsigned activations start at zero.
    """
    if bits < 2:
        raise ValueError(f"bit width must be at least 2, got {bits}")
    half = 2 ** (bits - 1)
    if kind == "weight":
        return -(half - 1), half - 1
    if kind == "signed_act":
        return -half, half - 1
    if kind == "unsigned_act":
        return 0, 2**bits - 1
    raise ValueError(f"unknown grid kind {kind!r}")


def tune_asymmetric_range(rmin, rmax, bits: int):
    """Nudge raw bounds so the zero point lands on an integer level.

    Returns ``(low, high, zero_point)``.  Zero is always inside [low, high];
    one of the bounds is stretched (never shrunk) whenever the rounded zero
    point would otherwise fall between levels.
    """
    l1 = np.minimum(np.asarray(rmin, dtype=np.float64), 0.0)
    h1 = np.maximum(np.asarray(rmax, dtype=np.float64), 0.0)
    h1 = np.maximum(h1, l1 + RANGE_FLOOR)
    levels = float(2**bits - 1)
    z = np.round(-l1 * levels / (h1 - l1))
    untuned = (z == 0.0) | (z == levels)
    zsafe = np.where(untuned, 1.0, z)
    t = (zsafe - levels) / zsafe
    h2 = t * l1
    l2 = h1 / t
    widen_high = (h2 - l1) > (h1 - l2)
    lo = np.where(untuned | widen_high, l1, l2)
    hi = np.where(untuned, h1, np.where(widen_high, h2, h1))
    return lo, hi, z


class FakeQuantizer:
    """Quantize-dequantize transform with trainable range parameters.

    Starts in a pass-through state; ranges are set either by an explicit
    initialization pass or lazily from the first tensor seen.
    """

    codec_kind = "fake_quant"

    def __init__(
        self,
        bits: int = 8,
        mode: str = "symmetric",
        grid: str = "signed_act",
        per_channel: bool = False,
        channels: Optional[int] = None,
        init_scheme: str = "minmax",
        percentiles: Tuple[float, float] = (0.1, 99.9),
    ):
        if mode not in ("symmetric", "asymmetric"):
            raise ValueError(f"unknown quantization mode {mode!r}")
        quant_grid(bits, grid)  # validates both
        if per_channel and not channels:
            raise ValueError("per-channel quantizer needs a channel count")
        if init_scheme not in ("minmax", "percentile"):
            raise ValueError(f"unknown range init scheme {init_scheme!r}")
        self.bits = int(bits)
        self.mode = mode
        self.grid = grid
        self.per_channel = bool(per_channel)
        shape = (int(channels),) if per_channel else ()
        if mode == "symmetric":
            self.scale = Tensor(np.ones(shape), requires_grad=True)
        else:
            self.rmin = Tensor(np.full(shape, -1.0), requires_grad=True)
            self.rmax = Tensor(np.full(shape, 1.0), requires_grad=True)
        self.initialized = False
        self.collecting = False
        self.init_scheme = init_scheme
        self.percentiles = (float(percentiles[0]), float(percentiles[1]))
        self._seen_min = None
        self._seen_max = None
        self._seen_absmax = None
        self._samples: List[np.ndarray] = []

    # -- range initialization ---------------------------------------------

    def observe(self, arr: np.ndarray):
        if self.init_scheme == "percentile":
            self._samples.append(np.asarray(arr, dtype=np.float64).ravel().copy())
        mn, mx, am = float(arr.min()), float(arr.max()), float(np.abs(arr).max())
        self._seen_min = mn if self._seen_min is None else min(self._seen_min, mn)
        self._seen_max = mx if self._seen_max is None else max(self._seen_max, mx)
        self._seen_absmax = am if self._seen_absmax is None else max(self._seen_absmax, am)

    def finalize(self):
        if self._seen_min is None:
            raise RuntimeError("quantizer saw no data during range initialization")
        lo, hi, am = self._seen_min, self._seen_max, self._seen_absmax
        if self.init_scheme == "percentile" and self._samples:
            values = np.concatenate(self._samples)
            lo = float(np.quantile(values, self.percentiles[0] / 100.0))
            hi = float(np.quantile(values, self.percentiles[1] / 100.0))
            am = max(abs(lo), abs(hi))
        if self.mode == "symmetric":
            self.scale.data[...] = max(am, RANGE_FLOOR)
        else:
            self.rmin.data[...] = lo
            self.rmax.data[...] = max(hi, lo + RANGE_FLOOR)
        self.initialized = True
        self.collecting = False
        self._seen_min = self._seen_max = self._seen_absmax = None
        self._samples = []

    def init_from_array(self, arr: np.ndarray):
        """Set ranges straight from a parameter tensor's current values."""
        arr = np.asarray(arr, dtype=np.float64)
        if self.per_channel:
            axes = tuple(range(1, arr.ndim))
            am = np.abs(arr).max(axis=axes)
            lo, hi = arr.min(axis=axes), arr.max(axis=axes)
        else:
            am = np.abs(arr).max()
            lo, hi = arr.min(), arr.max()
        if self.mode == "symmetric":
            self.scale.data[...] = np.maximum(am, RANGE_FLOOR)
        else:
            self.rmin.data[...] = lo
            self.rmax.data[...] = np.maximum(hi, lo + RANGE_FLOOR)
        self.initialized = True

    # -- forward -----------------------------------------------------------

    def __call__(self, t: Tensor, ctx=None) -> Tensor:
        if self.collecting:
            self.observe(t.data)
            return t
        if not self.initialized:
            if self.grid == "weight":
                self.init_from_array(t.data)
            else:
                self.observe(t.data)
                self.finalize()
        if self.mode == "symmetric":
            return self._quantize_symmetric(t)
        return self._quantize_asymmetric(t)

    def _channel_view(self, p: Tensor, ndim: int) -> Tensor:
        if not self.per_channel:
            return p
        return T.reshape(p, (p.shape[0],) + (1,) * (ndim - 1))

    def _quantize_symmetric(self, t: Tensor) -> Tensor:
        q_min, q_max = quant_grid(self.bits, self.grid)
        s = T.maximum(self.scale, RANGE_FLOOR)
        step = T.div(self._channel_view(s, t.ndim), float(q_max))
        step_b = T.broadcast_to(step, t.shape)
        v = T.div(t, step_b)
        q = T.round_ste(T.clamp(v, float(q_min), float(q_max)))
        return T.mul(q, step_b)

    def _quantize_asymmetric(self, t: Tensor) -> Tensor:
        levels = float(2**self.bits - 1)
        lo_t, hi_t, z = tune_asymmetric_range(self.rmin.data, self.rmax.data, self.bits)
        # tuned bounds ride on the raw trainables so boundary gradients land on them
        lo_eff = T.add(self.rmin, Tensor(lo_t - self.rmin.data))
        hi_eff = T.add(self.rmax, Tensor(hi_t - self.rmax.data))
        lo_b = T.broadcast_to(self._channel_view(lo_eff, t.ndim), t.shape)
        hi_b = T.broadcast_to(self._channel_view(hi_eff, t.ndim), t.shape)

        def spread(arr):
            shaped = np.reshape(arr, arr.shape + (1,) * (t.ndim - arr.ndim))
            return Tensor(np.broadcast_to(shaped, t.shape).copy())

        step_b = spread((hi_t - lo_t) / levels)
        # anchoring at the integer zero point (not at lo) keeps 0 -> 0 exact
        # even when range tuning leaves the raw bounds untouched
        z_b = spread(np.asarray(z, dtype=np.float64))
        clipped = T.clamp(t, lo_b, hi_b)
        q = T.round_ste(T.add(T.div(clipped, step_b), z_b))
        return T.mul(T.sub(q, z_b), step_b)

    # -- bookkeeping -------------------------------------------------------

    def zero_point(self):
        if self.mode != "asymmetric":
            return np.zeros_like(np.asarray(self.scale.data))
        _, _, z = tune_asymmetric_range(self.rmin.data, self.rmax.data, self.bits)
        return z

    def trainable_range_params(self) -> List[Tuple[str, Tensor]]:
        if self.mode == "symmetric":
            return [("scale", self.scale)]
        return [("rmin", self.rmin), ("rmax", self.rmax)]

    def slice_output_channels(self, keep_mask: np.ndarray):
        """Drop per-channel range entries for filters removed by pruning."""
        if not self.per_channel:
            return
        keep = np.asarray(keep_mask, dtype=bool)
        for _, p in self.trainable_range_params():
            p.data = p.data[keep].copy()

    def codec_state(self):
        attrs = {
            "bits": self.bits,
            "mode": self.mode,
            "grid": self.grid,
            "per_channel": self.per_channel,
            "initialized": self.initialized,
            "init_scheme": self.init_scheme,
            "percentiles": list(self.percentiles),
        }
        return attrs, dict(self.trainable_range_params())


def _decode_fake_quant(attrs: dict, params: Dict[str, Tensor]):
    channels = None
    if attrs["per_channel"]:
        channels = next(iter(params.values())).shape[0]
    fq = FakeQuantizer(
        bits=attrs["bits"],
        mode=attrs["mode"],
        grid=attrs["grid"],
        per_channel=attrs["per_channel"],
        channels=channels,
        init_scheme=attrs.get("init_scheme", "minmax"),
        percentiles=tuple(attrs.get("percentiles", (0.1, 99.9))),
    )
    if attrs["mode"] == "symmetric":
        fq.scale = params["scale"]
    else:
        fq.rmin, fq.rmax = params["rmin"], params["rmax"]
    fq.initialized = bool(attrs["initialized"])
    return fq


serialize.register_hook_codec(FakeQuantizer.codec_kind, _decode_fake_quant)


# -- insertion policy ------------------------------------------------------


def fusion_skips(graph: ModelGraph) -> set:
    """Nodes whose outputs vanish into a fused convolution pattern.

    Recognized patterns are Conv-ReLU and Conv-BatchNorm-ReLU with
    single-consumer interior edges; only the closing ReLU keeps its output
    quantizer.
    """
    skip = set()
    for node in graph.nodes.values():
        if node.kind != "Conv2D":
            continue
        consumers = graph.consumers(node.id)
        if len(consumers) != 1:
            continue
        nxt = consumers[0]
        if nxt.kind == "ReLU":
            skip.add(node.id)
        elif nxt.kind == "BatchNorm":
            after_bn = graph.consumers(nxt.id)
            if len(after_bn) == 1 and after_bn[0].kind == "ReLU":
                skip.add(node.id)
                skip.add(nxt.id)
    return skip


def insert_quantizers(
    graph: ModelGraph,
    weight_bits: int = 8,
    activation_bits: int = 8,
    weight_mode: str = "symmetric",
    activation_mode: str = "symmetric",
    per_channel_weights: bool = True,
    init_scheme: str = "minmax",
    percentiles: Tuple[float, float] = (0.1, 99.9),
    family: str = "quantization",
) -> dict:
    """Attach fake quantizers per the standard placement policy.

    Every convolution and fully connected layer gets a weight quantizer.
    Activation quantizers go on the network input and on each
    value-producing node that is not hidden inside a fused pattern; outputs
    of ReLU use an unsigned grid, everything else a signed one.
    """
    skip = fusion_skips(graph)
    weights: Dict[str, FakeQuantizer] = {}
    activations: Dict[str, FakeQuantizer] = {}

    def act_quantizer(grid: str) -> FakeQuantizer:
        return FakeQuantizer(
            bits=activation_bits,
            mode=activation_mode,
            grid=grid,
            init_scheme=init_scheme,
            percentiles=percentiles,
        )

    fq_in = act_quantizer("signed_act")
    graph.insert_hook(Hook(INPUT_ID, HookPosition.POST_OUTPUT, family, fq_in))
    activations[INPUT_ID] = fq_in

    for node in graph.nodes.values():
        if node.kind in WEIGHTED_KINDS:
            per_ch = per_channel_weights and node.kind == "Conv2D"
            fq = FakeQuantizer(
                bits=weight_bits,
                mode=weight_mode,
                grid="weight",
                per_channel=per_ch,
                channels=node.attrs["out_channels"] if per_ch else None,
            )
            graph.insert_hook(Hook(node.id, HookPosition.PRE_PARAM, family, fq, param_name="weight"))
            weights[node.id] = fq
        if node.kind in VALUE_PRODUCING_KINDS and node.id not in skip:
            fq = act_quantizer("unsigned_act" if node.kind == "ReLU" else "signed_act")
            graph.insert_hook(Hook(node.id, HookPosition.POST_OUTPUT, family, fq))
            activations[node.id] = fq

    # map each weighted layer to the activation quantizer that sees its output
    mirror: Dict[str, Optional[str]] = {}
    for nid in weights:
        cur = nid
        while cur in skip:
            cur = graph.consumers(cur)[0].id
        mirror[nid] = cur if cur in activations else None
    return {"weight": weights, "activation": activations, "mirror": mirror}


def initialize_quantizer_ranges(
    graph: ModelGraph,
    batches=None,
    family: str = "quantization",
    num_init_samples: Optional[int] = None,
):
    """Set quantizer ranges: weights from their tensors, activations from data.

    With no batches, activation quantizers stay lazy and adopt ranges from
    the first batch they see.
    """
    act_qs = []
    for h in graph.hooks:
        if h.family != family or not isinstance(h.transform, FakeQuantizer):
            continue
        if h.position is HookPosition.PRE_PARAM:
            h.transform.init_from_array(graph.nodes[h.node_id].params[h.param_name].data)
        else:
            act_qs.append(h.transform)
    if batches is None or not act_qs:
        return
    for q in act_qs:
        q.collecting = True
    seen = 0
    for batch in batches:
        x = np.asarray(batch, dtype=np.float64)
        graph.run(Tensor(x), mode="eval")
        seen += x.shape[0]
        if num_init_samples is not None and seen >= num_init_samples:
            break
    for q in act_qs:
        q.collecting = False
        q.finalize()


# -- algorithm wiring ------------------------------------------------------


class QuantizationController(CompressionController):
    name = "quantization"

    def __init__(self, graph: ModelGraph, handles: dict, config: dict):
        super().__init__(graph)
        self.handles = handles
        self.config = config
        self.bit_config: Optional[Dict[str, int]] = None
        self.mixed_precision_plan = None

    def extra_params(self):
        out = []
        for group in ("weight", "activation"):
            for nid, q in self.handles[group].items():
                for pname, p in q.trainable_range_params():
                    out.append((f"quantization:{group}:{nid}:{pname}", p, 1.0))
        return out

    def apply_bit_config(self, plan: Dict[str, int]):
        """Assign per-layer weight bit widths; output quantizers follow."""
        for nid, bits in plan.items():
            if nid not in self.handles["weight"]:
                raise KeyError(f"no weight quantizer on layer {nid!r}")
            self.handles["weight"][nid].bits = int(bits)
            mirrored = self.handles["mirror"].get(nid)
            if mirrored is not None:
                self.handles["activation"][mirrored].bits = int(bits)
        self.bit_config = {k: int(v) for k, v in plan.items()}

    def statistics(self) -> dict:
        def describe(q: FakeQuantizer) -> dict:
            d = {"bits": q.bits, "mode": q.mode, "grid": q.grid, "per_channel": q.per_channel,
                 "initialized": q.initialized}
            if q.initialized:
                if q.mode == "symmetric":
                    d["scale"] = np.asarray(q.scale.data).tolist()
                else:
                    d["range"] = [np.asarray(q.rmin.data).tolist(), np.asarray(q.rmax.data).tolist()]
            return d

        stats = {
            "weight_quantizers": {nid: describe(q) for nid, q in self.handles["weight"].items()},
            "activation_quantizers": {nid: describe(q) for nid, q in self.handles["activation"].items()},
        }
        if self.bit_config is not None:
            stats["bit_config"] = dict(self.bit_config)
        return stats

    def prepare_export(self, graph: ModelGraph) -> ModelGraph:
        for h in graph.hooks:
            if isinstance(h.transform, FakeQuantizer) and not h.transform.initialized:
                raise RuntimeError(
                    f"cannot export: quantizer at {h.node_id!r} has uninitialized ranges"
                )
        return graph


class QuantizationBuilder(CompressionBuilder):
    name = "quantization"

    def apply_to(self, graph: ModelGraph) -> QuantizationController:
        cfg = self.config
        init = cfg.get("init", {})
        bits = cfg.get("bits", 8)
        mode = cfg.get("mode", "symmetric")
        handles = insert_quantizers(
            graph,
            weight_bits=bits,
            activation_bits=bits,
            weight_mode=mode,
            activation_mode=mode,
            per_channel_weights=cfg.get("per_channel", True),
            init_scheme=init.get("type", "minmax"),
            percentiles=(
                init.get("min_percentile", 0.1),
                init.get("max_percentile", 99.9),
            ),
        )
        return QuantizationController(graph, handles, self.config)
