"""Configuration-driven composition of compression algorithms.

A config names an ordered list of algorithm sections; each section's
builder rewires the model graph and returns a controller.  The training
loop talks only to the controllers: summed penalty loss, per-batch and
per-epoch schedule advancement, statistics, and export.
"""

from __future__ import annotations

from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .base import CompressionBuilder, CompressionController
from .binarization import BinarizationBuilder
from .graph import ModelGraph
from .mixed_precision import plan_mixed_precision
from .pruning import PruningBuilder
from .quantization import QuantizationBuilder, initialize_quantizer_ranges
from .serialize import save_model
from .sparsity import MagnitudeSparsityBuilder, RBSparsityBuilder
from .tensor import Tensor
from .util import cross_entropy

BUILDERS: Dict[str, type] = {
    "quantization": QuantizationBuilder,
    "binarization": BinarizationBuilder,
    "magnitude_sparsity": MagnitudeSparsityBuilder,
    "rb_sparsity": RBSparsityBuilder,
    "filter_pruning": PruningBuilder,
}


class ConfigError(ValueError):
    pass


_SCHEDULE_SCHEMA = {
    "mode": None,
    "init": None,
    "target": None,
    "epochs": None,
    "power": None,
    "steps": None,
    "patience": None,
    "step": None,
}

_SECTION_SCHEMAS = {
    "quantization": {
        "algorithm": None,
        "mode": None,
        "bits": None,
        "per_channel": None,
        "init": {
            "num_batches": None,
            "type": None,
            "min_percentile": None,
            "max_percentile": None,
        },
        "mixed_precision": {
            "candidate_bits": None,
            "ratio_threshold": None,
            "trace_samples": None,
            "seed": None,
            "direction": None,
        },
    },
    "binarization": {
        "algorithm": None,
        "weight_scheme": None,
        "stage_epochs": None,
        "allowlist": None,
        "denylist": None,
    },
    "magnitude_sparsity": {"algorithm": None, "schedule": _SCHEDULE_SCHEMA},
    "rb_sparsity": {
        "algorithm": None,
        "schedule": _SCHEDULE_SCHEMA,
        "score_init": None,
        "score_lr_multiplier": None,
    },
    "filter_pruning": {
        "algorithm": None,
        "criterion": None,
        "pruning_rate": None,
        "scheduler": {"mode": None, "warmup_epochs": None, "epochs": None},
        "exclude": None,
    },
}

_TOP_SCHEMA = {"seed": None, "input_shape": None, "compression": None}


def _check_keys(section: dict, schema: dict, path: str):
    for key, value in section.items():
        here = f"{path}.{key}" if path else key
        if key not in schema:
            raise ConfigError(f"unknown config key {here!r}")
        sub = schema[key]
        if isinstance(sub, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {here!r} must be a mapping")
            _check_keys(value, sub, here)


def validate_config(config: dict) -> dict:
    """Check the config against the schema; returns a normalized copy.

    Normalization: ``compression`` always a list.  Unknown keys are
    rejected with their full path; each algorithm family may appear once;
    binarization cannot be combined with quantization.
    """
    if not isinstance(config, dict):
        raise ConfigError("config must be a mapping")
    _check_keys(config, _TOP_SCHEMA, "")
    compression = config.get("compression", [])
    if isinstance(compression, dict):
        compression = [compression]
    if not isinstance(compression, list):
        raise ConfigError("config key 'compression' must be a section or list of sections")
    seen = set()
    for i, section in enumerate(compression):
        path = f"compression[{i}]"
        if not isinstance(section, dict):
            raise ConfigError(f"{path} must be a mapping")
        algo = section.get("algorithm")
        if algo not in BUILDERS:
            raise ConfigError(
                f"{path}.algorithm must be one of {sorted(BUILDERS)}, got {algo!r}"
            )
        if algo in seen:
            raise ConfigError(f"duplicate {algo!r} section at {path}")
        seen.add(algo)
        _check_keys(section, _SECTION_SCHEMAS[algo], path)
    if "binarization" in seen and "quantization" in seen:
        raise ConfigError("binarization and quantization cannot be combined")
    if "input_shape" in config:
        shape = config["input_shape"]
        if not (
            isinstance(shape, (list, tuple)) and all(isinstance(d, int) for d in shape)
        ):
            raise ConfigError("config key 'input_shape' must be a list of ints")
    out = dict(config)
    out["compression"] = [dict(s) for s in compression]
    return out


def _normalize_batches(init_data) -> List[Tuple[np.ndarray, Optional[np.ndarray]]]:
    batches = []
    for item in init_data or []:
        if isinstance(item, tuple):
            x, y = item
            batches.append((np.asarray(x, dtype=np.float64), np.asarray(y)))
        else:
            batches.append((np.asarray(item, dtype=np.float64), None))
    return batches


def create_compressed_model(
    graph: ModelGraph, config: dict, init_data: Optional[Iterable] = None
) -> Tuple[List[CompressionController], ModelGraph]:
    """Wrap a copy of the graph with every configured algorithm.

    ``init_data`` is a stream of input batches (optionally (x, labels)
    tuples) used for data-driven quantizer range initialization and, when
    configured, the second-order mixed-precision bit search, which needs
    labels.
    """
    cfg = validate_config(config)
    g = graph.copy()
    if "input_shape" in cfg and tuple(cfg["input_shape"]) != tuple(g.input_shape):
        raise ConfigError(
            f"config input_shape {tuple(cfg['input_shape'])} != model input shape {tuple(g.input_shape)}"
        )
    batches = _normalize_batches(init_data)
    for x, _ in batches:
        if x.shape[1:] != tuple(g.input_shape):
            raise ConfigError(
                f"init batch shape {x.shape[1:]} does not match model input {tuple(g.input_shape)}"
            )

    controllers: List[CompressionController] = []
    for section in cfg["compression"]:
        builder: CompressionBuilder = BUILDERS[section["algorithm"]](section)
        controllers.append(builder.apply_to(g))

    for section, ctrl in zip(cfg["compression"], controllers):
        if section["algorithm"] != "quantization":
            continue
        init = section.get("init", {})
        num_batches = init.get("num_batches")
        xs = [x for x, _ in batches]
        if num_batches is not None:
            xs = xs[: int(num_batches)]
        initialize_quantizer_ranges(g, batches=xs if xs else None)
        mp = section.get("mixed_precision")
        if mp is not None:
            labeled = [(x, y) for x, y in batches if y is not None]
            if not labeled:
                raise ConfigError("mixed precision search needs labeled init data")
            x, y = labeled[0]
            xt = Tensor(x)
            plan = plan_mixed_precision(
                g,
                ctrl.handles["weight"],
                loss_builder=lambda: cross_entropy(g.run(xt), y),
                bit_choices=tuple(mp.get("candidate_bits", (2, 4, 8))),
                num_trace_samples=int(mp.get("trace_samples", 32)),
                target_ratio=float(mp.get("ratio_threshold", 1.5)),
                direction=mp.get("direction", "at_least"),
                seed=int(mp.get("seed", cfg.get("seed", 0))),
            )
            ctrl.apply_bit_config(plan.assignment)
            ctrl.mixed_precision_plan = plan
    return controllers, g


def total_compression_loss(controllers: Sequence[CompressionController]) -> Tensor:
    total = Tensor(0.0)
    for ctrl in controllers:
        total = T.add(total, ctrl.loss())
    return total


def scheduler_step(controllers: Sequence[CompressionController]):
    for ctrl in controllers:
        ctrl.scheduler.step()


def scheduler_epoch_step(controllers: Sequence[CompressionController], metric=None):
    for ctrl in controllers:
        ctrl.scheduler.epoch_step(metric=metric)


def distributed(controllers: Sequence[CompressionController]):
    """Reserved for multi-process training; single-process build does nothing."""


def export_model(
    controllers: Sequence[CompressionController], graph: ModelGraph, path
) -> ModelGraph:
    """Write the deployable model: masks baked, filters stripped, quantizers kept.

    Returns the exported graph; the file round-trips through load_model.
    """
    g = graph.copy()
    for ctrl in controllers:
        g = ctrl.prepare_export(g)
    save_model(g, path)
    return g


def export_graph(graph: ModelGraph, path) -> ModelGraph:
    """Controller-free export for a graph restored from a checkpoint.

    Reconstructs the export pipeline from the hook families present:
    sparsity masks and gates are baked into weights, pruning masks are
    stripped physically, quantizer and binarizer hooks ride along in the
    file.  Equivalent to export_model when the controllers are at the
    state the checkpoint captured.
    """
    from .pruning import propagate_pruning_masks, strip_pruned_filters
    from .quantization import FakeQuantizer
    from .sparsity import ParamMask, RBGate, rb_eval_mask

    g = graph.copy()
    for h in g.hooks:
        if isinstance(h.transform, FakeQuantizer) and not h.transform.initialized:
            raise RuntimeError(f"quantizer on {h.node_id!r} is uninitialized; cannot export")

    kept = []
    conv_masks = {}
    for h in g.hooks:
        tr = h.transform
        if h.family in ("magnitude_sparsity", "rb_sparsity") and isinstance(tr, (ParamMask, RBGate)):
            p = g.nodes[h.node_id].params[h.param_name]
            mask = rb_eval_mask(tr.scores) if isinstance(tr, RBGate) else tr.mask.data
            p.data = p.data * mask
        else:
            if (
                h.family == "filter_pruning"
                and h.param_name == "weight"
                and g.nodes[h.node_id].kind == "Conv2D"
            ):
                conv_masks[h.node_id] = tr.mask.data.reshape(tr.mask.shape[0], -1)[:, 0] != 0
            kept.append(h)
    g.hooks = kept
    if conv_masks:
        mask_map = propagate_pruning_masks(g, conv_masks)
        g = strip_pruned_filters(g, mask_map)
    save_model(g, path)
    return g


def collect_extra_params(controllers: Sequence[CompressionController]):
    """All algorithm-owned trainables as (name, tensor, lr multiplier)."""
    out = []
    for ctrl in controllers:
        out.extend(ctrl.extra_params())
    return out
