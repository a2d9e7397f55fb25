import numpy as np
import pytest

from nncompress.api import (
    ConfigError,
    collect_extra_params,
    create_compressed_model,
    export_graph,
    export_model,
    scheduler_epoch_step,
    scheduler_step,
    total_compression_loss,
    validate_config,
)
from nncompress.models import build_model
from nncompress.quantization import FakeQuantizer
from nncompress.serialize import load_model, serialize_model
from nncompress.sparsity import RBGate
from nncompress.tensor import Tensor


def stripes_like(n, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 1, 8, 8))
    y = rng.integers(0, 2, size=n)
    return x, y


# -- config validation -----------------------------------------------------


def test_unknown_keys_rejected_with_path():
    with pytest.raises(ConfigError, match="'sead'"):
        validate_config({"sead": 1})
    cfg = {"compression": [{"algorithm": "quantization", "bitz": 4}]}
    with pytest.raises(ConfigError, match=r"compression\[0\].bitz"):
        validate_config(cfg)
    cfg = {"compression": [{"algorithm": "filter_pruning", "pruning_rate": 0.3,
                            "scheduler": {"warmup": 1}}]}
    with pytest.raises(ConfigError, match=r"compression\[0\].scheduler.warmup"):
        validate_config(cfg)


def test_single_section_normalized_to_list():
    cfg = validate_config({"compression": {"algorithm": "quantization"}})
    assert isinstance(cfg["compression"], list)
    assert cfg["compression"][0]["algorithm"] == "quantization"


def test_duplicate_family_rejected():
    cfg = {"compression": [{"algorithm": "quantization"}, {"algorithm": "quantization"}]}
    with pytest.raises(ConfigError, match="duplicate"):
        validate_config(cfg)


def test_binarization_quantization_incompatible():
    cfg = {"compression": [{"algorithm": "binarization"}, {"algorithm": "quantization"}]}
    with pytest.raises(ConfigError, match="cannot be combined"):
        validate_config(cfg)


def test_bad_algorithm_and_bad_shapes():
    with pytest.raises(ConfigError, match="algorithm"):
        validate_config({"compression": [{"algorithm": "prune_everything"}]})
    with pytest.raises(ConfigError, match="input_shape"):
        validate_config({"input_shape": "8x8"})
    with pytest.raises(ConfigError, match="mapping"):
        validate_config({"compression": [{"algorithm": "quantization", "init": 4}]})


# -- model wrapping --------------------------------------------------------


def test_empty_config_transparent_wrapper():
    g = build_model("cnn-small", 3)
    controllers, wrapped = create_compressed_model(g, {})
    assert controllers == []
    x = Tensor(np.random.default_rng(0).normal(size=(4, 1, 8, 8)))
    np.testing.assert_array_equal(wrapped.run(x).data, g.run(x).data)
    assert wrapped is not g


def test_quantization_config_covers_every_weighted_layer():
    g = build_model("cnn-small", 3)
    controllers, wrapped = create_compressed_model(
        g, {"compression": [{"algorithm": "quantization", "bits": 8}]}
    )
    assert len(controllers) == 1
    hooked = {h.node_id for h in wrapped.hooks if h.param_name == "weight"}
    assert hooked == {"conv1", "conv2", "fc"}


def test_stack_orders_hooks_per_config():
    g = build_model("cnn-small", 3)
    cfg = {
        "compression": [
            {"algorithm": "rb_sparsity"},
            {"algorithm": "quantization", "bits": 8},
        ]
    }
    controllers, wrapped = create_compressed_model(g, cfg, [stripes_like(32)])
    assert [c.name for c in controllers] == ["rb_sparsity", "quantization"]
    conv_w = [
        h for h in wrapped.hooks if h.node_id == "conv1" and h.param_name == "weight"
    ]
    assert isinstance(conv_w[0].transform, RBGate)
    assert isinstance(conv_w[1].transform, FakeQuantizer)


def test_same_seed_same_bytes():
    cfg = {
        "compression": [
            {"algorithm": "magnitude_sparsity", "schedule": {"target": 0.4}},
            {"algorithm": "quantization", "bits": 4, "mode": "asymmetric"},
        ]
    }
    runs = []
    for _ in range(2):
        g = build_model("cnn-small", 7)
        _, wrapped = create_compressed_model(g, cfg, [stripes_like(16, seed=5)])
        runs.append(serialize_model(wrapped))
    assert runs[0] == runs[1]


def test_init_batch_shape_mismatch():
    g = build_model("cnn-small", 0)
    with pytest.raises(ConfigError, match="init batch"):
        create_compressed_model(
            g,
            {"compression": [{"algorithm": "quantization"}]},
            [np.zeros((4, 3, 8, 8))],
        )
    with pytest.raises(ConfigError, match="input_shape"):
        create_compressed_model(g, {"input_shape": [2, 8, 8]})


def test_range_init_consumes_configured_batches():
    g = build_model("cnn-small", 0)
    x, y = stripes_like(64, seed=2)
    controllers, wrapped = create_compressed_model(
        g,
        {"compression": [{"algorithm": "quantization", "init": {"num_batches": 1}}]},
        [(x[:32], y[:32]), (x[32:] * 100, y[32:])],
    )
    q = controllers[0].handles["activation"]["input"]
    assert q.initialized
    # the wild second batch was ignored, so the input range stays moderate
    assert float(q.scale.data) < 50


def test_mixed_precision_requires_labels_then_applies():
    g = build_model("cnn-small", 0)
    cfg = {
        "compression": [
            {
                "algorithm": "quantization",
                "mixed_precision": {"candidate_bits": [4, 8], "trace_samples": 2, "ratio_threshold": 1.2},
            }
        ]
    }
    with pytest.raises(ConfigError, match="label"):
        create_compressed_model(g, cfg, [stripes_like(16)[0]])
    controllers, wrapped = create_compressed_model(g, cfg, [stripes_like(16, seed=3)])
    ctrl = controllers[0]
    assert ctrl.bit_config is not None
    assert set(ctrl.bit_config) == {"conv1", "conv2", "fc"}
    assert all(b in (4, 8) for b in ctrl.bit_config.values())


# -- controller aggregation ------------------------------------------------


def test_total_loss_sums_only_rb():
    g = build_model("cnn-small", 1)
    cfg = {
        "compression": [
            {"algorithm": "rb_sparsity", "schedule": {"target": 0.5}},
            {"algorithm": "quantization", "bits": 8},
        ]
    }
    controllers, wrapped = create_compressed_model(g, cfg, [stripes_like(16)])
    scheduler_epoch_step(controllers)
    total = total_compression_loss(controllers).item()
    rb_alone = controllers[0].loss().item()
    assert total == pytest.approx(rb_alone, abs=1e-15)
    assert total > 0

    g2 = build_model("cnn-small", 1)
    mag, _ = create_compressed_model(
        g2, {"compression": [{"algorithm": "magnitude_sparsity"}]}
    )
    assert total_compression_loss(mag).item() == 0.0


def test_epoch_steps_drive_schedules_and_metric():
    g = build_model("cnn-small", 1)
    cfg = {
        "compression": [
            {
                "algorithm": "magnitude_sparsity",
                "schedule": {"mode": "polynomial", "init": 0.0, "target": 0.5, "epochs": 10},
            }
        ]
    }
    controllers, wrapped = create_compressed_model(g, cfg)
    for _ in range(11):
        scheduler_epoch_step(controllers, metric=1.0)
    assert controllers[0].level == 0.5
    stats = controllers[0].statistics()
    n = sum(m.mask.size for m in controllers[0].hooks.values())
    assert stats["achieved_sparsity"] == pytest.approx(round(0.5 * n) / n)


def test_batch_step_is_noop_for_quantization():
    g = build_model("cnn-small", 1)
    controllers, wrapped = create_compressed_model(
        g, {"compression": [{"algorithm": "quantization"}]}, [stripes_like(16)]
    )
    before = controllers[0].statistics()
    scheduler_step(controllers)
    assert controllers[0].statistics() == before
    assert controllers[0].scheduler.steps == 1


def test_extra_params_aggregated():
    g = build_model("cnn-small", 1)
    cfg = {
        "compression": [
            {"algorithm": "rb_sparsity", "score_lr_multiplier": 4.0},
            {"algorithm": "quantization", "mode": "asymmetric"},
        ]
    }
    controllers, wrapped = create_compressed_model(g, cfg, [stripes_like(16)])
    names = [n for n, _, _ in collect_extra_params(controllers)]
    assert any(n.startswith("rb_sparsity:") for n in names)
    assert any(n.startswith("quantization:") for n in names)


# -- export ----------------------------------------------------------------


def test_export_quantized_round_trip(tmp_path):
    g = build_model("cnn-small", 2)
    controllers, wrapped = create_compressed_model(
        g, {"compression": [{"algorithm": "quantization", "bits": 8}]}, [stripes_like(32)]
    )
    path = tmp_path / "model.nncm"
    exported = export_model(controllers, wrapped, path)
    loaded, _ = load_model(path)
    x = Tensor(np.random.default_rng(4).normal(size=(8, 1, 8, 8)))
    a = wrapped.run(x).data
    np.testing.assert_allclose(loaded.run(x).data, a, atol=1e-9)
    kinds = {type(h.transform).__name__ for h in loaded.hooks}
    assert kinds == {"FakeQuantizer"}


def test_export_sparse_bakes_zeros(tmp_path):
    g = build_model("cnn-small", 2)
    cfg = {
        "compression": [
            {"algorithm": "magnitude_sparsity", "schedule": {"init": 0.5, "target": 0.5, "epochs": 0}}
        ]
    }
    controllers, wrapped = create_compressed_model(g, cfg)
    scheduler_epoch_step(controllers)
    path = tmp_path / "sparse.nncm"
    exported = export_model(controllers, wrapped, path)
    loaded, _ = load_model(path)
    weights = np.concatenate(
        [loaded.nodes[nid].params["weight"].data.ravel() for nid in ("conv1", "conv2", "fc")]
    )
    assert (weights == 0).mean() >= 0.5
    assert not loaded.hooks


def test_export_pruned_strips(tmp_path):
    g = build_model("cnn-small", 2)
    cfg = {
        "compression": [
            {"algorithm": "filter_pruning", "criterion": "l2", "pruning_rate": 0.3}
        ]
    }
    controllers, wrapped = create_compressed_model(g, cfg)
    scheduler_epoch_step(controllers)
    x = Tensor(np.random.default_rng(5).normal(size=(8, 1, 8, 8)))
    ref = wrapped.run(x).data
    path = tmp_path / "pruned.nncm"
    exported = export_model(controllers, wrapped, path)
    assert exported.num_params() < wrapped.num_params()
    assert exported.nodes["conv1"].attrs["out_channels"] == 3
    assert exported.nodes["conv2"].attrs["out_channels"] == 6
    loaded, _ = load_model(path)
    np.testing.assert_allclose(loaded.run(x).data, ref, atol=1e-9)


def test_export_graph_matches_controller_export(tmp_path):
    g = build_model("cnn-small", 2)
    cfg = {
        "compression": [
            {"algorithm": "magnitude_sparsity", "schedule": {"init": 0.3, "target": 0.3, "epochs": 0}},
            {"algorithm": "filter_pruning", "criterion": "l1", "pruning_rate": 0.25},
        ]
    }
    controllers, wrapped = create_compressed_model(g, cfg)
    scheduler_epoch_step(controllers)
    a = export_model(controllers, wrapped, tmp_path / "a.nncm")
    b = export_graph(wrapped, tmp_path / "b.nncm")
    assert a.num_params() == b.num_params()
    x = Tensor(np.random.default_rng(6).normal(size=(4, 1, 8, 8)))
    np.testing.assert_allclose(a.run(x).data, b.run(x).data, atol=1e-12)


def test_export_rejects_uninitialized_quantizers(tmp_path):
    g = build_model("cnn-small", 2)
    controllers, wrapped = create_compressed_model(
        g, {"compression": [{"algorithm": "quantization"}]}
    )
    with pytest.raises(RuntimeError, match="uninitialized"):
        export_model(controllers, wrapped, tmp_path / "x.nncm")
    with pytest.raises(RuntimeError, match="uninitialized"):
        export_graph(wrapped, tmp_path / "y.nncm")
