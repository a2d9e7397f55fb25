"""Curvature-guided bit-width assignment.

Estimates the Hessian trace of the task loss for every quantized weight
tensor with Hutchinson probes, then searches the monotone bit assignments
(flatter layers never get more bits than sharper ones) for the least
sensitive one that still reaches a target compression ratio.
"""

import numpy as np

from nncompress import build_model, create_compressed_model, make_dataset

seed = 3
graph = build_model("cnn-small", seed)
x, y = make_dataset("stripes", 256, seed)

config = {
    "compression": [
        {
            "algorithm": "quantization",
            "bits": 8,
            "mixed_precision": {
                "candidate_bits": [2, 4, 8],
                "ratio_threshold": 1.5,
                "trace_samples": 32,
                "seed": 0,
            },
        }
    ]
}

controllers, model = create_compressed_model(graph, config, [(x, y)])
ctrl = controllers[0]
plan = ctrl.mixed_precision_plan

print("layer      trace        assigned bits")
for prof in plan.profiles:
    print(f"{prof.node_id:<10} {prof.avg_trace:>12.4f} {plan.assignment[prof.node_id]:>8}")
print(f"\ncompression ratio vs all-8-bit: {plan.achieved_ratio:.2f} (target >= 1.5)")
print(f"total sensitivity of the chosen assignment: {plan.metric:.5f}")

# activation quantizers mirror the bit width of the layer that feeds them
stats = ctrl.statistics()
for nid, bits in sorted(ctrl.bit_config.items()):
    mirrored = ctrl.handles["mirror"].get(nid)
    if mirrored is not None:
        print(f"output of {nid} quantized at {ctrl.handles['activation'][mirrored].bits} bits")
