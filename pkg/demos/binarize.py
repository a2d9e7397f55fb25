"""Binary-weight training with a staged curriculum.

Convolution weights collapse to a single scale per output channel (sign
times the mean absolute value); activations pass through a learned
scale-and-threshold step that leaves every element at 0 or at the scale.
Training walks through four stages: float pretraining, activations only,
weights joining in, then a square-law learning-rate runoff with weight
decay switched off.
"""

import numpy as np

from nncompress import (
    build_model,
    create_compressed_model,
    make_dataset,
    train_model,
    train_val_split,
)

graph = build_model("cnn-small", seed=1)
x, y = make_dataset("stripes", 512, seed=1)
train_set, val_set = train_val_split(x, y, val_fraction=0.25, seed=1)

config = {
    "seed": 1,
    "compression": [
        {
            "algorithm": "binarization",
            "weight_scheme": "xnor",
            "stage_epochs": [2, 2, 2, 6],
            # the default policy spares layers touching the network input or
            # the classifier head, which in a 2-conv net is every conv; name
            # an explicit denylist to binarize conv2 anyway
            "denylist": ["conv1"],
        }
    ],
}
controllers, model = create_compressed_model(graph, config)
ctrl = controllers[0]
print("binarized layers:", sorted(ctrl.handles))

print("\nepoch  stage  acts  weights  lr_scale  decay  val_acc")


def report(rec):
    s = ctrl.statistics()
    print(
        f"{rec['epoch']:>5}  {s['stage']:>5}"
        f"  {str(s['activations_on']):<5} {str(s['weights_on']):<7}"
        f"  {s['lr_scale']:>7.3f}  {str(s['weight_decay_on']):<5}"
        f"  {rec['val_accuracy']:.3f}"
    )


train_model(
    model,
    controllers,
    train_set,
    val_set,
    epochs=12,
    batch_size=32,
    lr=0.1,
    weight_decay=1e-4,
    seed=1,
    on_epoch=report,
)

# peek at what actually flows through the binarized conv layer
w = model.nodes["conv2"].params["weight"]
wb, ab = ctrl.handles["conv2"]
effective = wb(w).data
print("\nconv2 effective weights carry one magnitude per input channel:")
for c in range(effective.shape[1]):
    mags = np.unique(np.abs(effective[:, c]))
    print(f"  channel {c}: |w| = " + ", ".join(f"{m:.4f}" for m in mags))
print("activation scale:", float(ab.scale.data))
print("unique activation outputs are {0, scale} after thresholding")
