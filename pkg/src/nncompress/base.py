"""Shared building blocks for compression algorithms.

Each algorithm ships a builder that rewires a model graph (inserting hooks,
never editing layer math) and hands back a controller owning the algorithm's
training-time state: an additive loss term, a schedule, statistics, and an
export transformation.
"""

from __future__ import annotations

from typing import List, Tuple

from .graph import ModelGraph
from .tensor import Tensor


class CompressionLoss:
    """Additive penalty evaluated once per training step.  Defaults to zero."""

    def __call__(self) -> Tensor:
        return Tensor(0.0)


class CompressionScheduler:
    """Tracks training progress; subclasses translate it into algorithm state.

    ``epoch_step`` runs at the start of every epoch (so the first call lands
    on epoch 0), ``step`` after every optimizer step.  ``metric`` carries the
    monitored validation loss from the finished epoch, for schedules that
    react to it.
    """

    def __init__(self):
        self.epoch = -1
        self.steps = 0

    def epoch_step(self, metric=None):
        self.epoch += 1

    def step(self):
        self.steps += 1

    def state_dict(self) -> dict:
        return {"epoch": self.epoch, "steps": self.steps}

    def load_state_dict(self, state: dict):
        self.epoch = state["epoch"]
        self.steps = state["steps"]


class CompressionController:
    name = "base"

    def __init__(self, graph: ModelGraph):
        self.graph = graph
        self.loss = CompressionLoss()
        self.scheduler = CompressionScheduler()

    def statistics(self) -> dict:
        return {}

    def extra_params(self) -> List[Tuple[str, Tensor, float]]:
        """Algorithm-owned trainables as (name, tensor, lr multiplier)."""
        return []

    def prepare_export(self, graph: ModelGraph) -> ModelGraph:
        """Rewrite a copy of the model into its deployable form."""
        return graph


class CompressionBuilder:
    name = "base"

    def __init__(self, config: dict):
        self.config = dict(config)

    def apply_to(self, graph: ModelGraph) -> CompressionController:
        raise NotImplementedError
