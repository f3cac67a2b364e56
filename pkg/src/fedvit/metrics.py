"""Model evaluation: per-client accuracy, worst-client accuracy, fairness spread."""

from __future__ import annotations

from dataclasses import dataclass
from collections.abc import Sequence

import numpy as np

from .autodiff import ParamSet, cross_entropy, reshape
from .data import Dataset
from .model import ViTConfig, forward

__all__ = [
    "ClientMetrics",
    "FairnessSummary",
    "accuracy",
    "lowest_global_accuracy",
    "weighted_mean",
    "fairness_summary",
]


@dataclass(frozen=True)
class ClientMetrics:
    """One model evaluated on one dataset."""

    client_id: int
    accuracy: float
    correct: int
    total: int
    mean_loss: float


@dataclass(frozen=True)
class FairnessSummary:
    """Across-client accuracy statistics; ``spread = max - min`` is the
    fairness band width (narrower is fairer)."""

    mean_weighted: float
    mean_unweighted: float
    min_acc: float
    max_acc: float
    spread: float


def accuracy(params: ParamSet, data: Dataset, config: ViTConfig, client_id: int = -1) -> ClientMetrics:
    """Fraction of argmax predictions matching the labels, plus mean loss.

    Argmax ties break toward the lowest class index.
    """
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    correct = 0
    loss_total = 0.0
    for image, label in zip(data.images, data.labels):
        logits = forward(params, image, config)
        if int(np.argmax(logits.array)) == label:
            correct += 1
        loss_total += cross_entropy(reshape(logits, (1, config.classes)), [label]).item()
    total = len(data)
    return ClientMetrics(client_id, correct / total, correct, total, loss_total / total)


def lowest_global_accuracy(
    params: ParamSet, client_test_sets: Sequence[Dataset], config: ViTConfig
) -> float:
    """Minimum, over clients, of one model's accuracy on that client's test set."""
    if not client_test_sets:
        raise ValueError("need at least one client test set")
    return min(accuracy(params, ds, config).accuracy for ds in client_test_sets)


def weighted_mean(values: Sequence[float], sizes: Sequence[int]) -> float:
    """Mean of ``values`` with weights proportional to ``sizes``."""
    if len(values) != len(sizes):
        raise ValueError(f"{len(values)} values vs {len(sizes)} sizes")
    if not values:
        raise ValueError("weighted_mean of nothing")
    if any(n <= 0 for n in sizes):
        raise ValueError("sizes must be positive")
    total = float(sum(sizes))
    return sum(v * n for v, n in zip(values, sizes)) / total


def fairness_summary(per_client: Sequence[ClientMetrics]) -> FairnessSummary:
    if not per_client:
        raise ValueError("fairness_summary of nothing")
    accs = [m.accuracy for m in per_client]
    sizes = [m.total for m in per_client]
    lo, hi = min(accs), max(accs)
    return FairnessSummary(
        mean_weighted=weighted_mean(accs, sizes),
        mean_unweighted=sum(accs) / len(accs),
        min_acc=lo,
        max_acc=hi,
        spread=hi - lo,
    )
