"""Incremental accuracy, subgroup accuracy and memory accounting."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

SUBGROUPS = ("many", "medium", "few")
# Relative boundaries; 100 / 20 instances at N_max = 500.
HI_FRACTION = 0.2
LO_FRACTION = 0.04
BYTES_PER_FLOAT = 4


def accuracy(y_true, y_pred) -> float:
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.size == 0:
        raise ValueError("accuracy of an empty test set is undefined")
    if y_true.shape != y_pred.shape:
        raise ValueError(f"shape mismatch: {y_true.shape} vs {y_pred.shape}")
    return 100.0 * float(np.mean(y_true == y_pred))


def task_accuracy(model, test_sets: Sequence[Tuple[np.ndarray, np.ndarray]]) -> float:
    """Accuracy of ``model.predict`` on the union of ``(images, labels)`` test sets."""
    test_sets = [(x, y) for x, y in test_sets if len(y)]
    if not test_sets:
        raise ValueError("empty test union")
    x = np.concatenate([x for x, _ in test_sets])
    y = np.concatenate([y for _, y in test_sets])
    return accuracy(y, model.predict(x))


def average_and_last(accs: Sequence[float]) -> Tuple[float, float]:
    if len(accs) == 0:
        raise ValueError("need at least one per-task accuracy")
    return float(sum(accs) / len(accs)), float(accs[-1])


def subgroup_bounds(n_max: int) -> Tuple[float, float]:
    return HI_FRACTION * n_max, LO_FRACTION * n_max


def subgroup_of(n_y: int, bounds: Tuple[float, float]) -> str:
    hi, lo = bounds
    if n_y >= hi:
        return "many"
    if n_y <= lo:
        return "few"
    return "medium"


def subgroup_accuracy(y_true, y_pred, frequency: Mapping[int, int],
                      bounds: Tuple[float, float] = (100, 20)) -> Dict[str, Optional[float]]:
    """Accuracy per frequency subgroup; a subgroup without classes maps to ``None``.

    Many-shot is ``N(y) >= hi``, few-shot is ``N(y) <= lo``, medium is strictly
    in between.
    """
    hi, lo = bounds
    if not hi > lo > 0:
        raise ValueError(f"bounds must satisfy hi > lo > 0, got {bounds}")
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    groups = np.array([subgroup_of(frequency[int(y)], bounds) for y in y_true])
    out: Dict[str, Optional[float]] = {}
    for name in SUBGROUPS:
        mask = groups == name
        out[name] = accuracy(y_true[mask], y_pred[mask]) if mask.any() else None
    return out


def subgroup_sizes(y_true, frequency: Mapping[int, int],
                   bounds: Tuple[float, float]) -> Dict[str, int]:
    groups = [subgroup_of(frequency[int(y)], bounds) for y in np.asarray(y_true)]
    return {name: groups.count(name) for name in SUBGROUPS}


def per_class_accuracy(y_true, y_pred) -> Dict[int, float]:
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    return {int(c): accuracy(y_true[y_true == c], y_pred[y_true == c])
            for c in np.unique(y_true)}


def exemplar_equivalent(param_count: int, image_shape: Sequence[int]) -> int:
    """Images storable in the bytes taken by ``param_count`` 32-bit floats.

    One byte per stored pixel channel.
    """
    pixels = math.prod(int(s) for s in image_shape)
    if param_count < 0 or pixels <= 0:
        raise ValueError("param_count must be >= 0 and the image shape positive")
    return (int(param_count) * BYTES_PER_FLOAT) // pixels


@dataclass
class MetricsRecord:
    task: int
    accuracy: float
    seen_classes: int
    test_size: int
    average_accuracy: float
    loss_trace: List[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def spearman(x, y) -> float:
    from scipy.stats import spearmanr

    res = spearmanr(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
    return float(res.statistic)
