"""Task-by-task experiment driver and its on-disk artifacts."""
from __future__ import annotations

import csv
import io
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .checkpoint import save_model
from .estimator import APARTClassifier
from .metrics import (MetricsRecord, accuracy, average_and_last, exemplar_equivalent,
                      per_class_accuracy, subgroup_accuracy, subgroup_sizes)
from .stream import TaskStream

logger = logging.getLogger(__name__)

# Parameter count and input shape used as the reference memory-accounting example.
REFERENCE_PARAMS = 12_231_953
REFERENCE_SHAPE = (224, 224, 3)
MEMORY_NOTE = (
    "exemplar equivalent = floor(params * 4 bytes / (H*W*C bytes)). "
    f"For {REFERENCE_PARAMS:,} parameters at 3x224x224 this gives "
    f"{exemplar_equivalent(REFERENCE_PARAMS, REFERENCE_SHAPE)} images. The figure of 352 "
    "that is sometimes quoted for this setting does not follow from the formula; "
    "this tool reports the formula's value.")


@dataclass
class ExperimentResult:
    records: List[MetricsRecord]
    summary: dict
    per_class: Dict[int, float]
    weights: List[dict] = field(default_factory=list)
    estimator: Optional[APARTClassifier] = None

    @property
    def accuracies(self) -> List[float]:
        return [r.accuracy for r in self.records]


def _json_line(obj) -> str:
    return json.dumps(obj, sort_keys=True) + "\n"


def run_experiment(stream: TaskStream, estimator: APARTClassifier,
                   bounds: Tuple[float, float] = (100, 20), out_dir: Optional[str] = None,
                   config_hash: str = "", meta: Optional[dict] = None) -> ExperimentResult:
    """Train ``estimator`` on every task of ``stream`` in order.

    After each task the model is scored on the union of all test sets seen so
    far. With ``out_dir`` set, metrics, summary, manifest, CSVs and one
    checkpoint per task are written there.
    """
    if out_dir is not None:
        os.makedirs(os.path.join(out_dir, "checkpoints"), exist_ok=True)
        stream.write_manifest(os.path.join(out_dir, "manifest.jsonl"),
                              header={"kind": "header", "config_hash": config_hash,
                                      "split": stream.split, "scenario": stream.plan.scenario})
    records: List[MetricsRecord] = []
    weights: List[dict] = []
    test_x: List[np.ndarray] = []
    test_y: List[np.ndarray] = []
    y_pred = y_true = None
    checksum = None
    for task in stream:
        counts = {int(c): stream.frequency[int(c)] for c in task.classes}
        estimator.partial_fit(task.train_images, task.train_labels, class_counts=counts)
        state = estimator.state_
        if checksum is None:
            checksum = state.backbone.checksum()
        w = estimator.routing_weights(task.train_images, task.train_labels)
        for iid, y, wi in zip(task.train_ids, task.train_labels, w):
            weights.append({"instance": int(iid), "task": task.index, "class": int(y),
                            "n_y": counts[int(y)], "w": float(wi)})

        test_x.append(task.test_images)
        test_y.append(task.test_labels)
        y_true = np.concatenate(test_y)
        y_pred = estimator.predict(np.concatenate(test_x))
        acc = accuracy(y_true, y_pred)
        trace = estimator.loss_traces_[-1]
        records.append(MetricsRecord(task=task.index, accuracy=acc,
                                     seen_classes=int(len(state.classes)),
                                     test_size=int(len(y_true)),
                                     average_accuracy=average_and_last(
                                         [r.accuracy for r in records] + [acc])[0],
                                     loss_trace=trace))
        logger.info("task %d: %d classes seen, accuracy %.2f", task.index,
                    len(state.classes), acc)
        if out_dir is not None:
            save_model(estimator, os.path.join(out_dir, "checkpoints",
                                               f"task_{task.index:03d}.ckpt"), config_hash)

    state = estimator.state_
    if state.backbone.checksum() != checksum:
        raise RuntimeError("frozen backbone changed during training")
    avg, last = average_and_last([r.accuracy for r in records])
    groups = subgroup_accuracy(y_true, y_pred, stream.frequency, bounds)
    n_params = state.num_trainable()
    image_shape = state.backbone.config.image_shape
    summary = {
        "kind": "summary",
        "config_hash": config_hash,
        "mode": state.config.mode,
        "seed": state.config.seed,
        "num_tasks": len(records),
        "accuracies": [r.accuracy for r in records],
        "average_accuracy": avg,
        "last_accuracy": last,
        "subgroup_bounds": [float(bounds[0]), float(bounds[1])],
        "subgroup_accuracy": groups,
        "subgroup_test_sizes": subgroup_sizes(y_true, stream.frequency, bounds),
        "trainable_parameters": int(n_params),
        "image_shape": list(image_shape),
        "exemplar_equivalent": exemplar_equivalent(n_params, image_shape),
        "manifest_hash": stream.manifest_hash(),
        "backbone_checksum": checksum,
    }
    if meta:
        summary.update(meta)
    per_class = per_class_accuracy(y_true, y_pred)
    result = ExperimentResult(records=records, summary=summary, per_class=per_class,
                              weights=weights, estimator=estimator)
    if out_dir is not None:
        write_outputs(result, stream, out_dir, config_hash)
    return result


def _csv_text(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def write_outputs(result: ExperimentResult, stream: TaskStream, out_dir: str,
                  config_hash: str) -> None:
    with open(os.path.join(out_dir, "metrics.jsonl"), "w") as fh:
        fh.write(_json_line({"kind": "header", "config_hash": config_hash,
                             "num_tasks": len(result.records)}))
        for r in result.records:
            fh.write(_json_line({"kind": "task", "config_hash": config_hash, **r.to_dict()}))
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(result.summary, fh, sort_keys=True, indent=2)
        fh.write("\n")
    rows = [(c, stream.frequency[c], f"{a:.6f}") for c, a in sorted(result.per_class.items())]
    with open(os.path.join(out_dir, "per_class_accuracy.csv"), "w") as fh:
        fh.write(f"# config_hash={config_hash}\n")
        fh.write(_csv_text(["class", "n_y", "accuracy"], rows))
    rows = [(w["instance"], w["task"], w["class"], w["n_y"], repr(w["w"]))
            for w in result.weights]
    with open(os.path.join(out_dir, "assigner_weights.csv"), "w") as fh:
        fh.write(f"# config_hash={config_hash}\n")
        fh.write(_csv_text(["instance", "task", "class", "n_y", "w"], rows))


# --- reading a run back ------------------------------------------------------

class RunDirError(RuntimeError):
    pass


def read_csv_with_hash(path: str) -> Tuple[str, List[dict]]:
    try:
        with open(path) as fh:
            first = fh.readline()
            if not first.startswith("# config_hash="):
                raise RunDirError(f"{path}: missing config hash line")
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise RunDirError(f"{path}: {exc.strerror}") from None
    except csv.Error as exc:
        raise RunDirError(f"{path}: corrupt CSV: {exc}") from None
    return first.strip().split("=", 1)[1], rows


def read_metrics(path: str) -> Tuple[dict, List[dict]]:
    try:
        with open(path) as fh:
            lines = [json.loads(line) for line in fh if line.strip()]
    except OSError as exc:
        raise RunDirError(f"{path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise RunDirError(f"{path}: corrupt record at line {exc.lineno}") from None
    if not lines or lines[0].get("kind") != "header":
        raise RunDirError(f"{path}: missing header record")
    tasks = [r for r in lines[1:] if r.get("kind") == "task"]
    if len(tasks) != lines[0].get("num_tasks"):
        raise RunDirError(f"{path}: header announces {lines[0].get('num_tasks')} tasks, "
                          f"found {len(tasks)}")
    return lines[0], tasks


def read_summary(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise RunDirError(f"{path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise RunDirError(f"{path}: corrupt JSON at line {exc.lineno}") from None


def frequency_weights(rows: Sequence[dict]) -> List[Tuple[int, float, int]]:
    """Mean assigner weight per distinct N(y): ``(n_y, mean_w, instances)`` ascending."""
    groups: Dict[int, List[float]] = {}
    for r in rows:
        groups.setdefault(int(r["n_y"]), []).append(float(r["w"]))
    return [(n, float(np.mean(v)), len(v)) for n, v in sorted(groups.items())]


def class_weights(rows: Sequence[dict]) -> List[Tuple[int, int, float]]:
    """Mean assigner weight per class: ``(class, n_y, mean_w)`` by class id."""
    groups: Dict[int, List[float]] = {}
    n_y: Dict[int, int] = {}
    for r in rows:
        c = int(r["class"])
        groups.setdefault(c, []).append(float(r["w"]))
        n_y[c] = int(r["n_y"])
    return [(c, n_y[c], float(np.mean(groups[c]))) for c in sorted(groups)]
