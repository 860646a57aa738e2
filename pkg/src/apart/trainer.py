"""Per-task training of both adapter pools with adaptive routing."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional

import numpy as np

from .backbone import FrozenBackbone
from .diffcore import AdamW, NonFiniteError, Tensor, backward, cosine_anneal_lr, no_grad
from .diffcore import functional as F
from .routing import (AdapterPool, Assigner, ClassifierBank, LossBreakdown, combined_loss,
                      ensemble_logits, heuristic_weight, pool_loss)
from .seeding import component_rng

logger = logging.getLogger(__name__)

MODES = ("full", "no_routing", "no_aux_pool", "no_pool", "finetune")
INFERENCE_CHUNK = 256


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 48
    lr: float = 0.003
    weight_decay: float = 0.0
    pool_size: int = 5
    bottleneck: int = 64
    alpha: float = 1.0
    theta: float = 20
    assigner_width: int = 16
    mode: str = "full"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("epochs", "batch_size", "pool_size", "bottleneck", "assigner_width"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.weight_decay < 0 or self.alpha < 0 or self.theta < 0:
            raise ValueError("weight_decay, alpha and theta must be non-negative")

    @property
    def effective_pool_size(self) -> int:
        return 1 if self.mode in ("no_pool", "finetune") else self.pool_size

    @property
    def uses_aux(self) -> bool:
        return self.mode in ("full", "no_routing", "no_pool")

    @property
    def uses_assigner(self) -> bool:
        return self.mode in ("full", "no_pool")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModelState:
    backbone: FrozenBackbone
    main_pool: AdapterPool
    aux_pool: AdapterPool
    assigner: Assigner
    main_heads: ClassifierBank
    aux_heads: ClassifierBank
    config: TrainConfig
    head_rng: np.random.Generator
    frequency: Dict[int, int] = field(default_factory=dict)
    tasks_trained: int = 0

    @property
    def classes(self) -> np.ndarray:
        return self.main_heads.classes

    def trainable_parameters(self) -> List[Tensor]:
        return (self.main_pool.parameters() + self.aux_pool.parameters()
                + self.assigner.parameters() + self.main_heads.parameters()
                + self.aux_heads.parameters())

    def named_parameters(self):
        return [(p.name, p) for p in self.trainable_parameters()]

    def num_trainable(self) -> int:
        """Parameters the configured mode actually trains and uses."""
        c = self.config
        params = self.main_pool.parameters() + self.main_heads.parameters()
        if c.uses_aux:
            params += self.aux_pool.parameters() + self.aux_heads.parameters()
        if c.uses_assigner:
            params += self.assigner.parameters()
        return sum(p.size for p in params)


def init_state(config: TrainConfig, backbone: FrozenBackbone) -> ModelState:
    """Fresh pools, keys, assigner and empty heads, all drawn from the ``init`` sub-seed."""
    rng = component_rng(config.seed, "init")
    d, depth = backbone.config.embed_dim, backbone.config.depth
    use_keys = config.mode != "finetune"
    m = config.effective_pool_size
    main = AdapterPool(m, d, depth, config.bottleneck, rng, name="main", use_keys=use_keys)
    aux = AdapterPool(m, d, depth, config.bottleneck, rng, name="aux", use_keys=use_keys)
    assigner = Assigner(d, rng, width=config.assigner_width)
    return ModelState(backbone=backbone, main_pool=main, aux_pool=aux, assigner=assigner,
                      main_heads=ClassifierBank(d, "main.head"),
                      aux_heads=ClassifierBank(d, "aux.head"), config=config,
                      head_rng=component_rng(config.seed, "heads"))


def extend_for_task(state: ModelState, classes) -> ModelState:
    classes = np.asarray(classes, dtype=np.int64)
    state.main_heads.add_task(classes, state.head_rng)
    state.aux_heads.add_task(classes, state.head_rng)
    return state


def task_parameters(state: ModelState) -> List[Tensor]:
    """What the optimiser updates during the current task; old heads stay fixed."""
    c = state.config
    params = state.main_pool.parameters() + state.main_heads.head_parameters(-1)
    if c.uses_aux:
        params += state.aux_pool.parameters() + state.aux_heads.head_parameters(-1)
    if c.uses_assigner:
        params += state.assigner.parameters()
    return params


def frozen_features(backbone: FrozenBackbone, images) -> Tensor:
    with no_grad():
        chunks = [backbone.extract_frozen(images[i:i + INFERENCE_CHUNK])
                  for i in range(0, len(images), INFERENCE_CHUNK)]
    return Tensor(np.concatenate([c.data for c in chunks]))


def training_loss(state: ModelState, images, labels, counts, frozen: Tensor) -> LossBreakdown:
    """Batch loss for the configured mode; each ablation rewires one component."""
    c = state.config
    bb = state.backbone
    if c.mode in ("full", "no_pool"):
        return combined_loss(bb, state.main_pool, state.aux_pool, state.assigner,
                             state.main_heads, state.aux_heads, images, labels, counts,
                             alpha=c.alpha, frozen=frozen)

    main = pool_loss(bb, state.main_pool, state.main_heads, images, labels, frozen,
                     reduction="none")
    n = main.shape[0]
    weight = np.zeros(n)
    aux_values = np.zeros(n)
    total = F.mean(main)
    if c.mode == "no_routing":
        weight = np.array([heuristic_weight(int(k), c.theta) for k in counts], dtype=float)
        sel = np.flatnonzero(weight > 0)
        if sel.size:
            aux = pool_loss(bb, state.aux_pool, state.aux_heads, images[sel], labels[sel],
                            frozen[sel], reduction="none")
            aux_values[sel] = aux.data
            total = (F.sum(main) + F.sum(aux)) * (1.0 / n)
    return LossBreakdown(total=total, main=main.data.copy(), aux=aux_values, weight=weight,
                         regularizer=np.zeros(n), per_instance=main.data + weight * aux_values)


def train_task(state: ModelState, images: np.ndarray, labels: np.ndarray,
               rng: np.random.Generator, counts: Optional[Mapping[int, int]] = None
               ) -> List[dict]:
    """Run the configured epochs on one task; returns one mean-loss record per epoch."""
    c = state.config
    if state.main_heads.num_tasks == state.tasks_trained:
        raise TrainingError("extend_for_task must run before train_task")
    labels = np.asarray(labels, dtype=np.int64)
    if counts is None:
        ys, ns = np.unique(labels, return_counts=True)
        counts = dict(zip(ys.tolist(), ns.tolist()))
    state.frequency.update({int(k): int(v) for k, v in counts.items()})
    inst_counts = np.array([state.frequency[int(y)] for y in labels])

    frozen = frozen_features(state.backbone, images)
    params = task_parameters(state)
    opt = AdamW(params, lr=c.lr, weight_decay=c.weight_decay)
    n = len(labels)
    steps_per_epoch = -(-n // c.batch_size)
    total_steps = steps_per_epoch * c.epochs
    step = 0
    trace = []
    for epoch in range(c.epochs):
        order = rng.permutation(n)
        sums = {"total": 0.0, "main": 0.0, "aux": 0.0, "weight": 0.0, "regularizer": 0.0}
        for b in range(steps_per_epoch):
            idx = order[b * c.batch_size:(b + 1) * c.batch_size]
            try:
                loss = training_loss(state, images[idx], labels[idx], inst_counts[idx],
                                     frozen[idx])
            except NonFiniteError as exc:
                raise TrainingError(f"non-finite loss at epoch {epoch} batch {b}: {exc}") from exc
            if not np.isfinite(loss.total.item()):
                raise TrainingError(f"non-finite loss at epoch {epoch} batch {b}: "
                                    f"{loss.summary()}")
            backward(loss.total, leaves=params)
            opt.step(lr=cosine_anneal_lr(step, total_steps, c.lr))
            step += 1
            for key, value in loss.summary().items():
                sums[key] += value * len(idx)
        trace.append({"epoch": epoch, **{k: v / n for k, v in sums.items()}})
        logger.debug("task %d epoch %d loss %.4f", state.tasks_trained, epoch, trace[-1]["total"])
    state.tasks_trained += 1
    return trace


def routing_weights(state: ModelState, images, labels) -> np.ndarray:
    """Auxiliary-loss weight the configured mode assigns to each instance."""
    c = state.config
    counts = np.array([state.frequency[int(y)] for y in np.asarray(labels)])
    if c.uses_assigner:
        frozen = frozen_features(state.backbone, images)
        with no_grad():
            return state.assigner(frozen, counts).data.astype(float)
    if c.mode == "no_routing":
        return np.array([heuristic_weight(int(k), c.theta) for k in counts], dtype=float)
    return np.zeros(len(counts))


def decision_function(state: ModelState, images) -> np.ndarray:
    if state.tasks_trained == 0:
        raise TrainingError("model has not been trained on any task")
    c = state.config
    out = []
    with no_grad():
        for i in range(0, len(images), INFERENCE_CHUNK):
            x = images[i:i + INFERENCE_CHUNK]
            frozen = state.backbone.extract_frozen(x)
            if c.uses_aux:
                out.append(ensemble_logits(state.backbone, state.main_pool, state.main_heads,
                                           state.aux_pool, state.aux_heads, x, frozen))
            else:
                out.append(ensemble_logits(state.backbone, state.main_pool, state.main_heads,
                                           images=x, frozen=frozen))
    return np.concatenate(out)


def predict(state: ModelState, images) -> np.ndarray:
    """Label over all seen classes; no task id is used."""
    return state.classes[np.argmax(decision_function(state, images), axis=1)]
