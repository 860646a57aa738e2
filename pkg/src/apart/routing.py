"""Adapter pools, key-query retrieval, the assigner and the training losses."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .backbone import AdapterGroup, FrozenBackbone
from .diffcore import Tensor, ShapeError
from .diffcore import functional as F

NUM_FREQ_BUCKETS = 32


class AdapterPool:
    """``M`` adapter groups, each paired with a learnable retrieval key."""

    def __init__(self, size: int, embed_dim: int, depth: int, bottleneck: int,
                 rng: np.random.Generator, name: str = "pool", use_keys: bool = True):
        if size < 1:
            raise ValueError(f"pool size must be >= 1, got {size}")
        self.name = name
        self.embed_dim = embed_dim
        self.use_keys = use_keys
        self.groups = [AdapterGroup(embed_dim, depth, bottleneck, rng, name=f"{name}.g{j}")
                       for j in range(size)]
        bound = 1.0 / np.sqrt(embed_dim)
        self.keys = [Tensor(rng.uniform(-bound, bound, embed_dim), requires_grad=True,
                            name=f"{name}.key{j}")
                     for j in range(size)]

    def __len__(self):
        return len(self.groups)

    @property
    def key_matrix(self) -> np.ndarray:
        return np.stack([k.data for k in self.keys])

    def parameters(self) -> List[Tensor]:
        params = [p for g in self.groups for p in g.parameters()]
        return params + list(self.keys) if self.use_keys else params

    def named_parameters(self):
        return [(p.name, p) for p in self.parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def select(self, features) -> np.ndarray:
        """Index of the closest key (cosine distance) for each row of ``features``."""
        if len(self.groups) == 1 or not self.use_keys:
            feats = _as_2d(features)
            _check_nonzero(feats)
            return np.zeros(feats.shape[0], dtype=np.intp)
        return cosine_argmin(features, self.key_matrix)

    def gather_layers(self, idx: np.ndarray):
        """Per-block ``(W_down, W_up)`` for the selected groups.

        When every instance picked the same group its weights are used
        directly; otherwise weights are stacked and indexed per instance.
        """
        idx = np.asarray(idx, dtype=np.intp)
        first = int(idx[0])
        if (idx == first).all():
            return self.groups[first].layers()
        layers = []
        for b in range(len(self.groups[0])):
            down = F.stack([g.down[b] for g in self.groups])[idx]
            up = F.stack([g.up[b] for g in self.groups])[idx]
            layers.append((down, up))
        return layers

    def gather_keys(self, idx: np.ndarray) -> Tensor:
        idx = np.asarray(idx, dtype=np.intp)
        return F.stack(self.keys)[idx]


class ClassifierBank:
    """Per-task linear heads; heads are appended, never resized."""

    def __init__(self, embed_dim: int, name: str = "head"):
        self.embed_dim = embed_dim
        self.name = name
        self.heads: List[tuple] = []
        self.task_classes: List[np.ndarray] = []

    @property
    def classes(self) -> np.ndarray:
        if not self.task_classes:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate(self.task_classes)

    @property
    def num_tasks(self) -> int:
        return len(self.heads)

    def add_task(self, classes: Sequence[int], rng: np.random.Generator) -> None:
        classes = np.asarray(classes, dtype=np.int64)
        if classes.size == 0:
            raise ValueError("a task needs at least one class")
        if len(np.unique(classes)) != classes.size:
            raise ValueError(f"duplicate class ids in task: {classes.tolist()}")
        overlap = np.intersect1d(classes, self.classes)
        if overlap.size:
            raise ValueError(f"classes already seen: {overlap.tolist()}")
        t = len(self.heads)
        bound = 1.0 / np.sqrt(self.embed_dim)
        w = Tensor(rng.uniform(-bound, bound, (self.embed_dim, classes.size)),
                   requires_grad=True, name=f"{self.name}{t}.w")
        b = Tensor(np.zeros(classes.size), requires_grad=True, name=f"{self.name}{t}.b")
        self.heads.append((w, b))
        self.task_classes.append(classes)

    def head_parameters(self, t: int) -> List[Tensor]:
        return list(self.heads[t])

    def parameters(self) -> List[Tensor]:
        return [p for h in self.heads for p in h]

    def current_logits(self, features: Tensor) -> Tensor:
        w, b = self.heads[-1]
        return F.linear(features, w, b)

    def logits(self, features: Tensor) -> Tensor:
        if not self.heads:
            raise ValueError("classifier bank has no trained tasks")
        return F.concat([F.linear(features, w, b) for w, b in self.heads], axis=-1)

    def local_targets(self, labels) -> np.ndarray:
        """Map global labels to positions within the current task's head."""
        current = self.task_classes[-1]
        lookup = {int(c): i for i, c in enumerate(current)}
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        unknown = sorted({int(y) for y in labels if int(y) not in lookup})
        if unknown:
            raise ValueError(f"label(s) {unknown} not in the current task's label space")
        return np.array([lookup[int(y)] for y in labels], dtype=np.intp)


class Assigner:
    """Instance routing weight from the frozen feature and the class frequency."""

    def __init__(self, embed_dim: int, rng: np.random.Generator, width: int = 16):
        e = width
        self.width = e

        def lin(fan_in, fan_out, name):
            bound = 1.0 / np.sqrt(fan_in)
            return (Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), requires_grad=True,
                           name=f"assigner.{name}.w"),
                    Tensor(np.zeros(fan_out), requires_grad=True, name=f"assigner.{name}.b"))

        self.psi1_w, self.psi1_b = lin(embed_dim, e, "psi1")
        self.psi2 = Tensor(rng.normal(0.0, 1.0, (NUM_FREQ_BUCKETS, e)), requires_grad=True,
                           name="assigner.psi2")
        self.fc1_w, self.fc1_b = lin(2 * e, 2 * e, "fc1")
        self.fc2_w, self.fc2_b = lin(2 * e, 1, "fc2")

    def parameters(self) -> List[Tensor]:
        return [self.psi1_w, self.psi1_b, self.psi2, self.fc1_w, self.fc1_b,
                self.fc2_w, self.fc2_b]

    def named_parameters(self):
        return [(p.name, p) for p in self.parameters()]

    @staticmethod
    def bucket(counts) -> np.ndarray:
        counts = np.asarray(counts)
        if (counts < 1).any():
            raise ValueError("class frequency N(y) must be >= 1")
        return np.minimum(np.floor(np.log2(counts)).astype(np.intp), NUM_FREQ_BUCKETS - 1)

    def __call__(self, features, counts) -> Tensor:
        feats = features.detach() if isinstance(features, Tensor) else Tensor(features)
        if feats.ndim == 1:
            feats = F.reshape(feats, (1, -1))
        inst = F.linear(feats, self.psi1_w, self.psi1_b)
        freq = F.embedding(self.psi2, self.bucket(np.atleast_1d(counts)))
        h = F.relu(F.linear(F.concat([inst, freq], axis=-1), self.fc1_w, self.fc1_b))
        out = F.linear(h, self.fc2_w, self.fc2_b)
        return F.sigmoid(F.reshape(out, (-1,)))


@dataclass
class LossBreakdown:
    """Per-instance loss terms plus the batch-mean total used for backward."""

    total: Tensor
    main: np.ndarray
    aux: np.ndarray
    weight: np.ndarray
    regularizer: np.ndarray
    per_instance: np.ndarray

    def summary(self) -> dict:
        return {"total": float(self.total.item()), "main": float(self.main.mean()),
                "aux": float(self.aux.mean()), "weight": float(self.weight.mean()),
                "regularizer": float(self.regularizer.mean())}


def _as_2d(features) -> np.ndarray:
    arr = np.asarray(features.data if isinstance(features, Tensor) else features, dtype=float)
    return arr.reshape(1, -1) if arr.ndim == 1 else arr


def _check_nonzero(feats: np.ndarray) -> None:
    if (np.linalg.norm(feats, axis=-1) == 0).any():
        raise ValueError("zero-norm feature has no direction for key matching")


def cosine_argmin(features, keys: np.ndarray) -> np.ndarray:
    feats = _as_2d(features)
    _check_nonzero(feats)
    if feats.shape[1] != keys.shape[1]:
        raise ShapeError(f"feature dim {feats.shape[1]} != key dim {keys.shape[1]}")
    fn = feats / np.linalg.norm(feats, axis=1, keepdims=True)
    kn = keys / np.linalg.norm(keys, axis=1, keepdims=True)
    return np.argmin(1.0 - fn @ kn.T, axis=1)


def select_group(pool: AdapterPool, feature):
    """Closest group for a single feature vector: ``(index, key)``, lowest index on ties."""
    feat = _as_2d(feature)
    if feat.shape[0] != 1:
        raise ShapeError(f"select_group takes one feature vector, got {feat.shape}")
    if feat.shape[1] != pool.embed_dim:
        raise ShapeError(f"feature dim {feat.shape[1]} != pool dim {pool.embed_dim}")
    s = int(pool.select(feat)[0])
    return s, pool.keys[s]


def pool_forward(backbone: FrozenBackbone, pool: AdapterPool, images, frozen: Tensor):
    """Selected indices and adapted [CLS] features for a batch."""
    idx = pool.select(frozen)
    feats = backbone.extract_adapted(images, pool.gather_layers(idx))
    return idx, feats


def pool_loss(backbone: FrozenBackbone, pool: AdapterPool, classifiers: ClassifierBank,
              images, labels, frozen: Optional[Tensor] = None,
              reduction: str = "mean") -> Tensor:
    """Cross-entropy on the current head plus the cosine distance to the chosen key."""
    targets = classifiers.local_targets(labels)
    if frozen is None:
        frozen = backbone.extract_frozen(images)
    idx, feats = pool_forward(backbone, pool, images, frozen)
    ce = F.cross_entropy(classifiers.current_logits(feats), targets, reduction="none")
    if pool.use_keys:
        ce = ce + F.cosine_distance(frozen, pool.gather_keys(idx))
    if reduction == "none":
        return ce
    if reduction == "mean":
        return F.mean(ce)
    raise ValueError(f"unknown reduction {reduction!r}")


def heuristic_weight(n_y: int, theta: float) -> int:
    """Step weight: 1 for classes with at most ``theta`` training instances."""
    return int(n_y <= theta)


def assigner_weight(assigner: Assigner, feature, n_y) -> Tensor:
    return assigner(feature, n_y)


def combined_loss(backbone: FrozenBackbone, main_pool: AdapterPool, aux_pool: AdapterPool,
                  assigner: Assigner, main_heads: ClassifierBank, aux_heads: ClassifierBank,
                  images, labels, counts, alpha: float = 1.0,
                  weight_override=None, frozen: Optional[Tensor] = None) -> LossBreakdown:
    """Main loss + w * auxiliary loss + (alpha - w)^2, averaged over the batch.

    ``weight_override`` replaces the assigner output with a constant (or one
    value per instance); the regulariser then uses that constant too.
    """
    if frozen is None:
        frozen = backbone.extract_frozen(images)
    main = pool_loss(backbone, main_pool, main_heads, images, labels, frozen, reduction="none")
    aux = pool_loss(backbone, aux_pool, aux_heads, images, labels, frozen, reduction="none")
    if weight_override is None:
        w = assigner(frozen, counts)
    else:
        w = Tensor(np.broadcast_to(np.asarray(weight_override, dtype=float), main.shape))
    reg = (alpha - w) ** 2
    per = main + w * aux + reg
    return LossBreakdown(total=F.mean(per), main=main.data.copy(), aux=aux.data.copy(),
                         weight=w.data.copy(), regularizer=reg.data.copy(),
                         per_instance=per.data.copy())


def pool_logits(backbone: FrozenBackbone, pool: AdapterPool, heads: ClassifierBank,
                images, frozen: Optional[Tensor] = None) -> np.ndarray:
    if frozen is None:
        frozen = backbone.extract_frozen(images)
    _, feats = pool_forward(backbone, pool, images, frozen)
    return heads.logits(feats).data


def ensemble_logits(backbone: FrozenBackbone, main_pool: AdapterPool, main_heads: ClassifierBank,
                    aux_pool: Optional[AdapterPool] = None,
                    aux_heads: Optional[ClassifierBank] = None, images=None,
                    frozen: Optional[Tensor] = None) -> np.ndarray:
    """Summed logits of both pools over every seen class; no routing involved."""
    if main_heads.num_tasks == 0:
        raise ValueError("no trained tasks: cannot produce logits")
    if frozen is None:
        frozen = backbone.extract_frozen(images)
    logits = pool_logits(backbone, main_pool, main_heads, images, frozen)
    if aux_pool is not None and aux_heads is not None:
        logits = logits + pool_logits(backbone, aux_pool, aux_heads, images, frozen)
    return logits
