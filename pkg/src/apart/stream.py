"""Class-incremental task streams with long-tailed class counts, and the datasets behind them."""
from __future__ import annotations

import hashlib
import json
import os
import re
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

CIFAR_RECORD_BYTES = 3074
CIFAR_PIXELS = 3072
CIFAR_FINE_CLASSES = 100


class DatasetError(ValueError):
    pass


@dataclass
class LabeledImages:
    images: np.ndarray  # (n, H, W, C) in [0, 1]
    labels: np.ndarray  # (n,) int64
    coarse_labels: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.labels)

    def class_counts(self) -> Dict[int, int]:
        ys, ns = np.unique(self.labels, return_counts=True)
        return {int(y): int(n) for y, n in zip(ys, ns)}


@dataclass
class ClassCountPlan:
    counts: np.ndarray
    rho: float
    n_max: int
    scenario: str = "ordered"
    seed: Optional[int] = None

    @property
    def num_classes(self) -> int:
        return len(self.counts)


def _round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(np.asarray(x) + 0.5).astype(np.int64)


def build_counts(num_classes: int, n_max: int, rho: float, scenario: str = "ordered",
                 seed: int = 0) -> ClassCountPlan:
    """Exponentially decaying per-class budgets from ``n_max`` down to ``rho * n_max``.

    The shuffled scenario permutes the same decaying counts over class ids.
    """
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes, got {num_classes}")
    if not 0 < rho <= 1:
        raise ValueError(f"rho must lie in (0, 1], got {rho}")
    if n_max * rho < 1:
        raise ValueError(f"rho * n_max = {rho * n_max} < 1 leaves an empty tail class")
    if scenario not in ("ordered", "shuffled"):
        raise ValueError(f"scenario must be 'ordered' or 'shuffled', got {scenario!r}")
    c = np.arange(num_classes)
    counts = _round_half_up(n_max * rho ** (c / (num_classes - 1)))
    if scenario == "shuffled":
        counts = np.random.default_rng(seed).permutation(counts)
    return ClassCountPlan(counts=counts, rho=float(rho), n_max=int(n_max), scenario=scenario,
                          seed=seed if scenario == "shuffled" else None)


def parse_split(split: str) -> Tuple[int, int]:
    m = re.fullmatch(r"B(\d+)-(\d+)", split.strip())
    if not m:
        raise ValueError(f"split must look like 'B{{m}}-{{n}}', got {split!r}")
    base, inc = int(m.group(1)), int(m.group(2))
    if base < 1 or inc < 1:
        raise ValueError(f"split sizes must be positive, got {split!r}")
    return base, inc


def task_sizes(num_classes: int, split: str) -> List[int]:
    base, inc = parse_split(split)
    rest = num_classes - base
    if rest < inc or rest % inc:
        raise ValueError(f"split {split} does not tile {num_classes} classes "
                         f"(need m + k*n = C with k >= 1)")
    return [base] + [inc] * (rest // inc)


@dataclass
class Task:
    index: int
    classes: np.ndarray
    train_images: np.ndarray
    train_labels: np.ndarray
    train_ids: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray

    @property
    def size(self) -> int:
        return len(self.train_labels)


@dataclass
class TaskStream:
    tasks: List[Task]
    plan: ClassCountPlan
    split: str
    frequency: Dict[int, int] = field(default_factory=dict)

    def __len__(self):
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def manifest_rows(self) -> List[dict]:
        return [{"class": int(c), "count": int(self.frequency[int(c)]), "task": t.index}
                for t in self.tasks for c in t.classes]

    def manifest_text(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.manifest_rows())

    def manifest_hash(self) -> str:
        h = hashlib.sha256(self.manifest_text().encode())
        for t in self.tasks:
            h.update(t.train_ids.tobytes())
        return h.hexdigest()

    def write_manifest(self, path: str, header: Optional[dict] = None) -> None:
        with open(path, "w") as fh:
            if header is not None:
                fh.write(json.dumps(header, sort_keys=True) + "\n")
            fh.write(self.manifest_text())


def make_stream(plan: ClassCountPlan, split: str, train: LabeledImages,
                test: LabeledImages, seed: int = 0) -> TaskStream:
    """Sample the long-tailed training stream; test sets stay balanced and whole.

    Classes are assigned to tasks in descending-count order for the ordered
    scenario and in class-id order for the shuffled one.
    """
    C = plan.num_classes
    sizes = task_sizes(C, split)
    if plan.scenario == "ordered":
        class_order = np.argsort(-plan.counts, kind="stable")
    else:
        class_order = np.arange(C)
    rng = np.random.default_rng(seed)
    frequency: Dict[int, int] = {}
    chosen: Dict[int, np.ndarray] = {}
    for c in range(C):
        pool = np.flatnonzero(train.labels == c)
        need = int(plan.counts[c])
        if pool.size < need:
            raise DatasetError(f"class {c} has {pool.size} training instances, "
                               f"budget needs {need}")
        chosen[c] = np.sort(rng.choice(pool, size=need, replace=False))
        frequency[c] = need

    tasks = []
    start = 0
    for t, n in enumerate(sizes):
        classes = class_order[start:start + n].astype(np.int64)
        start += n
        ids = np.concatenate([chosen[int(c)] for c in classes])
        test_mask = np.isin(test.labels, classes)
        tasks.append(Task(index=t, classes=classes, train_images=train.images[ids],
                          train_labels=train.labels[ids].astype(np.int64), train_ids=ids,
                          test_images=test.images[test_mask],
                          test_labels=test.labels[test_mask].astype(np.int64)))
    return TaskStream(tasks=tasks, plan=plan, split=split, frequency=frequency)


# --- CIFAR-100 binary --------------------------------------------------------

def parse_cifar100(raw: bytes) -> LabeledImages:
    n, rem = divmod(len(raw), CIFAR_RECORD_BYTES)
    if rem:
        raise DatasetError(f"truncated CIFAR-100 record at byte offset {n * CIFAR_RECORD_BYTES}: "
                           f"{rem} trailing bytes (records are {CIFAR_RECORD_BYTES} bytes)")
    buf = np.frombuffer(raw, dtype=np.uint8).reshape(n, CIFAR_RECORD_BYTES)
    coarse = buf[:, 0].astype(np.int64)
    fine = buf[:, 1].astype(np.int64)
    bad = np.flatnonzero(fine >= CIFAR_FINE_CLASSES)
    if bad.size:
        r = int(bad[0])
        raise DatasetError(f"fine label {fine[r]} >= {CIFAR_FINE_CLASSES} in record {r} "
                           f"(byte offset {r * CIFAR_RECORD_BYTES + 1})")
    pixels = buf[:, 2:].reshape(n, 3, 32, 32).transpose(0, 2, 3, 1)
    return LabeledImages(images=pixels.astype(np.float64) / 255.0, labels=fine,
                         coarse_labels=coarse)


def load_cifar100(path: str) -> LabeledImages:
    """Read a CIFAR-100 binary file (``train.bin`` / ``test.bin`` layout)."""
    with open(path, "rb") as fh:
        return parse_cifar100(fh.read())


def encode_cifar100(pixels: np.ndarray, fine: np.ndarray,
                    coarse: Optional[np.ndarray] = None) -> bytes:
    """Inverse of :func:`parse_cifar100` for uint8 ``(n, 32, 32, 3)`` pixels."""
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8 or pixels.shape[1:] != (32, 32, 3):
        raise ValueError(f"need uint8 pixels of shape (n, 32, 32, 3), got "
                         f"{pixels.dtype} {pixels.shape}")
    n = pixels.shape[0]
    fine = np.asarray(fine, dtype=np.uint8)
    coarse = np.zeros(n, dtype=np.uint8) if coarse is None else np.asarray(coarse, np.uint8)
    out = np.empty((n, CIFAR_RECORD_BYTES), dtype=np.uint8)
    out[:, 0] = coarse
    out[:, 1] = fine
    out[:, 2:] = pixels.transpose(0, 3, 1, 2).reshape(n, CIFAR_PIXELS)
    return out.tobytes()


def write_cifar100(path: str, pixels: np.ndarray, fine: np.ndarray,
                   coarse: Optional[np.ndarray] = None) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_cifar100(pixels, fine, coarse))


def load_cifar100_dir(path: str) -> Tuple[LabeledImages, LabeledImages]:
    train = os.path.join(path, "train.bin")
    test = os.path.join(path, "test.bin")
    for p in (train, test):
        if not os.path.exists(p):
            raise FileNotFoundError(p)
    return load_cifar100(train), load_cifar100(test)


# --- synthetic data ----------------------------------------------------------

def class_templates(num_classes: int, image_size: int = 32, channels: int = 3,
                    seed: int = 0, family_size: int = 1) -> np.ndarray:
    """One seeded template per class: a colour plus an oriented grating.

    Classes in the same block of ``family_size`` consecutive ids share a
    colour palette and differ only in their grating.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:image_size, 0:image_size] / image_size
    n_families = -(-num_classes // family_size)
    palettes = rng.uniform(0.15, 0.85, (n_families, channels))
    out = np.empty((num_classes, image_size, image_size, channels))
    for c in range(num_classes):
        freq = rng.uniform(1.0, 4.0)
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
        tint = rng.uniform(-1.0, 1.0, channels)
        base = palettes[c // family_size]
        out[c] = np.clip(base + 0.25 * wave[..., None] * tint, 0.0, 1.0)
    return out


def synth_dataset(num_classes: int, per_class: int, image_size: int = 32, seed: int = 0,
                  noise: float = 0.1, channels: int = 3, family_size: int = 1,
                  template_seed: Optional[int] = None) -> LabeledImages:
    """Template-plus-noise images, ``per_class`` of each class, clipped to [0, 1].

    ``template_seed`` fixes the class patterns independently of the noise seed,
    so a train and a test draw can share classes.
    """
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes, got {num_classes}")
    templates = class_templates(num_classes, image_size, channels,
                                seed if template_seed is None else template_seed, family_size)
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), per_class)
    images = templates[labels]
    if noise > 0:
        images = images + rng.normal(0.0, noise, images.shape)
    return LabeledImages(images=np.clip(images, 0.0, 1.0), labels=labels)
