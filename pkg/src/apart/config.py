"""Flat, typed experiment configuration files (YAML syntax)."""
from __future__ import annotations

import hashlib
import json
import os
import re
from dataclasses import asdict, dataclass, field, fields
from typing import List, Optional, Tuple

import yaml

from .backbone import BackboneConfig
from .trainer import MODES, TrainConfig


class ConfigError(ValueError):
    """Bad configuration; ``field`` and ``line`` locate the problem when known."""

    def __init__(self, message: str, field: Optional[str] = None, line: Optional[int] = None):
        self.field = field
        self.line = line
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


@dataclass
class ExperimentConfig:
    dataset: str = "synthetic:20,100"
    rho: float = 0.05
    n_max: int = 100
    scenario: str = "shuffled"
    split: str = "B10-2"
    seed: int = 0
    ablation_seeds: List[int] = field(default_factory=lambda: [0])
    precision: str = "f32"
    output_dir: str = "runs/default"
    # training
    mode: str = "full"
    epochs: int = 10
    batch_size: int = 48
    lr: float = 0.003
    weight_decay: float = 0.0
    pool_size: int = 5
    bottleneck: int = 64
    alpha: float = 1.0
    theta: float = 20
    assigner_width: int = 16
    # backbone
    image_size: int = 32
    patch_size: int = 4
    embed_dim: int = 64
    depth: int = 4
    num_heads: int = 4
    mlp_ratio: int = 4
    mlp_residual: bool = True
    adapter_identity: bool = False
    backbone_seed: int = 0
    # synthetic data
    synthetic_noise: float = 0.25
    synthetic_test_per_class: int = 50
    synthetic_family_size: int = 1
    # [hi, lo] instance-count boundaries; empty -> 0.2 / 0.04 of n_max
    subgroup_bounds: List[float] = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    # -- derived --------------------------------------------------------------

    @property
    def dataset_kind(self) -> str:
        return self.dataset.split(":", 1)[0]

    @property
    def synthetic_shape(self) -> Tuple[int, int]:
        num, per = self.dataset.split(":", 1)[1].split(",")
        return int(num), int(per)

    @property
    def cifar_path(self) -> str:
        return self.dataset.split(":", 1)[1]

    @property
    def num_classes(self) -> int:
        return self.synthetic_shape[0] if self.dataset_kind == "synthetic" else 100

    def bounds(self) -> Tuple[float, float]:
        if self.subgroup_bounds:
            return float(self.subgroup_bounds[0]), float(self.subgroup_bounds[1])
        return 0.2 * self.n_max, 0.04 * self.n_max

    def train_config(self, mode: Optional[str] = None, seed: Optional[int] = None) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                           weight_decay=self.weight_decay, pool_size=self.pool_size,
                           bottleneck=self.bottleneck, alpha=self.alpha, theta=self.theta,
                           assigner_width=self.assigner_width, mode=mode or self.mode,
                           seed=self.seed if seed is None else seed)

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(image_size=self.image_size, channels=3,
                              patch_size=self.patch_size, embed_dim=self.embed_dim,
                              depth=self.depth, num_heads=self.num_heads,
                              mlp_ratio=self.mlp_ratio, seed=self.backbone_seed,
                              mlp_residual=self.mlp_residual,
                              adapter_identity=self.adapter_identity)

    def estimator_params(self, mode: Optional[str] = None, seed: Optional[int] = None) -> dict:
        return dict(mode=mode or self.mode, epochs=self.epochs, batch_size=self.batch_size,
                    lr=self.lr, weight_decay=self.weight_decay, pool_size=self.pool_size,
                    bottleneck=self.bottleneck, alpha=self.alpha, theta=self.theta,
                    assigner_width=self.assigner_width, image_size=self.image_size, channels=3,
                    patch_size=self.patch_size, embed_dim=self.embed_dim, depth=self.depth,
                    num_heads=self.num_heads, mlp_ratio=self.mlp_ratio,
                    mlp_residual=self.mlp_residual,
                    adapter_identity=self.adapter_identity, backbone_seed=self.backbone_seed,
                    random_state=self.seed if seed is None else seed, precision=self.precision)

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        """SHA-256 (16 hex chars) of the canonical config, output directory excluded."""
        payload = {k: v for k, v in self.to_dict().items() if k != "output_dir"}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]

    # -- validation -------------------------------------------------------------

    def validate(self) -> None:
        kind = self.dataset_kind
        if kind == "synthetic":
            if not re.fullmatch(r"synthetic:\d+,\d+", self.dataset):
                raise ConfigError("expected 'synthetic:<classes>,<per_class>'", "dataset")
            num, per = self.synthetic_shape
            if num < 2 or per < 1:
                raise ConfigError("synthetic data needs >= 2 classes and >= 1 per class",
                                  "dataset")
        elif kind == "cifar100-binary":
            path = self.cifar_path
            if not path:
                raise ConfigError("missing CIFAR-100 path", "dataset")
            if not os.path.exists(path):
                raise ConfigError(f"CIFAR-100 path does not exist: {path}", "dataset")
            if self.image_size != 32:
                raise ConfigError("CIFAR-100 images are 32x32", "image_size")
        else:
            raise ConfigError("expected 'synthetic:<C>,<per_class>' or "
                              "'cifar100-binary:<dir>'", "dataset")
        if not 0 < self.rho <= 1:
            raise ConfigError("must lie in (0, 1]", "rho")
        if self.n_max * self.rho < 1:
            raise ConfigError("rho * n_max must be >= 1", "rho")
        if self.scenario not in ("ordered", "shuffled"):
            raise ConfigError("must be 'ordered' or 'shuffled'", "scenario")
        if not re.fullmatch(r"B\d+-\d+", str(self.split)):
            raise ConfigError("must look like 'B{m}-{n}'", "split")
        if self.mode not in MODES:
            raise ConfigError(f"must be one of {list(MODES)}", "mode")
        if self.precision not in ("f32", "f64"):
            raise ConfigError("must be 'f32' or 'f64'", "precision")
        if not self.ablation_seeds:
            raise ConfigError("needs at least one seed", "ablation_seeds")
        if self.subgroup_bounds and (len(self.subgroup_bounds) != 2
                                     or not self.subgroup_bounds[0] > self.subgroup_bounds[1] > 0):
            raise ConfigError("must be [hi, lo] with hi > lo > 0", "subgroup_bounds")
        try:
            self.train_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        try:
            self.backbone_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _coerce(name: str, value, line: Optional[int]):
    typ = _FIELD_TYPES[name]
    if typ == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {value!r}", name, line)
        return value
    if typ == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", name, line)
        return value
    if typ == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", name, line)
        return float(value)
    if typ == "str":
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", name, line)
        return value
    if typ == "List[int]":
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool)
                                                  for v in value):
            raise ConfigError(f"expected a list of integers, got {value!r}", name, line)
        return list(value)
    if typ == "List[float]":
        if not isinstance(value, list) or not all(isinstance(v, (int, float)) for v in value):
            raise ConfigError(f"expected a list of numbers, got {value!r}", name, line)
        return [float(v) for v in value]
    raise AssertionError(typ)


def parse_config(text: str, overrides: Optional[dict] = None) -> ExperimentConfig:
    """Parse config text; unknown keys and type errors carry their line numbers."""
    try:
        node = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"malformed config: {getattr(exc, 'problem', exc)}",
                          line=None if mark is None else mark.line + 1) from None
    values = {}
    if node is not None:
        if not isinstance(node, yaml.MappingNode):
            raise ConfigError("top level must be a key: value mapping", line=1)
        for key_node, value_node in node.value:
            key = key_node.value
            line = key_node.start_mark.line + 1
            if key not in _FIELD_TYPES:
                raise ConfigError("unknown key", key, line)
            if key in values:
                raise ConfigError("duplicate key", key, line)
            value = yaml.safe_load(yaml.serialize(value_node))
            values[key] = _coerce(key, value, line)
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    try:
        return ExperimentConfig(**values)
    except ConfigError as exc:
        if exc.field is not None and exc.line is None and exc.field in values:
            lines = {k.value: k.start_mark.line + 1 for k, _ in node.value} if node else {}
            raise ConfigError(str(exc).split(": ", 1)[-1], exc.field, lines.get(exc.field)) \
                from None
        raise


def load_config(path: str, overrides: Optional[dict] = None) -> ExperimentConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, overrides)
