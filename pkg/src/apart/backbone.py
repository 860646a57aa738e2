"""Frozen vision-transformer surrogate with per-block bottleneck adapters."""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .diffcore import Tensor, ShapeError
from .diffcore import functional as F


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 32
    channels: int = 3
    patch_size: int = 4
    embed_dim: int = 64
    depth: int = 4
    num_heads: int = 4
    mlp_ratio: int = 4
    seed: int = 0
    # False drops the skip connection around the MLP branch, i.e. the
    # block output is exactly MLP(LN(x_hat)) + adapter(x_hat).
    mlp_residual: bool = True
    # True adds x_hat once more inside the adapter branch, so an active
    # adapter computes x_hat + ReLU(x_hat W_down) W_up. A zero-initialised
    # group is then no longer an identity.
    adapter_identity: bool = False

    def __post_init__(self):
        for name in ("image_size", "channels", "patch_size", "embed_dim", "depth",
                     "num_heads", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by "
                             f"patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by "
                             f"num_heads {self.num_heads}")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return (self.image_size, self.image_size, self.channels)

    def to_dict(self) -> dict:
        return asdict(self)


class AdapterGroup:
    """One bottleneck adapter per transformer block.

    ``W_up`` starts at zero so a fresh group leaves the backbone output
    unchanged.
    """

    def __init__(self, embed_dim: int, depth: int, bottleneck: int,
                 rng: np.random.Generator, name: str = "group"):
        if bottleneck < 1:
            raise ValueError(f"bottleneck must be positive, got {bottleneck}")
        self.embed_dim = embed_dim
        self.bottleneck = bottleneck
        bound = 1.0 / np.sqrt(embed_dim)
        self.down = [Tensor(rng.uniform(-bound, bound, (embed_dim, bottleneck)),
                            requires_grad=True, name=f"{name}.block{i}.down")
                     for i in range(depth)]
        self.up = [Tensor(np.zeros((bottleneck, embed_dim)), requires_grad=True,
                          name=f"{name}.block{i}.up")
                   for i in range(depth)]

    def __len__(self):
        return len(self.down)

    def layers(self) -> List[Tuple[Tensor, Tensor]]:
        return list(zip(self.down, self.up))

    def parameters(self) -> List[Tensor]:
        return [t for pair in zip(self.down, self.up) for t in pair]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class FrozenBackbone:
    """Seed-initialised ViT whose weights never receive gradients."""

    def __init__(self, config: BackboneConfig = BackboneConfig()):
        self.config = config
        c = config
        rng = np.random.default_rng(c.seed)
        d, hidden = c.embed_dim, c.embed_dim * c.mlp_ratio
        patch_dim = c.patch_size * c.patch_size * c.channels

        def lin(fan_in, fan_out, name):
            w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, fan_out))
            return self._param(w, name + ".w"), self._param(np.zeros(fan_out), name + ".b")

        self._params: List[Tensor] = []
        self.patch_w, self.patch_b = lin(patch_dim, d, "patch")
        self.cls_token = self._param(rng.normal(0.0, 0.02, d), "cls")
        self.pos_embed = self._param(rng.normal(0.0, 0.02, (c.num_patches + 1, d)), "pos")
        self.blocks = []
        for i in range(c.depth):
            blk = {}
            blk["ln1_w"] = self._param(np.ones(d), f"b{i}.ln1.w")
            blk["ln1_b"] = self._param(np.zeros(d), f"b{i}.ln1.b")
            blk["qkv_w"], blk["qkv_b"] = lin(d, 3 * d, f"b{i}.qkv")
            blk["proj_w"], blk["proj_b"] = lin(d, d, f"b{i}.proj")
            blk["ln2_w"] = self._param(np.ones(d), f"b{i}.ln2.w")
            blk["ln2_b"] = self._param(np.zeros(d), f"b{i}.ln2.b")
            blk["fc1_w"], blk["fc1_b"] = lin(d, hidden, f"b{i}.fc1")
            blk["fc2_w"], blk["fc2_b"] = lin(hidden, d, f"b{i}.fc2")
            self.blocks.append(blk)
        self.norm_w = self._param(np.ones(d), "norm.w")
        self.norm_b = self._param(np.zeros(d), "norm.b")

    def _param(self, value, name) -> Tensor:
        t = Tensor(value, requires_grad=False, name=name)
        self._params.append(t)
        return t

    def parameters(self) -> List[Tensor]:
        return list(self._params)

    def named_parameters(self):
        return [(p.name, p) for p in self._params]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for p in self._params:
            h.update(p.name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    # -- forward pieces ----------------------------------------------------

    def _check_images(self, images) -> np.ndarray:
        x = np.asarray(images.data if isinstance(images, Tensor) else images)
        expected = self.config.image_shape
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ShapeError(f"expected image(s) of shape {expected}, got {x.shape}")
        if x.size and (x.min() < 0.0 or x.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        return x

    def embed(self, images) -> Tensor:
        """Normalise pixels to [-1, 1], patchify, project, prepend [CLS] and add
        positions -> ``(n, N_p + 1, d)``."""
        x = self._check_images(images)
        n, p, c = x.shape[0], self.config.patch_size, self.config.channels
        g = self.config.image_size // p
        x = (x - 0.5) / 0.5
        patches = (x.reshape(n, g, p, g, p, c).transpose(0, 1, 3, 2, 4, 5)
                   .reshape(n, g * g, p * p * c))
        tokens = F.linear(Tensor(patches), self.patch_w, self.patch_b)
        cls = Tensor(np.broadcast_to(self.cls_token.data, (n, 1, self.config.embed_dim)))
        return F.concat([cls, tokens], axis=1) + self.pos_embed

    def attend(self, x: Tensor, i: int) -> Tensor:
        """Self-attention half of block ``i``: returns the post-attention tokens."""
        blk, c = self.blocks[i], self.config
        n, t, d = x.shape
        h = c.num_heads
        qkv = F.linear(F.layer_norm(x, blk["ln1_w"], blk["ln1_b"]), blk["qkv_w"], blk["qkv_b"])
        qkv = F.transpose(F.reshape(qkv, (n, t, 3, h, d // h)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        heads = F.attention(q, k, v)
        merged = F.reshape(F.transpose(heads, (0, 2, 1, 3)), (n, t, d))
        return x + F.linear(merged, blk["proj_w"], blk["proj_b"])

    def block_forward(self, x_hat: Tensor, i: int,
                      adapter: Optional[Tuple[Tensor, Tensor]] = None) -> Tensor:
        """MLP half of block ``i``, with the optional adapter branch on ``x_hat``.

        ``adapter`` is ``(W_down, W_up)``; batched ``(n, d, r)`` / ``(n, r, d)``
        weights give every instance its own group.
        """
        blk = self.blocks[i]
        hidden = F.gelu(F.linear(F.layer_norm(x_hat, blk["ln2_w"], blk["ln2_b"]),
                                 blk["fc1_w"], blk["fc1_b"]))
        out = F.linear(hidden, blk["fc2_w"], blk["fc2_b"])
        if adapter is not None:
            w_down, w_up = adapter
            d = self.config.embed_dim
            if w_down.shape[-2] != d or w_up.shape[-1] != d or w_down.shape[-1] != w_up.shape[-2]:
                raise ShapeError(f"adapter shapes {w_down.shape}/{w_up.shape} incompatible "
                                 f"with embed dim {d}")
            out = out + F.matmul(F.relu(F.matmul(x_hat, w_down)), w_up)
            if self.config.adapter_identity:
                out = out + x_hat
        if self.config.mlp_residual:
            out = x_hat + out
        return out

    def forward_tokens(self, images, adapters: Optional[Sequence[Tuple[Tensor, Tensor]]] = None
                       ) -> Tensor:
        x = self.embed(images)
        if adapters is not None and len(adapters) != self.config.depth:
            raise ShapeError(f"need {self.config.depth} adapters, got {len(adapters)}")
        for i in range(self.config.depth):
            x = self.block_forward(self.attend(x, i), i, None if adapters is None else adapters[i])
        return F.layer_norm(x, self.norm_w, self.norm_b)

    def extract_frozen(self, images) -> Tensor:
        """[CLS] feature with no adapters; never on the tape."""
        return self.forward_tokens(images)[:, 0].detach()

    def extract_adapted(self, images, group) -> Tensor:
        """[CLS] feature with ``group`` active in every block.

        ``group`` is an :class:`AdapterGroup` or an explicit per-block list of
        ``(W_down, W_up)`` pairs.
        """
        layers = group.layers() if isinstance(group, AdapterGroup) else list(group)
        return self.forward_tokens(images, layers)[:, 0]


def embed(backbone: FrozenBackbone, image) -> Tensor:
    return backbone.embed(image)


def extract_frozen(backbone: FrozenBackbone, image) -> Tensor:
    return backbone.extract_frozen(image)


def extract_adapted(backbone: FrozenBackbone, image, group) -> Tensor:
    return backbone.extract_adapted(image, group)
