"""Finite-difference oracle and tiny model factories shared by the tests."""
import numpy as np

from apart.backbone import BackboneConfig, FrozenBackbone
from apart.diffcore import Tensor, backward, no_grad

FD_STEP = 1e-5
FD_TOL = 1e-6


def numeric_grad(fn, tensor: Tensor, coords=None, h: float = FD_STEP) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. ``tensor`` at ``coords`` (flat indices)."""
    flat = tensor.data.reshape(-1)
    coords = range(flat.size) if coords is None else coords
    out = np.zeros(flat.size)
    with no_grad():
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            up = float(fn().data)
            flat[i] = orig - h
            down = float(fn().data)
            flat[i] = orig
            out[i] = (up - down) / (2 * h)
    return out


def rel_error(a, b) -> float:
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-10)
    return float(np.linalg.norm(a - b) / scale)


def grad_check(fn, tensors, rng=None, max_coords: int = 40, budget=None) -> float:
    """Worst relative error between backward() and central differences.

    Without ``budget`` each tensor is checked on all of its entries, or on a
    random ``max_coords`` of them when larger. With ``budget`` the error is
    taken over ``budget`` coordinates of the concatenated parameter vector,
    half drawn where the analytic gradient is nonzero and half uniformly.
    """
    rng = rng or np.random.default_rng(0)
    loss = fn()
    backward(loss, leaves=tensors)
    if budget is None:
        worst = 0.0
        for t in tensors:
            analytic = t.grad.reshape(-1).copy()
            n = t.size
            coords = (np.arange(n) if n <= max_coords
                      else np.sort(rng.choice(n, size=max_coords, replace=False)))
            numeric = numeric_grad(fn, t, coords)
            worst = max(worst, rel_error(analytic[coords], numeric[coords]))
        return worst
    analytic = np.concatenate([t.grad.reshape(-1) for t in tensors])
    owner = np.concatenate([np.full(t.size, i) for i, t in enumerate(tensors)])
    offset = np.concatenate([np.arange(t.size) for t in tensors])
    nonzero = np.flatnonzero(analytic)
    half = budget // 2
    picks = rng.choice(nonzero, size=min(half, nonzero.size), replace=False)
    rest = rng.choice(analytic.size, size=budget - picks.size, replace=False)
    picks = np.unique(np.concatenate([picks, rest]))
    numeric = np.array([numeric_grad(fn, tensors[owner[j]], [offset[j]])[offset[j]]
                        for j in picks])
    return rel_error(analytic[picks], numeric)


def tiny_backbone(**overrides) -> FrozenBackbone:
    cfg = dict(image_size=8, channels=3, patch_size=4, embed_dim=8, depth=2, num_heads=2,
               mlp_ratio=2, seed=3)
    cfg.update(overrides)
    return FrozenBackbone(BackboneConfig(**cfg))


def random_images(rng, n: int, size: int = 8, channels: int = 3) -> np.ndarray:
    return rng.uniform(0.0, 1.0, (n, size, size, channels))


def gradient_census(state, images, labels, counts):
    """Names of parameters with a nonzero gradient after one training step's
    backward pass, and the names the routing contract allows."""
    from apart.trainer import frozen_features, training_loss

    frozen = frozen_features(state.backbone, images)
    loss = training_loss(state, images, labels, counts, frozen)
    params = state.trainable_parameters()
    backward(loss.total, leaves=params)
    touched = {p.name for p in params if np.any(p.grad)}

    c = state.config
    expected = set()

    def add_pool(pool, heads, rows):
        if not len(rows):
            return
        for s in set(pool.select(frozen.data[rows]).tolist()):
            expected.update(p.name for p in pool.groups[s].parameters())
            if pool.use_keys:
                expected.add(pool.keys[s].name)
        expected.update(p.name for p in heads.head_parameters(-1))

    add_pool(state.main_pool, state.main_heads, np.arange(len(labels)))
    if c.uses_aux:
        add_pool(state.aux_pool, state.aux_heads, np.flatnonzero(loss.weight > 0))
    if c.uses_assigner:
        expected.update(p.name for p in state.assigner.parameters())
    return touched, expected
