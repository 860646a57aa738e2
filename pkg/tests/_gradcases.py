"""Random small instances for every differentiable operation.

Each builder takes a Generator and returns ``(fn, tensors)``: ``fn()`` is a
scalar function of the leaf ``tensors``, formed by contracting the op output
with a fixed random readout so that no gradient is degenerate.
"""
import numpy as np

from apart.backbone import AdapterGroup
from apart.diffcore import Tensor
from apart.diffcore import functional as F
from apart.routing import AdapterPool, Assigner, ClassifierBank, combined_loss, pool_loss

from _helpers import random_images, tiny_backbone


def _leaf(rng, shape, low=-1.0, high=1.0, away_from_zero=False):
    x = rng.uniform(low, high, shape)
    if away_from_zero:
        x = np.where(np.abs(x) < 0.05, 0.05 * np.sign(x + 1e-12), x)
    return Tensor(x, requires_grad=True)


def _shape(rng, ndim, lo=1, hi=5):
    return tuple(int(s) for s in rng.integers(lo, hi + 1, size=ndim))


def _wrap(op, tensors, rng):
    r = Tensor(rng.normal(size=op().shape))
    return (lambda: F.sum(op() * r)), tensors


def _binary(name):
    def build(rng):
        shape = _shape(rng, 3)
        # broadcast the second operand along a random axis
        bshape = list(shape)
        bshape[int(rng.integers(0, 3))] = 1
        a = _leaf(rng, shape)
        b = _leaf(rng, tuple(bshape), 0.5, 2.0) if name == "div" else _leaf(rng, tuple(bshape))
        op = getattr(F, name)
        return _wrap(lambda: op(a, b), [a, b], rng)
    return build


def _unary(name, low=-2.0, high=2.0, away=False, **kw):
    def build(rng):
        a = _leaf(rng, _shape(rng, 2), low, high, away_from_zero=away)
        op = getattr(F, name)
        return _wrap(lambda: op(a, **kw), [a], rng)
    return build


def _power(rng):
    a = _leaf(rng, _shape(rng, 2), 0.5, 2.0)
    e = float(rng.uniform(-2.0, 3.0))
    return _wrap(lambda: F.power(a, e), [a], rng)


def _reshape(rng):
    a = _leaf(rng, (2, 3, 4))
    return _wrap(lambda: F.reshape(a, (4, 6)), [a], rng)


def _transpose(rng):
    a = _leaf(rng, _shape(rng, 3))
    axes = tuple(rng.permutation(3).tolist())
    return _wrap(lambda: F.transpose(a, axes), [a], rng)


def _swapaxes(rng):
    a = _leaf(rng, _shape(rng, 4))
    return _wrap(lambda: F.swapaxes(a, -1, -2), [a], rng)


def _getitem_basic(rng):
    a = _leaf(rng, (5, 4, 3))
    return _wrap(lambda: a[1:4, :, 0], [a], rng)


def _getitem_fancy(rng):
    a = _leaf(rng, (5, 3))
    idx = rng.integers(0, 5, size=7)  # repeats accumulate
    return _wrap(lambda: a[idx], [a], rng)


def _concat(rng):
    axis = int(rng.integers(0, 2))
    shapes = []
    for _ in range(3):
        s = [3, 4]
        s[axis] = int(rng.integers(1, 4))
        shapes.append(tuple(s))
    ts = [_leaf(rng, s) for s in shapes]
    return _wrap(lambda: F.concat(ts, axis=axis), ts, rng)


def _stack(rng):
    shape = _shape(rng, 2)
    ts = [_leaf(rng, shape) for _ in range(3)]
    axis = int(rng.integers(0, 3))
    return _wrap(lambda: F.stack(ts, axis=axis), ts, rng)


def _sum(rng):
    a = _leaf(rng, _shape(rng, 3))
    axis = int(rng.integers(0, 3))
    return _wrap(lambda: F.sum(a, axis=axis), [a], rng)


def _mean(rng):
    a = _leaf(rng, _shape(rng, 3))
    axis = int(rng.integers(0, 3))
    return _wrap(lambda: F.mean(a, axis=axis, keepdims=True), [a], rng)


def _matmul(rng):
    n, k, m = _shape(rng, 3)
    a = _leaf(rng, (2, 3, n, k))
    b = _leaf(rng, (3, k, m))  # broadcast over the leading batch axis
    return _wrap(lambda: F.matmul(a, b), [a, b], rng)


def _linear(rng):
    n, k, m = _shape(rng, 3)
    x, w, b = _leaf(rng, (n, k)), _leaf(rng, (k, m)), _leaf(rng, (m,))
    return _wrap(lambda: F.linear(x, w, b), [x, w, b], rng)


def _layer_norm(rng):
    # at d = 2 the normalised output is pinned to +-1 and the gradient is O(eps)
    d = int(rng.integers(3, 8))
    x = _leaf(rng, (int(rng.integers(1, 5)), d), -3.0, 3.0)
    w, b = _leaf(rng, (d,)), _leaf(rng, (d,))
    return _wrap(lambda: F.layer_norm(x, w, b), [x, w, b], rng)


def _cross_entropy(reduction):
    def build(rng):
        n, k = int(rng.integers(1, 6)), int(rng.integers(2, 7))
        z = _leaf(rng, (n, k), -3.0, 3.0)
        y = rng.integers(0, k, size=n)
        if reduction == "mean":
            return (lambda: F.cross_entropy(z, y)), [z]
        return _wrap(lambda: F.cross_entropy(z, y, reduction="none"), [z], rng)
    return build


def _cosine(rng):
    n, d = int(rng.integers(1, 5)), int(rng.integers(2, 8))
    u = _leaf(rng, (n, d))
    v = _leaf(rng, (1, d))
    return _wrap(lambda: F.cosine_distance(u, v), [u, v], rng)


def _embedding(rng):
    table = _leaf(rng, (int(rng.integers(3, 8)), int(rng.integers(1, 6))))
    idx = rng.integers(0, table.shape[0], size=int(rng.integers(1, 8)))
    return _wrap(lambda: F.embedding(table, idx), [table], rng)


def _attention(rng):
    b, h, t, dk = 2, 2, int(rng.integers(2, 6)), int(rng.integers(1, 5))
    q, k, v = (_leaf(rng, (b, h, t, dk)) for _ in range(3))
    return _wrap(lambda: F.attention(q, k, v), [q, k, v], rng)


PRIMITIVES = {
    "add": _binary("add"),
    "sub": _binary("sub"),
    "mul": _binary("mul"),
    "div": _binary("div"),
    "neg": _unary("neg"),
    "power": _power,
    "exp": _unary("exp"),
    "log": _unary("log", 0.2, 3.0),
    "relu": _unary("relu", away=True),
    "gelu": _unary("gelu", -3.0, 3.0),
    "sigmoid": _unary("sigmoid", -4.0, 4.0),
    "tanh": _unary("tanh"),
    "reshape": _reshape,
    "transpose": _transpose,
    "swapaxes": _swapaxes,
    "getitem_basic": _getitem_basic,
    "getitem_fancy": _getitem_fancy,
    "concat": _concat,
    "stack": _stack,
    "sum": _sum,
    "mean": _mean,
    "matmul": _matmul,
    "linear": _linear,
    "layer_norm": _layer_norm,
    "softmax": _unary("softmax", -3.0, 3.0),
    "log_softmax": _unary("log_softmax", -3.0, 3.0),
    "cross_entropy_mean": _cross_entropy("mean"),
    "cross_entropy_none": _cross_entropy("none"),
    "cosine_distance": _cosine,
    "embedding": _embedding,
    "attention": _attention,
}


# --- model-level operations --------------------------------------------------

def _trained_group(rng, d, depth, r, name="g"):
    g = AdapterGroup(d, depth, r, rng, name=name)
    for up in g.up:  # leave the zero-init point so every partial is generic
        up.data[...] = rng.normal(0.0, 0.3, up.shape)
    return g


def _randomise(params, rng, scale=0.3):
    for p in params:
        p.data[...] = p.data + rng.normal(0.0, scale, p.shape)


def adapter_forward(rng):
    """One block with an active adapter; gradients w.r.t. tokens, W_down, W_up."""
    bb = tiny_backbone(seed=int(rng.integers(0, 1000)))
    d = bb.config.embed_dim
    g = _trained_group(rng, d, bb.config.depth, 4)
    x = _leaf(rng, (2, 3, d))
    i = int(rng.integers(0, bb.config.depth))
    down, up = g.down[i], g.up[i]
    return _wrap(lambda: bb.block_forward(x, i, (down, up)), [x, down, up], rng)


def _pool_setup(rng, m=3, classes=(0, 1, 2)):
    bb = tiny_backbone(seed=int(rng.integers(0, 1000)))
    d, depth = bb.config.embed_dim, bb.config.depth
    pool = AdapterPool(m, d, depth, 4, rng, name="main")
    for g in pool.groups:
        for up in g.up:
            up.data[...] = rng.normal(0.0, 0.3, up.shape)
    heads = ClassifierBank(d, "main.head")
    heads.add_task(list(classes), rng)
    images = random_images(rng, 4)
    labels = rng.choice(classes, size=4)
    frozen = bb.extract_frozen(images)
    return bb, pool, heads, images, labels, frozen


def pool_loss_case(rng):
    bb, pool, heads, images, labels, frozen = _pool_setup(rng)
    params = pool.parameters() + heads.parameters()
    return (lambda: pool_loss(bb, pool, heads, images, labels, frozen)), params


def assigner_case(rng):
    d = 8
    a = Assigner(d, rng, width=4)
    _randomise(a.parameters(), rng)
    feats = rng.normal(size=(5, d))
    counts = rng.integers(1, 600, size=5)
    r = rng.normal(size=5)
    return (lambda: F.sum(a(feats, counts) * Tensor(r))), a.parameters()


def combined_loss_case(rng):
    bb, main, main_heads, images, labels, frozen = _pool_setup(rng)
    d, depth = bb.config.embed_dim, bb.config.depth
    aux = AdapterPool(3, d, depth, 4, rng, name="aux")
    for g in aux.groups:
        for up in g.up:
            up.data[...] = rng.normal(0.0, 0.3, up.shape)
    aux_heads = ClassifierBank(d, "aux.head")
    aux_heads.add_task([0, 1, 2], rng)
    assigner = Assigner(d, rng, width=4)
    _randomise(assigner.parameters(), rng)
    counts = rng.integers(1, 200, size=len(labels))
    alpha = float(rng.uniform(0.5, 1.5))
    params = (main.parameters() + aux.parameters() + assigner.parameters()
              + main_heads.parameters() + aux_heads.parameters())

    def fn():
        return combined_loss(bb, main, aux, assigner, main_heads, aux_heads, images, labels,
                             counts, alpha=alpha, frozen=frozen).total
    return fn, params


MODEL_OPS = {
    "adapter_forward": adapter_forward,
    "pool_loss": pool_loss_case,
    "assigner": assigner_case,
    "combined_loss": combined_loss_case,
}
