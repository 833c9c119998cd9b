"""Random instances for finite-difference gradient checks.

Each case maps a seeded generator to ``(fn, inputs)`` where ``fn`` takes graph
nodes and returns a scalar node.  Non-scalar primitives are reduced with a
fixed random projection so every output coordinate contributes.
"""

import numpy as np

from cosine_metric import autodiff as ad
from cosine_metric.autodiff import Mode
from cosine_metric.losses import (
    MagnetConfig,
    TripletConfig,
    cosine_softmax_loss,
    magnet_loss,
    standard_softmax_loss,
    triplet_loss,
)

INSTANCES = 10
H = 1e-5
TOL = 1e-5


def _project(node, rng):
    weights = rng.normal(size=node.shape)
    return ad.sum(node * ad.constant(weights))


def _away_from_zero(rng, shape, gap=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-300) * gap + x, x)


def _unary(op, make=None):
    def case(rng):
        x = make(rng) if make else rng.normal(size=(3, 4))
        proj = rng.normal(size=x.shape)
        return (lambda a: ad.sum(op(a) * ad.constant(proj))), [x]
    return case


def _binary(op, second=None):
    def case(rng):
        a = rng.normal(size=(3, 4))
        b = second(rng) if second else rng.normal(size=(3, 4))
        proj = rng.normal(size=(3, 4))
        return (lambda x, y: ad.sum(op(x, y) * ad.constant(proj))), [a, b]
    return case


def _broadcast_add(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4,))
    proj = rng.normal(size=(3, 4))
    return (lambda x, y: ad.sum(ad.add(x, y) * ad.constant(proj))), [a, b]


def _index(rng):
    x = rng.normal(size=(5, 3))
    rows = np.array([0, 2, 2, 4, 0])
    proj = rng.normal(size=(5, 3))
    return (lambda a: ad.sum(ad.index(a, rows) * ad.constant(proj))), [x]


def _pair_index(rng):
    x = rng.normal(size=(4, 4))
    key = (np.array([0, 1, 1, 3]), np.array([2, 0, 0, 3]))
    proj = rng.normal(size=4)
    return (lambda a: ad.sum(ad.index(a, key) * ad.constant(proj))), [x]


def _concat(rng):
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(3, 3))
    proj = rng.normal(size=(5, 3))
    return (lambda x, y: ad.sum(ad.concat_rows([x, y]) * ad.constant(proj))), [a, b]


def _sum_axis(rng):
    x = rng.normal(size=(3, 4, 2))
    proj = rng.normal(size=(3, 2))
    return (lambda a: ad.sum(ad.sum(a, axis=1) * ad.constant(proj))), [x]


def _mean_axis(rng):
    x = rng.normal(size=(3, 4))
    proj = rng.normal(size=(1, 4))
    return (lambda a: ad.sum(ad.mean(a, axis=0, keepdims=True) * ad.constant(proj))), [x]


def _matmul(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    proj = rng.normal(size=(3, 2))
    return (lambda x, y: ad.sum(ad.matmul(x, y) * ad.constant(proj))), [a, b]


def _dense(rng):
    x, w, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 5)), rng.normal(size=5)
    proj = rng.normal(size=(3, 5))
    return (lambda a, ww, bb: ad.sum(ad.dense(a, ww, bb) * ad.constant(proj))), [x, w, b]


def _pairwise_self(rng):
    x = rng.normal(size=(5, 3))
    proj = rng.normal(size=(5, 5))
    return (lambda a: ad.sum(ad.squared_euclidean_pairwise(a) * ad.constant(proj))), [x]


def _pairwise_cross(rng):
    x, y = rng.normal(size=(4, 3)), rng.normal(size=(2, 3))
    proj = rng.normal(size=(4, 2))
    return (lambda a, b: ad.sum(ad.squared_euclidean_pairwise(a, b) * ad.constant(proj))), [x, y]


def _logsumexp(rng):
    x = rng.normal(size=(4, 5)) * 3.0
    mask = rng.random((4, 5)) < 0.7
    mask[:, 0] = True
    proj = rng.normal(size=4)
    return (lambda a: ad.sum(ad.logsumexp(a, axis=1, mask=mask) * ad.constant(proj))), [x]


def _softmax_ce(rng):
    logits = rng.normal(size=(6, 4)) * 2.0
    labels = rng.integers(0, 4, size=6)
    proj = rng.normal(size=6)
    return (lambda a: ad.sum(ad.softmax_cross_entropy(a, labels) * ad.constant(proj))), [logits]


def _conv(stride, padding=None, bias=True):
    def case(rng):
        x = rng.normal(size=(2, 2, 5, 4))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        out_shape = ad.conv2d(x, w, b, stride=stride, padding=padding).shape
        proj = rng.normal(size=out_shape)
        if bias:
            return (lambda a, k, c: ad.sum(ad.conv2d(a, k, c, stride, padding) * ad.constant(proj))), [x, w, b]
        return (lambda a, k: ad.sum(ad.conv2d(a, k, None, stride, padding) * ad.constant(proj))), [x, w]
    return case


def _maxpool(rng):
    # distinct values at least 1e-2 apart so no window straddles a tie
    x = rng.permutation(2 * 2 * 6 * 5).reshape(2, 2, 6, 5) * 1e-2 + rng.normal(size=(2, 2, 6, 5)) * 1e-4
    out_shape = ad.maxpool2d(x, 3, 2).shape
    proj = rng.normal(size=out_shape)
    return (lambda a: ad.sum(ad.maxpool2d(a, 3, 2) * ad.constant(proj))), [x]


def _batchnorm(shape, mode):
    def case(rng):
        c = shape[1]
        x = rng.normal(size=shape) * 2.0 + 0.5
        gamma, beta = rng.normal(size=c), rng.normal(size=c)
        running_mean, running_var = rng.normal(size=c), rng.uniform(0.5, 2.0, size=c)
        proj = rng.normal(size=shape)

        def fn(a, g, b):
            # fresh copies: training mode updates the running statistics in place
            out = ad.batchnorm(a, g, b, running_mean.copy(), running_var.copy(), mode)
            return ad.sum(out * ad.constant(proj))
        return fn, [x, gamma, beta]
    return case


def _dropout(rng):
    x = rng.normal(size=(4, 6))
    seed = int(rng.integers(2**32))
    proj = rng.normal(size=(4, 6))

    def fn(a):
        return ad.sum(ad.dropout(a, 0.4, Mode.TRAINING, np.random.default_rng(seed)) * ad.constant(proj))
    return fn, [x]


def _l2(rng):
    x = rng.normal(size=(4, 3))
    proj = rng.normal(size=(4, 3))
    return (lambda a: ad.sum(ad.l2_normalize(a) * ad.constant(proj))), [x]


def _reshape(rng):
    x = rng.normal(size=(2, 6))
    proj = rng.normal(size=(3, 4))
    return (lambda a: ad.sum(ad.reshape(a, (3, 4)) * ad.constant(proj))), [x]


def _flatten(rng):
    x = rng.normal(size=(2, 2, 3))
    proj = rng.normal(size=(2, 6))
    return (lambda a: ad.sum(ad.flatten(a) * ad.constant(proj))), [x]


def _transpose(rng):
    x = rng.normal(size=(2, 5))
    proj = rng.normal(size=(5, 2))
    return (lambda a: ad.sum(ad.transpose(a) * ad.constant(proj))), [x]


PRIMITIVES = {
    "add": _binary(ad.add),
    "add_broadcast": _broadcast_add,
    "sub": _binary(ad.sub),
    "mul": _binary(ad.mul),
    "div": _binary(ad.div, lambda rng: rng.uniform(0.5, 2.0, size=(3, 4)) * rng.choice([-1, 1], size=(3, 4))),
    "scale": _unary(lambda a: ad.scale(a, -2.5)),
    "exp": _unary(ad.exp),
    "log": _unary(ad.log, lambda rng: rng.uniform(0.2, 3.0, size=(3, 4))),
    "sqrt": _unary(ad.sqrt, lambda rng: rng.uniform(0.2, 3.0, size=(3, 4))),
    "square": _unary(ad.square),
    "maximum": _unary(lambda a: ad.maximum(a, 0.1), lambda rng: 0.1 + _away_from_zero(rng, (3, 4))),
    "relu": _unary(ad.relu, lambda rng: _away_from_zero(rng, (3, 4))),
    "softplus": _unary(ad.softplus, lambda rng: rng.normal(size=(3, 4)) * 5.0),
    "elu": _unary(ad.elu, lambda rng: _away_from_zero(rng, (3, 4))),
    "reshape": _reshape,
    "flatten": _flatten,
    "transpose": _transpose,
    "sum": _unary(lambda a: ad.sum(a)),
    "sum_axis": _sum_axis,
    "mean": _mean_axis,
    "index_rows": _index,
    "index_pairs": _pair_index,
    "concat_rows": _concat,
    "matmul": _matmul,
    "dense": _dense,
    "pairwise_self": _pairwise_self,
    "pairwise_cross": _pairwise_cross,
    "l2_normalize": _l2,
    "logsumexp_masked": _logsumexp,
    "softmax_cross_entropy": _softmax_ce,
    "conv2d_stride1": _conv(1),
    "conv2d_stride2": _conv(2),
    "conv2d_1x1_nobias": _conv(2, padding=0, bias=False),
    "maxpool2d": _maxpool,
    "batchnorm_train_2d": _batchnorm((5, 3), Mode.TRAINING),
    "batchnorm_train_4d": _batchnorm((3, 2, 3, 2), Mode.TRAINING),
    "batchnorm_inference": _batchnorm((3, 2, 3, 2), Mode.INFERENCE),
    "dropout_train": _dropout,
}


def _labels(rng, classes=3, per_class=3):
    labels = np.repeat(np.arange(classes), per_class)
    return rng.permutation(labels)


def _standard_softmax(rng):
    x, w, b = rng.normal(size=(8, 4)), rng.normal(size=(5, 4)), rng.normal(size=5)
    labels = rng.integers(0, 5, size=8)
    return (lambda f, ww, bb: standard_softmax_loss(f, labels, ww, bb)), [x, w, b]


def _cosine_softmax(rng):
    x, w = rng.normal(size=(8, 4)), rng.normal(size=(5, 4))
    log_kappa = np.array([rng.uniform(-0.5, 1.5)])
    labels = rng.integers(0, 5, size=8)

    def fn(f, ww, lk):
        return cosine_softmax_loss(ad.l2_normalize(f), labels, ww, lk, kappa_weight_decay=0.1)
    return fn, [x, w, log_kappa]


def _triplet(variant):
    def case(rng):
        x = rng.normal(size=(9, 3))
        labels = _labels(rng)
        cfg = TripletConfig(variant, margin=0.5)
        return (lambda f: triplet_loss(f, labels, cfg)), [x]
    return case


def _magnet(rng):
    x = rng.normal(size=(12, 3))
    labels = _labels(rng, classes=3, per_class=4)
    return (lambda f: magnet_loss(f, labels, MagnetConfig(margin=1.0))), [x]


LOSSES = {
    "standard_softmax": _standard_softmax,
    "cosine_softmax": _cosine_softmax,
    "triplet_soft": _triplet("soft_margin"),
    "triplet_hard": _triplet("hard_margin"),
    "magnet": _magnet,
}


def run_case(builder, seed):
    fn, inputs = builder(np.random.default_rng(seed))
    return ad.grad_check(fn, inputs, h=H, tol=TOL)
