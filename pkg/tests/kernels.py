"""Gradient-check cases: one scalar-valued probe per differentiable input of
every kernel.  Shared by the unit tests and the acceptance suite."""

import numpy as np

from capdet import lora
from capdet import tensor as T
from capdet.rng import Rng
from capdet.tensor import Tensor


def _probe(out, weights):
    # random linear functional so every output element matters
    return T.tsum(T.mul(out, weights.astype(out.dtype)))


def _like(arr, x):
    return Tensor(np.asarray(arr).astype(x.dtype))


def _away_from_zero(r, shape, lo=0.1):
    return (r.choice([-1.0, 1.0], size=shape) * r.uniform(lo, 1.0, size=shape)).astype(np.float32)


def cases(seed):
    """name -> list of (f, x) pairs for ``finite_diff_check``."""
    r = np.random.default_rng(seed)
    n = lambda *s: r.normal(size=s).astype(np.float32)
    out = {}

    def multi(name, op, *inputs):
        """One probe per input: that input varies, the others are constants."""
        w = n(*op(*map(Tensor, inputs)).shape)

        def probe(i):
            def f(t):
                args = [t if j == i else _like(a, t) for j, a in enumerate(inputs)]
                return _probe(op(*args), w)

            return f

        out[name] = [(probe(i), x) for i, x in enumerate(inputs)]

    multi("add", T.add, n(3, 4), n(1, 4))
    multi("sub", T.sub, n(3, 4), n(4))
    multi("mul", T.mul, n(2, 3), n(2, 3))
    multi("div", T.div, n(2, 3), _away_from_zero(r, (2, 3), 0.5))
    multi("exp", T.exp, n(3, 3))
    multi("log", T.log, r.uniform(0.5, 2.0, (3, 3)).astype(np.float32))
    multi("tanh", T.tanh, n(3, 3))
    multi("relu", T.relu, _away_from_zero(r, (3, 4)))
    multi("sigmoid", T.sigmoid, n(3, 3) * 3)
    multi("gelu", T.gelu, n(3, 4) * 2)
    multi("dropout", lambda t: T.dropout(t, 0.3, Rng(seed, "dropout")), n(4, 4))
    multi("matmul", T.matmul, n(2, 3, 4), n(4, 5))
    multi("linear", T.linear, n(2, 3, 4), n(5, 4), n(5))
    multi("reshape", lambda t: T.reshape(t, (4, 3)), n(2, 6))
    multi("transpose", lambda t: T.transpose(t, (2, 0, 1)), n(2, 3, 4))
    multi("swapaxes", lambda t: T.swapaxes(t, 0, 2), n(2, 3, 4))
    idx = (np.array([0, 2, 2]), slice(None))
    multi("getitem", lambda t: T.getitem(t, idx), n(3, 4))
    ids = r.integers(0, 6, size=(2, 3))
    multi("embedding", lambda t: T.embedding(t, ids), n(6, 4))
    multi("concat", lambda a, b: T.concat([a, b], axis=0), n(2, 3), n(4, 3))
    multi("broadcast_to", lambda t: T.broadcast_to(t, (3, 2, 4)), n(2, 1))
    multi("tsum", lambda t: T.tsum(t, axis=1), n(3, 4))
    multi("mean", lambda t: T.mean(t, axis=(0, 2), keepdims=True), n(2, 3, 4))
    multi("softmax_stable", lambda t: T.softmax_stable(t, axis=-1), n(3, 5) * 2)
    multi("log_softmax", lambda t: T.log_softmax(t, axis=0), n(4, 3) * 2)
    multi("layer_norm", T.layer_norm, n(3, 6), 1 + 0.3 * n(6), n(6))
    multi("conv2d", lambda x, k, b: T.conv2d(x, k, b, stride=2, pad=1), n(1, 2, 5, 5), n(3, 2, 3, 3), n(3))

    targets = r.integers(0, 5, size=4)
    targets[0] = 3  # at least one kept position
    out["cross_entropy_logits"] = [(lambda t: T.cross_entropy_logits(t, targets, ignore_id=0), n(4, 5) * 2)]
    ys = r.integers(0, 2, size=5).astype(np.float32)
    out["bce_with_logits"] = [(lambda t: T.bce_with_logits(t, ys), n(5) * 2)]
    out["lora_forward"] = lora_cases(seed)
    return out


def lora_cases(seed):
    """End-to-end gradient probes through a train-mode adapted projection."""
    r = np.random.default_rng(10_000 + seed)
    d, rank = 6, 3
    W = r.normal(size=(d, d)).astype(np.float32)
    A = r.normal(size=(rank, d)).astype(np.float32)
    B = r.normal(size=(d, rank)).astype(np.float32)  # nonzero so A receives gradient
    x = r.normal(size=(4, d)).astype(np.float32)
    w = r.normal(size=(4, d)).astype(np.float32)

    def run(xx, AA, BB):
        layer = lora.LoraLayer("probe", _like(W, xx), AA, BB, rank, alpha=6.0, dropout=0.2)
        return _probe(lora.lora_forward(layer, xx, "train", Rng(seed, "lora-dropout")), w)

    return [
        (lambda t: run(t, _like(A, t), _like(B, t)), x),
        (lambda t: run(_like(x, t), t, _like(B, t)), A),
        (lambda t: run(_like(x, t), _like(A, t), t), B),
    ]


KERNELS = sorted(cases(0))
