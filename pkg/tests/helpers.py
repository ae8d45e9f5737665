"""Shared test utilities: independent loss oracles and per-op grad-check setups.

The oracles here are deliberately written as explicit loops over exponential
sums, sharing no code with the package's loss path.
"""
import math

import numpy as np

from knnmoco import autodiff as ad
from knnmoco.autodiff import Tensor
from knnmoco.bank import DualQueue
from knnmoco.losses import LossBatch


def unit_rows(rng, n, d):
    rows = rng.standard_normal((n, d))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def make_bank(rng, capacity, dim_h, dim_g, fill=True):
    bank = DualQueue(capacity, dim_h, dim_g, rng)
    if fill and capacity > 0:
        bank.enqueue(unit_rows(rng, capacity, dim_h), rng.standard_normal((capacity, dim_g)))
    return bank


def random_loss_setup(rng, b, n_views, capacity, dim_h=6, dim_g=5, tau=None,
                      lam=0.4, k=2, with_graph=False):
    """Random LossBatch + filled bank. With ``with_graph`` the positives are
    l2-normalized leaf parameters, so gradients can be checked end to end."""
    tau = tau if tau is not None else float(rng.uniform(0.1, 1.0))
    anchors = unit_rows(rng, b, dim_h)
    raw = rng.standard_normal((b, n_views + 1, dim_h))
    if with_graph:
        leaf = Tensor(raw, requires_grad=True)
        positives = ad.l2_normalize(leaf)
    else:
        leaf = None
        positives = Tensor(raw / np.linalg.norm(raw, axis=2, keepdims=True))
    pre = unit_rows(rng, b * (n_views + 1), dim_g)
    bank = make_bank(rng, capacity, dim_h, dim_g)
    batch = LossBatch(anchors, positives, pre, tau=tau, lam=lam, k=k)
    return batch, bank, leaf


def brute_force_instance_loss(anchors, positives, q_h, tau):
    """Explicit Eq.-1-style sums: mean over positives of
    -log( exp(p.a/tau) / (exp(p.a/tau) + sum_j exp(p.q_j/tau)) )."""
    b, v, _ = positives.shape
    total = 0.0
    for i in range(b):
        for u in range(v):
            p = positives[i, u]
            pos_term = math.exp(float(p @ anchors[i]) / tau)
            neg_sum = 0.0
            for j in range(q_h.shape[0]):
                neg_sum += math.exp(float(p @ q_h[j]) / tau)
            total += -math.log(pos_term / (pos_term + neg_sum))
    return total / (b * v)


def brute_force_nn_loss(positives, q_h, indices, tau, mode="include_targets"):
    """Explicit Eq.-2-style sums over the mined neighbor set."""
    b, v, _ = positives.shape
    flat = positives.reshape(b * v, -1)
    total = 0.0
    for row in range(flat.shape[0]):
        p = flat[row]
        logits = [float(p @ q_h[j]) / tau for j in range(q_h.shape[0])]
        targets = list(indices[row])
        acc = 0.0
        for t in targets:
            pos_term = math.exp(logits[t])
            if mode == "include_targets":
                denom = sum(math.exp(z) for z in logits)
            else:
                denom = pos_term + sum(
                    math.exp(z) for j, z in enumerate(logits) if j not in targets
                )
            acc += -math.log(pos_term / denom)
        total += acc / len(targets)
    return total / flat.shape[0]


# ---------------------------------------------------------------------------
# grad-check harness: one random scalar-valued setup per registered op


def _scalarize(t):
    """Fixed irregular-weight functional: non-uniform output gradients with no
    incidental exact zeros (those would turn the relative error into noise)."""
    flat = ad.reshape(t, (1, t.size))
    w = (np.cos(np.arange(t.size) * 1.7) + 0.21).reshape(t.size, 1)
    return ad.mean(ad.matmul(flat, w))


def _away_from_kink(rng, shape, margin=0.15):
    x = rng.standard_normal(shape)
    return x + np.sign(x) * margin


def op_grad_setups(rng):
    """List of (name, f, params) triples covering every op in ad.OPS."""
    setups = []

    a = Tensor(rng.standard_normal((4, 3)), True)
    b = Tensor(rng.standard_normal((3, 5)), True)
    setups.append(("matmul", lambda a=a, b=b: _scalarize(ad.matmul(a, b)), [a, b]))

    a = Tensor(rng.standard_normal((2, 3, 4)), True)
    b = Tensor(rng.standard_normal((2, 4, 2)), True)
    setups.append(("bmm", lambda a=a, b=b: _scalarize(ad.bmm(a, b)), [a, b]))

    a = Tensor(rng.standard_normal((3, 4)), True)
    b = Tensor(rng.standard_normal((3, 4)), True)
    setups.append(("add", lambda a=a, b=b: _scalarize(ad.add(a, b)), [a, b]))

    a = Tensor(rng.standard_normal((3, 4)), True)
    bias = Tensor(rng.standard_normal(4), True)
    setups.append(("add_bias", lambda a=a, b=bias: _scalarize(ad.add(a, b)), [a, bias]))

    a = Tensor(rng.standard_normal((2, 5)), True)
    setups.append(("scale", lambda a=a: _scalarize(ad.scale(a, 1.7)), [a]))

    a = Tensor(_away_from_kink(rng, (4, 4)), True)
    setups.append(("relu", lambda a=a: _scalarize(ad.relu(a)), [a]))

    a = Tensor(unit_rows(rng, 3, 5) * 2.0, True)
    setups.append(("l2_normalize", lambda a=a: _scalarize(ad.l2_normalize(a)), [a]))

    logits = Tensor(rng.standard_normal((4, 6)), True)
    targets = rng.integers(0, 6, size=4)
    setups.append((
        "softmax_cross_entropy",
        lambda l=logits, t=targets: ad.softmax_cross_entropy(l, t),
        [logits],
    ))

    logits = Tensor(rng.standard_normal((3, 7)), True)
    idx = np.stack([rng.permutation(7)[:3] for _ in range(3)])
    setups.append((
        "multilabel_ce_include",
        lambda l=logits, i=idx: ad.multilabel_cross_entropy(l, i, False),
        [logits],
    ))
    logits2 = Tensor(rng.standard_normal((3, 7)), True)
    setups.append((
        "multilabel_ce_exclude",
        lambda l=logits2, i=idx: ad.multilabel_cross_entropy(l, i, True),
        [logits2],
    ))

    a = Tensor(rng.standard_normal((3, 5)), True)
    setups.append(("center_rows", lambda a=a: _scalarize(ad.center_rows(a)), [a]))

    a = Tensor(rng.standard_normal((2, 3, 4, 4)), True)
    setups.append(("instance_norm", lambda a=a: _scalarize(ad.instance_norm(a)), [a]))

    a = Tensor(rng.standard_normal((2, 3)), True)
    b = Tensor(rng.standard_normal((2, 2)), True)
    setups.append(("concat", lambda a=a, b=b: _scalarize(ad.concat([a, b], axis=1)), [a, b]))

    a = Tensor(rng.standard_normal((2, 6)), True)
    setups.append(("reshape", lambda a=a: _scalarize(ad.reshape(a, (3, 4))), [a]))

    a = Tensor(rng.standard_normal((3, 4, 2)), True)
    setups.append(("mean_all", lambda a=a: ad.mean(a), [a]))
    a2 = Tensor(rng.standard_normal((3, 4, 2)), True)
    setups.append(("mean_axis", lambda a=a2: _scalarize(ad.mean(a, axis=(1,))), [a2]))

    x = Tensor(rng.standard_normal((2, 2, 5, 5)), True)
    w = Tensor(rng.standard_normal((3, 2, 3, 3)) * 0.5, True)
    bias = Tensor(rng.standard_normal(3), True)
    setups.append((
        "conv2d",
        lambda x=x, w=w, b=bias: _scalarize(ad.conv2d(x, w, b, stride=2, padding=1)),
        [x, w, bias],
    ))

    return setups
