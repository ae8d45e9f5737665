"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is rebuilt on every forward pass (define-by-run) and discarded after
``backward``. Every op checks its output for NaN/Inf so numeric trouble
surfaces at the op that produced it, not three modules later.
"""
from __future__ import annotations

import numpy as np

from .errors import NumericError, ShapeError

_NORM_FLOOR = 1e-12


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by {op}")


class Tensor:
    """A flat row-major float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into .grad of every requires_grad node."""
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar root")
        topo: list[Tensor] = []
        seen: set[int] = set()

        def visit(node: Tensor) -> None:
            if id(node) in seen or not node.requires_grad:
                return
            seen.add(id(node))
            for parent in node._parents:
                visit(parent)
            topo.append(node)

        visit(self)
        flowing: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            grad = flowing.get(id(node))
            if grad is None:
                continue
            if node._backward is not None:
                parent_grads = node._backward(grad)
                for parent, pgrad in zip(node._parents, parent_grads):
                    if not parent.requires_grad or pgrad is None:
                        continue
                    slot = flowing.get(id(parent))
                    if slot is None:
                        flowing[id(parent)] = pgrad.astype(np.float64, copy=True)
                    else:
                        slot += pgrad
        for node in topo:
            grad = flowing.get(id(node))
            if grad is None:
                continue
            _check_finite(grad, "backward")
            if node.grad is None:
                node.grad = grad.copy()
            else:
                node.grad += grad

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _wrap(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data, any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# op set


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _wrap(out, (a, b), backward, "matmul")


def bmm(a, b) -> Tensor:
    """Batched matmul: [B,n,m] @ [B,m,p] -> [B,n,p]."""
    a, b = as_tensor(a), as_tensor(b)
    if (
        a.data.ndim != 3
        or b.data.ndim != 3
        or a.shape[0] != b.shape[0]
        or a.shape[2] != b.shape[1]
    ):
        raise ShapeError(f"bmm: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        return np.matmul(g, b.data.swapaxes(1, 2)), np.matmul(a.data.swapaxes(1, 2), g)

    return _wrap(out, (a, b), backward, "bmm")


def add(a, b) -> Tensor:
    """Elementwise add; also supports a 1-D bias broadcast to the last axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        def backward(g):
            return g, g
    elif b.data.ndim == 1 and a.shape and a.shape[-1] == b.shape[0]:
        def backward(g):
            return g, g.reshape(-1, b.shape[0]).sum(axis=0)
    else:
        raise ShapeError(f"add: {a.shape} + {b.shape}")
    return _wrap(a.data + b.data, (a, b), backward, "add")


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)

    def backward(g):
        return (g * s,)

    return _wrap(a.data * s, (a,), backward, "scale")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0.0

    def backward(g):
        return (g * mask,)

    return _wrap(np.where(mask, a.data, 0.0), (a,), backward, "relu")


def l2_normalize(a) -> Tensor:
    """Normalize along the last axis. A zero row is a hard error (collapse)."""
    a = as_tensor(a)
    norms = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    if np.any(norms < _NORM_FLOOR):
        raise NumericError("l2_normalize: zero (or collapsed) input vector")
    out = a.data / norms

    def backward(g):
        # rows map through (I - u u^T) / ||v||
        inner = (out * g).sum(axis=-1, keepdims=True)
        return ((g - out * inner) / norms,)

    return _wrap(out, (a,), backward, "l2_normalize")


def softmax_cross_entropy(logits, targets) -> Tensor:
    """Mean over rows of -log softmax(logits)[target]."""
    logits = as_tensor(logits)
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be 2-D, got {logits.shape}")
    tgt = np.asarray(targets, dtype=np.int64).reshape(-1)
    n, m = logits.shape
    if tgt.shape[0] != n or tgt.min(initial=0) < 0 or tgt.max(initial=0) >= m:
        raise ShapeError("softmax_cross_entropy: bad targets")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    expz = np.exp(shifted)
    z = expz.sum(axis=1)
    log_probs = shifted - np.log(z)[:, None]
    losses = -log_probs[np.arange(n), tgt]
    out = np.asarray(losses.mean())

    def backward(g):
        d = expz / z[:, None]
        d[np.arange(n), tgt] -= 1.0
        return (d * (float(g) / n),)

    return _wrap(out, (logits,), backward, "softmax_cross_entropy")


def multilabel_cross_entropy(logits, indices, exclude_targets: bool = False) -> Tensor:
    """Mean over rows of -(1/k) * sum over target columns of log softmax.

    With ``exclude_targets`` each target competes only against non-target
    columns (plus itself) in the denominator, instead of the full row.
    Target indices must be unique within a row.
    """
    logits = as_tensor(logits)
    idx = np.asarray(indices, dtype=np.int64)
    if logits.data.ndim != 2 or idx.ndim != 2 or idx.shape[0] != logits.shape[0]:
        raise ShapeError(
            f"multilabel_cross_entropy: logits {logits.shape}, indices {idx.shape}"
        )
    n, m = logits.shape
    k = idx.shape[1]
    if k < 1 or idx.min() < 0 or idx.max() >= m:
        raise ShapeError("multilabel_cross_entropy: bad indices")
    rows = np.arange(n)[:, None]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    expz = np.exp(shifted)

    if not exclude_targets:
        z = expz.sum(axis=1)
        log_probs = shifted - np.log(z)[:, None]
        out = np.asarray((-log_probs[rows, idx]).mean(axis=1).mean())

        def backward(g):
            d = expz / z[:, None]
            np.add.at(d, (rows, idx), -1.0 / k)
            return (d * (float(g) / n),)

        return _wrap(out, (logits,), backward, "multilabel_cross_entropy")

    multihot = np.zeros((n, m), dtype=np.float64)
    multihot[rows, idx] = 1.0
    z_neg = (expz * (1.0 - multihot)).sum(axis=1)  # [n]
    e_t = expz[rows, idx]  # [n, k]
    denom = e_t + z_neg[:, None]
    per_target = np.log(denom) - shifted[rows, idx]
    out = np.asarray(per_target.mean(axis=1).mean())

    def backward(g):
        d = np.zeros((n, m), dtype=np.float64)
        np.add.at(d, (rows, idx), e_t / denom - 1.0)
        inv_sum = (1.0 / denom).sum(axis=1)  # [n]
        d += expz * (1.0 - multihot) * inv_sum[:, None]
        return (d * (float(g) / (n * k)),)

    return _wrap(out, (logits,), backward, "multilabel_cross_entropy")


def center_rows(a) -> Tensor:
    """Subtract the mean along the last axis (per-sample centering)."""
    a = as_tensor(a)
    out = a.data - a.data.mean(axis=-1, keepdims=True)

    def backward(g):
        return (g - g.mean(axis=-1, keepdims=True),)

    return _wrap(out, (a,), backward, "center_rows")


def instance_norm(x, eps: float = 1e-6) -> Tensor:
    """Per-sample, per-channel spatial normalization of an NCHW tensor.

    Statistics are computed over each sample's own spatial extent, so there is
    no train/eval divergence and no batch coupling."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"instance_norm expects [B,C,H,W], got {x.shape}")
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    var = x.data.var(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv

    def backward(g):
        gm = g.mean(axis=(2, 3), keepdims=True)
        gx = (g * xhat).mean(axis=(2, 3), keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _wrap(xhat, (x,), backward, "instance_norm")


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: empty input")
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        slicer = [slice(None)] * g.ndim
        grads = []
        for i in range(len(ts)):
            slicer[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(slicer)])
        return tuple(grads)

    return _wrap(out, tuple(ts), backward, "concat")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.shape),)

    return _wrap(out, (a,), backward, "reshape")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
        axes_norm = tuple(ax % a.data.ndim for ax in axes)

    def backward(g):
        if axis is None:
            return (np.full(a.shape, float(g) / count),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axes_norm)
        return (np.broadcast_to(gg, a.shape) / count,)

    return _wrap(np.asarray(out), (a,), backward, "mean")


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution, NCHW layout, square stride/padding."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: x {x.shape}, w {w.shape}")
    bt = as_tensor(b) if b is not None else None
    if bt is not None and (bt.data.ndim != 1 or bt.shape[0] != w.shape[0]):
        raise ShapeError(f"conv2d: bias {bt.shape} vs {w.shape[0]} filters")
    bsz, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d: kernel larger than padded input")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    sb, sc, sh, sw = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(bsz, cin, kh, kw, ho, wo),
        strides=(sb, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    cols = np.ascontiguousarray(windows).reshape(bsz, cin * kh * kw, ho * wo)
    w_mat = w.data.reshape(cout, cin * kh * kw)
    out = np.matmul(w_mat, cols).reshape(bsz, cout, ho, wo)
    if bt is not None:
        out = out + bt.data[None, :, None, None]

    def backward(g):
        g_mat = g.reshape(bsz, cout, ho * wo)
        dw = np.einsum("bop,bkp->ok", g_mat, cols).reshape(w.shape)
        dcols = np.matmul(w_mat.T, g_mat).reshape(bsz, cin, kh, kw, ho, wo)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride] += dcols[
                    :, :, i, j
                ]
        dx = dxp[:, :, padding : padding + h, padding : padding + wd]
        if bt is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    parents = (x, w) if bt is None else (x, w, bt)
    return _wrap(out, parents, backward, "conv2d")


#: public op set, used by the gradient-check property suite
OPS = {
    "matmul": matmul,
    "bmm": bmm,
    "add": add,
    "scale": scale,
    "relu": relu,
    "l2_normalize": l2_normalize,
    "softmax_cross_entropy": softmax_cross_entropy,
    "multilabel_cross_entropy": multilabel_cross_entropy,
    "center_rows": center_rows,
    "instance_norm": instance_norm,
    "concat": concat,
    "reshape": reshape,
    "mean": mean,
    "conv2d": conv2d,
}


def grad_check(f, params, eps: float = 1e-5) -> float:
    """Compare analytic gradients of a scalar function against central differences.

    ``f`` must rebuild its graph from ``params`` on every call. Returns the max
    over all parameter entries of |analytic - fd| / (|analytic| + |fd| + 1e-12).
    """
    if not (0.0 < eps <= 1e-3):
        raise ValueError(f"grad_check: eps must be in (0, 1e-3], got {eps}")
    for p in params:
        p.zero_grad()
    out = f()
    out.backward()
    analytic = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params
    ]
    worst = 0.0
    for p, an in zip(params, analytic):
        flat = p.data.reshape(-1)
        an_flat = an.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = f().item()
            flat[i] = orig - eps
            f_minus = f().item()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * eps)
            err = abs(an_flat[i] - fd) / (abs(an_flat[i]) + abs(fd) + 1e-12)
            worst = max(worst, err)
    return worst
