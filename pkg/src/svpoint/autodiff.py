"""Reverse-mode differentiation over the small op set the network needs.

Tensors wrap float64 numpy arrays. Recording happens only inside a Tape
context; outside of one, ops run as plain numpy with no graph overhead.
Backward traverses the recorded forward order reversed and accumulates
gradients additively at fan-out points.
"""

from __future__ import annotations

import math

import numpy as np

from .binkernel import sign as _sign_forward
from .binkernel import ste_backward
from .errors import ParameterError, StateError

# ---------------------------------------------------------------------------
# order-insensitive coordinate sums
#
# Sums along a 3-long coordinate axis are the one place where a signed
# permutation of the axes would reorder floating-point additions and break
# bit-level reproducibility.  Sorting the three summands first makes the sum
# a function of the summand multiset only; the trailing +0.0 canonicalizes
# the sign of a zero result.


def sorted_coord_sum(arr: np.ndarray, axis: int = 0) -> np.ndarray:
    """Sum `arr` along an axis of length 3, insensitive to axis order.

    A three-element min/median/max network (cheaper than a generic sort)
    fixes the addition order by value, so any permutation of the three
    summands produces the same bits.
    """
    if arr.shape[axis] != 3:
        raise ParameterError(f"coordinate axis must have length 3, got {arr.shape[axis]}")
    a, b, c = np.moveaxis(arr, axis, 0)
    lo_ab = np.minimum(a, b)
    hi_ab = np.maximum(a, b)
    lo = np.minimum(lo_ab, c)
    mid = np.minimum(hi_ab, np.maximum(lo_ab, c))
    hi = np.maximum(hi_ab, c)
    return ((lo + mid) + hi) + 0.0


# ---------------------------------------------------------------------------
# tape and tensor

_ACTIVE_TAPES: list["Tape"] = []


class Tape:
    """Records primitive applications in forward order for reverse sweep."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPES.pop()
        return False

    def backward(self, loss: "Tensor", loss_grad: float = 1.0) -> None:
        """Seed d(loss) and sweep the recorded nodes in reverse.

        Gradients land in the .grad of every reachable tensor with
        requires_grad, parameters included.
        """
        if not self.nodes:
            raise StateError("backward on a tape with no recorded forward")
        if loss._grad_fn is None and not loss.requires_grad:
            raise StateError("loss tensor was not recorded on this tape")
        loss.grad = np.broadcast_to(np.float64(loss_grad), loss.data.shape).copy()
        for node in reversed(self.nodes):
            if node.grad is not None and node._grad_fn is not None:
                node._grad_fn(node.grad)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._grad_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all routing through the module-level primitives
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _make(data: np.ndarray, parents: tuple[Tensor, ...], grad_fn) -> Tensor:
    tape = _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None
    out = Tensor(data)
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._grad_fn = grad_fn
        tape.nodes.append(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(out, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _make(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out, (a, b), bw)


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0.0)

    def bw(g):
        _accumulate(x, g * (x.data > 0))  # subgradient 0 at the kink

    return _make(out, (x,), bw)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = 1.0 / (1.0 + np.exp(-x.data))

    def bw(g):
        _accumulate(x, g * s * (1.0 - s))

    return _make(s, (x,), bw)


def exp(x) -> Tensor:
    x = as_tensor(x)
    e = np.exp(x.data)

    def bw(g):
        _accumulate(x, g * e)

    return _make(e, (x,), bw)


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    r = np.sqrt(x.data)

    def bw(g):
        _accumulate(x, g * 0.5 / r)

    return _make(r, (x,), bw)


def sign_ste(x, clip: float = 1.2) -> Tensor:
    """Elementwise Sign with the clipped straight-through backward rule."""
    x = as_tensor(x)
    out = _sign_forward(x.data)
    saved = x.data

    def bw(g):
        _accumulate(x, ste_backward(g, saved, clip=clip))

    return _make(out, (x,), bw)


# ---------------------------------------------------------------------------
# shape / reduction primitives


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)
    old = x.data.shape

    def bw(g):
        _accumulate(x, g.reshape(old))

    return _make(out, (x,), bw)


def concat(parts, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accumulate(p, g[tuple(sl)])

    return _make(out, tuple(parts), bw)


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.data.shape).copy())

    return _make(out, (x,), bw)


def tmean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size // max(out.size, 1)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g / count, x.data.shape).copy())

    return _make(out, (x,), bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data @ b.data

    def bw(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _make(out, (a, b), bw)


def pool_groups(x, size: int, mode: str) -> Tensor:
    """Pool contiguous groups of `size` along the last axis.

    (..., G*size) -> (..., G);  mode 'mean' or 'max'.
    """
    x = as_tensor(x)
    n = x.data.shape[-1]
    if size < 1 or n % size != 0:
        raise ParameterError(f"site count {n} not divisible by group size {size}")
    grouped = x.data.reshape(x.data.shape[:-1] + (n // size, size))
    if mode == "mean":
        out = grouped.mean(axis=-1)

        def bw(g):
            _accumulate(x, np.repeat(g / size, size, axis=-1))

    elif mode == "max":
        arg = grouped.argmax(axis=-1)
        out = np.take_along_axis(grouped, arg[..., None], axis=-1)[..., 0]

        def bw(g):
            gg = np.zeros_like(grouped)
            np.put_along_axis(gg, arg[..., None], g[..., None], axis=-1)
            _accumulate(x, gg.reshape(x.data.shape))

    else:
        raise ParameterError(f"unknown pooling mode {mode!r}")
    return _make(out, (x,), bw)


def expand_groups(x, size: int) -> Tensor:
    """Repeat each entry of the last axis `size` times: (..., G) -> (..., G*size)."""
    x = as_tensor(x)
    out = np.repeat(x.data, size, axis=-1)

    def bw(g):
        _accumulate(x, g.reshape(g.shape[:-1] + (x.data.shape[-1], size)).sum(axis=-1))

    return _make(out, (x,), bw)


def take_sites(x, idx: np.ndarray) -> Tensor:
    """Gather columns of the last axis; backward scatter-adds."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    out = x.data[..., idx]
    n_cols = x.data.shape[-1]

    def bw(g):
        acc = np.zeros(g.shape[:-1] + (n_cols,), dtype=g.dtype)
        if idx.size:
            order = np.argsort(idx, kind="stable")
            sidx = idx[order]
            starts = np.flatnonzero(np.r_[True, sidx[1:] != sidx[:-1]])
            sums = np.add.reduceat(g[..., order], starts, axis=-1)
            acc[..., sidx[starts]] = sums
        _accumulate(x, acc)

    return _make(out, (x,), bw)


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    out = np.transpose(x.data, axes)
    inverse = None if axes is None else np.argsort(axes)

    def bw(g):
        _accumulate(x, np.transpose(g, inverse))

    return _make(out, (x,), bw)


# ---------------------------------------------------------------------------
# vector-feature primitives (coordinate axis first, length 3)


def vector_map_raw(v, w) -> Tensor:
    """Channel-mixing map shared across coordinates: (3,q,N),(q,p) -> (3,p,N)."""
    v, w = as_tensor(v), as_tensor(w)
    if v.data.shape[1] != w.data.shape[0]:
        raise ParameterError(
            f"vector channels {v.data.shape[1]} do not match weight rows {w.data.shape[0]}"
        )
    out = np.einsum("cqn,qp->cpn", v.data, w.data)

    def bw(g):
        _accumulate(v, np.einsum("cpn,qp->cqn", g, w.data))
        _accumulate(w, np.einsum("cqn,cpn->qp", v.data, g))

    return _make(out, (v, w), bw)


def pair_contract(a, b) -> Tensor:
    """Per-site contraction over the coordinate axis: (3,a,N),(3,q,N) -> (a,q,N).

    The 3-term sums are order-insensitive so that signed-permutation
    rotations of both factors reproduce the output bit for bit.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape[0] != 3 or b.data.shape[0] != 3 or a.data.shape[2] != b.data.shape[2]:
        raise ParameterError(f"bad contraction shapes {a.data.shape} x {b.data.shape}")
    prod = a.data[:, :, None, :] * b.data[:, None, :, :]  # (3, a, q, N)
    out = sorted_coord_sum(prod, axis=0)

    def bw(g):
        _accumulate(a, np.einsum("aqn,cqn->can", g, b.data))
        _accumulate(b, np.einsum("aqn,can->cqn", g, a.data))

    return _make(out, (a, b), bw)


def vector_norms(v) -> Tensor:
    """Per-channel per-site Euclidean norms: (3,q,N) -> (q,N), order-insensitive."""
    v = as_tensor(v)
    sq = sorted_coord_sum(v.data * v.data, axis=0)
    out = np.sqrt(sq)

    def bw(g):
        denom = np.where(out > 0, out, 1.0)
        _accumulate(v, (g / denom)[None, :, :] * v.data * (out > 0)[None, :, :])

    return _make(out, (v,), bw)


# ---------------------------------------------------------------------------
# fused normalization (training mode)
#
# Composing normalization from elementwise primitives works but costs a
# dozen full-size passes per call; these fused forms do the textbook
# backward in a few.


def batch_norm_train(x, gain, bias, eps: float):
    """Standardize scalar channels over the site axis with learned affine.

    Returns (out, batch_mean, batch_var); the stats are plain (p,) arrays
    for the caller's running averages.
    """
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data[:, None] + bias.data[:, None]
    count = x.data.shape[1]

    def bw(g):
        _accumulate(gain, (g * xhat).sum(axis=1))
        _accumulate(bias, g.sum(axis=1))
        gx = g * gain.data[:, None]
        _accumulate(
            x,
            inv / count * (
                count * gx
                - gx.sum(axis=1, keepdims=True)
                - xhat * (gx * xhat).sum(axis=1, keepdims=True)
            ),
        )

    return _make(out, (x, gain, bias), bw), mu[:, 0], var[:, 0]


def vector_norm_scale_train(v, log_scale, eps: float):
    """Scale each vector channel by exp(log_scale) / (mean site norm + eps).

    Directions never change, so the op is equivariant. Returns
    (out, mean_norms) with the (q,) batch statistic for running averages.
    """
    v, log_scale = as_tensor(v), as_tensor(log_scale)
    norms = np.sqrt(sorted_coord_sum(v.data * v.data, axis=0))  # (q, N)
    mean_norm = norms.mean(axis=1)
    denom = mean_norm + eps
    coef = np.exp(log_scale.data) / denom  # (q,)
    out = v.data * coef[None, :, None]
    count = v.data.shape[2]

    def bw(g):
        a = (g * v.data).sum(axis=(0, 2))  # (q,) inner product with the output direction
        _accumulate(log_scale, a * coef)
        through_mean = (a * coef / denom / count)[None, :, None]
        safe = np.where(norms > 0, norms, 1.0)[None, :, :]
        _accumulate(v, g * coef[None, :, None] - through_mean * (v.data / safe))

    return _make(out, (v, log_scale), bw), mean_norm


# ---------------------------------------------------------------------------
# precision-mode-aware linear layers
#
# These accept any object with weight/mode/beta/gamma (and optionally bias)
# fields. Weights are stored in_dim x out_dim. The binary forwards use
# sign_ste so the same code path trains with straight-through gradients;
# their values match the packed integer kernels bit for bit because ±1
# dot products are exact in float64.


def scalar_linear(x, params) -> Tensor:
    """Linear layer on scalar features (in, N) -> (out, N), honoring precision mode."""
    x = as_tensor(x)
    w = as_tensor(params.weight)
    if x.data.shape[0] != w.data.shape[0]:
        raise ParameterError(
            f"input channels {x.data.shape[0]} do not match weight rows {w.data.shape[0]}"
        )
    mode = getattr(params, "mode", "full_precision")
    if mode == "full_precision":
        out = matmul(transpose(w), x)
        bias = getattr(params, "bias", None)
        if bias is not None:
            out = add(out, reshape(as_tensor(bias), (-1, 1)))
        return out
    if mode == "binary_full":
        beta = params.beta
        xs = sign_ste(x if beta is None else sub(x, reshape(as_tensor(beta), (-1, 1))))
        out = matmul(transpose(sign_ste(w)), xs)
    elif mode == "binary_weight":
        out = matmul(transpose(sign_ste(w)), x)
    else:
        raise ParameterError(f"unknown precision mode {mode!r}")
    gamma = params.gamma
    if gamma is not None:
        out = mul(out, reshape(as_tensor(gamma), (-1, 1)))
    return out


def vector_linear(v, params) -> Tensor:
    """Channel-mixing linear on vector features (3, q, N) -> (3, q', N).

    Only full_precision and binary_weight are legal here: shifting or
    binarizing the activations themselves would break equivariance, and a
    bias would translate vectors.
    """
    v = as_tensor(v)
    w = as_tensor(params.weight)
    mode = getattr(params, "mode", "full_precision")
    if mode == "full_precision":
        return vector_map_raw(v, w)
    if mode == "binary_weight":
        out = vector_map_raw(v, sign_ste(w))
        gamma = params.gamma
        if gamma is not None:
            out = mul(out, reshape(as_tensor(gamma), (1, -1, 1)))
        return out
    raise ParameterError(f"vector features cannot use precision mode {mode!r}")


# ---------------------------------------------------------------------------
# loss


def cross_entropy_logits(logits, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy over a batch; logits (C, B), labels (B,)."""
    logits = as_tensor(logits)
    z = logits.data
    labels = np.asarray(labels, dtype=np.intp)
    if z.ndim != 2 or labels.shape != (z.shape[1],):
        raise ParameterError(f"logits {z.shape} incompatible with labels {labels.shape}")
    zmax = z.max(axis=0, keepdims=True)
    ez = np.exp(z - zmax)
    log_probs = (z - zmax) - np.log(ez.sum(axis=0, keepdims=True))
    batch = z.shape[1]
    loss = -log_probs[labels, np.arange(batch)].mean()
    softmax = ez / ez.sum(axis=0, keepdims=True)

    def bw(g):
        gz = softmax.copy()
        gz[labels, np.arange(batch)] -= 1.0
        _accumulate(logits, g * gz / batch)

    return _make(np.float64(loss), (logits,), bw)


# ---------------------------------------------------------------------------
# parameters and optimization


class ParamStore:
    """Named parameter tensors plus Adam state."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.moment1: dict[str, np.ndarray] = {}
        self.moment2: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self.params:
            raise ParameterError(f"duplicate parameter name {name!r}")
        self.params[name] = tensor
        return tensor

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def reset_optimizer(self) -> None:
        self.moment1.clear()
        self.moment2.clear()
        self.step_count = 0

    def items(self):
        return self.params.items()


def adam_step(
    store: ParamStore,
    grads: dict[str, np.ndarray] | None = None,
    lr: float = 1e-3,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update over every parameter in the store.

    `grads` defaults to the .grad fields populated by Tape.backward; a
    parameter with no gradient contributes a zero gradient.
    """
    b1, b2 = betas
    store.step_count += 1
    t = store.step_count
    for name, p in store.params.items():
        if grads is not None:
            g = grads.get(name)
        else:
            g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise ParameterError(
                f"gradient shape {g.shape} does not match parameter {name!r} {p.data.shape}"
            )
        m = store.moment1.setdefault(name, np.zeros_like(p.data))
        v = store.moment2.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


def lr_schedule(
    kind: str,
    epoch: int,
    total: int,
    base_lr: float,
    step: int = 20,
    decay: float = 0.7,
) -> float:
    """Cosine annealing toward 0, or stepwise decay every `step` epochs."""
    if epoch > total:
        raise ParameterError(f"epoch {epoch} past schedule total {total}")
    if kind == "cosine":
        return base_lr * (1.0 + math.cos(math.pi * epoch / total)) / 2.0
    if kind == "multistep":
        return base_lr * decay ** (epoch // step)
    raise ParameterError(f"unknown schedule kind {kind!r}")


# ---------------------------------------------------------------------------
# gradient checking


def finite_difference_check(op, inputs: list[Tensor], h: float = 1e-6) -> float:
    """Max deviation between tape gradients and central differences.

    `op` maps the input tensors to a scalar Tensor. The deviation is the
    largest elementwise |ad - fd| normalized by the largest gradient
    magnitude seen, so a 1e-4 bound means 4 matching leading digits on
    unit-scale problems.
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        loss = op(*inputs)
    tape.backward(loss)
    worst = 0.0
    for t in inputs:
        ad = t.grad if t.grad is not None else np.zeros_like(t.data)
        fd = np.zeros_like(t.data)
        for ix in np.ndindex(*t.data.shape):
            orig = t.data[ix]
            t.data[ix] = orig + h
            hi = float(op(*inputs).data)
            t.data[ix] = orig - h
            lo = float(op(*inputs).data)
            t.data[ix] = orig
            fd[ix] = (hi - lo) / (2 * h)
        scale = max(np.abs(ad).max(initial=0.0), np.abs(fd).max(initial=0.0), 1e-12)
        worst = max(worst, float(np.abs(ad - fd).max(initial=0.0)) / scale)
    return worst
