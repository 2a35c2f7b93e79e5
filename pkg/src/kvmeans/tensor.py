"""Dense tensors on numpy with reverse-mode automatic differentiation.

Forward ops run eagerly on numpy arrays. When a `Tape` is active and an
input is connected to a parameter, the op is recorded; `backward` replays
the tape in reverse and accumulates gradients into parameter `.grad`
buffers (repeated backward calls add; `zero_grad` resets). Ops executed
outside a tape, or under `no_grad()`, are plain numpy and carry no graph.

Default dtype is float64; pass float32 data for speed where tolerances
allow. All reductions use numpy's fixed-order kernels, so identical
inputs produce bit-identical outputs within one build.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

__all__ = [
    "Tensor", "Tape", "ShapeError", "no_grad", "backward", "zero_grad",
    "tensor", "zeros", "ones", "randn",
    "matmul", "permute", "transpose_last", "reshape", "concat", "narrow",
    "gather_rows", "scatter_add_rows", "embedding",
    "layer_norm", "masked_softmax", "cross_entropy",
    "elu", "relu_squared", "sigmoid", "exp", "log", "sqrt",
    "rope_partial", "l2norm", "clamp_min",
]

NEG_INF = float("-inf")


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


# ---------------------------------------------------------------------------
# Tape machinery

_TAPE_STACK: list["Tape"] = []
_GRAD_ENABLED = True


class Tape:
    """Ordered record of executed ops.

    Execution order is a valid topological order by construction: a result
    is appended only after all ops producing its inputs have run.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False

    def __len__(self) -> int:
        return len(self.nodes)


@contextmanager
def no_grad():
    """Disable op recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """Dense real array, optionally carrying a gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_needs_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] | None = None
        self._vjp = None
        self._needs_grad = requires_grad

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=np.float64, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=np.float64, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


def randn(rng: np.random.Generator, shape, std: float = 1.0, dtype=np.float64,
          requires_grad: bool = False) -> Tensor:
    return Tensor((rng.standard_normal(shape) * std).astype(dtype),
                  requires_grad=requires_grad)


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    """Wrap an op result, recording it on the active tape when needed."""
    out = Tensor(data)
    if _GRAD_ENABLED and _TAPE_STACK and any(p._needs_grad for p in parents):
        out._needs_grad = True
        out._parents = parents
        out._vjp = vjp
        _TAPE_STACK[-1].nodes.append(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(param) into `.grad` of every reachable parameter.

    `loss` must be a scalar on `tape`. Grads add across calls; use
    `zero_grad` to reset.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    seed = np.ones_like(loss.data)
    if loss._parents is None:
        if loss.requires_grad:
            if loss.grad is None:
                loss.grad = np.zeros_like(loss.data)
            loss.grad += seed
        return
    pending: dict[int, np.ndarray] = {id(loss): seed}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent._needs_grad:
                continue
            if parent._parents is None:
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += pg
            else:
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg


def zero_grad(params) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# Arithmetic

def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = _coerce(a)
        s = float(b)
        return _make(a.data + s, (a,), lambda g: (_unbroadcast(g, a.shape),))
    if not isinstance(a, Tensor):
        return add(b, a)
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape),
                                         _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = _coerce(a)
        s = float(b)
        return _make(a.data - s, (a,), lambda g: (_unbroadcast(g, a.shape),))
    if not isinstance(a, Tensor):
        s = float(a)
        return _make(s - b.data, (b,), lambda g: (_unbroadcast(-g, b.shape),))
    out = a.data - b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape),
                                         _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = _coerce(a)
        s = float(b)
        return _make(a.data * s, (a,), lambda g: (_unbroadcast(g * s, a.shape),))
    if not isinstance(a, Tensor):
        return mul(b, a)
    out = a.data * b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape),
                                         _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return mul(a, 1.0 / float(b))
    if not isinstance(a, Tensor):
        s = float(a)
        out = s / b.data
        return _make(out, (b,), lambda g: (_unbroadcast(-g * s / (b.data * b.data),
                                                        b.shape),))
    out = a.data / b.data
    def vjp(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))
    return _make(out, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _make(out, (a,), vjp)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis] if isinstance(axis, int) else \
            int(np.prod([a.data.shape[i] for i in axis]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# Linear algebra and shape ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _coerce(a), _coerce(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))
    return _make(out, (a, b), vjp)


def permute(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,),
                 lambda g: (np.transpose(g, inv),))


def transpose_last(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    return _make(np.swapaxes(a.data, -1, -2), (a,),
                 lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [t for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]
    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))
    return _make(out, tuple(tensors), vjp)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice `[start, start+length)` along `axis`."""
    n = a.shape[axis]
    if start < 0 or start + length > n:
        raise ShapeError(f"narrow [{start},{start + length}) out of range for "
                         f"axis {axis} of length {n}")
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    def vjp(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[idx] = g
        return (full,)
    return _make(a.data[idx].copy(), (a,), vjp)


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows per group: a is (G, N, D), idx int (G, n) -> (G, n, D)."""
    idx = np.asarray(idx, dtype=np.intp)
    gidx = np.arange(a.shape[0])[:, None]
    out = a.data[gidx, idx]
    def vjp(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(full, (gidx, idx), g)
        return (full,)
    return _make(out, (a,), vjp)


def scatter_add_rows(base: Tensor, idx: np.ndarray, rows: Tensor) -> Tensor:
    """Return base with rows[g, i] added into base[g, idx[g, i]].

    Repeated targets accumulate. base: (G, M, D), idx: (G, n), rows: (G, n, D).
    """
    idx = np.asarray(idx, dtype=np.intp)
    gidx = np.arange(base.shape[0])[:, None]
    out = base.data.copy()
    np.add.at(out, (gidx, idx), rows.data)
    def vjp(g):
        return (g, g[gidx, idx])
    return _make(out, (base, rows), vjp)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: table (V, D), integer ids of any shape -> (*ids.shape, D)."""
    ids = np.asarray(ids)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        bad = ids[(ids < 0) | (ids >= vocab)].flat[0]
        raise ValueError(f"token id {int(bad)} out of range for vocab {vocab}")
    out = table.data[ids]
    def vjp(g):
        full = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)
    return _make(out, (table,), vjp)


# ---------------------------------------------------------------------------
# Normalization and attention primitives

def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine.

    Uses the biased (1/d) variance estimator with eps inside the sqrt.
    """
    d = x.shape[-1]
    if d == 0:
        raise ShapeError("layer_norm over an empty last axis")
    gain, bias = _coerce(gain), _coerce(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    def vjp(g):
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        dgain = _unbroadcast(g * xhat, gain.shape)
        dbias = _unbroadcast(g, bias.shape)
        return (dx, dgain, dbias)
    return _make(out, (x, gain, bias), vjp)


def masked_softmax(logits: Tensor, mask) -> Tensor:
    """Softmax over the last axis with an additive 0/-inf mask.

    Masked positions are exactly 0 in the output; rows are stabilized by
    max subtraction. A fully masked row is a caller bug and raises.
    """
    mdata = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    z = logits.data + mdata
    zmax = z.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(zmax)):
        raise ValueError("masked_softmax: fully masked row (empty attention context)")
    e = np.exp(z - zmax)
    p = e / e.sum(axis=-1, keepdims=True)
    def vjp(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)
    return _make(p, (logits,), vjp)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood in nats. logits (N, V), targets (N,) ints."""
    targets = np.asarray(targets)
    n, vocab = logits.shape
    zmax = logits.data.max(axis=-1, keepdims=True)
    e = np.exp(logits.data - zmax)
    se = e.sum(axis=-1, keepdims=True)
    logp = logits.data - zmax - np.log(se)
    nll = -logp[np.arange(n), targets]
    out = np.asarray(nll.mean(), dtype=logits.dtype)
    def vjp(g):
        soft = e / se
        soft[np.arange(n), targets] -= 1.0
        return (soft * (float(g) / n),)
    return _make(out, (logits,), vjp)


# ---------------------------------------------------------------------------
# Pointwise

def elu(x: Tensor) -> Tensor:
    neg_part = np.exp(np.minimum(x.data, 0.0)) - 1.0
    out = np.where(x.data >= 0.0, x.data, neg_part)
    grad_mask = np.where(x.data >= 0.0, 1.0, neg_part + 1.0)
    return _make(out, (x,), lambda g: (g * grad_mask,))


def relu_squared(x: Tensor) -> Tensor:
    r = np.maximum(x.data, 0.0)
    return _make(r * r, (x,), lambda g: (g * 2.0 * r,))


def sigmoid(x: Tensor) -> Tensor:
    s = np.where(x.data >= 0.0,
                 1.0 / (1.0 + np.exp(-np.abs(x.data))),
                 np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))))
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),))


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return _make(e, (x,), lambda g: (g * e,))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    r = np.sqrt(x.data)
    return _make(r, (x,), lambda g: (g * 0.5 / r,))


def clamp_min(x: Tensor, floor: float) -> Tensor:
    out = np.maximum(x.data, floor)
    passthrough = x.data > floor
    return _make(out, (x,), lambda g: (g * passthrough,))


def l2norm(x: Tensor, keepdims: bool = False) -> Tensor:
    """Euclidean norm of the last axis. Gradient guards against zero rows."""
    n = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    out = n if keepdims else n[..., 0]
    def vjp(g):
        if not keepdims:
            g = g[..., None]
        return (g * x.data / np.maximum(n, 1e-300),)
    return _make(out, (x,), vjp)


# ---------------------------------------------------------------------------
# Rotary embedding

def rope_partial(x: Tensor, positions, rotary_width: int, base: float = 10000.0) -> Tensor:
    """Rotate channel pairs (2j, 2j+1) for channels [0, rotary_width).

    Pair j turns by angle position * base**(-2j/rotary_width); channels at
    and beyond `rotary_width` pass through. positions indexes axis -2.
    """
    d = x.shape[-1]
    if rotary_width % 2 != 0:
        raise ValueError(f"rotary width must be even, got {rotary_width}")
    if rotary_width > d:
        raise ValueError(f"rotary width {rotary_width} exceeds head dim {d}")
    if rotary_width == 0:
        return _make(x.data.copy(), (x,), lambda g: (g,))
    half = rotary_width // 2
    pos = np.asarray(positions, dtype=np.float64).reshape(-1)
    if pos.shape[0] != x.shape[-2]:
        raise ShapeError(f"positions length {pos.shape[0]} does not match axis "
                         f"-2 of {x.shape}")
    theta = float(base) ** (-2.0 * np.arange(half) / rotary_width)
    ang = pos[:, None] * theta[None, :]
    cos = np.cos(ang).astype(x.dtype)
    sin = np.sin(ang).astype(x.dtype)
    ev = x.data[..., 0:rotary_width:2]
    od = x.data[..., 1:rotary_width:2]
    out = x.data.copy()
    out[..., 0:rotary_width:2] = ev * cos - od * sin
    out[..., 1:rotary_width:2] = ev * sin + od * cos
    def vjp(g):
        ge = g[..., 0:rotary_width:2]
        go = g[..., 1:rotary_width:2]
        back = g.copy()
        back[..., 0:rotary_width:2] = ge * cos + go * sin
        back[..., 1:rotary_width:2] = -ge * sin + go * cos
        return (back,)
    return _make(out, (x,), vjp)
