"""Dense-array reverse-mode automatic differentiation on numpy buffers.

This is deliberately not a general tensor library: it provides exactly the
operations the sequence blocks downstream need (batched matmul, 1D
convolutions, softmax, layer norm, a handful of elementwise maps, gather
style indexing, and a fused first-order linear recurrence) and nothing else.
Everything runs in double precision; analytic gradients are validated
against central finite differences in the test suite.

Broadcasting is restricted to numpy-compatible alignment of leading batch
dimensions (plus explicit size-1 axes); incompatible shapes raise
``ShapeError``.
"""

from __future__ import annotations

import numpy as np

DTYPE = np.float64

LAYER_NORM_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


class GraphError(RuntimeError):
    """Raised on invalid use of the backward machinery."""


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=DTYPE)
    if arr.ndim == 0:
        arr = arr.reshape(())
    return arr


class Tensor:
    """A node in the computation graph: a dense array plus backward linkage.

    ``data`` is always a float64 numpy array. ``grad`` is filled in (with the
    same shape as ``data``) by :func:`backward`. Leaf tensors are created with
    ``requires_grad=True`` for learnables; intermediate nodes inherit the flag
    from their parents.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn",
                 "_backward_ran")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None
        self._backward_ran = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # Arithmetic sugar; constants are wrapped as non-grad tensors.
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    # grads are only ever rebound, never mutated in place, so adopting the
    # incoming array (possibly a view) is safe and avoids large copies
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g if isinstance(g, np.ndarray) else np.asarray(g, dtype=DTYPE)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    squeeze = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if squeeze:
        g = g.sum(axis=squeeze, keepdims=True)
    return g


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not align") from None


def backward(root: Tensor) -> None:
    """Reverse-topological gradient accumulation from a scalar root.

    Every reachable tensor with ``requires_grad`` receives (or accumulates
    into) its ``grad``. Running backward twice on the same root without
    rebuilding the graph is an error.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
    if root._backward_ran:
        raise GraphError("backward already ran on this root; rebuild the graph first")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    root.grad = np.ones_like(root.data)
    for node in reversed(topo):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)
    root._backward_ran = True


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "add")
    out_data = a.data + b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(out_data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "sub")
    out_data = a.data - b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(out_data, (a, b), bwd)


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product; shapes must align."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "mul")
    out_data = a.data * b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "div")
    out_data = a.data / b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g / b.data, a.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out_data, (a, b), bwd)


def exp(x) -> Tensor:
    x = as_tensor(x)
    out_data = np.exp(x.data)

    def bwd(g):
        _accumulate(x, g * out_data)

    return _make(out_data, (x,), bwd)


def log(x) -> Tensor:
    x = as_tensor(x)
    out_data = np.log(x.data)

    def bwd(g):
        _accumulate(x, g / x.data)

    return _make(out_data, (x,), bwd)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid_np(x.data)

    def bwd(g):
        _accumulate(x, g * s * (1.0 - s))

    return _make(s, (x,), bwd)


def silu(x) -> Tensor:
    """x * sigmoid(x)."""
    x = as_tensor(x)
    s = _sigmoid_np(x.data)
    out_data = x.data * s

    def bwd(g):
        _accumulate(x, g * (s + x.data * s * (1.0 - s)))

    return _make(out_data, (x,), bwd)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    out_data = np.where(mask, x.data, 0.0)

    def bwd(g):
        _accumulate(x, g * mask)

    return _make(out_data, (x,), bwd)


def softplus(x) -> Tensor:
    """log(1 + e^x), computed stably; derivative is the sigmoid."""
    x = as_tensor(x)
    out_data = np.logaddexp(0.0, x.data)

    def bwd(g):
        _accumulate(x, g * _sigmoid_np(x.data))

    return _make(out_data, (x,), bwd)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Batched matrix product; leading dimensions broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch dimensions disagree: {a.shape} x {b.shape}") from None
    out_data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            _accumulate(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            _accumulate(b, _unbroadcast(gb, b.shape))

    return _make(out_data, (a, b), bwd)


def _conv_windows(xp: np.ndarray, k: int, t_out: int) -> np.ndarray:
    # [B, T_out, k, C] stack of shifted views
    return np.stack([xp[:, j:j + t_out, :] for j in range(k)], axis=2)


def _conv_pad(t: int, k: int, padding: str) -> tuple[int, int, int]:
    if padding == "same":
        if k % 2 == 0:
            raise ShapeError(f"same padding requires odd kernel, got k={k}")
        return k // 2, k // 2, t
    if padding == "causal":
        return k - 1, 0, t
    if padding == "valid":
        if k > t:
            raise ShapeError(f"valid padding requires k <= T, got k={k}, T={t}")
        return 0, 0, t - k + 1
    raise ValueError(f"unknown padding mode {padding!r}")


def conv1d(x, w, bias=None, padding: str = "same") -> Tensor:
    """Temporal convolution: x [B,T,C], w [k,C,C'] -> [B,T',C']."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeError(f"conv1d expects x [B,T,C] and w [k,C,C'], got {x.shape}, {w.shape}")
    batch, t, c = x.shape
    k, c_in, c_out = w.shape
    if c_in != c:
        raise ShapeError(f"conv1d channel mismatch: x has {c}, w expects {c_in}")
    left, right, t_out = _conv_pad(t, k, padding)
    b = as_tensor(bias) if bias is not None else None
    if b is not None and b.shape != (c_out,):
        raise ShapeError(f"conv1d bias must be [{c_out}], got {b.shape}")

    xp = np.pad(x.data, ((0, 0), (left, right), (0, 0)))
    win = _conv_windows(xp, k, t_out)                       # [B,T',k,C]
    cols = win.reshape(batch, t_out, k * c)
    wmat = w.data.reshape(k * c, c_out)
    out_data = cols @ wmat
    if b is not None:
        out_data = out_data + b.data

    def bwd(g):
        if w.requires_grad:
            gw = np.einsum("bti,bto->io", cols, g).reshape(k, c, c_out)
            _accumulate(w, gw)
        if b is not None and b.requires_grad:
            _accumulate(b, g.sum(axis=(0, 1)))
        if x.requires_grad:
            gcols = (g @ wmat.T).reshape(batch, t_out, k, c)
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, j:j + t_out, :] += gcols[:, :, j, :]
            _accumulate(x, gxp[:, left:left + t, :])

    return _make(out_data, tuple(p for p in (x, w, b) if p is not None), bwd)


def dwconv1d(x, w, bias=None, padding: str = "causal") -> Tensor:
    """Depthwise temporal convolution: x [B,T,C], w [k,C] -> [B,T',C]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 2:
        raise ShapeError(f"dwconv1d expects x [B,T,C] and w [k,C], got {x.shape}, {w.shape}")
    batch, t, c = x.shape
    k, c_in = w.shape
    if c_in != c:
        raise ShapeError(f"dwconv1d channel mismatch: x has {c}, w expects {c_in}")
    left, right, t_out = _conv_pad(t, k, padding)
    b = as_tensor(bias) if bias is not None else None

    xp = np.pad(x.data, ((0, 0), (left, right), (0, 0)))
    win = _conv_windows(xp, k, t_out)                       # [B,T',k,C]
    out_data = np.einsum("btkc,kc->btc", win, w.data)
    if b is not None:
        out_data = out_data + b.data

    def bwd(g):
        if w.requires_grad:
            _accumulate(w, np.einsum("btkc,btc->kc", win, g))
        if b is not None and b.requires_grad:
            _accumulate(b, g.sum(axis=(0, 1)))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, j:j + t_out, :] += g * w.data[j]
            _accumulate(x, gxp[:, left:left + t, :])

    return _make(out_data, tuple(p for p in (x, w, b) if p is not None), bwd)


def softmax_lastdim(x) -> Tensor:
    """Softmax over the final axis, max-shifted for stability."""
    x = as_tensor(x)
    if x.ndim < 1 or x.shape[-1] < 1:
        raise ShapeError(f"softmax needs a non-empty last dimension, got {x.shape}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        inner = (g * s).sum(axis=-1, keepdims=True)
        _accumulate(x, s * (g - inner))

    return _make(s, (x,), bwd)


def layer_norm(x, gamma, beta, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last (feature) axis to zero mean, unit variance, then affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm affine params must be [{c}], got {gamma.shape}, {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = gamma.data * xhat + beta.data

    def bwd(g):
        if beta.requires_grad:
            _accumulate(beta, g.reshape(-1, c).sum(axis=0))
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).reshape(-1, c).sum(axis=0))
        if x.requires_grad:
            gy = g * gamma.data
            m1 = gy.mean(axis=-1, keepdims=True)
            m2 = (gy * xhat).mean(axis=-1, keepdims=True)
            _accumulate(x, inv * (gy - m1 - xhat * m2))

    return _make(out_data, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# reductions


def _axis_tuple(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _axis_tuple(axis, x.ndim)
    out_data = x.data.sum(axis=axes, keepdims=keepdims)

    def bwd(g):
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axes)
        _accumulate(x, np.broadcast_to(gg, x.shape))

    return _make(out_data, (x,), bwd)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _axis_tuple(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes]))
    out_data = x.data.mean(axis=axes, keepdims=keepdims)

    def bwd(g):
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axes)
        _accumulate(x, np.broadcast_to(gg, x.shape) / n)

    return _make(out_data, (x,), bwd)


def max_(x, axis: int, keepdims: bool = False) -> Tensor:
    """Max along one axis; the gradient routes to the first maximal entry."""
    x = as_tensor(x)
    ax = axis % x.ndim
    idx = np.argmax(x.data, axis=ax)
    out_k = np.take_along_axis(x.data, np.expand_dims(idx, ax), axis=ax)
    out_data = out_k if keepdims else np.squeeze(out_k, axis=ax)

    def bwd(g):
        gg = g if keepdims else np.expand_dims(g, ax)
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(idx, ax), gg, axis=ax)
        _accumulate(x, gx)

    return _make(out_data, (x,), bwd)


# ---------------------------------------------------------------------------
# shape / indexing ops


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out_data = x.data.reshape(shape)

    def bwd(g):
        _accumulate(x, g.reshape(x.shape))

    return _make(out_data, (x,), bwd)


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out_data = np.transpose(x.data, axes)

    def bwd(g):
        _accumulate(x, np.transpose(g, inv))

    return _make(out_data, (x,), bwd)


def expand(x, shape) -> Tensor:
    """Broadcast to ``shape`` (numpy rules); backward sums the broadcast axes."""
    x = as_tensor(x)
    out_data = np.broadcast_to(x.data, shape).copy()

    def bwd(g):
        _accumulate(x, _unbroadcast(g, x.shape))

    return _make(out_data, (x,), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(sl)])

    return _make(out_data, tuple(ts), bwd)


def narrow(x, axis: int, start: int, length: int) -> Tensor:
    x = as_tensor(x)
    ax = axis % x.ndim
    if start < 0 or start + length > x.shape[ax]:
        raise ShapeError(f"narrow [{start}:{start + length}] out of range for axis {ax} of {x.shape}")
    sl = [slice(None)] * x.ndim
    sl[ax] = slice(start, start + length)
    out_data = x.data[tuple(sl)].copy()

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[tuple(sl)] = g
        _accumulate(x, gx)

    return _make(out_data, (x,), bwd)


def take(x, idx) -> Tensor:
    """Index the leading axis with an integer array: out[i...] = x[idx[i...]]."""
    x = as_tensor(x)
    idx = np.asarray(idx)
    out_data = x.data[idx]

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        _accumulate(x, gx)

    return _make(out_data, (x,), bwd)


def gather_rows(x, idx) -> Tensor:
    """Per-batch row gather: x [B,G,...], idx [B,G'] -> [B,G',...]."""
    x = as_tensor(x)
    idx = np.asarray(idx)
    if idx.ndim != 2 or idx.shape[0] != x.shape[0]:
        raise ShapeError(f"gather_rows needs idx [B,G'], got {idx.shape} for x {x.shape}")
    brow = np.arange(x.shape[0])[:, None]
    out_data = x.data[brow, idx]

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (brow, idx), g)
        _accumulate(x, gx)

    return _make(out_data, (x,), bwd)


def linear_recurrence(a, b, method: str = "sequential") -> Tensor:
    """Fused first-order recurrence h_t = a_t * h_{t-1} + b_t with h_0 = 0.

    Time runs along axis 1. ``method`` picks the forward evaluation:
    a plain sequential loop, or a Blelloch-style associative scan over the
    semigroup (a, b) o (a', b') = (a*a', a'*b + b'). Both share the adjoint
    (reverse-sweep) backward pass.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"linear_recurrence operand shapes differ: {a.shape} vs {b.shape}")
    if a.ndim < 2:
        raise ShapeError("linear_recurrence expects [B,T,...] operands")
    t_len = a.shape[1]
    if method == "sequential":
        h = np.empty_like(a.data)
        acc = np.zeros_like(a.data[:, 0])
        for t in range(t_len):
            acc = a.data[:, t] * acc + b.data[:, t]
            h[:, t] = acc
    elif method == "blelloch":
        h = _blelloch_scan(a.data, b.data)
    else:
        raise ValueError(f"unknown recurrence method {method!r}")

    def bwd(g):
        ga = np.empty_like(a.data) if a.requires_grad else None
        gb = np.empty_like(b.data) if b.requires_grad else None
        lam = np.zeros_like(a.data[:, 0])
        for t in range(t_len - 1, -1, -1):
            if t == t_len - 1:
                lam = g[:, t].copy()
            else:
                lam = g[:, t] + a.data[:, t + 1] * lam
            if gb is not None:
                gb[:, t] = lam
            if ga is not None:
                ga[:, t] = lam * h[:, t - 1] if t > 0 else 0.0
        if ga is not None:
            _accumulate(a, ga)
        if gb is not None:
            _accumulate(b, gb)

    return _make(h, (a, b), bwd)


def scan_combine(e1: tuple[np.ndarray, np.ndarray], e2: tuple[np.ndarray, np.ndarray]):
    """Semigroup product for the recurrence scan: earlier element first."""
    a1, b1 = e1
    a2, b2 = e2
    return a1 * a2, a2 * b1 + b2


def _blelloch_scan(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    t_len = a.shape[1]
    t_pad = 1 << max(0, (t_len - 1).bit_length())
    pad = [(0, 0), (0, t_pad - t_len)] + [(0, 0)] * (a.ndim - 2)
    av = np.pad(a, pad, constant_values=1.0)
    bv = np.pad(b, pad, constant_values=0.0)

    # up-sweep: each stride-2d right slot accumulates its segment's composition
    d = 1
    while d < t_pad:
        right = np.arange(2 * d - 1, t_pad, 2 * d)
        left = right - d
        bv[:, right] = av[:, right] * bv[:, left] + bv[:, right]
        av[:, right] = av[:, left] * av[:, right]
        d *= 2

    # down-sweep: convert to exclusive prefix compositions
    av[:, t_pad - 1] = 1.0
    bv[:, t_pad - 1] = 0.0
    d = t_pad // 2
    while d >= 1:
        right = np.arange(2 * d - 1, t_pad, 2 * d)
        left = right - d
        ta = av[:, left].copy()
        tb = bv[:, left].copy()
        av[:, left] = av[:, right]
        bv[:, left] = bv[:, right]
        bv[:, right] = ta * bv[:, right] + tb
        av[:, right] = av[:, right] * ta
        d //= 2

    # inclusive value at t applies element t after its exclusive prefix
    h = a * bv[:, :t_len] + b
    return h
