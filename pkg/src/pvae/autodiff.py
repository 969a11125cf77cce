"""Dense float64 tensors with tape-style reverse-mode differentiation.

The graph is implicit: every tensor produced by an operation keeps references
to its parents plus a closure that routes the output gradient back to them.
``backward`` on a scalar walks that graph once in reverse topological order,
accumulates gradients on every ``requires_grad`` leaf, and then dismantles the
graph so tensors can be reused as fresh leaves in the next forward pass.

All forward results are checked for finiteness: an overflow (e.g. ``exp`` of a
huge activation) raises ``FloatingPointError`` instead of letting Inf/NaN
propagate silently.
"""

from __future__ import annotations

from typing import Callable, NamedTuple, Optional, Sequence, Union

import numpy as np

Scalar = Union[int, float]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class GraphError(RuntimeError):
    """Misuse of the differentiation graph (non-scalar loss, detached loss)."""


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    # one-pass probe: the sum of an array is finite iff no element is NaN/Inf
    # (barring astronomically large magnitudes, which deserve flagging too)
    with np.errstate(over="ignore", invalid="ignore"):
        if not np.isfinite(arr.sum()):
            raise FloatingPointError(f"non-finite values produced by '{op}'")
    return arr


class Tensor:
    """A dense float64 array, optionally recorded on the differentiation graph.

    Leaves are created directly from data; internal nodes are created by the
    operations below and carry the backward closure. ``grad`` is populated on
    requires_grad leaves by ``backward``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, "tensor")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def is_leaf(self) -> bool:
        return not self._parents

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __getitem__(self, key):
        return getitem(self, key)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def softplus(self):
        return softplus(self)

    def relu(self):
        return relu(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    def backward(self) -> dict["Tensor", np.ndarray]:
        return backward(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, op: str, parents: Sequence[Tensor],
          backward_fn: Callable[[np.ndarray], dict[Tensor, np.ndarray]]) -> Tensor:
    """Create an internal graph node; constants fold to plain leaves."""
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    tracked = tuple(p for p in parents if p.requires_grad)
    if tracked:
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting introduced."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _acc(grads: dict, tensor: "Tensor", g: np.ndarray) -> None:
    """Accumulate into a per-parent gradient dict; both operands of a binary
    op may be the same tensor (e.g. x*x), so plain dict assignment would drop
    a contribution."""
    if tensor in grads:
        grads[tensor] = grads[tensor] + g
    else:
        grads[tensor] = g


# -- elementwise and broadcast arithmetic --------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data + b.data

    def bwd(g):
        grads = {}
        if a.requires_grad:
            _acc(grads, a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _acc(grads, b, _unbroadcast(g, b.shape))
        return grads

    return _node(out, "add", (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data - b.data

    def bwd(g):
        grads = {}
        if a.requires_grad:
            _acc(grads, a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _acc(grads, b, _unbroadcast(-g, b.shape))
        return grads

    return _node(out, "sub", (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data * b.data

    def bwd(g):
        grads = {}
        if a.requires_grad:
            _acc(grads, a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _acc(grads, b, _unbroadcast(g * a.data, b.shape))
        return grads

    return _node(out, "mul", (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, "neg", (a,), lambda g: {a: -g})


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _node(out, "exp", (a,), lambda g: {a: g * out})


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _node(out, "log", (a,), lambda g: {a: g / a.data})


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, "tanh", (a,), lambda g: {a: g * (1.0 - out * out)})


def _sigmoid_raw(x: np.ndarray) -> np.ndarray:
    # overflow-free: exp(-|x|) <= 1 always
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_raw(a.data)
    return _node(out, "sigmoid", (a,), lambda g: {a: g * out * (1.0 - out)})


def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(0.0, a.data)
    return _node(out, "softplus", (a,),
                 lambda g: {a: g * _sigmoid_raw(a.data)})


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    return _node(out, "relu", (a,), lambda g: {a: g * (a.data > 0)})


# -- reductions, shaping, slicing -----------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return {a: np.broadcast_to(g, a.shape).copy()}

    return _node(np.asarray(out), "sum", (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def bwd(g):
        g = np.asarray(g) / n
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return {a: np.broadcast_to(g, a.shape).copy()}

    return _node(np.asarray(out), "mean", (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _node(out, "reshape", (a,), lambda g: {a: g.reshape(a.shape)})


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a 2-d tensor, got shape {a.shape}")
    return _node(a.data.T.copy(), "transpose", (a,), lambda g: {a: g.T})


def getitem(a: Tensor, key) -> Tensor:
    out = a.data[key]
    if np.isscalar(out) or out.ndim == 0:
        out = np.asarray(out)

    def bwd(g):
        gx = np.zeros(a.shape)
        gx[key] = g
        return {a: gx}

    return _node(np.ascontiguousarray(out), "getitem", (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        grads = {}
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _acc(grads, t, g[tuple(idx)])
        return grads

    return _node(out, "concat", tuple(tensors), bwd)


# -- linear algebra --------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul expects [m,k] x [k,n], got {a.shape} x {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        grads = {}
        if a.requires_grad:
            _acc(grads, a, g @ b.data.T)
        if b.requires_grad:
            _acc(grads, b, a.data.T @ g)
        return grads

    return _node(out, "matmul", (a, b), bwd)


# -- strided convolutions (4x4 kernel, stride 2, zero padding 1) -----------

_K = 4
_STRIDE = 2
_PAD = 1


def _patch_view(xp: np.ndarray, ho: int, wo: int) -> np.ndarray:
    """Strided no-copy view [n,c,p,q,i,j] with xs[...,i,j] = xp[..,2i+p,2j+q]."""
    n, c = xp.shape[:2]
    s = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, shape=(n, c, _K, _K, ho, wo),
        strides=(s[0], s[1], s[2], s[3], _STRIDE * s[2], _STRIDE * s[3]),
        writeable=False)


def _corr_forward(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    """out[n,o,i,j] = sum_{c,p,q} xpad[n,c,2i+p,2j+q] * k[o,c,p,q]."""
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    xp = np.pad(x, ((0, 0), (0, 0), (_PAD, _PAD), (_PAD, _PAD)))
    patches = _patch_view(xp, ho, wo)
    out = np.tensordot(k, patches, axes=([1, 2, 3], [1, 2, 3]))  # [o,n,i,j]
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def _scatter_forward(y: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Adjoint of ``_corr_forward``: maps [n,o,ho,wo] back to [n,c,2ho,2wo]."""
    n, o, ho, wo = y.shape
    h, w = 2 * ho, 2 * wo
    xp = np.zeros((n, k.shape[1], h + 2 * _PAD, w + 2 * _PAD))
    contrib = np.tensordot(y, k, axes=([1], [0]))  # [n,i,j,c,p,q]
    for p in range(_K):
        for q in range(_K):
            xp[:, :, p:p + 2 * ho - 1:_STRIDE, q:q + 2 * wo - 1:_STRIDE] += \
                contrib[:, :, :, :, p, q].transpose(0, 3, 1, 2)
    return xp[:, :, _PAD:_PAD + h, _PAD:_PAD + w]


def _corr_kernel_grad(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """gk[o,c,p,q] = sum_{n,i,j} g[n,o,i,j] * xpad[n,c,2i+p,2j+q]."""
    ho, wo = g.shape[2], g.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (_PAD, _PAD), (_PAD, _PAD)))
    patches = _patch_view(xp, ho, wo)
    return np.tensordot(g, patches, axes=([0, 2, 3], [0, 4, 5]))  # [o,c,p,q]


def _as_batched(x: Tensor, what: str) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"{what} expects a [C,H,W] or [N,C,H,W] tensor, got shape {x.shape}")


def conv2d(x: Tensor, kernels: Tensor) -> Tensor:
    """Strided cross-correlation: [C_in,H,W] x [C_out,C_in,4,4] -> [C_out,H/2,W/2].

    Zero padding 1 on all sides, stride 2; H and W must be even. A leading
    batch axis is accepted on ``x``.
    """
    x4, squeezed = _as_batched(x, "conv2d")
    k = _wrap(kernels)
    if k.ndim != 4 or k.shape[2:] != (_K, _K):
        raise ShapeError(f"conv2d kernels must be [C_out,C_in,4,4], got {k.shape}")
    n, c, h, w = x4.shape
    if c != k.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input {x4.shape} vs kernels {k.shape}")
    if h % 2 or w % 2:
        raise ShapeError(f"conv2d needs even spatial dims, got {x4.shape}")
    out = _corr_forward(x4.data, k.data)

    def bwd(g):
        grads = {}
        if x4.requires_grad:
            _acc(grads, x4, _scatter_forward(g, k.data))
        if k.requires_grad:
            _acc(grads, k, _corr_kernel_grad(x4.data, g))
        return grads

    res = _node(out, "conv2d", (x4, k), bwd)
    return reshape(res, res.shape[1:]) if squeezed else res


def conv2d_transposed(x: Tensor, kernels: Tensor) -> Tensor:
    """Adjoint of ``conv2d`` with the same kernel tensor.

    [A,h,w] x [A,B,4,4] -> [B,2h,2w]; satisfies
    <conv2d(u,k), y> == <u, conv2d_transposed(y,k)> exactly.
    """
    x4, squeezed = _as_batched(x, "conv2d_transposed")
    k = _wrap(kernels)
    if k.ndim != 4 or k.shape[2:] != (_K, _K):
        raise ShapeError(f"conv2d_transposed kernels must be [A,B,4,4], got {k.shape}")
    if x4.shape[1] != k.shape[0]:
        raise ShapeError(
            f"conv2d_transposed channel mismatch: input {x4.shape} vs kernels {k.shape}")
    out = _scatter_forward(x4.data, k.data)

    def bwd(g):
        grads = {}
        if x4.requires_grad:
            _acc(grads, x4, _corr_forward(g, k.data))
        if k.requires_grad:
            _acc(grads, k, _corr_kernel_grad(g, x4.data))
        return grads

    res = _node(out, "conv2d_transposed", (x4, k), bwd)
    return reshape(res, res.shape[1:]) if squeezed else res


# -- LSTM step -------------------------------------------------------------

class LstmParams(NamedTuple):
    """Packed single-layer LSTM parameters, gate order (i, f, g, o).

    w_x: [D_in, 4H], w_h: [H, 4H], b: [4H].
    """

    w_x: Tensor
    w_h: Tensor
    b: Tensor


def lstm_x_proj(x: Tensor, params: LstmParams) -> Tensor:
    """Input contribution to the gates, computable once for many steps."""
    return matmul(x, params.w_x)


def lstm_cell_step(xproj: Tensor, hc: Tensor, params: LstmParams,
                   mask_col: Optional[np.ndarray] = None) -> Tensor:
    """One fused LSTM update on a packed state [N, 2H] = (h | c).

    Gate order (i, f, g, o): c' = sig(f)*c + sig(i)*tanh(g),
    h' = sig(o)*tanh(c'). When ``mask_col`` ([N, 1] of 0/1) is given, rows
    with 0 carry the previous state through unchanged (padded frames).

    Fused into a single graph node with a hand-derived backward rule; the
    rule is validated against finite differences like every other primitive.
    """
    d_h = params.w_h.shape[0]
    if xproj.shape[1] != 4 * d_h or hc.shape[1] != 2 * d_h:
        raise ShapeError(f"lstm_cell_step dims: xproj {xproj.shape}, state "
                         f"{hc.shape} vs w_h {params.w_h.shape}")
    w_h, b = params.w_h, params.b
    h_prev = hc.data[:, :d_h]
    c_prev = hc.data[:, d_h:]
    gates = xproj.data + h_prev @ w_h.data + b.data
    i = _sigmoid_raw(gates[:, 0 * d_h:1 * d_h])
    f = _sigmoid_raw(gates[:, 1 * d_h:2 * d_h])
    g = np.tanh(gates[:, 2 * d_h:3 * d_h])
    o = _sigmoid_raw(gates[:, 3 * d_h:4 * d_h])
    c_raw = f * c_prev + i * g
    tc = np.tanh(c_raw)
    h_raw = o * tc
    if mask_col is None:
        out = np.concatenate([h_raw, c_raw], axis=1)
    else:
        keep = 1.0 - mask_col
        out = np.concatenate([mask_col * h_raw + keep * h_prev,
                              mask_col * c_raw + keep * c_prev], axis=1)

    def bwd(grad):
        dh_next = grad[:, :d_h]
        dc_next = grad[:, d_h:]
        if mask_col is None:
            dh_raw, dc_carry, dh_carry = dh_next, 0.0, 0.0
            dcr = dc_next.copy()
        else:
            keep = 1.0 - mask_col
            dh_raw = mask_col * dh_next
            dcr = mask_col * dc_next
            dh_carry = keep * dh_next
            dc_carry = keep * dc_next
        do = dh_raw * tc
        dcr = dcr + dh_raw * o * (1.0 - tc * tc)
        dgates = np.concatenate([
            (dcr * g) * i * (1.0 - i),
            (dcr * c_prev) * f * (1.0 - f),
            (dcr * i) * (1.0 - g * g),
            do * o * (1.0 - o)], axis=1)
        dh_prev = dgates @ w_h.data.T + dh_carry
        dc_prev = dcr * f + dc_carry
        grads = {}
        if xproj.requires_grad:
            _acc(grads, xproj, dgates)
        if hc.requires_grad:
            _acc(grads, hc, np.concatenate([dh_prev, dc_prev], axis=1))
        if w_h.requires_grad:
            _acc(grads, w_h, h_prev.T @ dgates)
        if b.requires_grad:
            _acc(grads, b, dgates.sum(axis=0))
        return grads

    return _node(out, "lstm_cell_step", (xproj, hc, w_h, b), bwd)


def lstm_step(x: Tensor, h: Tensor, c: Tensor,
              params: LstmParams) -> tuple[Tensor, Tensor]:
    """One LSTM cell update: c' = f*c + i*g, h' = o*tanh(c').

    Accepts single vectors or [N, D] batches; returns states of the input's
    dimensionality.
    """
    single = x.ndim == 1
    if single:
        x = reshape(x, (1, -1))
        h = reshape(h, (1, -1))
        c = reshape(c, (1, -1))
    if x.shape[1] != params.w_x.shape[0] or h.shape[1] != params.w_h.shape[0]:
        raise ShapeError(
            f"lstm_step dims: x {x.shape}, h {h.shape} vs w_x {params.w_x.shape}, "
            f"w_h {params.w_h.shape}")
    d_h = params.w_h.shape[0]
    hc = lstm_cell_step(lstm_x_proj(x, params), concat([h, c], axis=-1), params)
    h_new, c_new = hc[:, :d_h], hc[:, d_h:]
    if single:
        return reshape(h_new, (-1,)), reshape(c_new, (-1,))
    return h_new, c_new


# -- reverse pass ----------------------------------------------------------

def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from a scalar loss.

    Populates ``grad`` on every requires_grad leaf reachable from ``loss``,
    returns a map of those leaves to their gradients, and resets the graph.
    """
    if loss.shape != ():
        raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss is not connected to any requires_grad tensor")

    # Iterative topological order over parent links (graphs can be deep).
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.asarray(1.0)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            # copy: closures may hand the same buffer to several leaves, and
            # callers mutate leaf grads in place (clipping)
            node.grad = np.array(g) if node.grad is None else node.grad + g
            leaves[node] = node.grad
            continue
        for parent, pg in node._backward(g).items():
            if not parent.requires_grad:
                continue
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = np.asarray(pg, dtype=np.float64)

    # Reset: drop closures and parent links so the tape cannot be replayed.
    for node in order:
        node._parents = ()
        node._backward = None
    return leaves
