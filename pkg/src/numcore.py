"""
Dense tensor kernel with reverse-mode automatic differentiation and an Adam optimizer.

Tensors wrap numpy arrays. Every differentiable operation records its parents
and a backward closure; backward() walks the recorded graph in reverse
topological order. Runtime precision is float32; the gradient-check suite runs
the same operations on float64 inputs.
"""

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import ContractError, ShapeError

DEFAULT_DTYPE = np.float32

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, 'grad_enabled', True)


@contextmanager
def no_grad():
    """Operations inside the block record no graph (inference)"""
    previous = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


ArrayLike = Union['Tensor', np.ndarray, float, int, Sequence]


class Tensor:
    """Dense row-major array with an optional gradient"""

    __slots__ = ('data', 'requires_grad', 'grad', 'name', 'op', '_parents', '_backward')
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        if dtype is not None:
            array = np.asarray(data, dtype=dtype)
        elif isinstance(data, np.ndarray) and data.dtype.kind == 'f':
            array = data
        else:
            array = np.asarray(data, dtype=DEFAULT_DTYPE)
        self.data = array
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.op = 'leaf'
        self._parents: Tuple['Tensor', ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> 'Tensor':
        return Tensor(self.data, name=self.name)

    def astype(self, dtype) -> 'Tensor':
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ', requires_grad' if self.requires_grad else ''
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{flag})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(value: ArrayLike, like: Optional[Tensor] = None) -> Tensor:
    """Wrap a constant; python scalars adopt the dtype of `like`"""
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    if isinstance(value, np.ndarray) and value.dtype.kind == 'f' and dtype is None:
        return Tensor(value)
    return Tensor(np.asarray(value, dtype=dtype or DEFAULT_DTYPE))


def custom_op(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
    op: str,
) -> Tensor:
    """Create the output of an operation; backward maps the output gradient to one gradient per parent"""
    out = Tensor(np.asarray(data))
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _lift_pair(a, b)
    return custom_op(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        'add',
    )


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _lift_pair(a, b)
    return custom_op(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        'sub',
    )


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _lift_pair(a, b)
    return custom_op(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        'mul',
    )


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _lift_pair(a, b)
    out = a.data / b.data
    return custom_op(
        out, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
        'div',
    )


def neg(x: Tensor) -> Tensor:
    return custom_op(-x.data, (x,), lambda g: (-g,), 'neg')


def _lift_pair(a: ArrayLike, b: ArrayLike) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def square(x: Tensor) -> Tensor:
    return custom_op(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,), 'square')


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return custom_op(out, (x,), lambda g: (g * out,), 'exp')


def log(x: Tensor) -> Tensor:
    return custom_op(np.log(x.data), (x,), lambda g: (g / x.data,), 'log')


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return custom_op(out, (x,), lambda g: (0.5 * g / out,), 'sqrt')


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return custom_op(out, (x,), lambda g: (g * (1.0 - out * out),), 'tanh')


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid_np(x.data)
    return custom_op(out, (x,), lambda g: (g * out * (1.0 - out),), 'sigmoid')


def tabs(x: Tensor) -> Tensor:
    return custom_op(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), 'abs')


def clip(x: Tensor, low: Optional[float] = None, high: Optional[float] = None) -> Tensor:
    """Clamp; the gradient is zero where the clamp is active"""
    lo = -np.inf if low is None else low
    hi = np.inf if high is None else high
    inside = (x.data >= lo) & (x.data <= hi)
    return custom_op(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), 'clip')


# ---------------------------------------------------------------------------
# Reductions and shape
# ---------------------------------------------------------------------------

def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g, x.shape).copy(),)

    return custom_op(np.asarray(out), (x,), backward, 'sum')


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return tsum(x, axis, keepdims) * (1.0 / max(count, 1))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return custom_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), 'reshape')


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(a % x.ndim for a in axes)
    inverse = tuple(np.argsort(axes))
    return custom_op(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), 'transpose')


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, tensors[0].shape)) if i != axis
        ):
            raise ShapeError("concat: incompatible shapes", tensors[0].shape, t.shape)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]
    return custom_op(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)), 'concat')


def pad(x: Tensor, pad_width: Sequence[Tuple[int, int]]) -> Tensor:
    """Zero padding; pad_width as for numpy.pad"""
    pad_width = [tuple(p) for p in pad_width]
    slices = tuple(slice(before, before + size) for (before, _), size in zip(pad_width, x.shape))
    return custom_op(np.pad(x.data, pad_width), (x,), lambda g: (g[slices],), 'pad')


def take(x: Tensor, indices: np.ndarray, axis: int = 0) -> Tensor:
    """Gather along one axis; repeated indices accumulate gradient"""
    axis = axis % x.ndim
    indices = np.asarray(indices, dtype=np.int64)
    out = np.take(x.data, indices, axis=axis)

    def backward(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        moved = np.moveaxis(full, axis, 0)
        g_moved = np.moveaxis(g, tuple(range(axis, axis + indices.ndim)), tuple(range(indices.ndim)))
        np.add.at(moved, indices, g_moved)
        return (full,)

    return custom_op(out, (x,), backward, 'take')


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]

    def backward(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(full, index, g)
        return (full,)

    return custom_op(np.array(out), (x,), backward, 'getitem')


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift_pair(a, b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError("matmul: inner dimensions differ", a.shape, b.shape)
    out = np.matmul(a.data, b.data)

    def backward(g):
        if b.ndim == 1:
            ga = np.multiply.outer(g, b.data)
            gb = np.tensordot(a.data, g, axes=(tuple(range(a.ndim - 1)), tuple(range(g.ndim))))
            return ga, gb
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if a.ndim > 1 else np.multiply.outer(a.data, g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return custom_op(out, (a, b), backward, 'matmul')


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """out[..., o] = sum_i x[..., i] * weight[i, o] + bias[o]"""
    x = as_tensor(x)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError("linear: trailing input dim must equal weight rows", x.shape, weight.shape)
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError("linear: bias must match weight columns", weight.shape, bias.shape)

    flat = x.data.reshape(-1, weight.shape[0])
    out = flat @ weight.data
    if bias is not None:
        out = out + bias.data
    out = out.reshape(x.shape[:-1] + (weight.shape[1],))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g_flat = g.reshape(-1, weight.shape[1])
        grads = [
            (g_flat @ weight.data.T).reshape(x.shape),
            flat.T @ g_flat,
        ]
        if bias is not None:
            grads.append(g_flat.sum(axis=0))
        return tuple(grads)

    return custom_op(out, parents, backward, 'linear')


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along one axis"""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return custom_op(
        out, (x,),
        lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),),
        'softmax',
    )


def unfold(x: Tensor, kernel: int, stride: int = 1, axis: int = 0) -> Tensor:
    """
    Causal sliding windows along `axis`.

    kernel-1 zeros are padded at the start of the axis, so with stride 1 the
    number of windows equals the axis length and window j ends at element j.
    The axis is replaced by (n_windows, kernel).
    """
    if kernel < 1 or stride < 1:
        raise ContractError(f"unfold: kernel ({kernel}) and stride ({stride}) must be >= 1")
    axis = axis % x.ndim
    length = x.shape[axis]
    padded_len = length + kernel - 1
    if length == 0 or kernel > padded_len:
        raise ShapeError(f"unfold: kernel {kernel} larger than padded axis {axis}", x.shape)
    n_out = (padded_len - kernel) // stride + 1

    pad_width = [(0, 0)] * x.ndim
    pad_width[axis] = (kernel - 1, 0)
    padded = np.pad(x.data, pad_width)
    index = np.arange(n_out)[:, None] * stride + np.arange(kernel)[None, :]
    out = np.take(padded, index, axis=axis)

    def backward(g):
        gp = np.zeros(padded.shape, dtype=g.dtype)
        for offset in range(kernel):
            target = [slice(None)] * x.ndim
            target[axis] = slice(offset, offset + stride * (n_out - 1) + 1, stride)
            source = [slice(None)] * g.ndim
            source[axis + 1] = offset
            gp[tuple(target)] += g[tuple(source)]
        keep = [slice(None)] * x.ndim
        keep[axis] = slice(kernel - 1, None)
        return (gp[tuple(keep)],)

    return custom_op(out, (x,), backward, 'unfold')


# ---------------------------------------------------------------------------
# Recurrent kernel
# ---------------------------------------------------------------------------
# Gate order (reset r, update z, candidate n):
#   r  = sigmoid(x W_ir + b_ir + h W_hr + b_hr)
#   z  = sigmoid(x W_iz + b_iz + h W_hz + b_hz)
#   n  = tanh(x W_in + b_in + r * (h W_hn + b_hn))
#   h' = (1 - z) * n + z * h
# W_ih is (I, 3N) and W_hh is (N, 3N), columns laid out [r | z | n].

def _check_gru(x_shape, h_shape, w_ih, w_hh, b_ih, b_hh):
    n = w_hh.shape[0]
    if w_ih.ndim != 2 or w_ih.shape[1] != 3 * n or w_hh.shape != (n, 3 * n):
        raise ShapeError("gru: weights must be (I, 3N) and (N, 3N)", w_ih.shape, w_hh.shape)
    if b_ih.shape != (3 * n,) or b_hh.shape != (3 * n,):
        raise ShapeError("gru: biases must be (3N,)", b_ih.shape, b_hh.shape)
    if x_shape[-1] != w_ih.shape[0]:
        raise ShapeError("gru: input dim differs from W_ih rows", x_shape, w_ih.shape)
    if h_shape[-1] != n:
        raise ShapeError("gru: hidden dim differs from W_hh rows", h_shape, w_hh.shape)


def gru_sequence(
    x: Tensor, h0: Tensor, w_ih: Tensor, w_hh: Tensor, b_ih: Tensor, b_hh: Tensor
) -> Tensor:
    """Run a GRU over x (B, L, I) from h0 (B, N); returns every hidden state (B, L, N)"""
    x, h0 = as_tensor(x), as_tensor(h0)
    _check_gru(x.shape, h0.shape, w_ih, w_hh, b_ih, b_hh)
    if x.ndim != 3 or h0.shape != (x.shape[0], w_hh.shape[0]):
        raise ShapeError("gru_sequence: expected x (B, L, I) and h0 (B, N)", x.shape, h0.shape)

    batch, length, _ = x.shape
    n = w_hh.shape[0]
    gi = x.data @ w_ih.data + b_ih.data
    dtype = gi.dtype
    hs = np.empty((batch, length, n), dtype=dtype)
    rs = np.empty_like(hs)
    zs = np.empty_like(hs)
    ns = np.empty_like(hs)
    ghn = np.empty_like(hs)

    h = h0.data.astype(dtype, copy=False)
    for t in range(length):
        gh = h @ w_hh.data + b_hh.data
        r = _sigmoid_np(gi[:, t, :n] + gh[:, :n])
        z = _sigmoid_np(gi[:, t, n:2 * n] + gh[:, n:2 * n])
        cand = np.tanh(gi[:, t, 2 * n:] + r * gh[:, 2 * n:])
        h = (1.0 - z) * cand + z * h
        hs[:, t], rs[:, t], zs[:, t], ns[:, t], ghn[:, t] = h, r, z, cand, gh[:, 2 * n:]

    def backward(g):
        d_gi = np.empty((batch, length, 3 * n), dtype=g.dtype)
        d_whh = np.zeros_like(w_hh.data)
        d_bhh = np.zeros_like(b_hh.data)
        dh_next = np.zeros((batch, n), dtype=g.dtype)
        for t in range(length - 1, -1, -1):
            h_prev = hs[:, t - 1] if t > 0 else h0.data
            r, z, cand = rs[:, t], zs[:, t], ns[:, t]
            dh = g[:, t] + dh_next
            dz = dh * (h_prev - cand)
            dn_pre = dh * (1.0 - z) * (1.0 - cand * cand)
            dr_pre = dn_pre * ghn[:, t] * r * (1.0 - r)
            dz_pre = dz * z * (1.0 - z)
            d_gi[:, t] = np.concatenate([dr_pre, dz_pre, dn_pre], axis=1)
            d_gh = np.concatenate([dr_pre, dz_pre, dn_pre * r], axis=1)
            d_whh += h_prev.T @ d_gh
            d_bhh += d_gh.sum(axis=0)
            dh_next = dh * z + d_gh @ w_hh.data.T
        flat_gi = d_gi.reshape(-1, 3 * n)
        d_x = (flat_gi @ w_ih.data.T).reshape(x.shape)
        d_wih = x.data.reshape(-1, x.shape[-1]).T @ flat_gi
        d_bih = flat_gi.sum(axis=0)
        return d_x, dh_next, d_wih, d_whh, d_bih, d_bhh

    return custom_op(hs, (x, h0, w_ih, w_hh, b_ih, b_hh), backward, 'gru_sequence')


def gru_step(x: Tensor, h: Tensor, w_ih: Tensor, w_hh: Tensor, b_ih: Tensor, b_hh: Tensor) -> Tensor:
    """One GRU update; x (..., I), h (..., N) -> (..., N)"""
    x, h = as_tensor(x), as_tensor(h)
    _check_gru(x.shape, h.shape, w_ih, w_hh, b_ih, b_hh)
    lead = x.shape[:-1]
    batch = int(np.prod(lead)) if lead else 1
    out = gru_sequence(
        reshape(x, (batch, 1, x.shape[-1])),
        reshape(h, (batch, h.shape[-1])),
        w_ih, w_hh, b_ih, b_hh,
    )
    return reshape(out, lead + (h.shape[-1],))


# ---------------------------------------------------------------------------
# Lagged correlation / mixing (attention alignment kernels)
# ---------------------------------------------------------------------------

def lagged_correlation(y: Tensor, r: Tensor, max_lag: int) -> Tensor:
    """out[t, d, c] = sum_f y[t, f, c] * r[t - d, f, c], zero where t - d < 0; inputs (T, F, C)"""
    if y.shape != r.shape or y.ndim != 3:
        raise ShapeError("lagged_correlation: y and r must share (T, F, C)", y.shape, r.shape)
    n_frames, _, channels = y.shape
    out = np.zeros((n_frames, max_lag, channels), dtype=np.result_type(y.data, r.data))
    lags = range(min(max_lag, n_frames))
    for d in lags:
        out[d:, d, :] = (y.data[d:] * r.data[:n_frames - d]).sum(axis=1)

    def backward(g):
        gy = np.zeros_like(y.data)
        gr = np.zeros_like(r.data)
        for d in lags:
            gd = g[d:, d, None, :]
            gy[d:] += gd * r.data[:n_frames - d]
            gr[:n_frames - d] += gd * y.data[d:]
        return gy, gr

    return custom_op(out, (y, r), backward, 'lagged_correlation')


def lagged_mix(weights: Tensor, r: Tensor) -> Tensor:
    """out[t, f, c] = sum_d weights[t, d] * r[t - d, f, c], zero where t - d < 0"""
    if weights.ndim != 2 or r.ndim != 3 or weights.shape[0] != r.shape[0]:
        raise ShapeError("lagged_mix: expected weights (T, H) and r (T, F, C)", weights.shape, r.shape)
    n_frames, max_lag = weights.shape
    out = np.zeros(r.shape, dtype=np.result_type(weights.data, r.data))
    lags = range(min(max_lag, n_frames))
    for d in lags:
        out[d:] += weights.data[d:, d, None, None] * r.data[:n_frames - d]

    def backward(g):
        gw = np.zeros_like(weights.data)
        gr = np.zeros_like(r.data)
        for d in lags:
            gw[d:, d] = (g[d:] * r.data[:n_frames - d]).sum(axis=(1, 2))
            gr[:n_frames - d] += weights.data[d:, d, None, None] * g[d:]
        return gw, gr

    return custom_op(out, (weights, r), backward, 'lagged_mix')


# ---------------------------------------------------------------------------
# Reverse mode
# ---------------------------------------------------------------------------

@dataclass
class Node:
    op: str
    output_id: int
    input_ids: Tuple[int, ...]


@dataclass
class Graph:
    """Recorded operations in topological order plus the gradients they produced"""
    nodes: List[Node] = field(default_factory=list)
    grads: Dict[int, np.ndarray] = field(default_factory=dict)

    def grad_of(self, tensor: Tensor) -> Optional[np.ndarray]:
        return self.grads.get(id(tensor))


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        tensor, expanded = stack.pop()
        if expanded:
            order.append(tensor)
            continue
        if id(tensor) in visited:
            continue
        visited.add(id(tensor))
        stack.append((tensor, True))
        for parent in tensor._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> Graph:
    """Populate .grad of every trainable leaf reachable from a scalar loss"""
    if loss.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward: loss is not reachable from any trainable tensor")

    order = _topological_order(loss)
    graph = Graph(nodes=[
        Node(t.op, id(t), tuple(id(p) for p in t._parents)) for t in order if t._parents
    ])
    grads = graph.grads
    grads[id(loss)] = np.ones(loss.shape, dtype=loss.dtype)

    for tensor in reversed(order):
        g = grads.get(id(tensor))
        if g is None:
            continue
        if tensor._backward is None:
            tensor.grad = g if tensor.grad is None else tensor.grad + g
            continue
        for parent, pg in zip(tensor._parents, tensor._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    return graph


def zero_grad(params: Iterable[Tensor]):
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def clip_grad_norm(grads: Dict[str, np.ndarray], max_norm: float) -> Tuple[Dict[str, np.ndarray], float]:
    """Scale all gradients together so their global L2 norm is at most max_norm"""
    total = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
    if max_norm <= 0 or total <= max_norm or total == 0.0:
        return grads, total
    scale = max_norm / (total + 1e-12)
    return {name: g * scale for name, g in grads.items()}, total


def adam_step(
    params: Dict[str, Tensor],
    grads: Dict[str, np.ndarray],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """Bias-corrected Adam update. Parameter arrays are replaced, never written in place."""
    for name, g in grads.items():
        if name not in params:
            raise ContractError(f"adam_step: gradient for unknown parameter '{name}'")
        if g.shape != params[name].shape:
            raise ShapeError(f"adam_step: gradient shape differs for '{name}'", params[name].shape, g.shape)

    step = state.step + 1
    m_new: Dict[str, np.ndarray] = dict(state.m)
    v_new: Dict[str, np.ndarray] = dict(state.v)
    correction1 = 1.0 - beta1 ** step
    correction2 = 1.0 - beta2 ** step

    for name, g in grads.items():
        p = params[name]
        m_prev = state.m.get(name)
        v_prev = state.v.get(name)
        if m_prev is not None and m_prev.shape != p.shape:
            raise ShapeError(f"adam_step: state shape differs for '{name}'", p.shape, m_prev.shape)
        m = (1.0 - beta1) * g if m_prev is None else beta1 * m_prev + (1.0 - beta1) * g
        v = (1.0 - beta2) * g * g if v_prev is None else beta2 * v_prev + (1.0 - beta2) * g * g
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
        p.data = (p.data - update).astype(p.dtype, copy=False)
        m_new[name], v_new[name] = m, v

    return AdamState(step=step, m=m_new, v=v_new)


class Adam:
    """Adam with global gradient-norm clipping over a named parameter set"""

    def __init__(
        self,
        params: Dict[str, Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        clip_norm: float = 5.0,
    ):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip_norm = clip_norm
        self.state = AdamState()
        self.last_grad_norm = 0.0

    def zero_grad(self):
        zero_grad(self.params.values())

    def step(self):
        grads = {
            name: p.grad for name, p in self.params.items() if p.requires_grad and p.grad is not None
        }
        grads, self.last_grad_norm = clip_grad_norm(grads, self.clip_norm)
        self.state = adam_step(self.params, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)


# ---------------------------------------------------------------------------
# Finite-difference gradient checks
# ---------------------------------------------------------------------------

@dataclass
class GradcheckResult:
    name: str
    max_rel_error: float
    passed: bool
    n_inputs: int


GradcheckCase = Tuple[Callable[..., Tensor], List[np.ndarray]]
GRADCHECK_REGISTRY: Dict[str, Callable[[np.random.Generator], GradcheckCase]] = {}


def register_gradcheck(name: str):
    """Register a case builder: rng -> (fn over Tensors, list of float64 input arrays)"""
    def decorator(builder):
        GRADCHECK_REGISTRY[name] = builder
        return builder
    return decorator


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    eps: float = 1e-4,
    tol: float = 1e-4,
    name: str = 'op',
    seed: int = 0,
) -> GradcheckResult:
    """Compare analytic gradients of sum(fn(*inputs) * P) against central differences (float64)"""
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    rng = np.random.default_rng(seed)

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*leaves)
    projection = rng.standard_normal(out.shape)

    def objective(values: Sequence[np.ndarray]) -> float:
        with no_grad():
            result = fn(*[Tensor(v) for v in values])
        return float(np.sum(result.data * projection))

    loss = tsum(out * Tensor(projection))
    backward(loss)

    worst = 0.0
    for i, array in enumerate(arrays):
        analytic = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(array)
        numeric = np.zeros_like(array)
        flat = numeric.reshape(-1)
        for j in range(array.size):
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[i].reshape(-1)[j] += eps
            minus[i].reshape(-1)[j] -= eps
            flat[j] = (objective(plus) - objective(minus)) / (2.0 * eps)
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / scale))

    return GradcheckResult(name=name, max_rel_error=worst, passed=worst < tol, n_inputs=len(arrays))


def run_gradcheck_suite(names: Optional[Iterable[str]] = None, seed: int = 0) -> List[GradcheckResult]:
    results = []
    for name in (names or sorted(GRADCHECK_REGISTRY)):
        rng = np.random.default_rng(seed)
        fn, inputs = GRADCHECK_REGISTRY[name](rng)
        results.append(gradcheck(fn, inputs, name=name, seed=seed))
    return results


def _away_from_zero(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.2, 1.0, size=shape)


@register_gradcheck('add')
def _gc_add(rng):
    return (lambda a, b: a + b), [rng.standard_normal((2, 3)), rng.standard_normal((3,))]


@register_gradcheck('mul')
def _gc_mul(rng):
    return (lambda a, b: a * b), [rng.standard_normal((2, 3)), rng.standard_normal((2, 1))]


@register_gradcheck('div')
def _gc_div(rng):
    return (lambda a, b: a / b), [rng.standard_normal((4,)), _away_from_zero(rng, (4,))]


@register_gradcheck('exp_log_sqrt')
def _gc_exp_log_sqrt(rng):
    return (lambda a: log(sqrt(exp(a) + 1.0))), [rng.standard_normal((5,))]


@register_gradcheck('tanh')
def _gc_tanh(rng):
    return tanh, [rng.standard_normal((6,))]


@register_gradcheck('sigmoid')
def _gc_sigmoid(rng):
    return sigmoid, [rng.standard_normal((6,))]


@register_gradcheck('abs')
def _gc_abs(rng):
    return tabs, [_away_from_zero(rng, (5,))]


@register_gradcheck('clip')
def _gc_clip(rng):
    values = np.array([-2.0, -0.5, 0.3, 0.7, 1.8])
    return (lambda a: clip(a, -1.0, 1.0)), [values + rng.uniform(-0.05, 0.05, size=5)]


@register_gradcheck('sum_mean')
def _gc_sum_mean(rng):
    return (lambda a: tsum(a, axis=0) + mean(a, axis=1, keepdims=True)), [rng.standard_normal((2, 3))]


@register_gradcheck('reshape_transpose')
def _gc_reshape_transpose(rng):
    return (lambda a: transpose(reshape(a, (2, 2, 2)), (2, 0, 1)) * 1.5), [rng.standard_normal((8,))]


@register_gradcheck('concat_pad')
def _gc_concat_pad(rng):
    return (
        lambda a, b: pad(concat([a, b], axis=1), [(1, 0), (0, 2)]) * 2.0
    ), [rng.standard_normal((2, 2)), rng.standard_normal((2, 1))]


@register_gradcheck('take_getitem')
def _gc_take_getitem(rng):
    return (
        lambda a: take(a, np.array([[0, 2], [2, 1]]), axis=1) + reshape(getitem(a, (slice(None), slice(0, 1))), (2, 1, 1))
    ), [rng.standard_normal((2, 3))]


@register_gradcheck('matmul')
def _gc_matmul(rng):
    return matmul, [rng.standard_normal((2, 3)), rng.standard_normal((3, 2))]


@register_gradcheck('linear')
def _gc_linear(rng):
    return linear, [rng.standard_normal((2, 3)), rng.standard_normal((3, 2)), rng.standard_normal((2,))]


@register_gradcheck('softmax')
def _gc_softmax(rng):
    return (lambda a: softmax(a, axis=-1)), [rng.standard_normal((2, 4))]


@register_gradcheck('unfold')
def _gc_unfold(rng):
    return (lambda a: unfold(a, kernel=3, stride=1, axis=0)), [rng.standard_normal((6, 1))]


@register_gradcheck('unfold_strided')
def _gc_unfold_strided(rng):
    return (lambda a: unfold(a, kernel=2, stride=2, axis=1)), [rng.standard_normal((1, 7))]


@register_gradcheck('gru_sequence')
def _gc_gru_sequence(rng):
    n, i = 2, 3
    return gru_sequence, [
        rng.standard_normal((2, 3, i)),
        rng.standard_normal((2, n)) * 0.5,
        rng.standard_normal((i, 3 * n)) * 0.5,
        rng.standard_normal((n, 3 * n)) * 0.5,
        rng.standard_normal((3 * n,)) * 0.5,
        rng.standard_normal((3 * n,)) * 0.5,
    ]


@register_gradcheck('gru_step')
def _gc_gru_step(rng):
    n, i = 2, 2
    return gru_step, [
        rng.standard_normal((i,)),
        rng.standard_normal((n,)) * 0.5,
        rng.standard_normal((i, 3 * n)) * 0.5,
        rng.standard_normal((n, 3 * n)) * 0.5,
        rng.standard_normal((3 * n,)) * 0.5,
        rng.standard_normal((3 * n,)) * 0.5,
    ]


@register_gradcheck('lagged_correlation')
def _gc_lagged_correlation(rng):
    return (lambda y, r: lagged_correlation(y, r, 3)), [
        rng.standard_normal((4, 2, 1)), rng.standard_normal((4, 2, 1))
    ]


@register_gradcheck('lagged_mix')
def _gc_lagged_mix(rng):
    return lagged_mix, [rng.standard_normal((4, 3)), rng.standard_normal((4, 2, 1))]
