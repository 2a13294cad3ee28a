"""Small define-by-run reverse-mode autodiff engine over numpy arrays.

Every differentiable operation appends one node to the active
:class:`Tape`; :func:`backward` walks that tape once in reverse order.
Only the operations the agents need are provided.
"""

from __future__ import annotations

import contextlib
import struct
from collections.abc import Callable, Mapping, Sequence
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, FormatError

__all__ = [
    "Tensor", "Tape", "backward", "no_grad", "current_tape", "grad_check",
    "parameter", "uniform_init",
    "add", "sub", "mul", "div", "neg", "matmul", "tsum", "mean", "reshape",
    "concat", "stack", "exp", "log", "clip", "relu", "sigmoid", "tanh",
    "softplus", "softmax", "log_softmax", "pick", "batched_dot", "linear",
    "conv2d", "conv_output_size", "embedding", "lstm_cell",
    "save_checkpoint", "load_checkpoint",
]


class Tape:
    """Ordered record of the operations of one forward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.recorded = 0
        self.consumed = False
        self.visits = 0

    def __len__(self):
        return self.recorded

    def __enter__(self):
        _state.stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.remove(self)
        return False


class _Node:
    __slots__ = ("inputs", "output", "backward_fn", "name")

    def __init__(self, inputs, output, backward_fn, name):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.name = name


class _State:
    def __init__(self):
        self.default = Tape()
        self.stack: list[Tape] = []
        self.enabled = True


_state = _State()


def current_tape() -> Tape:
    return _state.stack[-1] if _state.stack else _state.default


@contextlib.contextmanager
def no_grad():
    """Disable recording; used for greedy evaluation."""
    prev = _state.enabled
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """n-dimensional array with an optional gradient slot."""

    __array_priority__ = 100

    def __init__(self, values, requires_grad=False, name=None, dtype=None):
        if isinstance(values, Tensor):
            values = values.data
        arr = np.asarray(values, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._tape = None
        self._is_leaf = True

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.data.shape[0]

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

    def __getitem__(self, index):
        return _getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def parameter(values, name=None, dtype=np.float32) -> Tensor:
    return Tensor(np.array(values, dtype=dtype), requires_grad=True, name=name)


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    """Uniform in [-s, s] with s = 1/sqrt(fan_in)."""
    s = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-s, s, size=shape).astype(dtype)


def _as_tensor(x, like=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _record(data, inputs, backward_fn, name) -> Tensor:
    out = Tensor(data)
    if _state.enabled and any(t.requires_grad for t in inputs):
        tape = current_tape()
        out.requires_grad = True
        out._is_leaf = False
        out._tape = tape
        tape.nodes.append(_Node(inputs, out, backward_fn, name))
        tape.recorded += 1
    return out


def backward(loss: Tensor, tape: Tape | None = None) -> dict[Tensor, np.ndarray]:
    """Back-propagate from a scalar ``loss``.

    Gradients accumulate into ``.grad`` of every leaf tensor that requires
    them; the mapping leaf -> gradient is also returned. A tape can be
    consumed only once.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape if tape is not None else loss._tape
    if tape is None or loss._tape is not tape:
        raise ContractError("loss was not recorded on this tape")
    if tape.consumed:
        raise ContractError("stale tape: backward already ran on it; re-run the forward pass")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        tape.visits += 1
        g_out = grads.pop(id(node.output), None)
        if g_out is None:
            continue
        g_ins = node.backward_fn(g_out)
        for t, g in zip(node.inputs, g_ins):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
            if t._is_leaf:
                leaves[key] = t

    out = {}
    for key, t in leaves.items():
        g = grads[key].astype(t.dtype, copy=False)
        t.grad = g if t.grad is None else t.grad + g
        out[t] = t.grad
    # outputs point back at the tape, so the graph is a reference cycle;
    # drop it here rather than wait for the cycle collector
    tape.nodes.clear()
    if tape is _state.default:
        _state.default = Tape()
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                   "mul")


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    ad, bd = a.data, b.data
    out = ad / bd
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape),
                              _unbroadcast(-g * out / bd, bd.shape)),
                   "div")


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _record(np.log(ad), (a,), lambda g: (g / ad,), "log")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    ad = a.data
    mask = (ad >= lo) & (ad <= hi)
    return _record(np.clip(ad, lo, hi), (a,), lambda g: (g * mask,), "clip")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # stable for large |x|
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_np(a.data)
    return _record(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), computed without overflow."""
    ad = a.data
    out = np.maximum(ad, 0) + np.log1p(np.exp(-np.abs(ad)))
    return _record(out, (a,), lambda g: (g * _sigmoid_np(ad),), "softplus")


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, shifted by the row max."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record(out, (a,), bw, "softmax")


def log_softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _record(out, (a,), bw, "log_softmax")


# ------------------------------------------------------------------ structure

def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis for i in items)


def _getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype
    basic = _is_basic_index(index)

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        if basic:
            out[index] += g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _record(a.data[index], (a,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis=-1) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw, "concat")


def stack(tensors: Sequence[Tensor], axis=0) -> Tensor:
    tensors = list(tensors)

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _record(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), bw, "stack")


def pick(a: Tensor, index) -> Tensor:
    """Select ``a[r, index[r]]`` for every row of a 2-d tensor."""
    index = np.asarray(index, dtype=np.int64)
    rows = np.arange(a.shape[0])
    shape, dtype = a.shape, a.dtype

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        out[rows, index] = g
        return (out,)

    return _record(a.data[rows, index], (a,), bw, "pick")


# -------------------------------------------------------------------- linear

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not agree")
    ad, bd = a.data, b.data
    return _record(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W + b`` for x of shape (n, i), W of shape (i, o)."""
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[0]:
        raise DimensionError(f"linear: input shape {x.shape} incompatible with weight shape {W.shape}")
    if b is not None and b.shape != (W.shape[1],):
        raise DimensionError(f"linear: bias shape {b.shape} incompatible with weight shape {W.shape}")
    xd, Wd = x.data, W.data
    out = xd @ Wd
    if b is None:
        return _record(out, (x, W), lambda g: (g @ Wd.T, xd.T @ g), "linear")
    out = out + b.data
    return _record(out, (x, W, b), lambda g: (g @ Wd.T, xd.T @ g, g.sum(axis=0)), "linear")


def batched_dot(g: Tensor, e: Tensor) -> Tensor:
    """Scores ``out[n, c] = sum_d g[n, d] * e[n, c, d]``."""
    if g.ndim != 2 or e.ndim != 3 or g.shape[0] != e.shape[0] or g.shape[1] != e.shape[2]:
        raise DimensionError(f"batched_dot shapes {g.shape} and {e.shape} do not agree")
    gd, ed = g.data, e.data
    out = np.einsum("nd,ncd->nc", gd, ed)
    return _record(out, (g, e),
                   lambda go: (np.einsum("nc,ncd->nd", go, ed), go[:, :, None] * gd[:, None, :]),
                   "batched_dot")


def conv_output_size(size: int, stride: int) -> int:
    return (size - 1) // stride + 1


def conv2d(x: Tensor, k: Tensor, stride: int = 1, bias: Tensor | None = None) -> Tensor:
    """3x3 cross-correlation with zero padding 1.

    x is (n, c, h, w), k is (f, c, 3, 3); output is (n, f, h', w') with
    h' = (h - 1) // stride + 1.
    """
    if stride not in (1, 2):
        raise ContractError(f"conv2d stride must be 1 or 2, got {stride}")
    if x.ndim != 4 or k.ndim != 4 or k.shape[2:] != (3, 3):
        raise DimensionError(f"conv2d expects x (n,c,h,w) and k (f,c,3,3), got {x.shape} and {k.shape}")
    n, c, h, w = x.shape
    f = k.shape[0]
    if k.shape[1] != c:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} has {c} channels, kernel {k.shape} has {k.shape[1]}")
    if h < 3 or w < 3:
        raise DimensionError(f"conv2d input spatial size {h}x{w} is below 3x3")
    ho, wo = conv_output_size(h, stride), conv_output_size(w, stride)

    # channels-last internally: one GEMM per pass; the NCHW results handed
    # back are transposed views, so chained convs never copy for layout.
    xh = x.data.transpose(0, 2, 3, 1)
    xp = np.zeros((n, h + 2, w + 2, c), dtype=xh.dtype)
    xp[:, 1:-1, 1:-1, :] = xh
    spans = [(di, dj) for di in range(3) for dj in range(3)]
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, 9 * c)
    k2 = k.data.transpose(2, 3, 1, 0).reshape(9 * c, f)
    out = cols @ k2
    if bias is not None:
        if bias.shape != (f,):
            raise DimensionError(f"conv2d bias shape {bias.shape} does not match {f} filters")
        out += bias.data
    out = out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def bw(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, f)
        gk = (cols.T @ g2).reshape(3, 3, c, f).transpose(3, 2, 0, 1)
        gb = g2.sum(axis=0) if bias is not None else None
        if not x.requires_grad:
            return (None, gk) if bias is None else (None, gk, gb)
        gcols = (g2 @ k2.T).reshape(n, ho, wo, 9, c)
        gxp = np.zeros_like(xp)
        for o, (di, dj) in enumerate(spans):
            gxp[:, di:di + stride * (ho - 1) + 1:stride, dj:dj + stride * (wo - 1) + 1:stride, :] += gcols[:, :, :, o, :]
        gx = gxp[:, 1:-1, 1:-1, :].transpose(0, 3, 1, 2)
        return (gx, gk) if bias is None else (gx, gk, gb)

    inputs = (x, k) if bias is None else (x, k, bias)
    return _record(out, inputs, bw, "conv2d")


def embedding(ids, table: Tensor) -> Tensor:
    """Row gather ``table[ids]``; backward scatter-adds into the rows."""
    ids = np.asarray(ids, dtype=np.int64)
    v = table.shape[0]
    bad = ids[(ids < 0) | (ids >= v)]
    if bad.size:
        raise IndexError(f"embedding id {int(bad.flat[0])} out of range for table of {v} rows")
    shape, dtype = table.shape, table.dtype

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, ids, g)
        return (out,)

    return _record(table.data[ids], (table,), bw, "embedding")


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, params: Mapping[str, Tensor]):
    """One LSTM step.

    ``params`` holds ``w_x`` (d, 4u), ``w_h`` (u, 4u) and ``b`` (4u,) with the
    gate blocks concatenated in the order input, forget, candidate, output.
    Returns ``(h_next, c_next)``.
    """
    w_x, w_h, b = params["w_x"], params["w_h"], params["b"]
    n, d = x.shape
    u = h.shape[1]
    if w_x.shape != (d, 4 * u) or w_h.shape != (u, 4 * u) or b.shape != (4 * u,) or c.shape != h.shape:
        raise DimensionError(
            f"lstm_cell: x {x.shape}, h {h.shape}, c {c.shape} incompatible with "
            f"w_x {w_x.shape}, w_h {w_h.shape}, b {b.shape}")
    z = linear(x, w_x, b) + matmul(h, w_h)
    i = sigmoid(z[:, 0:u])
    f = sigmoid(z[:, u:2 * u])
    g = tanh(z[:, 2 * u:3 * u])
    o = sigmoid(z[:, 3 * u:4 * u])
    c_next = f * c + i * g
    h_next = o * tanh(c_next)
    return h_next, c_next


# ----------------------------------------------------------------- checking

def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
               elements: int | None = None, rng: np.random.Generator | None = None,
               floor: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    Error per element is |a - n| / max(floor, |a| + |n|); the floor sits well
    above the ~1e-11 roundoff of a central difference at eps=1e-5 so that
    exactly-zero gradients do not register as errors. With ``elements``
    set, only that many randomly chosen entries per input are perturbed.
    """
    inputs = list(inputs)
    for t in inputs:
        t.grad = None
    with Tape() as tape:
        loss = f(*inputs)
    if loss.requires_grad and loss._tape is tape:
        backward(loss, tape)
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        t.data = np.ascontiguousarray(t.data)
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        picks = range(flat.size)
        if elements is not None and flat.size > elements:
            picks = (rng or np.random.default_rng(0)).choice(flat.size, size=elements, replace=False)
        for idx in picks:
            orig = flat[idx]
            flat[idx] = orig + eps
            with no_grad():
                up = float(f(*inputs).data)
            flat[idx] = orig - eps
            with no_grad():
                down = float(f(*inputs).data)
            flat[idx] = orig
            numeric = (up - down) / (2 * eps)
            a = float(analytic.reshape(-1)[idx])
            err = abs(a - numeric) / max(floor, abs(a) + abs(numeric))
            worst = max(worst, err)
        t.grad = None
    return worst


# -------------------------------------------------------------- checkpoints

_CKPT_MAGIC = b"EMLB"
_CKPT_VERSION = 1


def save_checkpoint(path, arrays: Mapping[str, np.ndarray]) -> None:
    """Write named arrays in the EMLB binary layout (float32 payloads)."""
    parts = [_CKPT_MAGIC, struct.pack("<II", _CKPT_VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr.data if isinstance(arr, Tensor) else arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    pos = 0

    def take(size):
        nonlocal pos
        if pos + size > len(buf):
            raise FormatError(f"truncated checkpoint {path}", offset=pos)
        chunk = buf[pos:pos + size]
        pos += size
        return chunk

    if take(4) != _CKPT_MAGIC:
        raise FormatError(f"{path} is not an EMLB checkpoint", offset=0)
    version, count = struct.unpack("<II", take(8))
    if version != _CKPT_VERSION:
        raise FormatError(f"unsupported EMLB version {version}", offset=4)
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        size = int(np.prod(dims)) if rank else 1
        arrays[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims).astype(np.float32)
    if pos != len(buf):
        raise FormatError(f"trailing bytes in checkpoint {path}", offset=pos)
    return arrays
