"""Reverse-mode autodiff over float64 numpy arrays, plus Adam.

Every op takes and returns :class:`Tensor`. When any input requires grad the
output remembers its parents and a closure mapping the output gradient to the
parent gradients; :func:`backward` replays those closures in reverse
topological order.

Image-like ops work on the last three axes ``(C, H, W)`` and accept an
optional leading batch axis ``(N, C, H, W)``.
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(tuple(s)) for s in shapes)}")


class NonFiniteError(FloatingPointError):
    def __init__(self, op: str):
        self.op = op
        super().__init__(f"{op}: produced non-finite values")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __pow__(self, q):
        return pow(self, q)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(op)
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, _parents=tuple(parents), _backward=backward, op=op)
    return Tensor(data, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make("div", out, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make("log", out, (a,), lambda g: (g / a.data,))


def pow(a, q: float) -> Tensor:
    """``a ** q`` for a scalar exponent.

    The derivative at ``a == 0`` is taken as 0 whenever ``q < 1`` (where the
    true derivative is infinite), so an underflowed probability cannot blow up
    the noise-robust loss.
    """
    a = as_tensor(a)
    q = float(q)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.power(a.data, q)

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = q * np.power(a.data, q - 1.0)
        if q < 1.0:
            d = np.where(a.data == 0.0, 0.0, d)
        return (g * d,)

    return _make("pow", out, (a,), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make("relu", a.data * mask, (a,), lambda g: (g * mask,))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    e = np.exp(-np.abs(a.data))
    out = np.maximum(a.data, 0.0) + np.log1p(e)
    # sigmoid(a) from the same exponential
    sig = np.where(a.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make("softplus", out, (a,), lambda g: (g * sig,))


def channel_softmax(a) -> Tensor:
    """Softmax over the channel axis (``-3``) of a ``(..., C, H, W)`` tensor."""
    a = as_tensor(a)
    if a.ndim < 3:
        raise ShapeError("channel_softmax", a.shape)
    z = a.data - a.data.max(axis=-3, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-3, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-3, keepdims=True)),)

    return _make("channel_softmax", out, (a,), backward)


# ---------------------------------------------------------------------------
# reductions and shape ops

def sum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", out, (a,), backward)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis)
    n = a.data.size / max(out.size, 1)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _make("mean", out, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    return _make("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError("broadcast_to", a.shape, shape) from None
    return _make("broadcast_to", out, (a,), lambda g: (_unbroadcast(g, a.shape),))


def concat_channels(tensors: Sequence) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    lead = {t.shape[:-3] + t.shape[-2:] for t in ts if t.ndim >= 3}
    if len(lead) != 1 or any(t.ndim < 3 for t in ts):
        raise ShapeError("concat_channels", *(t.shape for t in ts))
    out = np.concatenate([t.data for t in ts], axis=-3)
    bounds = np.cumsum([0] + [t.shape[-3] for t in ts])

    def backward(g):
        return tuple(g[..., lo:hi, :, :] for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _make("concat_channels", out, ts, backward)


def slice_channels(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    if a.ndim < 3 or not 0 <= start < stop <= a.shape[-3]:
        raise ShapeError("slice_channels", a.shape, (start, stop))

    def backward(g):
        full = np.zeros(a.shape)
        full[..., start:stop, :, :] = g
        return (full,)

    return _make("slice_channels", a.data[..., start:stop, :, :], (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra and convolutions

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return _make("matmul", a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


def _im2col(xb: np.ndarray, k: int) -> np.ndarray:
    """``(N, C, H, W)`` -> ``(C*k*k, N*H*W)`` patch matrix, zero padded to 'same' size."""
    n, c, h, w = xb.shape
    p = k // 2
    if k == 1:
        return xb.transpose(1, 0, 2, 3).reshape(c, n * h * w)
    xp = np.zeros((n, c, h + 2 * p, w + 2 * p))
    xp[:, :, p:p + h, p:p + w] = xb
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, n * h * w)


def _conv_raw(xb: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n, _, h, wd = xb.shape
    cout, k = w.shape[0], w.shape[2]
    cols = _im2col(xb, k)
    out = (w.reshape(cout, -1) @ cols).reshape(cout, n, h, wd).transpose(1, 0, 2, 3)
    return out, cols


def conv2d(x, w, b=None) -> Tensor:
    """Stride-1 'same' convolution (cross-correlation) with an odd square kernel.

    ``x`` is ``(C_in, H, W)`` or ``(N, C_in, H, W)``; ``w`` is
    ``(C_out, C_in, k, k)``; optional bias ``b`` is ``(C_out,)``.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim not in (3, 4) or w.ndim != 4 or w.shape[1] != x.shape[-3] \
            or w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
        raise ShapeError("conv2d", x.shape, w.shape)
    batched = x.ndim == 4
    xb = x.data if batched else x.data[None]
    cout = w.shape[0]
    out, cols = _conv_raw(xb, w.data)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (cout,):
            raise ShapeError("conv2d", w.shape, b.shape)
        out = out + b.data[None, :, None, None]
        parents.append(b)
    if not batched:
        out = out[0]

    def backward(g):
        gb = g if batched else g[None]
        g2 = gb.transpose(1, 0, 2, 3).reshape(cout, -1)
        gw = (g2 @ cols.T).reshape(w.shape)
        gx = None
        if x.requires_grad:
            # input gradient is a 'same' convolution with the flipped, transposed kernel
            wt = np.ascontiguousarray(w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gx, _ = _conv_raw(np.ascontiguousarray(gb), wt)
            if not batched:
                gx = gx[0]
        grads = [gx, gw]
        if b is not None:
            grads.append(gb.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _make("conv2d", out, parents, backward)


def maxpool2(a) -> Tensor:
    """2x2 max pooling over the last two axes."""
    a = as_tensor(a)
    h, w = a.shape[-2:]
    if a.ndim < 3 or h % 2 or w % 2:
        raise ShapeError("maxpool2", a.shape)
    blocks = a.data.reshape(a.shape[:-2] + (h // 2, 2, w // 2, 2))
    blocks = np.moveaxis(blocks, -3, -2).reshape(a.shape[:-2] + (h // 2, w // 2, 4))
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gb = gb.reshape(a.shape[:-2] + (h // 2, w // 2, 2, 2))
        gb = np.moveaxis(gb, -2, -3).reshape(a.shape)
        return (gb,)

    return _make("maxpool2", out, (a,), backward)


def upsample_nearest2(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim < 3:
        raise ShapeError("upsample_nearest2", a.shape)
    out = a.data.repeat(2, axis=-2).repeat(2, axis=-1)

    def backward(g):
        h, w = a.shape[-2:]
        gr = g.reshape(a.shape[:-2] + (h, 2, w, 2))
        return (gr.sum(axis=(-3, -1)),)

    return _make("upsample_nearest2", out, (a,), backward)


PRIMITIVES = {
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg, "exp": exp,
    "log": log, "pow": pow, "relu": relu, "softplus": softplus,
    "channel_softmax": channel_softmax, "sum": sum, "mean": mean,
    "reshape": reshape, "broadcast_to": broadcast_to,
    "concat_channels": concat_channels, "slice_channels": slice_channels,
    "matmul": matmul, "conv2d": conv2d, "maxpool2": maxpool2,
    "upsample_nearest2": upsample_nearest2,
}


# ---------------------------------------------------------------------------
# backward pass

@dataclass
class Tape:
    """Nodes of one forward pass in topological order (inputs before outputs)."""

    nodes: list[Tensor]

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(root, False)]
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
        return cls(order)


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every grad-requiring leaf."""
    if root.data.size != 1:
        raise ShapeError("backward", root.shape, ())
    if not root.requires_grad:
        return
    tape = Tape.from_root(root)
    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def grad_check(f: Callable[..., Tensor], x, eps: float = 1e-5) -> float:
    """Max relative error between the analytic gradient and central differences.

    ``x`` is a Tensor or a sequence of Tensors passed positionally to ``f``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps={eps} outside [1e-7, 1e-3]")
    xs = [x] if isinstance(x, Tensor) else list(x)
    base = [np.array(t.data, dtype=np.float64) for t in xs]

    def value(arrays):
        return float(f(*[Tensor(a) for a in arrays]).data)

    v0 = value(base)
    if value(base) != v0:
        raise RuntimeError("grad_check: function is not deterministic")

    leaves = [Tensor(a.copy(), requires_grad=True) for a in base]
    backward(f(*leaves))
    worst = 0.0
    for i, a in enumerate(base):
        analytic = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(a)
        flat = a.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            hi = value(base)
            flat[j] = orig - eps
            lo = value(base)
            flat[j] = orig
            numeric = (hi - lo) / (2 * eps)
            err = abs(analytic.reshape(-1)[j] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# parameters and optimizer

_PSET_MAGIC = b"PSET"


class ParameterSet:
    """Ordered name -> Tensor mapping for one network."""

    def __init__(self, tensors: Iterable[tuple[str, Tensor]] = ()):
        self._t: OrderedDict[str, Tensor] = OrderedDict()
        for name, t in tensors:
            self[name] = t

    def __setitem__(self, name: str, t) -> None:
        t = t if isinstance(t, Tensor) else Tensor(t)
        t.requires_grad = True
        self._t[name] = t

    def __getitem__(self, name: str) -> Tensor:
        return self._t[name]

    def __contains__(self, name) -> bool:
        return name in self._t

    def __iter__(self):
        return iter(self._t)

    def __len__(self):
        return len(self._t)

    def items(self):
        return self._t.items()

    def names(self) -> list[str]:
        return list(self._t)

    def schema(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(n, t.shape) for n, t in self._t.items()]

    def num_values(self) -> int:
        return int(np.sum([t.data.size for t in self._t.values()], dtype=np.int64))

    def copy(self) -> "ParameterSet":
        return ParameterSet((n, Tensor(t.data.copy())) for n, t in self._t.items())

    def zero_grad(self) -> None:
        for t in self._t.values():
            t.grad = None

    def flat(self) -> np.ndarray:
        if not self._t:
            return np.zeros(0)
        return np.concatenate([t.data.reshape(-1) for t in self._t.values()])

    def load_flat(self, values: np.ndarray) -> None:
        if values.size != self.num_values():
            raise ShapeError("load_flat", (self.num_values(),), values.shape)
        off = 0
        for t in self._t.values():
            n = t.data.size
            t.data = values[off:off + n].reshape(t.shape).copy()
            off += n

    def prefixed(self, prefix: str) -> "ParameterSet":
        return ParameterSet((prefix + n, t) for n, t in self._t.items())

    def to_bytes(self) -> bytes:
        """``PSET`` + u32 header length + JSON header + little-endian f64 data."""
        header, off = [], 0
        for n, t in self._t.items():
            header.append({"name": n, "shape": list(t.shape), "offset": off})
            off += t.data.size
        hbytes = json.dumps(header, separators=(",", ":")).encode()
        body = self.flat().astype("<f8").tobytes()
        return _PSET_MAGIC + struct.pack("<I", len(hbytes)) + hbytes + body

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ParameterSet":
        if blob[:4] != _PSET_MAGIC:
            raise ValueError("not a ParameterSet blob")
        (hlen,) = struct.unpack("<I", blob[4:8])
        header = json.loads(blob[8:8 + hlen])
        values = np.frombuffer(blob[8 + hlen:], dtype="<f8").astype(np.float64)
        total = int(np.sum([int(np.prod(h["shape"])) for h in header]))
        if values.size != total:
            raise ValueError(f"ParameterSet blob holds {values.size} values, header says {total}")
        ps = cls()
        for h in header:
            n = int(np.prod(h["shape"]))
            ps[h["name"]] = Tensor(values[h["offset"]:h["offset"] + n].reshape(h["shape"]).copy())
        return ps


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ParameterSet, state: AdamState) -> None:
    for name, t in params.items():
        if t.grad is None:
            raise ValueError(f"adam_step: parameter {name!r} has no gradient")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, t in params.items():
        g = t.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        t.data = t.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        t.grad = None
