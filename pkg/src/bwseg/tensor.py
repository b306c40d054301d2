"""Minimal reverse-mode automatic differentiation on numpy arrays.

Operations record onto the active :class:`Tape` (a thread-local stack entered
with ``with Tape() as tape:``). Outside a tape the primitives run as plain
numpy and nothing is recorded, which is how inference runs.
"""

from __future__ import annotations

import hashlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

LOG_FLOOR = 1e-12

_local = threading.local()


class ShapeError(ValueError):
    """Operand shapes do not satisfy a primitive's rules."""

    def __init__(self, primitive: str, *shapes, detail: str = ""):
        shown = ", ".join(str(tuple(s)) for s in shapes)
        msg = f"{primitive}: incompatible shapes {shown}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.primitive = primitive
        self.shapes = shapes


class DomainError(ValueError):
    pass


class ContractError(ValueError):
    pass


def make_rng(seed: int | None) -> np.random.Generator:
    """Seeded generator used for every stochastic draw (eps, dropout masks)."""
    return np.random.Generator(np.random.PCG64(seed))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype == np.float32 else np.float64
        self.data = np.array(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: int | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> Tensor:
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t.node = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        tape = current_tape()
        if tape is None:
            raise ContractError("backward: no active tape")
        backward(tape, self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class OpRecord:
    kind: str
    inputs: tuple[int, ...]
    output: int
    saved: dict = field(default_factory=dict)
    backward_fn: Callable | None = None
    operands: tuple = ()


class Tape:
    """Ordered log of recorded operations; backward replays it in reverse."""

    def __init__(self):
        self.records: list[OpRecord] = []
        self._next = 0
        self._tensors: dict[int, Tensor] = {}

    def __enter__(self) -> Tape:
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def _node_of(self, t: Tensor) -> int:
        if t.node is None or self._tensors.get(t.node) is not t:
            t.node = self._next
            self._tensors[self._next] = t
            self._next += 1
            t.data.flags.writeable = False
        return t.node

    def record(self, kind, operands, out, backward_fn, saved=None):
        ids = tuple(self._node_of(t) for t in operands)
        oid = self._node_of(out)
        self.records.append(OpRecord(kind, ids, oid, saved or {}, backward_fn, tuple(operands)))

    def digest(self) -> str:
        """Hash of the op sequence, wiring and every output value."""
        h = hashlib.sha256()
        for r in self.records:
            h.update(r.kind.encode())
            h.update(np.asarray(r.inputs + (r.output,), dtype=np.int64).tobytes())
            h.update(np.ascontiguousarray(self._tensors[r.output].data).tobytes())
            for k in sorted(r.saved):
                v = r.saved[k]
                if isinstance(v, np.ndarray):
                    h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()

    def __len__(self):
        return len(self.records)


def current_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or np.float64))


def _emit(kind: str, operands: Sequence[Tensor], out_data: np.ndarray, backward_fn, saved=None) -> Tensor:
    out = Tensor._wrap(np.asarray(out_data))
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in operands):
        out.requires_grad = True
        tape.record(kind, operands, out, backward_fn, saved)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(kind, a: Tensor, b: Tensor):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(kind, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), a.data + b.data,
                 lambda g, need: (_unbroadcast(g, sa) if need[0] else None,
                                  _unbroadcast(g, sb) if need[1] else None))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g, need: (_unbroadcast(g, sa) if need[0] else None,
                                  _unbroadcast(-g, sb) if need[1] else None))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g, need):
        return (_unbroadcast(g * bd, ad.shape) if need[0] else None,
                _unbroadcast(g * ad, bd.shape) if need[1] else None)

    return _emit("mul", (a, b), ad * bd, bw)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _emit("scale", (a,), a.data * a.dtype.type(s), lambda g, need: (g * s,), {"s": s})


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit("exp", (a,), out, lambda g, need: (g * out,))


def log(a: Tensor, clamp: bool = True) -> Tensor:
    """Natural log; with ``clamp`` the argument is floored at 1e-12 first."""
    x = a.data
    if clamp:
        # NaN must survive the clamp so callers can detect it
        keep = ~(x <= LOG_FLOOR)
        safe = np.where(keep, x, LOG_FLOOR)
        return _emit("log", (a,), np.log(safe), lambda g, need: (np.where(keep, g / safe, 0.0),))
    if np.any(x <= 0):
        raise DomainError(f"log: non-positive argument (min {x.min():.3g}) with clamp disabled")
    return _emit("log", (a,), np.log(x), lambda g, need: (g / x,))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _emit("relu", (a,), a.data * pos, lambda g, need: (g * pos,))


def clip(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    x = a.data
    inside = np.ones(x.shape, dtype=bool)
    if lo is not None:
        inside &= x >= lo
    if hi is not None:
        inside &= x <= hi
    return _emit("clip", (a,), np.clip(x, lo, hi), lambda g, need: (g * inside,))


def dropout(a: Tensor, mask: np.ndarray, keep_prob: float) -> Tensor:
    """Inverted dropout with a caller-supplied binary mask (saved on the tape)."""
    mask = np.asarray(mask)
    if mask.shape != a.shape:
        raise ShapeError("dropout", a.shape, mask.shape)
    if not 0.0 < keep_prob <= 1.0:
        raise DomainError(f"dropout: keep_prob must be in (0, 1], got {keep_prob}")
    m = mask.astype(a.dtype) / a.dtype.type(keep_prob)
    return _emit("dropout", (a,), a.data * m, lambda g, need: (g * m,), {"mask": mask})


# ---------------------------------------------------------------- shape ops


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", src, tuple(shape)) from None
    return _emit("reshape", (a,), out, lambda g, need: (g.reshape(src),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError("broadcast_to", src, tuple(shape)) from None
    return _emit("broadcast_to", (a,), out, lambda g, need: (_unbroadcast(g, src),))


def getitem(a: Tensor, key) -> Tensor:
    """Basic (slice/int) indexing only."""
    src, dtype = a.shape, a.dtype

    def bw(g, need):
        gx = np.zeros(src, dtype=dtype)
        gx[key] = g
        return (gx,)

    return _emit("getitem", (a,), a.data[key], bw)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    shapes = [t.shape for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *shapes, detail=f"axis={axis}") from None
    bounds = np.cumsum([0] + [s[axis] for s in shapes])

    def bw(g, need):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) if need[i] else None
                     for i in range(len(shapes)))

    return _emit("concat", tuple(tensors), out, bw)


# ---------------------------------------------------------------- reductions


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = a.shape

    def bw(g, need):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src),)

    return _emit("sum", (a,), np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape
    count = a.size if axis is None else int(np.prod([src[i] for i in np.atleast_1d(axis)]))

    def bw(g, need):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, src),)

    return _emit("mean", (a,), np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), bw)


def mse(a: Tensor, b) -> Tensor:
    """Mean of squared differences."""
    b = _as_tensor(b, a)
    if a.shape != b.shape:
        raise ShapeError("mse", a.shape, b.shape)
    d = a.data - b.data
    n = d.size

    def bw(g, need):
        gd = g * 2.0 * d / n
        return (gd if need[0] else None, -gd if need[1] else None)

    return _emit("mse", (a, b), np.asarray(np.mean(d * d)), bw)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _emit("matmul", (a, b), ad @ bd,
                 lambda g, need: (g @ bd.T if need[0] else None, ad.T @ g if need[1] else None))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Dense map ``x @ w.T + b`` for x of shape (batch, in), w of shape (out, in)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError("linear", x.shape, w.shape)
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError("linear", w.shape, b.shape, detail="bias")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is not None:
        out = out + b.data

    def bw(g, need):
        grads = [g @ wd if need[0] else None, g.T @ xd if need[1] else None]
        if b is not None:
            grads.append(g.sum(axis=0) if need[2] else None)
        return tuple(grads)

    operands = (x, w) if b is None else (x, w, b)
    return _emit("linear", operands, out, bw)


def softmax(a: Tensor, axis: int = 1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g, need):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", (a,), out, bw)


# ---------------------------------------------------------------- spatial ops


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-1 convolution with zero padding that preserves H and W.

    x is (B, Cin, H, W); w is (Cout, Cin, k, k) with odd k.
    """
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    cout, cin, kh, kw = w.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d", x.shape, w.shape, detail="kernel extents must be odd")
    if b is not None and b.shape != (cout,):
        raise ShapeError("conv2d", w.shape, b.shape, detail="bias")
    B, _, H, W = x.shape
    ph, pw = kh // 2, kw // 2
    xh = np.pad(x.data.transpose(0, 2, 3, 1), ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    cols = np.empty((B, H, W, kh, kw, cin), dtype=xh.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xh[:, i:i + H, j:j + W, :]
    cols = cols.reshape(B * H * W, kh * kw * cin)
    wmat = w.data.transpose(0, 2, 3, 1).reshape(cout, kh * kw * cin)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = out.reshape(B, H, W, cout).transpose(0, 3, 1, 2)

    def bw(g, need):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * H * W, cout)
        gx = gw = gb = None
        if need[0]:
            dcols = (g2 @ wmat).reshape(B, H, W, kh, kw, cin)
            dxh = np.zeros((B, H + 2 * ph, W + 2 * pw, cin), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxh[:, i:i + H, j:j + W, :] += dcols[:, :, :, i, j, :]
            gx = dxh[:, ph:ph + H, pw:pw + W, :].transpose(0, 3, 1, 2)
        if need[1]:
            gw = (g2.T @ cols).reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2)
        if b is not None and need[2]:
            gb = g2.sum(axis=0)
        return (gx, gw) if b is None else (gx, gw, gb)

    operands = (x, w) if b is None else (x, w, b)
    return _emit("conv2d", operands, out, bw)


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2. Ties route the gradient to the first maximum."""
    if x.data.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError("max_pool2d", x.shape, detail="needs (B, C, even H, even W)")
    B, C, H, W = x.shape
    win = x.data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
    idx = win.argmax(axis=-1)[..., None]
    out = np.take_along_axis(win, idx, axis=-1)[..., 0]

    def bw(g, need):
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, idx, g[..., None], axis=-1)
        gx = gw.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        return (gx,)

    return _emit("max_pool2d", (x,), out, bw)


def upsample2d(x: Tensor) -> Tensor:
    """Nearest-neighbour upsampling by a factor of 2."""
    if x.data.ndim != 4:
        raise ShapeError("upsample2d", x.shape)
    B, C, H, W = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    return _emit("upsample2d", (x,), out,
                 lambda g, need: (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),))


# ---------------------------------------------------------------- backward


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``.grad`` of every grad-requiring tensor reachable from ``loss``."""
    if loss.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad or loss.node is None:
        return
    grads: dict[int, np.ndarray] = {loss.node: np.ones(loss.shape, dtype=loss.dtype)}
    for rec in reversed(tape.records):
        g = grads.pop(rec.output, None)
        if g is None:
            continue
        need = tuple(t.requires_grad for t in rec.operands)
        for nid, t, gi in zip(rec.inputs, rec.operands, rec.backward_fn(g, need)):
            if gi is None or not t.requires_grad:
                continue
            if nid in grads:
                grads[nid] = grads[nid] + gi
            else:
                grads[nid] = gi
    for nid, g in grads.items():
        t = tape._tensors[nid]
        g = np.array(np.broadcast_to(g, t.shape), dtype=t.dtype)
        t.grad = g if t.grad is None else t.grad + g


def finite_difference_grad(f: Callable[[Tensor], object], x: Tensor, eps: float = 1e-6) -> Tensor:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if eps <= 0:
        raise DomainError("finite_difference_grad: eps must be positive")
    base = np.array(x.data, dtype=x.dtype)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)

    def value(arr):
        out = f(Tensor(arr.reshape(base.shape), dtype=base.dtype))
        return float(out.item() if isinstance(out, Tensor) else out)

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = value(flat)
        flat[i] = orig - eps
        lo = value(flat)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return Tensor(grad, dtype=base.dtype)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||), 0 when both vanish."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)
