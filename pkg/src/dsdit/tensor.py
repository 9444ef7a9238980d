"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` when at
least one input requires a gradient.  Outside a tape (inference) the same
functions just compute values.  Every public op checks shapes explicitly and
raises :class:`NumericError` if a result contains NaN or Inf.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

DTYPE = np.float64


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A NaN or Inf was produced or supplied."""


class ContractError(RuntimeError):
    """An API precondition was violated (e.g. non-scalar loss)."""


def _ensure_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NumericError(f"{op}: non-finite value in result")
    return arr


class Tensor:
    """Immutable n-d array of float64 values, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE, copy=True, order="C")
        _ensure_finite(arr, "Tensor")
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __deepcopy__(self, memo):
        return Tensor(self.data, self.requires_grad, self.name)

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        # trusted internal path: arr is fresh and already checked
        t = object.__new__(cls)
        arr.setflags(write=False)
        t.data, t.requires_grad, t.name = arr, requires_grad, None
        return t

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape


@dataclass
class _Node:
    out: Tensor
    parents: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of primitive ops; creation order is topological."""

    nodes: list[_Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.pop()

    def __len__(self) -> int:
        return len(self.nodes)


_TAPES: list[Tape] = []


def _record(out_data: np.ndarray, parents: tuple[Tensor, ...], vjp, op: str) -> Tensor:
    _ensure_finite(out_data, op)
    tracked = bool(_TAPES) and any(p.requires_grad for p in parents)
    out = Tensor._wrap(out_data, tracked)
    if tracked:
        _TAPES[-1].nodes.append(_Node(out, parents, vjp))
    return out


GradientMap = dict  # Tensor -> np.ndarray, keyed by parameter identity


def backward(loss: Tensor, tape: Tape, params: Iterable[Tensor] | None = None) -> GradientMap:
    """Reverse sweep over ``tape`` starting from the scalar ``loss``.

    Returns a mapping from each tensor in ``params`` to its gradient; when
    ``params`` is omitted, every leaf that requires a gradient is reported.
    Parameters the loss does not depend on map to zeros.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        if params is None:
            raise ContractError("loss is not on the tape")
        return {p: np.zeros(p.shape) for p in params}

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    leaves: dict[int, Tensor] = {}
    produced = {id(n.out) for n in tape.nodes}
    if id(loss) not in produced:
        raise ContractError("loss is not on the tape")
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) not in produced:
                leaves[id(parent)] = parent
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if params is None:
        params = leaves.values()
    return {p: grads.get(id(p), np.zeros(p.shape)).reshape(p.shape) for p in params}


# ---------------------------------------------------------------------------
# elementwise with restricted broadcasting


def _broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    if a == b:
        return a
    # scalar or last-axis vector
    for x, y in ((a, b), (b, a)):
        if len(y) == 0 or (len(y) == 1 and len(x) >= 1 and y[0] == x[-1]):
            return x
    # same rank with explicit unit axes
    if len(a) == len(b) and all(i == j or i == 1 or j == 1 for i, j in zip(a, b)):
        return tuple(max(i, j) for i, j in zip(a, b))
    raise DimensionError(f"{op}: cannot combine shapes {a} and {b}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                   "mul")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _record(ad * ad, (a,), lambda g: (2.0 * ad * g,), "square")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,), "exp")


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


_sigmoid = expit


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x), elementwise."""
    x = a.data
    s = _sigmoid(x)
    return _record(x * s, (a,), lambda g: (g * s * (1.0 + x * (1.0 - s)),), "silu")


activation_silu = silu


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.asarray(out), (a,), vjp, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[i] for i in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"reshape: {old} -> {tuple(shape)}") from exc
    return _record(out, (a,), lambda g: (g.reshape(old),), "reshape")


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"permute: bad axes {axes} for rank {a.ndim}")
    inv = tuple(np.argsort(axes))
    return _record(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                   lambda g: (g.transpose(inv),), "permute")


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(a, axes)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    ref = parts[0].shape
    ax = axis % len(ref)
    for p in parts[1:]:
        if len(p.shape) != len(ref) or any(
                i != j for k, (i, j) in enumerate(zip(p.shape, ref)) if k != ax):
            raise DimensionError(f"concat: {p.shape} incompatible with {ref} on axis {axis}")
    sizes = [p.shape[ax] for p in parts]
    bounds = np.cumsum(sizes)[:-1]
    return _record(np.concatenate([p.data for p in parts], axis=ax), tuple(parts),
                   lambda g: tuple(np.split(g, bounds, axis=ax)), "concat")


def split(a: Tensor, sizes: Sequence[int], axis: int) -> list[Tensor]:
    """Split along ``axis`` into consecutive pieces of the given sizes."""
    ax = axis % a.ndim
    if sum(sizes) != a.shape[ax]:
        raise DimensionError(f"split: sizes {list(sizes)} do not cover axis of {a.shape[ax]}")
    outs = []
    start = 0
    for n in sizes:
        outs.append(take_slice(a, start, start + n, ax))
        start += n
    return outs


def take_slice(a: Tensor, start: int, stop: int, axis: int) -> Tensor:
    ax = axis % a.ndim
    index = [slice(None)] * a.ndim
    index[ax] = slice(start, stop)
    index = tuple(index)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _record(np.ascontiguousarray(a.data[index]), (a,), vjp, "slice")


# ---------------------------------------------------------------------------
# linear algebra and normalisation


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` may be a plain 2-D matrix shared across the leading batch axes of
    ``a``; otherwise both operands must have identical batch axes.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: operands must be at least 2-D, got {a.shape}, {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch axes differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2:
        # fold batch axes into rows: one GEMM instead of a loop over the batch
        k, n = bd.shape
        a2 = ad.reshape(-1, k)

        def vjp(g):
            g2 = g.reshape(-1, n)
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

        return _record((a2 @ bd).reshape(ad.shape[:-1] + (n,)), (a, b), vjp, "matmul")

    def vjp(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _record(ad @ bd, (a, b), vjp, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` for a 2-D weight shared over the leading axes of ``x``."""
    if b is None:
        return matmul(x, w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise DimensionError(f"linear: x {x.shape}, w {w.shape}, b {b.shape}")
    xd, wd = x.data, w.data
    k, n = wd.shape
    x2 = xd.reshape(-1, k)
    out = x2 @ wd
    out += b.data

    def vjp(g):
        g2 = g.reshape(-1, n)
        return (g2 @ wd.T).reshape(xd.shape), x2.T @ g2, g2.sum(axis=0)

    return _record(out.reshape(xd.shape[:-1] + (n,)), (x, w, b), vjp, "linear")


def softmax_lastdim(t: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by max subtraction."""
    if t.ndim == 0 or t.shape[-1] < 1:
        raise DimensionError("softmax_lastdim: empty last axis")
    out = t.data - t.data.max(axis=-1, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record(out, (t,), vjp, "softmax")


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> tuple[Tensor, np.ndarray]:
    """Multi-head scaled dot-product attention on ``(B, L, C)`` inputs.

    Scores use scale ``1/sqrt(C/heads)`` and a max-subtracted softmax.  Returns
    the ``(B, L, C)`` output and the ``(B, heads, L, L)`` weights (untracked).
    """
    if not q.shape == k.shape == v.shape or q.ndim != 3:
        raise DimensionError(f"attention: q {q.shape}, k {k.shape}, v {v.shape}")
    b, n, c = q.shape
    if heads < 1 or c % heads:
        raise DimensionError(f"attention: {heads} heads do not divide {c}")
    d = c // heads
    scale = 1.0 / math.sqrt(d)

    def heads_first(x):
        return np.ascontiguousarray(x.reshape(b, n, heads, d).transpose(0, 2, 1, 3))

    def heads_last(x):
        return np.ascontiguousarray(x.transpose(0, 2, 1, 3)).reshape(b, n, c)

    qh, kh, vh = heads_first(q.data), heads_first(k.data), heads_first(v.data)
    w = qh @ kh.transpose(0, 1, 3, 2)
    w *= scale
    w -= w.max(axis=-1, keepdims=True)
    np.exp(w, out=w)
    w /= w.sum(axis=-1, keepdims=True)
    out = heads_last(w @ vh)

    def vjp(g):
        gh = heads_first(g)
        gv = w.transpose(0, 1, 3, 2) @ gh
        gs = gh @ vh.transpose(0, 1, 3, 2)
        gs -= (gs * w).sum(axis=-1, keepdims=True)
        gs *= w
        gs *= scale
        gq = gs @ kh
        gk = gs.transpose(0, 1, 3, 2) @ qh
        return heads_last(gq), heads_last(gk), heads_last(gv)

    w.setflags(write=False)
    return _record(out, (q, k, v), vjp, "attention"), w


def layer_norm(t: Tensor, gain: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-6) -> Tensor:
    """Normalise each row over the last axis, then apply an optional affine."""
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    c = t.shape[-1]
    for p in (gain, bias):
        if p is not None and p.shape != (c,):
            raise DimensionError(f"layer_norm: affine shape {p.shape} != ({c},)")
    x = t.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = g * xhat
        return (rstd * (g - gm - xhat * gx.mean(axis=-1, keepdims=True)),)

    out = _record(xhat, (t,), vjp, "layer_norm")
    if gain is not None:
        out = mul(out, gain)
    if bias is not None:
        out = add(out, bias)
    return out


# ---------------------------------------------------------------------------
# finite-difference oracle


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    worst: float

    def ok(self, tol: float) -> bool:
        return self.worst <= tol


def numerical_gradient(f: Callable[[], Tensor], p: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``f()`` w.r.t. every entry of ``p`` (mutated in place, restored)."""
    buf = p.data
    buf.setflags(write=True)
    out = np.zeros(p.shape)
    flat, gflat = buf.reshape(-1), out.reshape(-1)
    try:
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
    finally:
        buf.setflags(write=False)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """Max abs difference scaled by the larger of the two gradients' max magnitude."""
    err = float(np.max(np.abs(analytic - numeric), initial=0.0))
    scale = max(float(np.max(np.abs(analytic), initial=0.0)),
                float(np.max(np.abs(numeric), initial=0.0)))
    if scale < floor:
        return err
    return err / scale


def grad_check(f: Callable[[], Tensor], params: dict[str, Tensor], h: float = 1e-5) -> GradCheckReport:
    """Compare tape gradients of the scalar ``f()`` with central differences."""
    with Tape() as tape:
        loss = f()
    grads = backward(loss, tape, params.values()) if loss.requires_grad else \
        {p: np.zeros(p.shape) for p in params.values()}
    errors = {name: relative_error(grads[p], numerical_gradient(f, p, h))
              for name, p in params.items()}
    return GradCheckReport(errors, max(errors.values(), default=0.0))


# ---------------------------------------------------------------------------
# seeded randomness


class SeededRng:
    """PCG64 stream (numpy's ``Generator``), reproducible from a 64-bit seed."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(shape) * std

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def truncated_normal(self, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
        """Normal draws with |z| > bound resampled."""
        z = self._gen.standard_normal(shape)
        bad = np.abs(z) > bound
        while bad.any():
            z[bad] = self._gen.standard_normal(int(bad.sum()))
            bad = np.abs(z) > bound
        return z * std

    def spawn(self, offset: int) -> "SeededRng":
        return SeededRng((self.seed * 1_000_003 + offset) % (1 << 63))

    @property
    def state(self) -> dict:
        return self._gen.bit_generator.state

    @state.setter
    def state(self, value: dict) -> None:
        self._gen.bit_generator.state = value


# ---------------------------------------------------------------------------
# DTNS dump format: b"DTNS", u32 rank, u64 extents, little-endian f64 payload

DTNS_MAGIC = b"DTNS"


def dtns_bytes(t: Tensor | np.ndarray) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=DTYPE)
    head = DTNS_MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def dtns_from_bytes(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Decode one DTNS record starting at ``offset``; returns (tensor, next offset)."""
    if buf[offset:offset + 4] != DTNS_MAGIC:
        raise ValueError("not a DTNS record")
    (rank,) = struct.unpack_from("<I", buf, offset + 4)
    pos = offset + 8
    shape = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    count = int(np.prod(shape, dtype=np.int64))
    end = pos + 8 * count
    if end > len(buf):
        raise ValueError("truncated DTNS payload")
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape)
    return Tensor(arr.astype(DTYPE)), end


def write_dtns(path, t: Tensor | np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(dtns_bytes(t))


def read_dtns(path) -> Tensor:
    with open(path, "rb") as fh:
        buf = fh.read()
    t, end = dtns_from_bytes(buf)
    if end != len(buf):
        raise ValueError("trailing bytes after DTNS record")
    return t
