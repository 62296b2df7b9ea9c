"""Dense float64 tensors with reverse-mode autodiff and a seeded counter RNG.

Deliberately small: only the primitives the attention stack needs, all in
64-bit floats. Every op checks its result for NaN/Inf and raises rather than
letting non-finite values propagate.
"""
from __future__ import annotations

import hashlib
import math
from typing import Callable, Sequence

import numba
import numpy as np

__all__ = [
    "Tensor",
    "Rng",
    "NonFiniteError",
    "ShapeError",
    "set_finite_checks",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "exp",
    "log",
    "pow_scalar",
    "sigmoid",
    "silu",
    "reshape",
    "sumt",
    "meant",
    "rows",
    "concat0",
    "gather_rows",
    "softmax_row",
    "apply_rope",
    "rope_angles",
    "cross_entropy_logits",
    "grad_check",
]


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class ShapeError(ValueError):
    """Operand shapes incompatible with the op's contract."""


_FINITE_CHECKS = [True]


def set_finite_checks(enabled: bool) -> bool:
    """Toggle per-op finiteness validation. Returns the previous setting."""
    prev = _FINITE_CHECKS[0]
    _FINITE_CHECKS[0] = bool(enabled)
    return prev


def _checked(arr: np.ndarray, op: str) -> np.ndarray:
    if _FINITE_CHECKS[0] and not np.isfinite(arr).all():
        raise NonFiniteError(f"{op}: non-finite values in result of shape {arr.shape}")
    return arr


# Accumulates strictly in k order per output element, so the result is
# bit-identical to a scalar triple loop (BLAS reorders and does not give that).
@numba.njit(cache=True, fastmath=False)
def _mm_seq(a, b):  # pragma: no cover - compiled
    m, kdim = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for k in range(kdim):
            aik = a[i, k]
            for j in range(n):
                out[i, j] += aik * b[k, j]
    return out


def matmul_data(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Exact sequential-accumulation 2-D matrix product on raw arrays."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    return _mm_seq(np.ascontiguousarray(a), np.ascontiguousarray(b))


class Tensor:
    """Row-major float64 array, optionally tracked for reverse-mode gradients."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        _checked(arr, "tensor")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None

    @staticmethod
    def from_op(data: np.ndarray, parents: Sequence["Tensor"], vjp, op: str = "op") -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = _checked(np.asarray(data, dtype=np.float64), op)
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._vjp = vjp
        else:
            out._parents = ()
            out._vjp = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse traversal from a scalar; grads accumulate into .grad."""
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("backward called on a tensor with no tracked ancestors")

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        pending: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.grad is None:
                node.grad = g.copy()
            else:
                node.grad = node.grad + g
            if node._vjp is None:
                continue
            parent_grads = node._vjp(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in pending:
                    pending[id(p)] = pending[id(p)] + pg
                else:
                    pending[id(p)] = pg

    # Operator sugar; the module-level functions do the work.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return Tensor.from_op(out, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return Tensor.from_op(out, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return Tensor.from_op(out, (a, b), vjp, "mul")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return Tensor.from_op(-a.data, (a,), lambda g: (-g,), "neg")


def matmul(a, b) -> Tensor:
    """2-D matrix product with sequential-k accumulation (oracle-exact)."""
    a, b = _as_tensor(a), _as_tensor(b)
    out = matmul_data(a.data, b.data)

    def vjp(g):
        ga = matmul_data(g, b.data.T) if a.requires_grad else None
        gb = matmul_data(a.data.T, g) if b.requires_grad else None
        return ga, gb

    return Tensor.from_op(out, (a, b), vjp, "matmul")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    out = np.log(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g / a.data,), "log")


def pow_scalar(a, p: float) -> Tensor:
    a = _as_tensor(a)
    out = a.data ** p

    def vjp(g):
        return (g * p * a.data ** (p - 1.0),)

    return Tensor.from_op(out, (a,), vjp, "pow")


def sigmoid_data(x: np.ndarray) -> np.ndarray:
    # exp only on -|x|: exact 0/1 saturation at extreme inputs, no overflow.
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = sigmoid_data(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def silu(a) -> Tensor:
    a = _as_tensor(a)
    s = sigmoid_data(a.data)
    out = a.data * s

    def vjp(g):
        return (g * (s + a.data * s * (1.0 - s)),)

    return Tensor.from_op(out, (a,), vjp, "silu")


def reshape(a, *shape) -> Tensor:
    a = _as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out = a.data.reshape(shape)
    src_shape = a.data.shape
    return Tensor.from_op(out, (a,), lambda g: (g.reshape(src_shape),), "reshape")


def sumt(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return Tensor.from_op(out, (a,), vjp, "sum")


def meant(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.data.shape[axis]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / count, a.data.shape).copy(),)

    return Tensor.from_op(out, (a,), vjp, "mean")


def rows(a, r0: int, r1: int) -> Tensor:
    """Contiguous slice along axis 0."""
    a = _as_tensor(a)
    out = a.data[r0:r1]

    def vjp(g):
        full = np.zeros_like(a.data)
        full[r0:r1] = g
        return (full,)

    return Tensor.from_op(out, (a,), vjp, "rows")


def concat0(parts: Sequence[Tensor]) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=0)
    sizes = [p.data.shape[0] for p in parts]

    def vjp(g):
        grads = []
        off = 0
        for n in sizes:
            grads.append(g[off:off + n])
            off += n
        return tuple(grads)

    return Tensor.from_op(out, tuple(parts), vjp, "concat0")


def gather_rows(a, idx) -> Tensor:
    """Row lookup (embedding gather) along axis 0 of a 2-D tensor."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    out = a.data[idx]

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor.from_op(out, (a,), vjp, "gather_rows")


def softmax_row_data(x: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Row-wise softmax over the last axis; masked entries are exactly 0.

    Fully-masked rows return all zeros (defined case, used for padding).
    """
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        shifted = np.where(mask, x, -np.inf)
    else:
        shifted = x
    m = shifted.max(axis=-1, keepdims=True)
    m_safe = np.where(np.isneginf(m), 0.0, m)
    e = np.exp(shifted - m_safe)
    s = e.sum(axis=-1, keepdims=True)
    return np.where(s > 0.0, e / np.where(s > 0.0, s, 1.0), 0.0)


def softmax_row(a, mask: np.ndarray | None = None) -> Tensor:
    a = _as_tensor(a)
    out = softmax_row_data(a.data, mask)

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return Tensor.from_op(out, (a,), vjp, "softmax_row")


def rope_angles(t: int, d: int, base: float, positions=None) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables of shape [t, d//2] for rotary position encoding."""
    if d % 2 != 0:
        raise ShapeError(f"rotary encoding needs an even head dim, got {d}")
    pos = np.arange(t, dtype=np.float64) if positions is None else np.asarray(positions, dtype=np.float64)
    inv = base ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    ang = pos[:, None] * inv[None, :]
    return np.cos(ang), np.sin(ang)


def apply_rope(x, positions, base: float) -> Tensor:
    """Pairwise rotation of adjacent channel pairs; x is [..., t, h, d]."""
    x = _as_tensor(x)
    if x.ndim < 3:
        raise ShapeError(f"apply_rope expects [..., t, h, d], got {x.shape}")
    t, d = x.shape[-3], x.shape[-1]
    cos, sin = rope_angles(t, d, base, positions)
    # align [t, d/2] tables with [..., t, h, d/2]
    bshape = (1,) * (x.ndim - 3) + (t, 1, d // 2)
    cos = cos.reshape(bshape)
    sin = sin.reshape(bshape)
    xe, xo = x.data[..., 0::2], x.data[..., 1::2]
    out = np.empty_like(x.data)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos

    def vjp(g):
        ge, go = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * cos + go * sin
        gx[..., 1::2] = -ge * sin + go * cos
        return (gx,)

    return Tensor.from_op(out, (x,), vjp, "apply_rope")


def cross_entropy_logits(logits, targets, weights=None) -> Tensor:
    """Mean next-token cross entropy over weighted rows.

    targets: int array [n]; weights: optional float array [n] (0 drops a row).
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    n, v = logits.shape
    if targets.shape != (n,):
        raise ShapeError(f"targets shape {targets.shape} does not match logits rows {n}")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    wsum = w.sum()
    if wsum <= 0:
        raise ValueError("cross_entropy_logits: no active rows")
    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    z = e.sum(axis=-1)
    lse = np.log(z) + m[:, 0]
    nll = lse - x[np.arange(n), targets]
    out = (nll * w).sum() / wsum

    def vjp(g):
        p = e / z[:, None]
        p[np.arange(n), targets] -= 1.0
        return (g * p * (w / wsum)[:, None],)

    return Tensor.from_op(out, (logits,), vjp, "cross_entropy")


class Rng:
    """Counter-based deterministic RNG with explicit seed threading.

    Backed by the Philox counter generator; the same seed yields the same
    value stream on every platform. Children derived with spawn() are
    independent and equally reproducible.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def spawn(self, tag: str) -> "Rng":
        h = hashlib.blake2b(f"{self.seed}/{tag}".encode(), digest_size=8).digest()
        return Rng(int.from_bytes(h, "little"))

    def normal(self, *shape, std: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(shape) * std

    def uniform(self, *shape) -> np.ndarray:
        return self._gen.random(shape)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def init_weight(self, fan_in: int, *shape) -> np.ndarray:
        return self.normal(*shape, std=1.0 / math.sqrt(fan_in))


def grad_check(
    build_loss: Callable[[], Tensor],
    params: dict[str, Tensor],
    coords_per_param: int = 4,
    step: float = 1e-5,
    seed: int = 0,
) -> dict[str, float]:
    """Max relative error of analytic grads vs central finite differences.

    build_loss must be a deterministic fresh forward pass. Relative error uses
    a 1e-3 floor in the denominator so near-zero gradients are compared at an
    absolute 1e-8 scale instead of amplifying FD roundoff.
    """
    for p in params.values():
        p.zero_grad()
    loss = build_loss()
    loss.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}

    pick = Rng(seed).spawn("grad-check")
    errs: dict[str, float] = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.shape[0]
        k = min(coords_per_param, n)
        coords = pick.integers(0, n, size=k) if n > k else np.arange(n)
        worst = 0.0
        for c in np.unique(coords):
            orig = flat[c]
            flat[c] = orig + step
            up = build_loss().item()
            flat[c] = orig - step
            down = build_loss().item()
            flat[c] = orig
            fd = (up - down) / (2.0 * step)
            a = analytic[name].reshape(-1)[c]
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-3)
            worst = max(worst, rel)
        errs[name] = worst
    return errs
