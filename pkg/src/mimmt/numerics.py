"""Dense float64 tensors with reverse-mode automatic differentiation.

Only what the tiny encoder-decoder and its losses need. Operands must agree
in shape exactly; the single exception is a vector added to (or multiplied
onto) the last axis of a larger tensor. Constant (non-differentiable) arrays
may broadcast freely, since no gradient has to be reduced back onto them.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "tensor",
    "no_grad",
    "is_grad_enabled",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "concat",
    "sigmoid",
    "relu",
    "softmax",
    "log_softmax",
    "layer_norm",
    "embedding",
    "masked_mean",
    "l2_normalize",
    "cosine_similarity",
    "apply_mask",
    "add_constant",
    "tensor_sum",
    "tensor_mean",
    "reshape",
    "swap_axes",
    "expand",
    "pick",
    "backward",
    "grad_check",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for an op."""

    def __init__(self, op: str, a: Sequence[int], b: Sequence[int]):
        self.op = op
        self.shapes = (tuple(a), tuple(b))
        super().__init__(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")


_GRAD_ENABLED = True


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (inference / decoding)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    # operator sugar; every operator maps to one of the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Iterable[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED:
        live = tuple(p for p in parents if p.requires_grad)
        if live:
            out.requires_grad = True
            out._parents = live
            out._backward = backward_fn
    return out


def _row_broadcast(op: str, a: Tensor, b: Tensor) -> bool:
    """True when b is a vector riding on a's last axis; raise if shapes clash."""
    if a.shape == b.shape:
        return False
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return True
    raise ShapeError(op, a.shape, b.shape)


def _sum_to_row(g: np.ndarray) -> np.ndarray:
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


# ---------------------------------------------------------------------------
# elementwise and linear ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a @ b with a of shape (..., n, k) and b either (k, m) or (..., k, m)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    shared_weight = b.ndim == 2
    if not shared_weight and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    out_data = a.data @ b.data

    def _bw(g):
        if a.requires_grad:
            a._accumulate(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if shared_weight:
                k, m = b.shape
                b._accumulate(a.data.reshape(-1, k).T @ g.reshape(-1, m))
            else:
                b._accumulate(np.swapaxes(a.data, -1, -2) @ g)

    return _result(out_data, (a, b), _bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    row = _row_broadcast("add", a, b)

    def _bw(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(_sum_to_row(g) if row else g)

    return _result(a.data + b.data, (a, b), _bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    row = _row_broadcast("sub", a, b)

    def _bw(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-(_sum_to_row(g) if row else g))

    return _result(a.data - b.data, (a, b), _bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    row = _row_broadcast("multiply", a, b)

    def _bw(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            gb = g * a.data
            b._accumulate(_sum_to_row(gb) if row else gb)

    return _result(a.data * b.data, (a, b), _bw)


def scale(a: Tensor, c: float) -> Tensor:
    def _bw(g):
        a._accumulate(g * c)

    return _result(a.data * c, (a,), _bw)


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along the last axis; leading dimensions must agree."""
    tensors = [_as_tensor(t) for t in tensors]
    if axis not in (-1, tensors[0].ndim - 1):
        raise ValueError("concat only supports the last axis")
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead:
            raise ShapeError("concat", tensors[0].shape, t.shape)
    widths = [t.shape[-1] for t in tensors]
    bounds = np.cumsum([0] + widths)

    def _bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                t._accumulate(g[..., lo:hi])

    return _result(np.concatenate([t.data for t in tensors], axis=-1), tensors, _bw)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def _bw(g):
        a._accumulate(g * out * (1.0 - out))

    return _result(out, (a,), _bw)


def relu(a: Tensor) -> Tensor:
    # derivative at exactly 0 is taken as 0 (hinge boundary gives zero gradient)
    active = a.data > 0

    def _bw(g):
        a._accumulate(g * active)

    return _result(a.data * active, (a,), _bw)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def _bw(g):
        a._accumulate(out * (g - (g * out).sum(axis=-1, keepdims=True)))

    return _result(out, (a,), _bw)


def log_softmax(a: Tensor) -> Tensor:
    """Log-softmax over the last axis."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def _bw(g):
        p = np.exp(out)
        a._accumulate(g - p * g.sum(axis=-1, keepdims=True))

    return _result(out, (a,), _bw)


def layer_norm(a: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no affine)."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv

    def _bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * out).mean(axis=-1, keepdims=True)
        a._accumulate(inv * (g - gm - out * gxm))

    return _result(out, (a,), _bw)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Rows of ``weight`` gathered by an integer id array of any shape."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError(f"embedding ids must be integers, got {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(
            f"embedding: id out of range [0, {weight.shape[0]}) "
            f"(min {ids.min()}, max {ids.max()})"
        )

    def _bw(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        weight._accumulate(full)

    return _result(weight.data[ids], (weight,), _bw)


def masked_mean(a: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over axis 1 of a (B, T, d) tensor, counting only mask==1 positions."""
    mask = np.asarray(mask, dtype=np.float64)
    if a.ndim != 3 or mask.shape != a.shape[:2]:
        raise ShapeError("masked_mean", a.shape, mask.shape)
    counts = mask.sum(axis=1, keepdims=True)
    if np.any(counts == 0):
        raise ValueError("masked_mean: a row has no unmasked positions")
    w = (mask / counts)[:, :, None]

    def _bw(g):
        a._accumulate(g[:, None, :] * w)

    return _result((a.data * w).sum(axis=1), (a,), _bw)


def l2_normalize(a: Tensor) -> Tensor:
    """Scale each row (last axis) to unit length. Zero rows are an error."""
    norms = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    if np.any(norms == 0):
        raise ValueError("l2_normalize: zero-norm vector")
    out = a.data / norms

    def _bw(g):
        a._accumulate((g - out * (g * out).sum(axis=-1, keepdims=True)) / norms)

    return _result(out, (a,), _bw)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cosine similarity of two equally shaped (..., d) tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("cosine_similarity", a.shape, b.shape)
    return tensor_sum(mul(l2_normalize(a), l2_normalize(b)), axis=-1)


def apply_mask(a: Tensor, mask: np.ndarray) -> Tensor:
    """Multiply by a constant 0/1 array of identical shape."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != a.shape:
        raise ShapeError("mask", a.shape, mask.shape)

    def _bw(g):
        a._accumulate(g * mask)

    return _result(a.data * mask, (a,), _bw)


def add_constant(a: Tensor, c: np.ndarray) -> Tensor:
    """a + c for a constant array broadcastable to a's shape (e.g. attention bias)."""
    c = np.asarray(c, dtype=np.float64)
    try:
        out = a.data + c
    except ValueError:
        raise ShapeError("add_constant", a.shape, c.shape) from None
    if out.shape != a.shape:
        raise ShapeError("add_constant", a.shape, c.shape)

    def _bw(g):
        a._accumulate(g)

    return _result(out, (a,), _bw)


# ---------------------------------------------------------------------------
# reductions and shape plumbing
# ---------------------------------------------------------------------------


def tensor_sum(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        def _bw(g):
            a._accumulate(np.broadcast_to(g, a.shape))

        return _result(np.asarray(a.data.sum()), (a,), _bw)

    ax = axis % a.ndim

    def _bw_axis(g):
        a._accumulate(np.broadcast_to(np.expand_dims(g, ax), a.shape))

    return _result(a.data.sum(axis=ax), (a,), _bw_axis)


def tensor_mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(tensor_sum(a, axis), 1.0 / n)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape

    def _bw(g):
        a._accumulate(g.reshape(old))

    return _result(a.data.reshape(shape), (a,), _bw)


def swap_axes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    def _bw(g):
        a._accumulate(np.swapaxes(g, ax1, ax2))

    return _result(np.swapaxes(a.data, ax1, ax2), (a,), _bw)


def expand(a: Tensor, axis: int, n: int) -> Tensor:
    """Insert a new axis at ``axis`` and repeat ``n`` times along it."""
    out = np.repeat(np.expand_dims(a.data, axis), n, axis=axis)

    def _bw(g):
        a._accumulate(g.sum(axis=axis))

    return _result(out, (a,), _bw)


def pick(a: Tensor, index: np.ndarray) -> Tensor:
    """Select a[..., index[...]] along the last axis (gather of one entry per row)."""
    index = np.asarray(index)
    if index.shape != a.shape[:-1]:
        raise ShapeError("pick", a.shape, index.shape)
    idx = np.expand_dims(index, -1)
    out = np.take_along_axis(a.data, idx, axis=-1)[..., 0]

    def _bw(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, np.expand_dims(g, -1), axis=-1)
        a._accumulate(full)

    return _result(out, (a,), _bw)


# ---------------------------------------------------------------------------
# differentiation
# ---------------------------------------------------------------------------


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/dT into T.grad for every requires_grad ancestor T.

    Leaf gradients accumulate across calls (zero them between steps); interior
    buffers are reset at the start of each call so a repeated backward over the
    same graph is deterministic.
    """
    if root.data.size != 1:
        raise ValueError(f"backward() needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = _topological_order(root)
    for node in order:
        if node._backward is not None:
            node.grad = None
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
) -> float:
    """Max relative error between backprop and central finite differences.

    ``f`` maps ``x`` to a scalar tensor. The relative error of each element is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    if not np.all(np.isfinite(x.data)):
        raise ValueError("grad_check: input is not finite")
    x.requires_grad = True
    x.grad = None
    out = f(x)
    backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f(x).item()
            flat[i] = orig - h
            down = f(x).item()
            flat[i] = orig
            num_flat[i] = (up - down) / (2 * h)
    if np.any(np.isnan(analytic)) or np.any(np.isnan(numeric)):
        raise ValueError("grad_check: NaN gradient")
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
