"""Dense float tensors with reverse-mode automatic differentiation.

Every operation records its inputs and a closure mapping the output
gradient to input gradients.  The tape is implicit: ``backward`` walks
parent links from the loss node, orders them topologically and pushes
gradients back to the leaves.

Tensors hold float32 data.  float64 is preserved when a caller passes it
explicitly, which the gradient checker uses to keep finite-difference
noise below the tolerances it asserts.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError

DTYPE = np.float32
CE_CLAMP = 1e-12

_FLOAT_TYPES = (np.dtype(np.float32), np.dtype(np.float64))


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return np.ascontiguousarray(arr, dtype=dtype)
    if arr.dtype not in _FLOAT_TYPES:
        arr = arr.astype(DTYPE)
    return np.ascontiguousarray(arr)


class Tensor:
    """N-dimensional float array that can take part in autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

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
        if self.data.size != 1:
            raise ContractError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self) -> "Tensor":
        return tsum(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], op: str, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise and structural ops -------------------------------------------


def identity(x: Tensor) -> Tensor:
    return _result(x.data.copy(), (x,), "identity", lambda g: (g,))


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from None
    out = out.astype(np.result_type(a.data, b.data), copy=False)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, (a, b), "add", back)


def mul(a, b) -> Tensor:
    a = _wrap(a)
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    try:
        out = a.data * b.data
    except ValueError:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from None

    def back(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), "mul", back)


def tsum(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return _result(out, (x,), "sum", lambda g: (np.broadcast_to(g, x.shape).copy(),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} into {tuple(shape)}") from None
    return _result(out, (x,), "reshape", lambda g: (g.reshape(x.shape),))


def flatten(x: Tensor) -> Tensor:
    """Collapse every axis but the leading batch axis."""
    return reshape(x, (x.shape[0], -1))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def back(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), "matmul", back)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return add(matmul(x, weight), bias)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return _result(out, (x,), "relu", lambda g: (g * (x.data > 0),))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, shifted by the row maximum."""
    if x.data.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"softmax needs at least one element on the last axis, got {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), "softmax", back)


# -- convolution and pooling ---------------------------------------------------


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a C×H×W (or B×C×H×W) input with C_out×C_in×k×k kernels."""
    x, kernels, bias = _wrap(x), _wrap(kernels), _wrap(bias)
    if stride < 1 or padding < 0:
        raise DomainError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    batched = x.data.ndim == 4
    if x.data.ndim not in (3, 4):
        raise DimensionError(f"conv2d input must be C×H×W or B×C×H×W, got {x.shape}")
    if kernels.data.ndim != 4 or kernels.shape[2] != kernels.shape[3]:
        raise DimensionError(f"conv2d kernels must be C_out×C_in×k×k, got {kernels.shape}")
    xd = x.data if batched else x.data[None]
    B, C, H, W = xd.shape
    O, Ck, k, _ = kernels.shape
    if Ck != C:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, kernels {kernels.shape}")
    if bias.shape != (O,):
        raise DimensionError(f"conv2d bias must have shape ({O},), got {bias.shape}")
    if k > H + 2 * padding or k > W + 2 * padding:
        raise DimensionError(
            f"conv2d kernel {k}×{k} larger than padded input {H + 2 * padding}×{W + 2 * padding}"
        )
    Ho = conv_output_size(H, k, stride, padding)
    Wo = conv_output_size(W, k, stride, padding)
    p = padding
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd

    cols = np.empty((B, C, k, k, Ho, Wo), dtype=xd.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride]
    cols = cols.reshape(B, C * k * k, Ho * Wo)
    w2 = kernels.data.reshape(O, C * k * k)
    out = np.matmul(w2, cols)
    out += bias.data.reshape(1, O, 1)
    out = out.reshape(B, O, Ho, Wo)
    if not batched:
        out = out[0]

    def back(g):
        g = g if batched else g[None]
        g2 = g.reshape(B, O, Ho * Wo)
        gx = gw = gb = None
        if kernels.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernels.shape)
        if bias.requires_grad:
            gb = g2.sum(axis=(0, 2))
        if x.requires_grad:
            dcols = np.matmul(w2.T, g2).reshape(B, C, k, k, Ho, Wo)
            dxp = np.zeros(xp.shape, dtype=xd.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += dcols[:, :, i, j]
            gx = dxp[:, :, p : p + H, p : p + W] if p else dxp
            if not batched:
                gx = gx[0]
        return gx, gw, gb

    return _result(out, (x, kernels, bias), "conv2d", back)


def pool_output_size(size: int, kernel: int, stride: int) -> int:
    return (size - kernel) // stride + 1


def maxpool2d(x: Tensor, k: int, stride: int) -> Tensor:
    """Windowed maximum.  Gradient goes to the first maximum in row-major window order."""
    x = _wrap(x)
    if k < 1 or stride < 1:
        raise DomainError(f"maxpool2d needs positive kernel and stride, got {k}, {stride}")
    batched = x.data.ndim == 4
    if x.data.ndim not in (3, 4):
        raise DimensionError(f"maxpool2d input must be C×H×W or B×C×H×W, got {x.shape}")
    xd = x.data if batched else x.data[None]
    B, C, H, W = xd.shape
    if k > H or k > W:
        raise DimensionError(f"maxpool2d window {k}×{k} larger than input {H}×{W}")
    Ho = pool_output_size(H, k, stride)
    Wo = pool_output_size(W, k, stride)

    def view(i, j, arr=xd):
        return arr[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride]

    rows = xd[:, :, 0 : stride * Ho : stride, :]
    for i in range(1, k):
        rows = np.maximum(rows, xd[:, :, i : i + stride * Ho : stride, :])
    out = rows[..., 0 : stride * Wo : stride]
    for j in range(1, k):
        out = np.maximum(out, rows[..., j : j + stride * Wo : stride])
    out4 = np.ascontiguousarray(out)
    disjoint = stride >= k

    def back(g):
        g = g if batched else g[None]
        dx = np.zeros(xd.shape, dtype=xd.dtype)
        taken = np.zeros(out4.shape, dtype=bool)
        # first maximum in row-major window order receives the gradient
        for q in range(k * k):
            hit = view(*divmod(q, k)) == out4
            hit &= ~taken
            taken |= hit
            contrib = np.where(hit, g, 0)
            if disjoint:
                view(*divmod(q, k), arr=dx)[...] = contrib
            else:
                view(*divmod(q, k), arr=dx)[...] += contrib
        return (dx if batched else dx[0],)

    return _result(out4 if batched else out4[0], (x,), "maxpool2d", back)


# -- losses --------------------------------------------------------------------


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean of squared differences; the target is treated as a constant."""
    pred = _wrap(pred)
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    t = t.astype(pred.dtype, copy=False)
    if pred.size != t.size:
        raise DimensionError(f"mse_loss length mismatch: pred {pred.shape}, target {t.shape}")
    if pred.size == 0:
        raise DimensionError("mse_loss on empty tensors")
    diff = pred.data.reshape(-1) - t.reshape(-1)
    n = diff.size
    out = np.asarray(np.mean(diff * diff), dtype=pred.dtype)

    def back(g):
        return ((g * (2.0 / n) * diff).astype(pred.dtype, copy=False).reshape(pred.shape),)

    return _result(out, (pred,), "mse_loss", back)


def cross_entropy_loss(probs: Tensor, targets: Iterable[int]) -> Tensor:
    """Mean negative log-probability of each row's target class."""
    probs = _wrap(probs)
    if probs.data.ndim != 2:
        raise DimensionError(f"cross_entropy_loss expects batch×classes probabilities, got {probs.shape}")
    B, K = probs.shape
    tgt = np.asarray(list(targets) if not isinstance(targets, np.ndarray) else targets).astype(np.int64).reshape(-1)
    if tgt.size != B:
        raise DimensionError(f"cross_entropy_loss: {B} rows but {tgt.size} targets")
    bad = (tgt < 0) | (tgt >= K)
    if bad.any():
        raise DomainError(f"target index {int(tgt[bad][0])} out of range for {K} classes")
    sums = probs.data.sum(axis=1, dtype=np.float64)
    if np.any(np.abs(sums - 1.0) > 1e-5):
        raise DomainError("cross_entropy_loss rows must sum to 1 within 1e-5")
    rows = np.arange(B)
    picked = probs.data[rows, tgt]
    clamped = np.maximum(picked, CE_CLAMP)
    out = np.asarray(-np.mean(np.log(clamped)), dtype=probs.dtype)

    def back(g):
        dp = np.zeros_like(probs.data)
        dp[rows, tgt] = np.where(picked >= CE_CLAMP, -g / (B * clamped), 0)
        return (dp,)

    return _result(out, (probs,), "cross_entropy_loss", back)


# -- backward ------------------------------------------------------------------


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that require grad, inputs before outputs."""
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> list[Tensor]:
    """Populate ``.grad`` on every leaf reachable from a scalar ``loss``.

    Leaf gradients are overwritten, not accumulated, so repeating the call
    on the same graph yields the same gradients.  Returns the leaves.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = topological_order(loss)
    leaves = [n for n in order if n._backward is None and n.requires_grad]
    for leaf in leaves:
        leaf.grad = np.zeros_like(leaf.data)
    if not loss.requires_grad:
        return leaves
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = np.asarray(g, dtype=node.dtype).reshape(node.shape)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaves
