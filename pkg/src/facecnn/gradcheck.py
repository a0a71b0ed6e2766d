"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import tensor as T
from .model import Conv, Dense, Flatten, MaxPool, ModelSpec, ReLU, Softmax, Task, forward, init_params
from .tensor import Tensor

EPS = 1e-3
KINK_MARGIN = 1e-2


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / max(|a|, |n|, 1e-6) over elements."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)
    return float(np.max(np.abs(a - n) / denom))


def near_zero(*arrays: np.ndarray, margin: float = KINK_MARGIN) -> bool:
    """True if any input sits within ``margin`` of relu's kink."""
    return any(np.any(np.abs(a) < margin) for a in arrays)


def pool_near_tie(k: int, stride: int, margin: float = KINK_MARGIN) -> Callable[..., bool]:
    """Kink test for max pooling: some window's top two values are within ``margin``."""

    def check(x: np.ndarray, *rest) -> bool:
        win = _pool_windows(x if x.ndim == 4 else x[None], k, stride)
        if win.shape[-1] < 2:
            return False
        top2 = np.sort(win, axis=-1)[..., -2:]
        return bool(np.any(top2[..., 1] - top2[..., 0] < margin))

    return check


def numeric_gradient(f: Callable[[], float], arr: np.ndarray, coords, eps: float = EPS) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. ``arr`` entries at ``coords``; ``arr`` is restored."""
    flat = arr.reshape(-1)
    out = np.empty(len(coords), dtype=np.float64)
    for n, i in enumerate(coords):
        orig = flat[i]
        flat[i] = orig + eps
        up = f()
        flat[i] = orig - eps
        down = f()
        flat[i] = orig
        out[n] = (up - down) / (2 * eps)
    return out


def grad_check(
    op: Callable[..., Tensor],
    input_shapes: Sequence[Sequence[int]],
    seed: int = 0,
    eps: float = EPS,
    kink: Optional[Callable[..., bool]] = None,
    inputs: Optional[Sequence[np.ndarray]] = None,
    max_tries: int = 100,
) -> float:
    """Max relative error between backprop and central differences for ``op``.

    Inputs are drawn from N(0, 1) in float64 (or taken from ``inputs``).
    The op's output is reduced to a scalar by a fixed random weighting so
    every output element contributes a distinct gradient.  If ``kink``
    flags the sample, a fresh one is drawn.
    """
    rng = np.random.default_rng(seed)
    if inputs is None:
        for _ in range(max_tries):
            xs = [rng.standard_normal(tuple(s)) for s in input_shapes]
            if kink is None or not kink(*xs):
                break
        else:
            raise RuntimeError(f"no kink-free sample found in {max_tries} draws")
    else:
        xs = [np.array(x, dtype=np.float64) for x in inputs]

    out0 = op(*[Tensor(x) for x in xs])
    weights = rng.standard_normal(out0.shape)

    def scalar(*ts: Tensor) -> Tensor:
        return T.tsum(T.mul(op(*ts), weights))

    leaves = [Tensor(x, requires_grad=True) for x in xs]
    T.backward(scalar(*leaves))

    def value() -> float:
        return float(scalar(*[Tensor(x) for x in xs]).data)

    worst = 0.0
    for x, leaf in zip(xs, leaves):
        coords = range(x.size)
        num = numeric_gradient(value, x, coords, eps)
        worst = max(worst, relative_error(leaf.grad.reshape(-1), num))
    return worst


def _pool_windows(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    B, C, H, W = x.shape
    Ho, Wo = T.pool_output_size(H, k, stride), T.pool_output_size(W, k, stride)
    return np.stack(
        [x[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] for i in range(k) for j in range(k)],
        axis=-1,
    )


def activation_pattern(spec: ModelSpec, params: Mapping, x: np.ndarray) -> dict[int, np.ndarray]:
    """ReLU masks and max-pool winner indices of one forward pass, keyed by layer."""
    pattern: dict[int, np.ndarray] = {}

    def record(i, layer, x_in, x_out):
        if isinstance(layer, ReLU):
            pattern[i] = x_in.data > 0
        elif isinstance(layer, MaxPool):
            pattern[i] = _pool_windows(x_in.data, layer.kernel, layer.stride).argmax(axis=-1)

    forward(spec, params, Tensor(x), trace=record)
    return pattern


def frozen_forward(spec: ModelSpec, params: Mapping, x: np.ndarray, pattern: Mapping[int, np.ndarray]) -> np.ndarray:
    """Forward pass with every ReLU mask and pool choice pinned to ``pattern``.

    Inside the region where the pattern holds this equals the model; it is
    smooth everywhere, so central differences see no kinks.
    """
    h = x
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv):
            h = T.conv2d(Tensor(h), Tensor(params[f"{i}.weight"]), Tensor(params[f"{i}.bias"]), layer.stride, layer.padding).data
        elif isinstance(layer, MaxPool):
            win = _pool_windows(h, layer.kernel, layer.stride)
            h = np.take_along_axis(win, pattern[i][..., None], axis=-1)[..., 0]
        elif isinstance(layer, Flatten):
            h = h.reshape(h.shape[0], -1)
        elif isinstance(layer, Dense):
            h = h @ params[f"{i}.weight"] + params[f"{i}.bias"]
        elif isinstance(layer, ReLU):
            h = h * pattern[i]
        elif isinstance(layer, Softmax):
            z = np.exp(h - h.max(axis=-1, keepdims=True))
            h = z / z.sum(axis=-1, keepdims=True)
    return h


def model_grad_check(
    spec: ModelSpec,
    seed: int = 0,
    batch: int = 1,
    coords_per_tensor: int = 3,
    eps: float = EPS,
) -> float:
    """End-to-end check of a model's loss gradient at sampled parameter entries.

    Runs in float64 with He-initialized parameters, uniform [0, 1) inputs
    and random targets.  A ±eps step on an early-layer weight moves
    hundreds of thousands of pre-activations and always crosses some ReLU
    or pooling kink, so the numeric side differentiates the network with
    its activation pattern frozen at the sample point.
    """
    rng = np.random.default_rng(seed)
    params = {k: v.astype(np.float64) for k, v in init_params(spec, seed).items()}
    x = rng.random((batch,) + spec.input_shape)
    if spec.task is Task.AGE:
        targets = rng.uniform(0, 80, size=batch)
        # keep the ReLU head active so the check exercises the whole network
        params[f"{len(spec.layers) - 2}.bias"][...] = 40.0

        def loss_of(out):
            return T.mse_loss(out, targets)

        def numeric_loss(out):
            d = out.reshape(-1) - targets
            return float(np.mean(d * d))
    else:
        targets = rng.integers(0, 2, size=batch)

        def loss_of(out):
            return T.cross_entropy_loss(out, targets)

        def numeric_loss(out):
            return float(-np.mean(np.log(np.maximum(out[np.arange(batch), targets], T.CE_CLAMP))))

    leaves = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    T.backward(loss_of(forward(spec, leaves, Tensor(x))))
    pattern = activation_pattern(spec, params, x)

    def value() -> float:
        return numeric_loss(frozen_forward(spec, params, x, pattern))

    worst = 0.0
    for name, arr in params.items():
        coords = rng.choice(arr.size, size=min(coords_per_tensor, arr.size), replace=False)
        num = numeric_gradient(value, arr, coords, eps)
        ana = leaves[name].grad.reshape(-1)[coords]
        worst = max(worst, relative_error(ana, num))
    return worst
