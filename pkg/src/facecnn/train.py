"""Adam optimization, the epoch loop and grid search."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import tensor as T
from .data import ImageCache, Manifest
from .errors import ContractError, DimensionError, DomainError, FaceCNNError, TrainingDivergedError
from .model import ModelSpec, Params, Task, forward, init_params, predict
from .rng import SplitMix64
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    max_epochs: int = 150
    batch_size: int = 32
    seed: int = 0
    optimizer: str = "adam"
    shuffle: str = "every-epoch"

    def validate(self) -> "TrainConfig":
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise DomainError(f"learning_rate must be > 0, got {self.learning_rate}")
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not 0 <= v < 1:
                raise DomainError(f"{name} must be in [0, 1), got {v}")
        if not self.epsilon > 0:
            raise DomainError(f"epsilon must be > 0, got {self.epsilon}")
        if self.batch_size < 1:
            raise DomainError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise DomainError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.optimizer != "adam":
            raise DomainError(f"only the adam optimizer is supported, got {self.optimizer!r}")
        if self.shuffle != "every-epoch":
            raise DomainError(f"only every-epoch shuffling is supported, got {self.shuffle!r}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: Mapping) -> "TrainConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(obj) - set(known)
        if unknown:
            raise DomainError(f"unknown training config keys: {sorted(unknown)}")
        kwargs = {}
        for name, value in obj.items():
            default = getattr(cls, name)
            kwargs[name] = type(default)(value)
        return cls(**kwargs)


def loss_name(task) -> str:
    return "mse" if Task.parse(task) is Task.AGE else "cross_entropy"


def metric_name(task) -> str:
    return "rmse" if Task.parse(task) is Task.AGE else "accuracy"


# -- Adam ----------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(np.asarray(p)) for k, p in params.items()},
            v={k: np.zeros_like(np.asarray(p)) for k, p in params.items()},
            t=0,
        )


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState, cfg: TrainConfig):
    """One bias-corrected Adam update.  Inputs are left untouched.

    Arithmetic runs in each parameter's own dtype.
    """
    t = state.t + 1
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    new_params, new_m, new_v = {}, {}, {}
    for name, theta in params.items():
        theta = np.asarray(theta)
        g = np.asarray(grads[name])
        if g.shape != theta.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter has {theta.shape}")
        dt = theta.dtype
        g = g.astype(dt, copy=False)
        m = dt.type(b1) * state.m[name] + dt.type(1.0 - b1) * g
        v = dt.type(b2) * state.v[name] + dt.type(1.0 - b2) * (g * g)
        m_hat = m / dt.type(bc1)
        v_hat = v / dt.type(bc2)
        new_params[name] = theta - dt.type(cfg.learning_rate) * m_hat / (np.sqrt(v_hat) + dt.type(cfg.epsilon))
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(new_m, new_v, t)


# -- training loop -------------------------------------------------------------


@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    val_metric: float
    seconds: float


@dataclass
class TrainLog:
    task: Task
    rows: list[EpochRow] = field(default_factory=list)

    CSV_HEADER = ("epoch", "train_loss", "val_metric", "seconds")

    def to_csv(self, include_time: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_HEADER)
        for r in self.rows:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_metric), f"{r.seconds:.3f}" if include_time else "0"])
        return buf.getvalue()

    def write_csv(self, path, include_time: bool = True) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv(include_time))

    @property
    def final_metric(self) -> float:
        return self.rows[-1].val_metric


def _targets(task: Task, manifest: Manifest) -> np.ndarray:
    if task is Task.AGE:
        return np.asarray(manifest.ages, dtype=np.float32)
    return np.asarray(manifest.genders, dtype=np.int64)


def task_loss(task: Task, output: Tensor, targets: np.ndarray) -> Tensor:
    if task is Task.AGE:
        return T.mse_loss(output, targets)
    return T.cross_entropy_loss(output, targets)


def validation_metric(task: Task, outputs: np.ndarray, targets: np.ndarray) -> float:
    if task is Task.AGE:
        err = outputs.reshape(-1).astype(np.float64) - targets.astype(np.float64)
        return float(np.sqrt(np.mean(err * err)))
    # argmax picks the lower index on ties
    return float(np.mean(outputs.argmax(axis=1) == targets))


def _check_manifest(m: Manifest, what: str) -> None:
    if len(m) == 0:
        raise DomainError(f"{what} manifest is empty")


def train(
    task,
    spec: ModelSpec,
    train_manifest: Manifest,
    val_manifest: Manifest,
    cfg: TrainConfig,
    cache: Optional[ImageCache] = None,
    params: Optional[Params] = None,
    on_epoch: Optional[Callable[[EpochRow, Params], None]] = None,
) -> tuple[Params, TrainLog]:
    """Train for exactly ``cfg.max_epochs`` epochs.

    Training records are reshuffled every epoch from a generator seeded by
    ``cfg.seed``; the last partial batch is kept.  After each epoch the
    model is scored on ``val_manifest`` (RMSE for age, accuracy for gender).
    """
    task = Task.parse(task)
    cfg.validate()
    if spec.task is not task:
        raise ContractError(f"spec task {spec.task.value if spec.task else None!r} does not match requested task {task.value!r}")
    _check_manifest(train_manifest, "training")
    _check_manifest(val_manifest, "validation")
    cache = cache or ImageCache()
    params = dict(params) if params is not None else init_params(spec, cfg.seed)
    state = AdamState.zeros_like(params)
    y_train = _targets(task, train_manifest)
    y_val = _targets(task, val_manifest)
    records = train_manifest.records
    order_rng = SplitMix64(cfg.seed)
    log_out = TrainLog(task)
    n = len(records)

    for epoch in range(1, cfg.max_epochs + 1):
        start = time.perf_counter()
        perm = order_rng.permutation(n)
        total = 0.0
        for lo in range(0, n, cfg.batch_size):
            idx = perm[lo : lo + cfg.batch_size]
            batch = cache.batch([records[i] for i in idx])
            leaves = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
            loss = task_loss(task, forward(spec, leaves, batch), y_train[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(epoch, value)
            T.backward(loss)
            params, state = adam_step(params, {k: t.grad for k, t in leaves.items()}, state, cfg)
            total += value * len(idx)
        outputs = predict(spec, params, cache.batch(val_manifest.records), cfg.batch_size)
        metric = validation_metric(task, outputs, y_val)
        row = EpochRow(epoch, total / n, metric, time.perf_counter() - start)
        log_out.rows.append(row)
        log.info("epoch %d loss %.6g %s %.6g (%.2fs)", epoch, row.train_loss, metric_name(task), metric, row.seconds)
        if on_epoch is not None:
            on_epoch(row, params)
    return params, log_out


# -- grid search ---------------------------------------------------------------

DEFAULT_GRID_LR = (1e-2, 1e-3, 1e-4)
DEFAULT_GRID_BATCH = (32, 64)


def default_grid(base: Optional[TrainConfig] = None) -> list[TrainConfig]:
    base = base or TrainConfig()
    return [replace(base, learning_rate=lr, batch_size=bs) for lr in DEFAULT_GRID_LR for bs in DEFAULT_GRID_BATCH]


@dataclass
class GridResult:
    index: int
    config: TrainConfig
    metric: Optional[float]
    seconds: float
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None


class GridSearchExhausted(FaceCNNError, RuntimeError):
    def __init__(self, message: str, results: Sequence["GridResult"] = ()):
        super().__init__(message)
        self.results = list(results)


def grid_search(task, spec: ModelSpec, train_manifest: Manifest, val_manifest: Manifest, grid: Sequence[TrainConfig], cache: Optional[ImageCache] = None):
    """Train every config; return the best one and the per-cell results.

    Lowest final RMSE wins for age, highest accuracy for gender; ties go to
    the earliest cell.  Failing cells are recorded and skipped.
    """
    task = Task.parse(task)
    if not grid:
        raise DomainError("grid search needs at least one config")
    cache = cache or ImageCache()
    results: list[GridResult] = []
    for i, cfg in enumerate(grid):
        start = time.perf_counter()
        try:
            cfg.validate()
            _, tlog = train(task, spec, train_manifest, val_manifest, cfg, cache=cache)
            metric = tlog.final_metric
            if not math.isfinite(metric):
                raise TrainingDivergedError(cfg.max_epochs, metric)
            results.append(GridResult(i, cfg, metric, time.perf_counter() - start))
        except (DomainError, TrainingDivergedError) as exc:
            log.warning("grid cell %d failed: %s", i, exc)
            results.append(GridResult(i, cfg, None, time.perf_counter() - start, str(exc)))
    ok = [r for r in results if r.ok]
    if not ok:
        raise GridSearchExhausted(f"all {len(results)} grid cells failed", results)
    sign = 1.0 if task is Task.AGE else -1.0
    best = min(ok, key=lambda r: (sign * r.metric, r.index))
    return best.config, results


def results_csv(results: Sequence[GridResult], task) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cfg_fields = [f.name for f in fields(TrainConfig)]
    w.writerow(["cell", *cfg_fields, metric_name(task), "seconds", "status"])
    for r in results:
        d = r.config.to_dict()
        w.writerow([r.index, *(d[k] for k in cfg_fields), "" if r.metric is None else repr(r.metric), f"{r.seconds:.3f}", "ok" if r.ok else f"failed: {r.error}"])
    return buf.getvalue()
