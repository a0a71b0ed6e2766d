import csv
import io

import numpy as np
import pytest

from facecnn import data as D
from facecnn import train as TR
from facecnn.errors import ContractError, DimensionError, DomainError, TrainingDivergedError
from facecnn.model import Conv, Dense, Flatten, MaxPool, ModelSpec, ReLU, Softmax, Task, init_params
from facecnn.rng import SplitMix64
from facecnn.train import AdamState, TrainConfig, adam_step

SIZE = 16


def small_spec(task):
    head = (Dense(1), ReLU()) if task is Task.AGE else (Dense(2), Softmax())
    return ModelSpec((3, SIZE, SIZE), (Conv(4, 3, 1, 1), ReLU(), MaxPool(2, 2), Flatten(), Dense(8), ReLU()) + head, task)


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    m = D.generate_synthetic(seed=2, n=10, out_dir=tmp_path_factory.mktemp("tiny"), size=SIZE)
    return m, D.ImageCache(size=SIZE)


class RecordingCache(D.ImageCache):
    def __init__(self, *a, **kw):
        super().__init__(*a, **kw)
        self.calls = []

    def batch(self, records):
        self.calls.append([r.path for r in records])
        return super().batch(records)


# -- config --------------------------------------------------------------------


def test_config_defaults_follow_table1():
    cfg = TrainConfig()
    assert (cfg.learning_rate, cfg.beta1, cfg.max_epochs, cfg.batch_size) == (0.01, 0.9, 150, 32)
    assert (cfg.beta2, cfg.epsilon, cfg.optimizer, cfg.shuffle) == (0.999, 1e-8, "adam", "every-epoch")
    assert TR.loss_name(Task.AGE) == "mse" and TR.loss_name("gender") == "cross_entropy"


@pytest.mark.parametrize(
    "kwargs",
    [{"learning_rate": 0}, {"beta1": 1.0}, {"beta2": -0.1}, {"batch_size": 0}, {"max_epochs": 0}, {"epsilon": 0}, {"optimizer": "sgd"}],
)
def test_config_invariants(kwargs):
    with pytest.raises(DomainError):
        TrainConfig(**kwargs).validate()


def test_config_dict_round_trip():
    cfg = TrainConfig(learning_rate=0.001, batch_size=8)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(DomainError):
        TrainConfig.from_dict({"momentum": 0.9})


# -- Adam ----------------------------------------------------------------------


def test_adam_worked_example():
    params = {"w": np.array(1.0)}
    state = AdamState.zeros_like(params)
    new, st = adam_step(params, {"w": np.array(1.0)}, state, TrainConfig())
    # m_hat = v_hat = 1, so the step is lr * 1 / (1 + eps)
    assert abs(float(new["w"]) - (1 - 0.01 / (1 + 1e-8))) < 1e-15
    assert abs(float(new["w"]) - 0.99) <= 1e-9
    assert st.t == 1


def test_adam_zero_gradient_fixed_point_bitwise():
    rng = np.random.default_rng(0)
    params = {"a": rng.standard_normal((3, 4)).astype(np.float32), "b": np.zeros(2, dtype=np.float32)}
    state = AdamState.zeros_like(params)
    new, st = adam_step(params, {k: np.zeros_like(v) for k, v in params.items()}, state, TrainConfig())
    for k in params:
        assert new[k].tobytes() == params[k].tobytes()
        assert not st.m[k].any() and not st.v[k].any()


def test_adam_monotone_for_constant_positive_gradient():
    params = {"w": np.array([1.0])}
    state = AdamState.zeros_like(params)
    values = [1.0]
    for _ in range(2):
        params, state = adam_step(params, {"w": np.array([0.3])}, state, TrainConfig())
        values.append(float(params["w"][0]))
    assert values[0] > values[1] > values[2]
    assert state.t == 2


def test_adam_matches_textbook_recurrence():
    rng = np.random.default_rng(1)
    cfg = TrainConfig(learning_rate=0.05, beta1=0.8, beta2=0.99, epsilon=1e-6)
    theta = rng.standard_normal(5)
    m = v = np.zeros(5)
    params, state = {"x": theta.copy()}, AdamState.zeros_like({"x": theta})
    for t in range(1, 6):
        g = rng.standard_normal(5)
        m = 0.8 * m + 0.2 * g
        v = 0.99 * v + 0.01 * g * g
        theta = theta - 0.05 * (m / (1 - 0.8**t)) / (np.sqrt(v / (1 - 0.99**t)) + 1e-6)
        params, state = adam_step(params, {"x": g}, state, cfg)
    np.testing.assert_allclose(params["x"], theta, rtol=1e-12)


def test_adam_leaves_inputs_untouched_and_checks_shapes():
    params = {"w": np.ones(3)}
    state = AdamState.zeros_like(params)
    adam_step(params, {"w": np.ones(3)}, state, TrainConfig())
    assert np.all(params["w"] == 1) and state.t == 0 and not state.m["w"].any()
    with pytest.raises(DimensionError):
        adam_step(params, {"w": np.ones(4)}, state, TrainConfig())


# -- training loop -------------------------------------------------------------


def test_train_is_deterministic_and_logs_every_epoch(tiny_data):
    m, cache = tiny_data
    cfg = TrainConfig(learning_rate=0.001, max_epochs=3, batch_size=4, seed=1)
    spec = small_spec(Task.GENDER)
    p1, log1 = TR.train(Task.GENDER, spec, m, m, cfg, cache=cache)
    p2, log2 = TR.train(Task.GENDER, spec, m, m, cfg, cache=cache)
    assert [r.epoch for r in log1.rows] == [1, 2, 3]
    for k in p1:
        assert p1[k].tobytes() == p2[k].tobytes()
    assert [(r.train_loss, r.val_metric) for r in log1.rows] == [(r.train_loss, r.val_metric) for r in log2.rows]


def test_train_shuffles_every_epoch_and_keeps_partial_batch(tiny_data):
    m, _ = tiny_data
    cfg = TrainConfig(learning_rate=0.001, max_epochs=3, batch_size=4, seed=9)
    cache = RecordingCache(size=SIZE)
    TR.train(Task.AGE, small_spec(Task.AGE), m, m, cfg, cache=cache)
    # each epoch: ceil(10/4) = 3 training batches then one validation batch
    train_calls = [c for i, c in enumerate(cache.calls) if i % 4 != 3]
    assert [len(c) for c in train_calls] == [4, 4, 2] * 3
    orders = [sum(train_calls[e * 3 : e * 3 + 3], []) for e in range(3)]
    assert all(sorted(o) == sorted(r.path for r in m.records) for o in orders)
    assert len({tuple(o) for o in orders}) == 3
    rng = SplitMix64(9)
    for o in orders:
        assert o == [m.records[i].path for i in rng.permutation(10)]


def test_train_errors(tiny_data):
    m, cache = tiny_data
    cfg = TrainConfig(max_epochs=1)
    with pytest.raises(ContractError):
        TR.train(Task.AGE, small_spec(Task.GENDER), m, m, cfg, cache=cache)
    empty = D.Manifest()
    with pytest.raises(DomainError):
        TR.train(Task.AGE, small_spec(Task.AGE), empty, m, cfg, cache=cache)
    with pytest.raises(DomainError):
        TR.train(Task.AGE, small_spec(Task.AGE), m, empty, cfg, cache=cache)


def test_train_divergence_names_epoch(tiny_data):
    m, cache = tiny_data
    spec = small_spec(Task.AGE)
    params = init_params(spec)
    params["0.weight"] = np.full_like(params["0.weight"], np.nan)
    with pytest.raises(TrainingDivergedError) as info:
        TR.train(Task.AGE, spec, m, m, TrainConfig(max_epochs=2), cache=cache, params=params)
    assert info.value.epoch == 1


def test_train_log_csv(tiny_data):
    m, cache = tiny_data
    _, log = TR.train(Task.GENDER, small_spec(Task.GENDER), m, m, TrainConfig(max_epochs=2, batch_size=5), cache=cache)
    rows = list(csv.reader(io.StringIO(log.to_csv())))
    assert rows[0] == ["epoch", "train_loss", "val_metric", "seconds"]
    assert len(rows) == 3
    assert 0 <= log.final_metric <= 1


def test_validation_metric():
    assert TR.validation_metric(Task.AGE, np.array([[1.0], [3.0]]), np.array([1.0, 1.0])) == pytest.approx(np.sqrt(2))
    probs = np.array([[0.5, 0.5], [0.1, 0.9], [0.8, 0.2]])
    assert TR.validation_metric(Task.GENDER, probs, np.array([0, 1, 1])) == pytest.approx(2 / 3)


# -- grid search ---------------------------------------------------------------


def test_default_grid():
    grid = TR.default_grid()
    assert [(c.learning_rate, c.batch_size) for c in grid] == [
        (1e-2, 32), (1e-2, 64), (1e-3, 32), (1e-3, 64), (1e-4, 32), (1e-4, 64),
    ]


def test_grid_singleton_invalid_and_duplicates(tiny_data):
    m, cache = tiny_data
    spec = small_spec(Task.GENDER)
    one = TrainConfig(learning_rate=0.001, max_epochs=1, batch_size=5)
    best, results = TR.grid_search(Task.GENDER, spec, m, m, [one], cache=cache)
    assert best == one and len(results) == 1

    bad = TrainConfig(learning_rate=0, max_epochs=1)
    best, results = TR.grid_search(Task.GENDER, spec, m, m, [bad, one], cache=cache)
    assert best == one
    assert not results[0].ok and results[1].ok

    best, results = TR.grid_search(Task.GENDER, spec, m, m, [one, one], cache=cache)
    assert best is one and results[0].metric == results[1].metric
    text = TR.results_csv(results, Task.GENDER)
    assert len(text.splitlines()) == 1 + 2


def test_grid_selection_direction(monkeypatch, tiny_data):
    m, cache = tiny_data
    metrics = iter([5.0, 3.0, 3.0, 4.0])

    def fake_train(task, spec, tm, vm, cfg, cache=None):
        log = TR.TrainLog(Task.parse(task), [TR.EpochRow(1, 0.0, next(metrics), 0.0)])
        return {}, log

    monkeypatch.setattr(TR, "train", fake_train)
    grid = [TrainConfig(seed=i) for i in range(4)]
    best, _ = TR.grid_search(Task.AGE, small_spec(Task.AGE), m, m, grid, cache=cache)
    assert best.seed == 1  # lowest RMSE, earliest on ties
    metrics = iter([0.5, 0.9, 0.9, 0.1])
    best, _ = TR.grid_search(Task.GENDER, small_spec(Task.GENDER), m, m, grid, cache=cache)
    assert best.seed == 1  # highest accuracy, earliest on ties


def test_grid_exhausted(tiny_data):
    m, cache = tiny_data
    grid = [TrainConfig(learning_rate=0), TrainConfig(batch_size=0)]
    with pytest.raises(TR.GridSearchExhausted) as info:
        TR.grid_search(Task.AGE, small_spec(Task.AGE), m, m, grid, cache=cache)
    assert len(info.value.results) == 2
    with pytest.raises(DomainError):
        TR.grid_search(Task.AGE, small_spec(Task.AGE), m, m, [], cache=cache)
