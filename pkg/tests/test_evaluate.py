import json

import numpy as np
import pytest

from facecnn import data as D
from facecnn.checkpoint import Checkpoint
from facecnn.errors import ContractError, DomainError
from facecnn.evaluate import evaluate
from facecnn.model import Task, build_default_model, init_params, zero_params


def zero_ckpt(task):
    spec = build_default_model(task)
    return Checkpoint(spec, zero_params(spec))


def test_zero_age_model_mae_is_mean_age(synth_set):
    _, m = synth_set
    rep = evaluate(Task.AGE, zero_ckpt(Task.AGE), m)
    assert rep.regression.mae == pytest.approx(np.mean(m.ages))
    assert rep.regression.mse == pytest.approx(np.mean(np.square(m.ages)))
    d = rep.to_dict()
    assert {"mse", "rmse", "mae"} <= set(d)


def test_zero_gender_model_predicts_class_zero(synth_set):
    _, m = synth_set
    rep = evaluate(Task.GENDER, zero_ckpt(Task.GENDER), m)
    cm = rep.classification.confusion.array()
    assert cm[:, 1].sum() == 0
    assert rep.classification.accuracy == pytest.approx(m.genders.count(0) / len(m))
    assert rep.roc.auc == 0.5
    d = rep.to_dict()
    assert {"confusion_matrix", "per_class", "accuracy", "macro_avg", "weighted_avg", "auc", "roc"} <= set(d)


def test_evaluate_is_deterministic_and_writes_files(synth_set, tmp_path):
    _, m = synth_set
    spec = build_default_model(Task.GENDER)
    ck = Checkpoint(spec, init_params(spec, 2))
    a = evaluate(Task.GENDER, ck, m)
    b = evaluate(Task.GENDER, ck, m)
    assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())
    written = a.write(tmp_path / "r.json")
    assert [p.name for p in written] == ["r.json", "r.txt", "r.roc.csv"]
    assert (tmp_path / "r.roc.csv").read_text().startswith("threshold,fpr,tpr\n")
    assert "Weighted-Average" in (tmp_path / "r.txt").read_text()


def test_evaluate_task_mismatch_and_empty(synth_set):
    _, m = synth_set
    with pytest.raises(ContractError):
        evaluate(Task.AGE, zero_ckpt(Task.GENDER), m)
    with pytest.raises(DomainError):
        evaluate(Task.AGE, zero_ckpt(Task.AGE), D.Manifest())


def test_single_class_gender_manifest_has_no_roc(synth_set):
    _, m = synth_set
    only = D.Manifest(records=tuple(r for r in m.records if r.gender == 0))
    rep = evaluate(Task.GENDER, zero_ckpt(Task.GENDER), only)
    assert rep.roc is None and rep.to_dict()["auc"] is None
    assert "undefined" in rep.render()
