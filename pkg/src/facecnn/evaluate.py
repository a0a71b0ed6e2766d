"""Holdout evaluation of a trained checkpoint."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .checkpoint import Checkpoint
from .data import ImageCache, Manifest
from .errors import ContractError, DomainError
from .metrics import (
    ClassificationReport,
    RegressionReport,
    RocCurve,
    classification_report,
    confusion_matrix,
    predicted_classes,
    roc_auc,
)
from .model import Task, forward


@dataclass
class EvalReport:
    task: Task
    n: int
    regression: Optional[RegressionReport] = None
    classification: Optional[ClassificationReport] = None
    roc: Optional[RocCurve] = None

    def to_dict(self) -> dict:
        out: dict = {"task": self.task.value, "n": self.n}
        if self.regression is not None:
            out.update(self.regression.to_dict())
        if self.classification is not None:
            out.update(self.classification.to_dict())
            out["auc"] = self.roc.auc if self.roc else None
            out["roc"] = self.roc.to_dict()["points"] if self.roc else None
        out["table"] = self.render()
        return out

    def render(self) -> str:
        if self.regression is not None:
            return self.regression.render()
        text = self.classification.render()
        cm = self.classification.confusion
        norm = cm.normalized()
        text += "\nConfusion matrix (rows true, cols predicted)\n"
        for c, (row, nrow) in enumerate(zip(cm.counts, norm)):
            text += f"{c:<4}{row[0]:>8d}{row[1]:>8d}    {nrow[0]:>6.2f}{nrow[1]:>6.2f}\n"
        text += f"\nAUC {self.roc.auc:.4f}\n" if self.roc else "\nAUC undefined (single-class labels)\n"
        return text

    def write(self, path) -> list[Path]:
        """JSON report at ``path`` plus a ``.txt`` table and, for gender, a ROC CSV."""
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")
        written = [path]
        txt = path.with_suffix(".txt")
        txt.write_text(self.render(), encoding="utf-8")
        written.append(txt)
        if self.roc is not None:
            roc_path = path.with_suffix(".roc.csv")
            roc_path.write_text(self.roc.to_csv(), encoding="utf-8")
            written.append(roc_path)
        return written


def model_outputs(ckpt: Checkpoint, manifest: Manifest, cache: Optional[ImageCache] = None, batch_size: int = 32) -> np.ndarray:
    cache = cache or ImageCache(max_bytes=0)
    records = manifest.records
    chunks = []
    for lo in range(0, len(records), batch_size):
        batch = cache.batch(records[lo : lo + batch_size])
        chunks.append(forward(ckpt.spec, ckpt.params, batch).data)
    return np.concatenate(chunks, axis=0)


def evaluate(task, ckpt: Checkpoint, manifest: Manifest, cache: Optional[ImageCache] = None, batch_size: int = 32) -> EvalReport:
    task = Task.parse(task)
    if ckpt.task is not task:
        got = ckpt.task.value if ckpt.task else None
        raise ContractError(f"checkpoint is for task {got!r}, evaluation requested {task.value!r}")
    if len(manifest) == 0:
        raise DomainError("cannot evaluate on an empty manifest")
    out = model_outputs(ckpt, manifest, cache, batch_size)
    if task is Task.AGE:
        return EvalReport(task, len(manifest), regression=RegressionReport.from_predictions(manifest.ages, out[:, 0]))
    labels = manifest.genders
    cm = confusion_matrix(labels, predicted_classes(out).tolist())
    roc = roc_auc(labels, out[:, 1]) if 0 < sum(labels) < len(labels) else None
    return EvalReport(task, len(manifest), classification=classification_report(cm), roc=roc)
