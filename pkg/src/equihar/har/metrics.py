"""Classification metrics: confusion matrix, per-class and macro F1."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import pandas as pd


@dataclass
class EvalReport:
    vocab: list[str]
    confusion: np.ndarray  # rows = truth, columns = prediction
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    macro_f1: float
    averaging: str = "macro F1: unweighted mean of per-class F1 over the full vocabulary"

    @property
    def support(self) -> np.ndarray:
        return self.confusion.sum(axis=1)

    @property
    def accuracy(self) -> float:
        n = self.confusion.sum()
        return float(np.trace(self.confusion) / n) if n else float("nan")

    def worst_class(self) -> str:
        """Present class with the lowest F1 (ties: lowest recall)."""
        present = np.flatnonzero(self.support > 0)
        i = min(present, key=lambda j: (self.f1[j], self.recall[j]))
        return self.vocab[i]

    def to_text(self) -> str:
        w = max(len(v) for v in self.vocab)
        lines = [self.averaging, f"macro-F1 {self.macro_f1:.4f}   accuracy {self.accuracy:.4f}", ""]
        lines.append(f"{'class':<{w}}  precision  recall  f1      support")
        for i, v in enumerate(self.vocab):
            lines.append(f"{v:<{w}}  {self.precision[i]:9.4f}  {self.recall[i]:6.4f}  {self.f1[i]:6.4f}  "
                         f"{int(self.support[i]):7d}")
        return "\n".join(lines) + "\n"

    def confusion_frame(self) -> pd.DataFrame:
        df = pd.DataFrame(self.confusion, index=self.vocab, columns=self.vocab)
        df.index.name = "truth"
        return df

    def to_dict(self) -> dict:
        return {
            "averaging": self.averaging,
            "macro_f1": self.macro_f1,
            "accuracy": self.accuracy,
            "classes": {
                v: {"precision": float(self.precision[i]), "recall": float(self.recall[i]),
                    "f1": float(self.f1[i]), "support": int(self.support[i])}
                for i, v in enumerate(self.vocab)
            },
            "confusion": self.confusion.tolist(),
        }


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if len(y_true) != len(y_pred):
        raise ValueError("truth and prediction differ in length")
    for name, y in (("truth", y_true), ("prediction", y_pred)):
        if len(y) and (y.min() < 0 or y.max() >= n_classes):
            raise ValueError(f"{name} label outside the vocabulary of {n_classes} classes")
    return np.bincount(y_true * n_classes + y_pred, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def _safe_div(a, b):
    return np.divide(a, b, out=np.zeros(len(a)), where=b > 0)


def evaluate(y_true, y_pred, vocab: Sequence[str]) -> EvalReport:
    """Report over ``vocab``. Labels may be indices or vocabulary strings.

    A class that is never predicted and never present scores F1 = 0 and
    still counts in the macro average.
    """
    vocab = list(vocab)
    pos = {v: i for i, v in enumerate(vocab)}

    def index(y):
        y = list(y)
        if y and isinstance(y[0], str):
            bad = sorted({v for v in y if v not in pos})
            if bad:
                raise ValueError(f"labels {bad} are not in the vocabulary {vocab}")
            return np.array([pos[v] for v in y], dtype=np.int64)
        return np.asarray(y, dtype=np.int64)

    cm = confusion_matrix(index(y_true), index(y_pred), len(vocab))
    tp = np.diag(cm).astype(np.float64)
    prec = _safe_div(tp, cm.sum(axis=0).astype(np.float64))
    rec = _safe_div(tp, cm.sum(axis=1).astype(np.float64))
    f1 = _safe_div(2 * prec * rec, prec + rec)
    return EvalReport(vocab, cm, prec, rec, f1, float(f1.mean()) if len(f1) else float("nan"))
