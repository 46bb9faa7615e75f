"""Detection, grading and reconstruction metrics."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

EVAL_CLASSES = (0, 2, 3)


def roc_auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative (ties = 1/2).

    Uses the Mann-Whitney rank-sum identity with mid-ranks.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1-D and equally long")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both classes present")
    ranks = rankdata(scores, method="average")
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def confusion_matrix(pred, truth, classes=EVAL_CLASSES) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    index = {c: i for i, c in enumerate(classes)}
    m = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for p, t in zip(pred, truth):
        if t not in index or p not in index:
            raise ValueError(f"label outside {classes}: pred={p}, truth={t}")
        m[index[t], index[p]] += 1
    return m


def per_class_prf(pred, truth, classes=EVAL_CLASSES) -> dict[int, tuple[float, float, float]]:
    m = confusion_matrix(pred, truth, classes)
    out = {}
    for i, c in enumerate(classes):
        tp = m[i, i]
        fp = m[:, i].sum() - tp
        fn = m[i, :].sum() - tp
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        out[c] = (float(precision), float(recall), float(f1))
    return out


def macro_f1(pred, truth, classes=EVAL_CLASSES) -> float:
    """Unweighted mean of per-class F1.  Classes with no true positives score 0."""
    pred, truth = list(pred), list(truth)
    if not pred or len(pred) != len(truth):
        raise ValueError("pred and truth must be non-empty and equally long")
    prf = per_class_prf(pred, truth, classes)
    return float(np.mean([prf[c][2] for c in classes]))


def mse_psnr(a, b) -> tuple[float, float]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    psnr = math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)
    return mse, psnr


def spearman(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 3:
        raise ValueError("spearman needs two equal-length vectors of length >= 3")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise ValueError("spearman is undefined for a constant input")
    rx = rankdata(x, method="average")
    ry = rankdata(y, method="average")
    return float(np.corrcoef(rx, ry)[0, 1])


@dataclass
class EvalReport:
    detection_auc: float
    macro_f1: float
    per_class: dict
    confusion: list
    recon_mse: float
    recon_psnr: float
    spearman_distance_compression: float
    counts: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = asdict(self)
        if math.isinf(d["recon_psnr"]):
            d["recon_psnr"] = "inf"
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        lines = [
            f"detection AUC (G0 vs G2/G3) : {self.detection_auc:.4f}",
            f"grading macro F1 (G0,G2,G3) : {self.macro_f1:.4f}",
            f"reconstruction MSE / PSNR   : {self.recon_mse:.5f} / {self.recon_psnr:.2f} dB",
            f"spearman(distance, compr.)  : {self.spearman_distance_compression:.4f}",
            "",
            "class  precision  recall  f1",
        ]
        for c, (p, r, f) in sorted(self.per_class.items(), key=lambda kv: str(kv[0])):
            lines.append(f"G{c}     {p:9.3f}  {r:6.3f}  {f:.3f}")
        lines.append("")
        lines.append("confusion (rows=true G0,G2,G3; cols=pred)")
        for row in self.confusion:
            lines.append("  " + " ".join(f"{v:5d}" for v in row))
        if self.counts:
            lines.append("")
            lines.append("counts: " + ", ".join(f"{k}={v}" for k, v in sorted(self.counts.items())))
        for k, v in sorted(self.extra.items()):
            lines.append(f"{k}: {v}")
        return "\n".join(lines) + "\n"
