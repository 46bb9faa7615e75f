"""Linear probing of the frozen semantic latent space.

A probe (logistic regression or primal linear SVM) separates healthy (G0)
from fractured (G2/G3) latents.  Its decision boundary is kept as a unit
normal ``n`` and bias ``b`` in standardized latent space, so that
``n . z_std + b`` is the signed Euclidean distance to the boundary.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
ADMITTED_GRADES = (0, 2, 3)


class DegenerateLabelsError(ValueError):
    pass


@dataclass
class LatentStandardizer:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-1] != self.mean.shape[0]:
            raise ValueError(f"latent dim {z.shape[-1]} != standardizer dim {self.mean.shape[0]}")
        return (z - self.mean) / self.std

    def invert(self, z_std) -> np.ndarray:
        return np.asarray(z_std, dtype=np.float64) * self.std + self.mean


def fit_standardizer(latents) -> LatentStandardizer:
    z = np.asarray(latents, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 2:
        raise ValueError("need at least two latents to fit a standardizer")
    mean = z.mean(axis=0)
    std = z.std(axis=0, ddof=1)
    std = np.where(std < 1e-8, 1.0, std)
    return LatentStandardizer(mean, std)


@dataclass
class Hyperplane:
    normal: np.ndarray
    bias: float
    kind: str = "svm"
    train_hash: str = ""
    raw_norm: float = 1.0

    @property
    def dim(self) -> int:
        return int(self.normal.shape[0])


def canonicalize(w, b: float, **meta) -> Hyperplane:
    """Scale (w, b) so that the normal has unit length; orientation is preserved."""
    w = np.asarray(w, dtype=np.float64)
    norm = float(np.linalg.norm(w))
    if norm == 0.0 or not np.isfinite(norm):
        raise ValueError("cannot canonicalize a zero or non-finite normal")
    meta.setdefault("raw_norm", norm)
    return Hyperplane(w / norm, float(b) / norm, **meta)


@dataclass
class ProbeConfig:
    epochs: int = 500
    lr: float = 0.5
    weight_decay: float = 1e-4
    class_weight: bool = False
    svm_lambda: float = 1e-3
    svm_epochs: int = 2000
    seed: int = 0


def _check_labels(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y).astype(np.int64)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError("latents must be (N, D) with one label per row")
    if not set(np.unique(y)) <= {0, 1}:
        raise ValueError("labels must be 0 (healthy) or 1 (fractured)")
    if len(np.unique(y)) < 2:
        raise DegenerateLabelsError("probe training needs both healthy and fractured samples")
    return x, y


def dataset_hash(x, y) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(x, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(y, dtype="<i8").tobytes())
    return h.hexdigest()[:16]


def train_linear_probe(latents, labels, config: ProbeConfig | None = None) -> Hyperplane:
    """Full-batch gradient descent on the (optionally class-weighted) logistic loss."""
    config = config or ProbeConfig()
    x, y = _check_labels(latents, labels)
    n, d = x.shape
    if config.class_weight:
        counts = np.bincount(y, minlength=2).astype(np.float64)
        sample_w = (n / (2 * counts))[y]
    else:
        sample_w = np.ones(n)
    sample_w = sample_w / sample_w.sum()
    w = np.zeros(d)
    b = 0.0
    target = y.astype(np.float64)
    for _ in range(config.epochs):
        logits = x @ w + b
        p = 0.5 * (1.0 + np.tanh(0.5 * logits))
        r = (p - target) * sample_w
        grad_w = x.T @ r + config.weight_decay * w
        grad_b = r.sum()
        w -= config.lr * grad_w
        b -= config.lr * grad_b
    return canonicalize(w, b, kind="linear", train_hash=dataset_hash(x, y))


def train_svm(latents, labels, config: ProbeConfig | None = None) -> Hyperplane:
    """Primal soft-margin SVM: ``lambda/2 |w|^2 + mean hinge``, by subgradient descent.

    Full-batch Pegasos steps ``1 / (lambda k)`` with projection onto the ball
    of radius ``1 / sqrt(lambda)``; returns the average of the second half of
    the iterates.  Full-batch updates keep the result invariant to sample
    order and duplication.
    """
    config = config or ProbeConfig()
    x, y = _check_labels(latents, labels)
    n, d = x.shape
    lam = config.svm_lambda
    s = 2.0 * y - 1.0
    radius = 1.0 / np.sqrt(lam)
    w = np.zeros(d)
    b = 0.0
    avg_w = np.zeros(d)
    avg_b = 0.0
    n_avg = 0
    iters = config.svm_epochs
    for k in range(1, iters + 1):
        eta = 1.0 / (lam * (k + 1))
        active = s * (x @ w + b) < 1.0
        grad_w = lam * w - (s[active, None] * x[active]).sum(axis=0) / n
        grad_b = -s[active].sum() / n
        w = w - eta * grad_w
        b = b - eta * grad_b
        norm = np.linalg.norm(w)
        if norm > radius:
            w *= radius / norm
        if k > iters // 2:
            avg_w += w
            avg_b += b
            n_avg += 1
    w, b = avg_w / n_avg, avg_b / n_avg
    return canonicalize(w, b, kind="svm", train_hash=dataset_hash(x, y))


def svm_objective(w, b, latents, labels, lam: float) -> float:
    x = np.asarray(latents, dtype=np.float64)
    s = 2.0 * np.asarray(labels) - 1.0
    hinge = np.maximum(0.0, 1.0 - s * (x @ w + b))
    return float(lam / 2 * w @ w + hinge.mean())


def distance(z, h: Hyperplane, std: LatentStandardizer | None = None):
    """Signed distance ``n . z_std + b``; positive on the fractured side."""
    zs = std.apply(z) if std is not None else np.asarray(z, dtype=np.float64)
    if zs.shape[-1] != h.dim:
        raise ValueError(f"latent dim {zs.shape[-1]} != hyperplane dim {h.dim}")
    out = zs @ h.normal + h.bias
    return float(out) if np.ndim(out) == 0 else out


def detect(z, h: Hyperplane, std: LatentStandardizer | None = None) -> tuple[str, float]:
    d = distance(z, h, std)
    return ("fractured" if d > 0 else "healthy"), d


# --------------------------------------------------------------------------- persistence


def save_probe(path: str | Path, h: Hyperplane, std: LatentStandardizer, extra: dict | None = None) -> None:
    payload = {
        "version": FORMAT_VERSION,
        "kind": h.kind,
        "D": h.dim,
        "mean": [float(v) for v in std.mean],
        "std": [float(v) for v in std.std],
        "normal": [float(v) for v in h.normal],
        "bias": float(h.bias),
        "raw_norm": float(h.raw_norm),
        "train_hash": h.train_hash,
    }
    if extra:
        payload["extra"] = extra
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_probe(path: str | Path) -> tuple[Hyperplane, LatentStandardizer]:
    d = json.loads(Path(path).read_text())
    if d.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported probe file version {d.get('version')}")
    h = Hyperplane(np.array(d["normal"], dtype=np.float64), float(d["bias"]), d["kind"],
                   d.get("train_hash", ""), float(d.get("raw_norm", 1.0)))
    std = LatentStandardizer(np.array(d["mean"], dtype=np.float64), np.array(d["std"], dtype=np.float64))
    if h.dim != d["D"] or std.mean.shape[0] != d["D"]:
        raise ValueError("probe file dimensions are inconsistent")
    return h, std
