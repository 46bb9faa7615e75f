"""Calibrate hyperplane distances to continuous Genant grades and round them."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class DegenerateCalibrationError(ValueError):
    pass


class SingularFitError(ValueError):
    pass


@dataclass
class Calibration:
    kind: str  # "two_point_linear" or "polynomial"
    d0: float = 0.0
    d3: float = 0.0
    coeffs: tuple[float, ...] = ()
    d_min: float = 0.0
    d_max: float = 0.0
    monotone: bool = True
    fit_mode: str = "samples"

    @property
    def degree(self) -> int:
        return len(self.coeffs) - 1

    def to_dict(self) -> dict:
        if self.kind == "two_point_linear":
            params = {"d0": self.d0, "d3": self.d3}
        else:
            params = {"degree": self.degree, "coeffs": list(self.coeffs), "fit_mode": self.fit_mode}
        return {
            "version": FORMAT_VERSION,
            "kind": self.kind,
            "params": params,
            "range": [self.d_min, self.d_max],
            "monotone": self.monotone,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Calibration":
        if d.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported calibration version {d.get('version')}")
        p = d["params"]
        lo, hi = d["range"]
        if d["kind"] == "two_point_linear":
            return cls("two_point_linear", d0=p["d0"], d3=p["d3"], d_min=lo, d_max=hi,
                       monotone=d["monotone"])
        if d["kind"] == "polynomial":
            coeffs = tuple(float(c) for c in p["coeffs"])
            if len(coeffs) != p["degree"] + 1:
                raise ValueError("polynomial degree does not match coefficient count")
            return cls("polynomial", coeffs=coeffs, d_min=lo, d_max=hi, monotone=d["monotone"],
                       fit_mode=p.get("fit_mode", "samples"))
        raise ValueError(f"unknown calibration kind {d['kind']!r}")


def calibrate_two_point(dists_g0, dists_g3) -> Calibration:
    """Line through (mean G0 distance, 0) and (mean G3 distance, 3)."""
    g0 = np.asarray(dists_g0, dtype=np.float64)
    g3 = np.asarray(dists_g3, dtype=np.float64)
    if g0.size == 0 or g3.size == 0:
        raise DegenerateCalibrationError("two-point calibration needs G0 and G3 distances")
    d0, d3 = float(g0.mean()), float(g3.mean())
    if d0 == d3:
        raise DegenerateCalibrationError("G0 and G3 mean distances coincide")
    allv = np.concatenate([g0, g3])
    return Calibration("two_point_linear", d0=d0, d3=d3, d_min=float(allv.min()),
                       d_max=float(allv.max()), monotone=True)


def calibrate_poly(dists, targets, degree: int, by_class_means: bool = False) -> Calibration:
    """Least-squares polynomial ``g(d) = sum_j c_j d^j`` from per-sample grade targets."""
    if degree not in (1, 3):
        raise ValueError("degree must be 1 or 3")
    d = np.asarray(dists, dtype=np.float64)
    g = np.asarray(targets, dtype=np.float64)
    if d.shape != g.shape or d.ndim != 1:
        raise ValueError("dists and targets must be equal-length vectors")
    d_min, d_max = float(d.min()), float(d.max())
    if by_class_means:
        classes = np.unique(g)
        d = np.array([d[g == c].mean() for c in classes])
        g = classes
    if len(np.unique(d)) < degree + 1:
        raise SingularFitError(f"need at least {degree + 1} distinct distances")
    X = np.vander(d, degree + 1, increasing=True)
    gram = X.T @ X + 1e-9 * np.eye(degree + 1)
    if np.linalg.matrix_rank(gram) < degree + 1:
        raise SingularFitError("normal equations are rank deficient")
    coeffs = np.linalg.solve(gram, X.T @ g)
    if not np.all(np.isfinite(coeffs)):
        raise SingularFitError("non-finite polynomial coefficients")
    cal = Calibration("polynomial", coeffs=tuple(float(c) for c in coeffs), d_min=d_min,
                      d_max=d_max, fit_mode="class_means" if by_class_means else "samples")
    cal.monotone = is_monotone(cal)
    return cal


def is_monotone(cal: Calibration) -> bool:
    """Whether g'(d) keeps one sign on the fitted distance range."""
    if cal.kind == "two_point_linear":
        return True
    deriv = np.polynomial.polynomial.polyder(np.asarray(cal.coeffs))
    grid = np.linspace(cal.d_min, cal.d_max, 2001)
    vals = np.polynomial.polynomial.polyval(grid, deriv)
    return bool(np.all(vals >= 0) or np.all(vals <= 0))


def continuous_grade(d, cal: Calibration):
    """Evaluate the calibration map; deliberately unclamped."""
    if cal.kind == "two_point_linear":
        out = 3.0 * (np.asarray(d, dtype=np.float64) - cal.d0) / (cal.d3 - cal.d0)
    else:
        out = np.polynomial.polynomial.polyval(np.asarray(d, dtype=np.float64), np.asarray(cal.coeffs))
    return float(out) if np.ndim(out) == 0 else out


def ordinal_grade(g: float) -> int:
    """Clamp to [0, 3] and round half away from zero."""
    g = float(g)
    if not math.isfinite(g):
        raise ValueError("grade must be finite")
    g = min(max(g, 0.0), 3.0)
    return int(math.floor(g + 0.5))


def eval_label(grade: int) -> int:
    """Evaluation rule: anything below G2 counts as healthy."""
    if grade not in (0, 1, 2, 3):
        raise ValueError(f"invalid grade {grade}")
    return 0 if grade < 2 else grade


def save_calibration(path: str | Path, cal: Calibration) -> None:
    Path(path).write_text(json.dumps(cal.to_dict(), indent=2, sort_keys=True) + "\n")


def load_calibration(path: str | Path) -> Calibration:
    return Calibration.from_dict(json.loads(Path(path).read_text()))
