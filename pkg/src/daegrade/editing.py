"""Counterfactual edits along the fracture direction of the semantic space."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import model as dae
from .grading import Calibration, continuous_grade
from .latentgeom import Hyperplane, LatentStandardizer, distance
from .synthdata import GeneratorConfig, MeasurementFailedError, measure_height_reduction

DEFAULT_SWEEP = (-1.0, 0.0, 1.0, 2.0, 3.0, 4.0)


class UnsupportedInversionError(ValueError):
    pass


@dataclass
class EditRequest:
    image: np.ndarray
    shift: float | None = None
    target_grade: float | None = None
    eval_steps: int = 20
    gen_steps: int = 100

    def __post_init__(self):
        if (self.shift is None) == (self.target_grade is None):
            raise ValueError("set exactly one of shift or target_grade")
        if self.target_grade is not None and not -1.0 <= self.target_grade <= 4.0:
            raise ValueError("target grade must lie in [-1, 4]")


def target_distance(g_t: float, cal: Calibration) -> float:
    """Invert the two-point calibration: distance whose grade is ``g_t``."""
    if cal.kind != "two_point_linear":
        raise UnsupportedInversionError(
            "only two-point linear calibrations can be inverted; refit with kind=two_point"
        )
    return cal.d0 + (g_t / 3.0) * (cal.d3 - cal.d0)


def edit_latent(z, h: Hyperplane, std: LatentStandardizer, target_d: float) -> np.ndarray:
    """Move ``z`` along the unit normal until its signed distance equals ``target_d``."""
    z = np.asarray(z, dtype=np.float64)
    zs = std.apply(z)
    d = zs @ h.normal + h.bias
    moved = zs + np.multiply.outer(target_d - d, h.normal)
    return std.invert(moved)


def shift_latent(z, h: Hyperplane, std: LatentStandardizer, shift: float) -> np.ndarray:
    """Uncalibrated edit: move by ``shift`` standardized units along the normal."""
    return edit_latent(z, h, std, distance(z, h, std) + shift)


def counterfactual(model, h, std, cal, x0, g_t, eval_steps=20, gen_steps=100) -> np.ndarray:
    """Decode ``x0`` re-targeted to continuous grade ``g_t`` with its own x_T held fixed."""
    return _counterfactuals(model, h, std, x0, [target_distance(g_t, cal)], eval_steps, gen_steps)[0]


def apply_request(model, h, std, cal, req: EditRequest) -> np.ndarray:
    if req.shift is not None:
        d = distance(dae.encode_semantic(model, req.image), h, std) + req.shift
    else:
        d = target_distance(req.target_grade, cal)
    return _counterfactuals(model, h, std, req.image, [d], req.eval_steps, req.gen_steps)[0]


def _counterfactuals(model, h, std, x0, target_ds, eval_steps, gen_steps) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float32)
    z = dae.encode_semantic(model, x0)
    xT = dae.encode_stochastic(model, x0, z, eval_steps)
    zs = np.stack([edit_latent(z, h, std, d) for d in target_ds])
    xTs = np.repeat(xT[None], len(target_ds), axis=0)
    return dae.decode(model, xTs, zs, gen_steps)


@dataclass
class Sweep:
    images: np.ndarray
    grades: list[float]
    distances: list[float]
    reductions: list[float]
    source_grade: float

    def strip(self) -> np.ndarray:
        return np.concatenate(list(self.images), axis=1)


def grade_sweep(model, h, std, cal, x0, grades=DEFAULT_SWEEP, eval_steps=20, gen_steps=100,
                gen_config: GeneratorConfig | None = None) -> Sweep:
    grades = [float(g) for g in grades]
    ds = [target_distance(g, cal) for g in grades]
    imgs = _counterfactuals(model, h, std, x0, ds, eval_steps, gen_steps)
    reductions = []
    for im in imgs:
        try:
            reductions.append(measure_height_reduction(im, gen_config))
        except MeasurementFailedError:
            reductions.append(float("nan"))
    src = continuous_grade(distance(dae.encode_semantic(model, x0), h, std), cal)
    return Sweep(imgs, grades, ds, reductions, float(src))


def save_sweep(sweep: Sweep, out_dir: str | Path, stem: str) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    png = out_dir / f"{stem}_sweep.png"
    table = out_dir / f"{stem}_sweep.csv"
    strip = np.round(np.clip(sweep.strip(), 0, 1) * 255).astype(np.uint8)
    Image.fromarray(strip, mode="L").save(png, format="PNG")
    with open(table, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["target_grade", "target_distance", "measured_reduction"])
        for g, d, r in zip(sweep.grades, sweep.distances, sweep.reductions):
            w.writerow([f"{g:g}", f"{d:.6f}", "nan" if np.isnan(r) else f"{r:.6f}"])
    return png, table
