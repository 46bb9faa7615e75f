"""Glue between the stages: which samples each stage may see, and evaluation."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import model as dae
from .grading import (Calibration, calibrate_poly, calibrate_two_point, continuous_grade,
                      eval_label, ordinal_grade)
from .latentgeom import (ADMITTED_GRADES, Hyperplane, LatentStandardizer, ProbeConfig, distance,
                         fit_standardizer, train_linear_probe, train_svm)
from .metrics import EVAL_CLASSES, EvalReport, macro_f1, mse_psnr, per_class_prf, roc_auc, spearman
from .metrics import confusion_matrix
from .synthdata import ManifestRecord, load_split, read_manifest

CALIBRATION_KINDS = ("two_point", "poly1", "poly3")


def grade_visible(r: ManifestRecord) -> bool:
    """Healthy draws are known G0; other grades are only known on the graded subset."""
    return r.grade == 0 or r.graded


def probe_records(records: list[ManifestRecord], split: str = "train") -> list[ManifestRecord]:
    """G0 vs G2/G3 samples with visible grades; G1 is never used for probing."""
    return [r for r in records if r.split == split and grade_visible(r) and r.grade in ADMITTED_GRADES]


@dataclass
class LatentSet:
    records: list[ManifestRecord]
    images: np.ndarray
    latents: np.ndarray

    @property
    def grades(self) -> np.ndarray:
        return np.array([r.grade for r in self.records])

    @property
    def compressions(self) -> np.ndarray:
        return np.array([r.compression for r in self.records])

    @property
    def fractured(self) -> np.ndarray:
        return np.array([int(r.fractured) for r in self.records])


def encode_records(model, data_dir, records: list[ManifestRecord]) -> LatentSet:
    images, recs = load_split(data_dir, None, records)
    if not recs:
        return LatentSet([], images, np.zeros((0, model.config.latent_dim)))
    return LatentSet(recs, images, dae.encode_semantic(model, images).astype(np.float64))


def fit_probe(train: LatentSet, kind: str, config: ProbeConfig | None = None
              ) -> tuple[Hyperplane, LatentStandardizer]:
    std = fit_standardizer(train.latents)
    x = std.apply(train.latents)
    y = train.fractured
    if kind == "svm":
        h = train_svm(x, y, config)
    elif kind == "linear":
        h = train_linear_probe(x, y, config)
    else:
        raise ValueError(f"unknown probe kind {kind!r}")
    return h, std


def detection_auc(h, std, ls: LatentSet) -> float:
    keep = np.isin(ls.grades, ADMITTED_GRADES)
    return roc_auc(distance(ls.latents[keep], h, std), ls.fractured[keep])


def fit_calibration(kind: str, dists: np.ndarray, grades: np.ndarray,
                    by_class_means: bool = False) -> Calibration:
    dists = np.asarray(dists, dtype=np.float64)
    grades = np.asarray(grades)
    if kind == "two_point":
        return calibrate_two_point(dists[grades == 0], dists[grades == 3])
    if kind in ("poly1", "poly3"):
        keep = np.isin(grades, ADMITTED_GRADES)
        return calibrate_poly(dists[keep], grades[keep].astype(np.float64), int(kind[-1]), by_class_means)
    raise ValueError(f"unknown calibration kind {kind!r}; choose from {CALIBRATION_KINDS}")


def grade_latents(latents, h, std, cal) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    d = np.atleast_1d(distance(latents, h, std))
    g = np.atleast_1d(continuous_grade(d, cal))
    o = np.array([ordinal_grade(v) for v in g], dtype=np.int64)
    return d, g, o


def grading_f1(ls: LatentSet, h, std, cal) -> tuple[float, dict, np.ndarray]:
    """Macro F1 over G0/G2/G3 truths after mapping predicted G1 to healthy."""
    keep = np.isin(ls.grades, EVAL_CLASSES)
    _, _, o = grade_latents(ls.latents[keep], h, std, cal)
    pred = [eval_label(int(v)) for v in o]
    truth = [int(v) for v in ls.grades[keep]]
    return macro_f1(pred, truth), per_class_prf(pred, truth), confusion_matrix(pred, truth)


def pca_2d(latents: np.ndarray) -> np.ndarray:
    x = np.asarray(latents, dtype=np.float64)
    x = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(x, full_matrices=False)
    comps = vt[:2]
    # fix the sign so the projection is reproducible
    signs = np.sign(comps[np.arange(comps.shape[0]), np.abs(comps).argmax(axis=1)])
    return x @ (comps * signs[:, None]).T


def evaluate(model, h, std, cal, data_dir, split: str = "test", n_recon: int = 64,
             eval_steps: int = 20, pca_path: str | Path | None = None) -> EvalReport:
    records = [r for r in read_manifest(data_dir) if r.split == split]
    ls = encode_records(model, data_dir, records)
    auc = detection_auc(h, std, ls)
    f1, prf, conf = grading_f1(ls, h, std, cal)
    rec_imgs = ls.images[:n_recon]
    rec = dae.reconstruct(model, rec_imgs, eval_steps)
    mse, psnr = mse_psnr(rec, rec_imgs)
    frac = ls.fractured.astype(bool)
    d = np.atleast_1d(distance(ls.latents, h, std))
    rho = spearman(d[frac], ls.compressions[frac])
    counts = {f"G{g}": int((ls.grades == g).sum()) for g in range(4)}
    counts["n"] = len(ls.records)
    if pca_path is not None:
        proj = pca_2d(ls.latents)
        with open(pca_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["filename", "pc1", "pc2", "grade", "compression", "distance"])
            for r, p, dd in zip(ls.records, proj, d):
                w.writerow([r.filename, f"{p[0]:.6f}", f"{p[1]:.6f}", r.grade,
                            f"{r.compression:.6f}", f"{dd:.6f}"])
    return EvalReport(
        detection_auc=auc,
        macro_f1=f1,
        per_class={f"{c}": list(v) for c, v in prf.items()},
        confusion=conf.tolist(),
        recon_mse=mse,
        recon_psnr=psnr,
        spearman_distance_compression=rho,
        counts=counts,
        extra={"probe": h.kind, "calibration": cal.kind if cal.kind != "polynomial" else f"poly{cal.degree}",
               "calibration_monotone": cal.monotone},
    )
