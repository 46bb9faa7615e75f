"""Command-line driver: synth | train | probe | calibrate | grade | sweep | eval.

Settings come from defaults, then an INI file (``--config``), then
``--key value`` flags, later sources winning.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import editing, grading, latentgeom, metrics, pipeline, synthdata
from . import model as dae

log = logging.getLogger("daegrade")


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off", ""):
        return False
    raise ValueError(f"not a boolean: {v!r}")


# key: (section, default, parser).  Path defaults are relative to --out.
SETTINGS: dict[str, tuple[str, object, type]] = {
    "data_dir": ("paths", "data", str),
    "checkpoint": ("paths", "dae.ckpt", str),
    "train_dir": ("paths", "train", str),
    "probe": ("paths", "probe.json", str),
    "calibration": ("paths", "calibration.json", str),
    "report_dir": ("paths", "report", str),
    "preset": ("data", "default", str),
    "n_train": ("data", 3000, int),
    "n_val": ("data", 300, int),
    "n_test": ("data", 600, int),
    "fracture_rate": ("data", None, float),
    "graded_fraction": ("data", None, float),
    "image_size": ("data", 32, int),
    "raw": ("data", False, _bool),
    "model_preset": ("model", "desk", str),
    "latent_dim": ("model", None, int),
    "base_channels": ("model", None, int),
    "lr": ("model", None, float),
    "batch_size": ("model", None, int),
    "total_samples": ("model", None, int),
    "checkpoint_every": ("model", None, int),
    "T": ("model", None, int),
    "loss": ("model", None, str),
    "probe_kind": ("probe", "svm", str),
    "probe_epochs": ("probe", 500, int),
    "probe_lr": ("probe", 0.5, float),
    "weight_decay": ("probe", 1e-4, float),
    "class_weight": ("probe", False, _bool),
    "svm_lambda": ("probe", 1e-3, float),
    "svm_epochs": ("probe", 2000, int),
    "calibration_kind": ("calibration", "two_point", str),
    "by_class_means": ("calibration", False, _bool),
    "eval_T": ("steps", 20, int),
    "generation_T": ("steps", 100, int),
    "sweep_grades": ("steps", "-1,0,1,2,3,4", str),
}

PATH_KEYS = ("data_dir", "checkpoint", "train_dir", "probe", "calibration", "report_dir")


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


@dataclass
class RunConfig:
    values: dict
    out: Path
    seed: int
    single_thread: bool

    def __getattr__(self, key):
        try:
            return self.values[key]
        except KeyError:
            raise AttributeError(key) from None

    def path(self, key: str) -> Path:
        p = Path(self.values[key])
        return p if p.is_absolute() else self.out / p

    def dataset_spec(self) -> synthdata.DatasetSpec:
        over = {"n_train": self.n_train, "n_val": self.n_val, "n_test": self.n_test,
                "seed": self.seed, "raw": self.raw,
                "generator": synthdata.GeneratorConfig(size=self.image_size)}
        for k in ("fracture_rate", "graded_fraction"):
            if self.values[k] is not None:
                over[k] = self.values[k]
        try:
            return synthdata.dataset_spec_from_preset(self.preset, **over)
        except ValueError as exc:
            raise CliError("invalid-config", str(exc)) from exc

    def dae_config(self) -> dae.DaeConfig:
        if self.model_preset not in dae.PRESETS:
            raise CliError("invalid-config", f"unknown model preset {self.model_preset!r}")
        base = dae.PRESETS[self.model_preset]
        over = {k: self.values[k] for k in ("latent_dim", "base_channels", "lr", "batch_size",
                                             "total_samples", "checkpoint_every", "T", "loss")
                if self.values[k] is not None}
        return replace(base, seed=self.seed, image_size=self.image_size, **over)

    def probe_config(self) -> latentgeom.ProbeConfig:
        return latentgeom.ProbeConfig(epochs=self.probe_epochs, lr=self.probe_lr,
                                      weight_decay=self.weight_decay, class_weight=self.class_weight,
                                      svm_lambda=self.svm_lambda, svm_epochs=self.svm_epochs,
                                      seed=self.seed)


def load_settings(config_path: str | None, overrides: dict) -> dict:
    values = {k: default for k, (_, default, _) in SETTINGS.items()}
    if config_path:
        parser = configparser.ConfigParser()
        parser.optionxform = str
        if not parser.read(config_path):
            raise CliError("missing-file", f"config file {config_path} not found")
        for section in parser.sections():
            for key, raw in parser.items(section):
                if key not in SETTINGS:
                    raise CliError("invalid-config", f"unknown key {key!r} in [{section}]")
                values[key] = raw
    values.update({k: v for k, v in overrides.items() if v is not None})
    for key, (_, default, kind) in SETTINGS.items():
        v = values[key]
        if v is None:
            continue
        try:
            values[key] = kind(v)
        except (TypeError, ValueError) as exc:
            raise CliError("invalid-config", f"bad value for {key}: {v!r}") from exc
    if values["probe_kind"] not in ("linear", "svm"):
        raise CliError("invalid-config", f"probe_kind must be linear or svm, got {values['probe_kind']!r}")
    if values["calibration_kind"] not in pipeline.CALIBRATION_KINDS:
        raise CliError("invalid-config", f"calibration_kind must be one of {pipeline.CALIBRATION_KINDS}")
    return values


def file_sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise CliError("missing-file", f"{what} not found at {path}")
    return path


def _load_model(cfg: RunConfig):
    return dae.load_checkpoint(_require(cfg.path("checkpoint"), "checkpoint"))


# --------------------------------------------------------------------------- commands


def cmd_synth(cfg: RunConfig) -> int:
    spec = cfg.dataset_spec()
    out = cfg.path("data_dir")
    records = synthdata.generate_dataset(spec, out)
    print(f"wrote {len(records)} images to {out}")
    print("split  G0    G1    G2    G3    fractured")
    for split in synthdata.SPLITS:
        rs = [r for r in records if r.split == split]
        counts = [sum(r.grade == g for r in rs) for g in range(4)]
        print(f"{split:5s} " + " ".join(f"{c:5d}" for c in counts) + f" {sum(r.fractured for r in rs):5d}")
    draws = sum(r.compression >= spec.fracture_range[0] for r in records) / len(records)
    print(f"fracture-draw fraction {draws:.4f}; graded {sum(r.graded for r in records)}")
    print(f"manifest sha256 {file_sha256(out / synthdata.MANIFEST_NAME)}")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    data_dir = cfg.path("data_dir")
    _require(data_dir / synthdata.MANIFEST_NAME, "dataset manifest")
    config = cfg.dae_config()
    train, _ = synthdata.load_split(data_dir, "train")
    val, _ = synthdata.load_split(data_dir, "val")
    if len(train) == 0:
        raise CliError("invalid-data", "training split is empty")
    if train.shape[1] != config.image_size:
        raise CliError("invalid-config", f"images are {train.shape[1]}px but model expects {config.image_size}px")
    log.info("training %s on %d images", config, len(train))
    result = dae.train_dae(train, config, val if len(val) else None, cfg.path("train_dir"),
                           eval_steps=cfg.eval_T)
    ckpt = cfg.path("checkpoint")
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    dae.save_checkpoint(result.model, ckpt)
    last = result.milestones[-1] if result.milestones else {}
    print(f"trained {result.model.n_params()} parameters for {len(result.losses)} steps "
          f"in {result.seconds:.0f}s; final val recon MSE {last.get('val_recon_mse', float('nan')):.5f}")
    print(f"checkpoint {ckpt} sha256 {file_sha256(ckpt)}")
    return 0


def cmd_probe(cfg: RunConfig) -> int:
    model = _load_model(cfg)
    data_dir = cfg.path("data_dir")
    records = synthdata.read_manifest(_require(data_dir / synthdata.MANIFEST_NAME, "dataset manifest"))
    train = pipeline.encode_records(model, data_dir, pipeline.probe_records(records, "train"))
    if len(set(train.fractured.tolist())) < 2:
        raise CliError("degenerate-labels", "probe training data lacks healthy or fractured samples")
    h, std = pipeline.fit_probe(train, cfg.probe_kind, cfg.probe_config())
    val_recs = [r for r in records if r.split == "val" and r.grade in latentgeom.ADMITTED_GRADES]
    report = {"kind": h.kind, "n_train": len(train.records),
              "n_train_fractured": int(train.fractured.sum())}
    val = pipeline.encode_records(model, data_dir, val_recs)
    if len(set(val.fractured.tolist())) == 2:
        report["val_auc"] = pipeline.detection_auc(h, std, val)
        print(f"{h.kind} probe validation AUC (G0 vs G2/G3): {report['val_auc']:.4f}")
    latentgeom.save_probe(cfg.path("probe"), h, std)
    rdir = cfg.path("report_dir")
    rdir.mkdir(parents=True, exist_ok=True)
    (rdir / "probe_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"probe {cfg.path('probe')} sha256 {file_sha256(cfg.path('probe'))}")
    return 0


def _load_probe(cfg):
    return latentgeom.load_probe(_require(cfg.path("probe"), "probe file"))


def cmd_calibrate(cfg: RunConfig) -> int:
    model = _load_model(cfg)
    h, std = _load_probe(cfg)
    data_dir = cfg.path("data_dir")
    records = synthdata.read_manifest(_require(data_dir / synthdata.MANIFEST_NAME, "dataset manifest"))
    train = pipeline.encode_records(model, data_dir, pipeline.probe_records(records, "train"))
    d = np.atleast_1d(latentgeom.distance(train.latents, h, std))
    try:
        cal = pipeline.fit_calibration(cfg.calibration_kind, d, train.grades, cfg.by_class_means)
    except grading.DegenerateCalibrationError as exc:
        raise CliError("degenerate-calibration", str(exc)) from exc
    grading.save_calibration(cfg.path("calibration"), cal)
    if cal.kind == "two_point_linear":
        print(f"two-point calibration d0={cal.d0:.4f} d3={cal.d3:.4f}")
    else:
        print(f"poly{cal.degree} calibration coeffs={list(cal.coeffs)} monotone={cal.monotone}")
    print(f"calibration {cfg.path('calibration')} sha256 {file_sha256(cfg.path('calibration'))}")
    return 0


def cmd_grade(cfg: RunConfig, images: list[str], output: str | None) -> int:
    model = _load_model(cfg)
    h, std = _load_probe(cfg)
    cal = grading.load_calibration(_require(cfg.path("calibration"), "calibration file"))
    if not images:
        raise CliError("invalid-argument", "no images given")
    pix = np.stack([synthdata.load_image(_require(Path(p), "image")) for p in images])
    z = dae.encode_semantic(model, pix)
    d, g, o = pipeline.grade_latents(z, h, std, cal)
    out = Path(output) if output else cfg.path("report_dir") / "grades.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["filename", "distance", "continuous_grade", "ordinal_grade"])
        for name, dd, gg, oo in zip(images, d, g, o):
            w.writerow([Path(name).name, f"{dd:.6f}", f"{gg:.6f}", int(oo)])
    print(f"graded {len(images)} images -> {out}")
    return 0


def cmd_sweep(cfg: RunConfig, image: str, grades: str | None) -> int:
    model = _load_model(cfg)
    h, std = _load_probe(cfg)
    cal = grading.load_calibration(_require(cfg.path("calibration"), "calibration file"))
    try:
        gs = [float(v) for v in (grades or cfg.sweep_grades).split(",")]
    except ValueError as exc:
        raise CliError("invalid-argument", f"bad grade list: {exc}") from exc
    pix = synthdata.load_image(_require(Path(image), "image"))
    gen = synthdata.GeneratorConfig(size=model.config.image_size)
    sweep = editing.grade_sweep(model, h, std, cal, pix, gs, cfg.eval_T, cfg.generation_T, gen)
    png, table = editing.save_sweep(sweep, cfg.path("report_dir"), Path(image).stem)
    print(f"source continuous grade {sweep.source_grade:.3f}")
    for g, r in zip(sweep.grades, sweep.reductions):
        print(f"  target {g:+.1f}: measured reduction {r:.3f}")
    print(f"wrote {png} and {table}")
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    model = _load_model(cfg)
    h, std = _load_probe(cfg)
    cal = grading.load_calibration(_require(cfg.path("calibration"), "calibration file"))
    rdir = cfg.path("report_dir")
    rdir.mkdir(parents=True, exist_ok=True)
    report = pipeline.evaluate(model, h, std, cal, cfg.path("data_dir"), "test",
                               eval_steps=cfg.eval_T, pca_path=rdir / "latent_pca.csv")
    (rdir / "eval.json").write_text(report.to_json())
    (rdir / "eval.txt").write_text(report.to_text())
    print(report.to_text(), end="")
    return 0


# --------------------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with [section] key = value settings")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--single-thread", action="store_true",
                        help="one torch thread and deterministic kernels")
    common.add_argument("--out", default=None, help="base directory for relative paths (default .)")
    common.add_argument("-v", "--verbose", action="store_true")
    for key in SETTINGS:
        names = {f"--{key}", f"--{key.replace('_', '-')}"}
        common.add_argument(*sorted(names), dest=f"set_{key}", default=None, metavar="VALUE")

    parser = argparse.ArgumentParser(prog="daegrade", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="render the synthetic dataset")
    sub.add_parser("train", parents=[common], help="train the diffusion autoencoder")
    sub.add_parser("probe", parents=[common], help="fit the fracture hyperplane")
    sub.add_parser("calibrate", parents=[common], help="calibrate distances to Genant grades")
    p = sub.add_parser("grade", parents=[common], help="grade image files")
    p.add_argument("images", nargs="*")
    p.add_argument("--output", default=None, help="CSV path (default <report_dir>/grades.csv)")
    p = sub.add_parser("sweep", parents=[common], help="counterfactual grade sweep of one image")
    p.add_argument("image")
    p.add_argument("--grades", default=None, help="comma-separated target grades")
    sub.add_parser("eval", parents=[common], help="evaluate on the test split")
    return parser


ERROR_CODES = [
    (synthdata.InvalidConfigError, "invalid-config"),
    (synthdata.MeasurementFailedError, "measurement-failed"),
    (latentgeom.DegenerateLabelsError, "degenerate-labels"),
    (grading.DegenerateCalibrationError, "degenerate-calibration"),
    (grading.SingularFitError, "singular-fit"),
    (editing.UnsupportedInversionError, "unsupported-inversion"),
    (dae.DivergenceError, "divergence"),
    (FileNotFoundError, "missing-file"),
    (ValueError, "invalid-argument"),
    (OSError, "io-error"),
]


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = {k: getattr(args, f"set_{k}") for k in SETTINGS}
        values = load_settings(args.config, overrides)
        cfg = RunConfig(values, Path(args.out or "."), 0 if args.seed is None else args.seed,
                        args.single_thread)
        if cfg.single_thread:
            dae.set_single_thread()
        if args.command == "grade":
            return cmd_grade(cfg, args.images, args.output)
        if args.command == "sweep":
            return cmd_sweep(cfg, args.image, args.grades)
        return COMMANDS[args.command](cfg)
    except CliError as exc:
        return _fail(exc.code, str(exc))
    except Exception as exc:  # noqa: BLE001 - single-line error contract
        for kind, code in ERROR_CODES:
            if isinstance(exc, kind):
                return _fail(code, str(exc))
        return _fail("internal", f"{type(exc).__name__}: {exc}")


def _fail(code: str, message: str) -> int:
    print(f"error: {code}: {' '.join(message.split())}", file=sys.stderr)
    return 2


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "probe": cmd_probe,
    "calibrate": cmd_calibrate,
    "eval": cmd_eval,
}


if __name__ == "__main__":
    sys.exit(main())
