"""Procedural surrogate for sagittal vertebra slices with known compression.

Each image shows a vertical stack of bright rounded bodies on a dark
background.  Only the centre body is compressed; its remaining height is
``(1 - compression)`` of the nominal height, so a pixel-level measurement
recovers the ground truth that the rest of the pipeline tries to predict.
"""

from __future__ import annotations

import csv
import hashlib
import io
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image
from scipy.ndimage import uniform_filter

log = logging.getLogger(__name__)

MAX_COMPRESSION = 0.75
GRADE_EDGES = (0.075, 0.25, 0.40)  # upper bounds of G0, G1, G2
SPLITS = ("train", "val", "test")
MANIFEST_NAME = "manifest.csv"
MANIFEST_HEADER = ["filename", "split", "compression", "grade", "fractured", "graded"]
PAPER_FRACTURE_RATE = 1248 / 12019


class InvalidConfigError(ValueError):
    pass


class MeasurementFailedError(RuntimeError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    """Geometry and appearance of the rendered column.

    Lengths are fractions of the image side so the same config scales from
    the 32 px desk size to the 96 px paper size.
    """

    size: int = 32
    n_bodies: int = 3
    body_height: float = 0.28
    gap: float = 0.06
    body_width: float = 0.5
    width_jitter: float = 0.05
    corner_radius: float = 0.2
    wedge: float = 0.3
    body_intensity: tuple[float, float] = (0.8, 0.95)
    background_intensity: tuple[float, float] = (0.05, 0.15)
    noise_sigma: float = 0.05
    blur_radius: int = 1
    supersample: int = 4

    def validate(self) -> None:
        if self.size < 8:
            raise InvalidConfigError(f"image size {self.size} too small")
        if self.n_bodies < 1 or self.n_bodies % 2 == 0:
            raise InvalidConfigError("n_bodies must be a positive odd number")
        if self.body_height <= 0 or self.gap < 0:
            raise InvalidConfigError("body_height must be positive and gap non-negative")
        extent = self.n_bodies * self.body_height + (self.n_bodies - 1) * self.gap
        if extent > 1.0:
            raise InvalidConfigError(
                f"bodies and gaps span {extent:.3f} of the image height (> 1)"
            )
        if not 0 < self.body_width + self.width_jitter <= 1:
            raise InvalidConfigError("body_width out of range")
        lo, hi = self.body_intensity
        blo, bhi = self.background_intensity
        if not (0 <= blo <= bhi < lo <= hi <= 1):
            raise InvalidConfigError("intensity ranges must satisfy background < body within [0, 1]")
        if self.noise_sigma < 0 or self.blur_radius < 0 or self.supersample < 1:
            raise InvalidConfigError("noise, blur and supersample must be non-negative")

    @property
    def body_height_px(self) -> float:
        return self.body_height * self.size

    @property
    def gap_px(self) -> float:
        return self.gap * self.size


@dataclass
class LabeledImage:
    pixels: np.ndarray
    compression: float
    grade: int
    fractured: bool
    split: str = "train"
    graded: bool = False


def grade_from_compression(c: float) -> int:
    """Genant grade (0..3) for a fractional height reduction."""
    _check_compression(c)
    for grade, edge in enumerate(GRADE_EDGES):
        if c <= edge:
            return grade
    return 3


def is_fractured(grade: int) -> bool:
    return grade >= 2


def _check_compression(c: float) -> None:
    if not (0.0 <= c <= MAX_COMPRESSION) or not np.isfinite(c):
        raise ValueError(f"compression {c} outside [0, {MAX_COMPRESSION}]")


def _rounded_box_sdf(px, py, cx, cy, half_w, half_h, radius):
    qx = np.abs(px - cx) - (half_w - radius)
    qy = np.abs(py - cy) - (half_h - radius)
    outside = np.hypot(np.maximum(qx, 0.0), np.maximum(qy, 0.0))
    inside = np.minimum(np.maximum(qx, qy), 0.0)
    return outside + inside - radius


def _body_mask(px, py, cx, cy, width, height, radius, top_slope=0.0):
    """Boolean coverage of one body.  ``top_slope`` tilts the upper endplate
    about the body's horizontal centre (positive lowers the anterior, left side)."""
    r = min(radius, 0.5 * width, 0.5 * height)
    if top_slope == 0.0:
        return _rounded_box_sdf(px, py, cx, cy, width / 2, height / 2, r) <= 0
    # box sized to the tallest (posterior) edge, then cut by the tilted endplate
    rise = abs(top_slope) * width / 2
    bottom = cy + height / 2
    top = cy - height / 2 - rise
    box = _rounded_box_sdf(px, py, cx, (top + bottom) / 2, width / 2, (bottom - top) / 2, r) <= 0
    endplate = cy - height / 2 + top_slope * (cx - px)
    return box & (py >= endplate)


def render_vertebra_column(
    compression: float, style_seed: int, config: GeneratorConfig | None = None
) -> LabeledImage:
    """Render one labelled slice; deterministic in (compression, style_seed, config)."""
    config = config or GeneratorConfig()
    config.validate()
    _check_compression(compression)
    rng = np.random.default_rng(style_seed)

    n = config.size
    s = config.supersample
    coords = (np.arange(n * s) + 0.5) / s
    px, py = np.meshgrid(coords, coords)

    h = config.body_height_px
    pitch = h + config.gap_px
    mid = n / 2
    cx = n / 2
    width = (config.body_width + rng.uniform(-config.width_jitter, config.width_jitter)) * n
    radius = config.corner_radius * h
    background = rng.uniform(*config.background_intensity)
    half = config.n_bodies // 2

    level = rng.uniform(*config.body_intensity)
    canvas = np.full((n * s, n * s), background)
    for k in range(-half, half + 1):
        cy = mid + k * pitch
        if k == 0:
            height = h * (1.0 - compression)
            # endplate tilt keeps the central-column height exact
            slope = config.wedge * compression * h / width
            mask = _body_mask(px, py, cx, cy, width, height, radius, slope)
        else:
            mask = _body_mask(px, py, cx, cy, width, h, radius)
        canvas[mask] = level

    pixels = canvas.reshape(n, s, n, s).mean(axis=(1, 3))
    pixels = pixels + rng.normal(0.0, config.noise_sigma, size=pixels.shape)
    if config.blur_radius > 0:
        pixels = uniform_filter(pixels, size=2 * config.blur_radius + 1, mode="nearest")
    pixels = np.clip(pixels, 0.0, 1.0).astype(np.float32)

    grade = grade_from_compression(compression)
    return LabeledImage(pixels=pixels, compression=float(compression), grade=grade,
                        fractured=is_fractured(grade))


def measure_height_reduction(
    pixels: np.ndarray, config: GeneratorConfig | None = None, threshold: float = 0.5
) -> float:
    """Pixel oracle: fractional height loss of the centre body.

    ``threshold`` is a relative level between the estimated background and
    foreground intensities.  The central column profile is thresholded
    inside the centre body's band and the two endplate crossings are located
    with linear interpolation.
    """
    config = config or GeneratorConfig()
    img = np.asarray(pixels, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {img.shape}")
    n = img.shape[0]
    scale = n / config.size
    h = config.body_height_px * scale
    mid = n / 2
    half_band = h / 2 + config.gap_px * scale / 2

    strip_half = max(1, int(round(config.body_width * n / 6)))
    c0 = n // 2
    profile = img[:, c0 - strip_half:c0 + strip_half].mean(axis=1)

    border = np.concatenate([img[:, :2].ravel(), img[:, -2:].ravel()])
    bg = float(np.median(border))
    if config.n_bodies > 1:
        # neighbours are never compressed, so they give a clean foreground level
        pitch = (config.body_height_px + config.gap_px) * scale
        rows = [int(mid - pitch), int(mid + pitch)]
    else:
        rows = [int(mid) - 1, int(mid)]
    fg = float(np.mean([profile[r] for r in rows if 0 <= r < n]))
    if not np.isfinite(fg) or fg - bg < 0.1:
        raise MeasurementFailedError("no foreground found in centre band")
    level = bg + threshold * (fg - bg)

    centres = np.arange(n) + 0.5
    lo = int(np.floor(mid - half_band))
    hi = int(np.ceil(mid + half_band))
    lo, hi = max(lo, 0), min(hi, n)
    inside = profile >= level
    i_mid = int(mid)
    if not inside[i_mid] and not inside[i_mid - 1]:
        raise MeasurementFailedError("no foreground found in centre band")
    start = i_mid if inside[i_mid] else i_mid - 1

    def crossing(step: int) -> float:
        i = start
        while lo <= i + step < hi and inside[i + step]:
            i += step
        j = i + step
        if not (0 <= j < n) or not (lo <= j < hi):
            # ran into the band edge without dropping below the level
            return centres[i] + 0.5 * step
        a, b = profile[i], profile[j]
        frac = (a - level) / (a - b) if a != b else 0.5
        return centres[i] + step * frac

    top = crossing(-1)
    bottom = crossing(+1)
    measured = bottom - top
    return float(1.0 - measured / h)


# --------------------------------------------------------------------------- datasets


@dataclass
class DatasetSpec:
    n_train: int = 3000
    n_val: int = 300
    n_test: int = 600
    seed: int = 0
    fracture_rate: float = 0.2
    healthy_range: tuple[float, float] = (0.0, 0.05)
    fracture_range: tuple[float, float] = (0.10, 0.70)
    graded_fraction: float = 0.5
    raw: bool = False
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)

    def validate(self) -> None:
        counts = (self.n_train, self.n_val, self.n_test)
        if any(c < 0 for c in counts) or sum(counts) == 0:
            raise ValueError("split counts must be non-negative with a positive total")
        for name in ("fracture_rate", "graded_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        for lo, hi in (self.healthy_range, self.fracture_range):
            if not 0.0 <= lo <= hi <= MAX_COMPRESSION:
                raise ValueError(f"compression range ({lo}, {hi}) invalid")
        self.generator.validate()

    def counts(self) -> dict[str, int]:
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}


PRESETS = {
    "default": {},
    "paper-like": {"fracture_rate": PAPER_FRACTURE_RATE, "graded_fraction": 220 / 1248},
}


def dataset_spec_from_preset(name: str, **overrides) -> DatasetSpec:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return DatasetSpec(**{**PRESETS[name], **overrides})


@dataclass
class ManifestRecord:
    filename: str
    split: str
    compression: float
    grade: int
    fractured: bool
    graded: bool


def image_seed(seed: int, index: int) -> int:
    digest = hashlib.sha256(f"{seed}:{index}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def sample_records(spec: DatasetSpec) -> list[tuple[ManifestRecord, int]]:
    """Draw compressions and labels for every image without rendering."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    out = []
    index = 0
    for split in SPLITS:
        for i in range(spec.counts()[split]):
            fracture_draw = rng.random() < spec.fracture_rate
            lo, hi = spec.fracture_range if fracture_draw else spec.healthy_range
            c = float(np.round(rng.uniform(lo, hi), 6))
            graded = bool(fracture_draw and rng.random() < spec.graded_fraction)
            grade = grade_from_compression(c)
            rec = ManifestRecord(f"{split}_{i:05d}.png", split, c, grade, is_fractured(grade), graded)
            out.append((rec, image_seed(spec.seed, index)))
            index += 1
    return out


def save_png(pixels: np.ndarray, path: Path) -> None:
    data = np.round(np.clip(pixels, 0, 1) * 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(data, mode="L").save(buf, format="PNG", optimize=False)
    Path(path).write_bytes(buf.getvalue())


def load_image(path: str | Path) -> np.ndarray:
    """Load pixels in [0, 1]; prefers a lossless ``.f32`` sidecar when present."""
    path = Path(path)
    raw = path.with_suffix(".f32")
    if raw.exists():
        data = np.fromfile(raw, dtype="<f4")
        side = int(round(np.sqrt(data.size)))
        return data.reshape(side, side).astype(np.float32)
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float32) / 255.0


def write_manifest(records: Iterable[ManifestRecord], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in records:
            w.writerow([r.filename, r.split, f"{r.compression:.6f}", r.grade,
                        int(r.fractured), int(r.graded)])


def read_manifest(path: str | Path) -> list[ManifestRecord]:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_HEADER:
            raise ValueError(f"unexpected manifest header {reader.fieldnames}")
        return [
            ManifestRecord(row["filename"], row["split"], float(row["compression"]),
                           int(row["grade"]), row["fractured"] == "1", row["graded"] == "1")
            for row in reader
        ]


def generate_dataset(spec: DatasetSpec, out_dir: str | Path) -> list[ManifestRecord]:
    """Render all splits into ``out_dir`` and write ``manifest.csv`` next to them."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for rec, seed in sample_records(spec):
        img = render_vertebra_column(rec.compression, seed, spec.generator)
        save_png(img.pixels, out_dir / rec.filename)
        if spec.raw:
            img.pixels.astype("<f4").tofile(out_dir / Path(rec.filename).with_suffix(".f32"))
        records.append(rec)
    write_manifest(records, out_dir / MANIFEST_NAME)
    (out_dir / "generator.json").write_text(_generator_json(spec))
    log.info("wrote %d images to %s", len(records), out_dir)
    return records


def _generator_json(spec: DatasetSpec) -> str:
    import json

    block = asdict(spec)
    return json.dumps(block, sort_keys=True, indent=2) + "\n"


def load_split(data_dir: str | Path, split: str | None = None,
               records: list[ManifestRecord] | None = None) -> tuple[np.ndarray, list[ManifestRecord]]:
    data_dir = Path(data_dir)
    records = records if records is not None else read_manifest(data_dir)
    chosen = [r for r in records if split is None or r.split == split]
    if not chosen:
        return np.zeros((0, 0, 0), dtype=np.float32), []
    images = np.stack([load_image(data_dir / r.filename) for r in chosen])
    return images, chosen
