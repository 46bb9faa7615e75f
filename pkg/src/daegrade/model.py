"""Diffusion autoencoder: semantic encoder + z-conditioned U-Net denoiser.

The semantic encoder maps an image to ``z_sem``; the denoiser predicts the
noise in ``x_t`` given the timestep and ``z_sem``.  Both are trained jointly
with the plain epsilon-prediction objective.  Deterministic DDIM inversion
of the conditioned denoiser gives the stochastic code ``x_T``, and DDIM
sampling from ``(x_T, z_sem)`` reconstructs the image.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import diffusion
from .diffusion import NoiseSchedule, linear_beta_schedule, make_step_schedule

log = logging.getLogger(__name__)

MAGIC = b"DAECKPT1"
FORMAT_VERSION = 1


class DivergenceError(RuntimeError):
    pass


@dataclass
class DaeConfig:
    image_size: int = 32
    latent_dim: int = 64
    base_channels: int = 32
    channel_mult: tuple[int, ...] = (1, 2)
    encoder_mult: tuple[int, ...] = (1, 2, 4, 4)
    time_dim: int = 128
    groups: int = 8
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    lr: float = 1e-4
    batch_size: int = 64
    total_samples: int = 100_000
    checkpoint_every: int = 25_000
    loss: str = "mse"
    seed: int = 0

    def validate(self) -> None:
        ints = [self.image_size, self.latent_dim, self.base_channels, self.time_dim,
                self.groups, self.T, self.batch_size, self.total_samples]
        if min(ints) <= 0 or self.lr <= 0:
            raise ValueError("DaeConfig values must be positive")
        if not self.channel_mult or not self.encoder_mult:
            raise ValueError("channel multipliers must be non-empty")
        if self.image_size % (2 ** (len(self.channel_mult) - 1)):
            raise ValueError("image_size must be divisible by 2 per U-Net resolution")
        if self.loss not in ("mse", "l1"):
            raise ValueError(f"unknown loss {self.loss!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_mult"] = list(self.channel_mult)
        d["encoder_mult"] = list(self.encoder_mult)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DaeConfig":
        known = {f.name for f in fields(cls)}
        kw = {k: v for k, v in d.items() if k in known}
        for k in ("channel_mult", "encoder_mult"):
            if k in kw:
                kw[k] = tuple(kw[k])
        return cls(**kw)


PRESETS = {
    "desk": DaeConfig(),
    "paper": DaeConfig(image_size=96, latent_dim=512, base_channels=64, channel_mult=(1, 2, 2),
                       total_samples=12_000_000, checkpoint_every=250_000),
    "tiny": DaeConfig(image_size=4, latent_dim=4, base_channels=2, channel_mult=(1, 2),
                      encoder_mult=(1, 2), time_dim=8, groups=2, batch_size=4, total_samples=64),
}


def _groups(ch: int, max_groups: int) -> int:
    g = min(ch, max_groups)
    while ch % g:
        g -= 1
    return g


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half - 1, 1))
    args = t.to(torch.float64)[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    """Residual block with adaptive group norm: ``(1 + z_s) * ((1 + t_s) * GN(h) + t_b)``."""

    def __init__(self, cin: int, cout: int, emb_dim: int, z_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin, groups), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.t_proj = nn.Linear(emb_dim, 2 * cout)
        self.z_proj = nn.Linear(z_dim, cout)
        self.norm2 = nn.GroupNorm(_groups(cout, groups), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb, z):
        h = self.conv1(F.silu(self.norm1(x)))
        t_scale, t_shift = self.t_proj(F.silu(temb))[:, :, None, None].chunk(2, dim=1)
        z_scale = self.z_proj(z)[:, :, None, None]
        h = (1 + z_scale) * (self.norm2(h) * (1 + t_scale) + t_shift)
        h = self.conv2(F.silu(h))
        return self.skip(x) + h


class SemanticEncoder(nn.Module):
    def __init__(self, cfg: DaeConfig):
        super().__init__()
        c = cfg.base_channels
        layers: list[nn.Module] = [nn.Conv2d(1, c, 3, padding=1)]
        ch = c
        for i, m in enumerate(cfg.encoder_mult):
            out = c * m
            stride = 2 if i > 0 else 1
            layers += [
                nn.GroupNorm(_groups(ch, cfg.groups), ch), nn.SiLU(),
                nn.Conv2d(ch, out, 3, stride=stride, padding=1),
                nn.GroupNorm(_groups(out, cfg.groups), out), nn.SiLU(),
                nn.Conv2d(out, out, 3, padding=1),
            ]
            ch = out
        layers += [nn.GroupNorm(_groups(ch, cfg.groups), ch), nn.SiLU()]
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(ch, cfg.latent_dim)

    def forward(self, x):
        return self.head(self.body(x).mean(dim=(2, 3)))


class Denoiser(nn.Module):
    """Two-resolution (by default) U-Net predicting epsilon from (x_t, t, z_sem)."""

    def __init__(self, cfg: DaeConfig):
        super().__init__()
        c = cfg.base_channels
        self.time_dim = cfg.time_dim
        emb = cfg.time_dim
        z = cfg.latent_dim
        g = cfg.groups
        self.time_mlp = nn.Sequential(nn.Linear(cfg.time_dim, emb), nn.SiLU(), nn.Linear(emb, emb))
        self.inp = nn.Conv2d(1, c, 3, padding=1)

        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        chans = []
        ch = c
        for i, m in enumerate(cfg.channel_mult):
            self.down.append(ResBlock(ch, c * m, emb, z, g))
            ch = c * m
            chans.append(ch)
            last = i == len(cfg.channel_mult) - 1
            self.downsample.append(nn.Identity() if last else nn.Conv2d(ch, ch, 3, stride=2, padding=1))
        self.mid = ResBlock(ch, ch, emb, z, g)

        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for i, m in reversed(list(enumerate(cfg.channel_mult))):
            skip = chans[i]
            self.up.append(ResBlock(ch + skip, c * m, emb, z, g))
            ch = c * m
            if i > 0:
                self.upsample.append(nn.Conv2d(ch, c * cfg.channel_mult[i - 1], 3, padding=1))
                ch = c * cfg.channel_mult[i - 1]
            else:
                self.upsample.append(nn.Identity())
        self.out_norm = nn.GroupNorm(_groups(ch, g), ch)
        self.out = nn.Conv2d(ch, 1, 3, padding=1)

    def forward(self, x, t, z):
        temb = self.time_mlp(timestep_embedding(t, self.time_dim).to(x.dtype))
        h = self.inp(x)
        skips = []
        for block, down in zip(self.down, self.downsample):
            h = block(h, temb, z)
            skips.append(h)
            h = down(h)
        h = self.mid(h, temb, z)
        for block, up in zip(self.up, self.upsample):
            h = block(torch.cat([h, skips.pop()], dim=1), temb, z)
            if not isinstance(up, nn.Identity):
                h = up(F.interpolate(h, scale_factor=2, mode="nearest"))
        return self.out(F.silu(self.out_norm(h)))


class DiffusionAutoencoder(nn.Module):
    def __init__(self, cfg: DaeConfig):
        super().__init__()
        cfg.validate()
        self.config = cfg
        self.schedule = linear_beta_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
        self.encoder = SemanticEncoder(cfg)
        self.denoiser = Denoiser(cfg)
        self.register_buffer("alpha_bar", torch.tensor(self.schedule.alpha_bar, dtype=torch.float32),
                             persistent=False)
        self.progress: dict = {}

    def forward(self, x_t, t, z):
        return self.denoiser(x_t, t, z)

    def loss(self, x0, t, eps):
        """Epsilon-prediction loss for images already scaled to [-1, 1]."""
        z = self.encoder(x0)
        ab = self.alpha_bar.to(x0.dtype)[t][:, None, None, None]
        x_t = ab.sqrt() * x0 + (1 - ab).sqrt() * eps
        pred = self.denoiser(x_t, t, z)
        if self.config.loss == "l1":
            return (pred - eps).abs().mean()
        return F.mse_loss(pred, eps)

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())


def build_dae(config: DaeConfig, seed: int | None = None) -> DiffusionAutoencoder:
    seed = config.seed if seed is None else seed
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return DiffusionAutoencoder(config)


def set_single_thread() -> None:
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


# --------------------------------------------------------------------------- inference


def _as_batch(images, size: int) -> tuple[torch.Tensor, bool]:
    x = torch.as_tensor(np.asarray(images, dtype=np.float32))
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (size, size):
        raise ValueError(f"expected images of shape (N, {size}, {size}), got {tuple(x.shape)}")
    return x[:, None], single


def _steps(model: DiffusionAutoencoder, steps) -> list[int]:
    if isinstance(steps, int):
        return make_step_schedule(model.config.T, steps)
    steps = list(steps)
    if steps[0] != 0 or steps[-1] != model.config.T or any(b <= a for a, b in zip(steps, steps[1:])):
        raise ValueError("step schedule must be strictly increasing from 0 to T")
    return steps


def _eps(model, x, t: int, z):
    tt = torch.full((x.shape[0],), t, dtype=torch.long)
    return model.denoiser(x, tt, z)


@torch.no_grad()
def encode_semantic(model: DiffusionAutoencoder, images, batch_size: int = 256) -> np.ndarray:
    """Semantic latents for images in [0, 1]; returns (N, D) or (D,) for one image."""
    model.eval()
    x, single = _as_batch(images, model.config.image_size)
    out = [model.encoder(x[i:i + batch_size] * 2 - 1) for i in range(0, x.shape[0], batch_size)]
    z = torch.cat(out).numpy()
    return z[0] if single else z


@torch.no_grad()
def encode_stochastic(model: DiffusionAutoencoder, images, z, steps=20, batch_size: int = 64) -> np.ndarray:
    """DDIM-invert images to their stochastic code x_T (in model [-1, 1] units)."""
    model.eval()
    x, single = _as_batch(images, model.config.image_size)
    zt = torch.as_tensor(np.asarray(z, dtype=np.float32)).reshape(x.shape[0], -1)
    sched = _steps(model, steps)
    out = []
    for i in range(0, x.shape[0], batch_size):
        h = x[i:i + batch_size] * 2 - 1
        zb = zt[i:i + batch_size]
        for t_prev, t in zip(sched[:-1], sched[1:]):
            h = diffusion.ddim_invert_step(h, _eps(model, h, t_prev, zb), t_prev, t, model.schedule)
        out.append(h)
    xT = torch.cat(out)[:, 0].numpy()
    return xT[0] if single else xT


@torch.no_grad()
def decode(model: DiffusionAutoencoder, xT, z, steps=100, batch_size: int = 64) -> np.ndarray:
    """DDIM-sample from (x_T, z_sem) down to an image in [0, 1]."""
    model.eval()
    x = torch.as_tensor(np.asarray(xT, dtype=np.float32))
    single = x.ndim == 2
    if single:
        x = x[None]
    size = model.config.image_size
    if x.shape[1:] != (size, size):
        raise ValueError(f"stochastic latent must be ({size}, {size}), got {tuple(x.shape[1:])}")
    x = x[:, None]
    zt = torch.as_tensor(np.asarray(z, dtype=np.float32)).reshape(x.shape[0], -1)
    if zt.shape[1] != model.config.latent_dim:
        raise ValueError(f"semantic latent must have length {model.config.latent_dim}")
    sched = _steps(model, steps)
    out = []
    for i in range(0, x.shape[0], batch_size):
        h = x[i:i + batch_size]
        zb = zt[i:i + batch_size]
        for t, t_prev in zip(sched[:0:-1], sched[-2::-1]):
            h = diffusion.ddim_step(h, _eps(model, h, t, zb), t, t_prev, model.schedule)
        out.append(((h + 1) / 2).clamp(0, 1))
    img = torch.cat(out)[:, 0].numpy()
    return img[0] if single else img


def reconstruct(model, images, steps=20) -> np.ndarray:
    z = encode_semantic(model, images)
    xT = encode_stochastic(model, images, z, steps)
    return decode(model, xT, z, steps)


def reconstruction_mse(model, images, steps=20) -> float:
    images = np.asarray(images, dtype=np.float32)
    rec = reconstruct(model, images, steps)
    return float(np.mean((rec.astype(np.float64) - images) ** 2))


# --------------------------------------------------------------------------- training


@dataclass
class TrainResult:
    model: DiffusionAutoencoder
    losses: list[float] = field(default_factory=list)
    milestones: list[dict] = field(default_factory=list)
    seconds: float = 0.0


def train_dae(
    images,
    config: DaeConfig,
    val_images=None,
    out_dir: str | Path | None = None,
    n_val_recon: int = 32,
    eval_steps: int = 20,
    on_step: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Jointly train the encoder and denoiser on unlabelled images in [0, 1].

    Writes ``loss.csv`` and periodic checkpoints into ``out_dir`` when given.
    """
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 3 or images.shape[0] == 0:
        raise ValueError("training needs a non-empty (N, H, W) image array")
    data = torch.as_tensor(images)[:, None] * 2 - 1
    model = build_dae(config)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    gen = torch.Generator().manual_seed(config.seed)
    out_dir = Path(out_dir) if out_dir is not None else None
    loss_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        loss_fh = open(out_dir / "loss.csv", "w", newline="")
        loss_fh.write("step,loss\n")
    val = None if val_images is None else np.asarray(val_images, dtype=np.float32)[:n_val_recon]

    n = data.shape[0]
    bs = config.batch_size
    n_steps = max(1, math.ceil(config.total_samples / bs))
    perm = torch.randperm(n, generator=gen)
    cursor = 0
    seen = 0
    next_milestone = config.checkpoint_every
    result = TrainResult(model)
    start = time.time()
    try:
        for step in range(1, n_steps + 1):
            if cursor + bs > n:
                perm = torch.randperm(n, generator=gen)
                cursor = 0
            idx = perm[cursor:cursor + bs]
            cursor += bs
            x0 = data[idx]
            t = torch.randint(1, config.T + 1, (x0.shape[0],), generator=gen)
            eps = torch.randn(x0.shape, generator=gen)
            loss = model.loss(x0, t, eps)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise DivergenceError(f"non-finite loss at step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            seen += x0.shape[0]
            result.losses.append(value)
            if loss_fh is not None:
                loss_fh.write(f"{step},{value:.8g}\n")
            if on_step is not None:
                on_step(step, value)
            if seen >= next_milestone or step == n_steps:
                entry = {"samples": seen, "step": step}
                if val is not None and len(val):
                    entry["val_recon_mse"] = reconstruction_mse(model, val, eval_steps)
                    model.train()
                result.milestones.append(entry)
                log.info("step %d samples %d loss %.4f %s (%.0fs)", step, seen, value, entry,
                         time.time() - start)
                model.progress = {"samples_seen": seen, "steps": step, "milestones": result.milestones}
                if out_dir is not None and step != n_steps:
                    save_checkpoint(model, out_dir / f"ckpt_{seen:09d}.dae")
                next_milestone += config.checkpoint_every
    finally:
        if loss_fh is not None:
            loss_fh.close()
    model.eval()
    model.progress = {"samples_seen": seen, "steps": n_steps, "milestones": result.milestones}
    result.seconds = time.time() - start
    return result


def smoothed(values: Sequence[float], window: int = 20) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    window = max(1, min(window, v.size))
    return np.convolve(v, np.ones(window) / window, mode="valid")


def read_loss_csv(path: str | Path) -> list[tuple[int, float]]:
    with open(path, newline="") as fh:
        return [(int(r["step"]), float(r["loss"])) for r in csv.DictReader(fh)]


# --------------------------------------------------------------------------- checkpoints


def save_checkpoint(model: DiffusionAutoencoder, path: str | Path) -> None:
    """Write the DAECKPT1 container: magic, u32 header length, JSON header, f32 payloads."""
    state = model.state_dict()
    directory = []
    payloads = []
    offset = 0
    for name in sorted(state):
        arr = state[name].detach().cpu().numpy().astype("<f4")
        raw = arr.tobytes(order="C")
        directory.append({"name": name, "dtype": "<f4", "shape": list(arr.shape),
                          "offset": offset, "nbytes": len(raw)})
        payloads.append(raw)
        offset += len(raw)
    meta = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "schedule": model.schedule.to_dict(),
        "progress": model.progress,
        "tensors": directory,
    }
    header = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for raw in payloads:
            fh.write(raw)


def load_checkpoint(path: str | Path) -> DiffusionAutoencoder:
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise ValueError(f"{path} is not a DAE checkpoint")
    (hlen,) = struct.unpack("<I", blob[8:12])
    meta = json.loads(blob[12:12 + hlen].decode("utf-8"))
    if meta.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('format_version')}")
    cfg = DaeConfig.from_dict(meta["config"])
    model = DiffusionAutoencoder(cfg)
    if NoiseSchedule.from_dict(meta["schedule"]).to_dict() != model.schedule.to_dict():
        raise ValueError("checkpoint schedule does not match its config")
    base = 12 + hlen
    expected = model.state_dict()
    state = {}
    for entry in meta["tensors"]:
        name = entry["name"]
        if name not in expected:
            raise ValueError(f"unexpected tensor {name!r} in checkpoint")
        start = base + entry["offset"]
        arr = np.frombuffer(blob[start:start + entry["nbytes"]], dtype="<f4").reshape(entry["shape"])
        if tuple(arr.shape) != tuple(expected[name].shape):
            raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {tuple(expected[name].shape)}")
        state[name] = torch.from_numpy(arr.copy())
    missing = set(expected) - set(state)
    if missing:
        raise ValueError(f"checkpoint lacks tensors: {sorted(missing)}")
    model.load_state_dict(state)
    model.progress = meta.get("progress", {})
    model.eval()
    return model
