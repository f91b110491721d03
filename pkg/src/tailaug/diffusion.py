"""Toy denoising-diffusion generator trained on normal images, with mask-composited inpainting.

The sampler regenerates only masked pixels: at every reverse step the
unmasked region is replaced by the forward-noised original, and the final
composite pins unmasked pixels to the source exactly.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .cam import InpaintMask
from .core import ImageTensor, Manifest, load_image, philox_generator

log = logging.getLogger(__name__)

_CHECKPOINT_MAGIC = b"TAUGGEN1"


class ContaminationError(ValueError):
    """The normal-image training set contains a labeled-abnormal record."""


@dataclass(frozen=True)
class DiffusionConfig:
    image_size: int = 64
    channels: int = 1
    timesteps: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02
    train_epochs: int = 5
    batch_size: int = 32
    learning_rate: float = 2e-3
    base_width: int = 32

    def __post_init__(self):
        if self.timesteps < 1:
            raise ValueError("timesteps must be >= 1")
        if self.image_size % 8 != 0:
            raise ValueError(f"image_size must be a multiple of 8, got {self.image_size}")


@dataclass(frozen=True)
class NoiseSeed:
    seed: int


def _as_seed(seed: "NoiseSeed | int") -> int:
    return seed.seed if isinstance(seed, NoiseSeed) else int(seed)


def _gaussian(seed: int, purpose: str, step: int, shape: tuple[int, ...]) -> torch.Tensor:
    """One keyed draw; identical across runs and independent of other draws."""
    gen = philox_generator(seed, "diffusion", purpose, step)
    return torch.from_numpy(gen.standard_normal(size=shape, dtype=np.float64).astype(np.float32))


class _TimeEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, dim * 2), nn.SiLU(), nn.Linear(dim * 2, dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
        ang = t.float()[:, None] * freqs[None, :]
        emb = torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)
        return self.mlp(emb)


class _ResBlock(nn.Module):
    def __init__(self, ch_in: int, ch_out: int, t_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(ch_in, ch_out, 3, padding=1)
        self.conv2 = nn.Conv2d(ch_out, ch_out, 3, padding=1)
        self.t_proj = nn.Linear(t_dim, ch_out)
        self.skip = nn.Conv2d(ch_in, ch_out, 1) if ch_in != ch_out else nn.Identity()
        self.act = nn.SiLU()

    def forward(self, x, t_emb):
        h = self.act(self.conv1(x))
        h = h + self.t_proj(t_emb)[:, :, None, None]
        h = self.act(self.conv2(h))
        return h + self.skip(x)


class NoisePredictor(nn.Module):
    """Small U-shaped convolutional denoiser: predicts the noise added at step t."""

    def __init__(self, channels: int = 1, base_width: int = 32, t_dim: int = 64):
        super().__init__()
        w = base_width
        self.t_emb = _TimeEmbedding(t_dim)
        self.down1 = _ResBlock(channels, w, t_dim)
        self.down2 = _ResBlock(w, w * 2, t_dim)
        self.mid = _ResBlock(w * 2, w * 2, t_dim)
        self.up1 = _ResBlock(w * 2 + w * 2, w, t_dim)
        self.up2 = _ResBlock(w + w, w, t_dim)
        self.out = nn.Conv2d(w, channels, 1)
        self.pool = nn.AvgPool2d(2)

    def forward(self, x, t):
        t_emb = self.t_emb(t)
        h1 = self.down1(x, t_emb)
        h2 = self.down2(self.pool(h1), t_emb)
        m = self.mid(self.pool(h2), t_emb)
        u = nn.functional.interpolate(m, scale_factor=2, mode="nearest")
        u = self.up1(torch.cat([u, h2], dim=1), t_emb)
        u = nn.functional.interpolate(u, scale_factor=2, mode="nearest")
        u = self.up2(torch.cat([u, h1], dim=1), t_emb)
        return self.out(u)


def _noise_schedule(config: DiffusionConfig) -> dict[str, np.ndarray]:
    betas = np.linspace(config.beta_start, config.beta_end, config.timesteps, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bar = np.cumprod(alphas)
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    posterior_var = betas * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
    return {
        "betas": betas,
        "alphas": alphas,
        "alpha_bar": alpha_bar,
        "alpha_bar_prev": alpha_bar_prev,
        "posterior_var": posterior_var,
    }


def _serialize_state(state: dict[str, torch.Tensor]) -> bytes:
    """Canonical weights blob: sorted names, shapes, raw float32 data."""
    chunks = []
    for name in sorted(state):
        arr = state[name].detach().numpy().astype(np.float32)
        shape = arr.shape
        chunks.append(struct.pack("<I", len(name)))
        chunks.append(name.encode())
        chunks.append(struct.pack("<I", len(shape)))
        chunks.append(struct.pack(f"<{len(shape)}I", *shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(chunks)


def _deserialize_state(blob: bytes) -> dict[str, torch.Tensor]:
    state = {}
    pos = 0
    while pos < len(blob):
        (name_len,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos : pos + name_len].decode()
        pos += name_len
        (ndim,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype=np.float32, count=count, offset=pos).reshape(shape)
        pos += 4 * count
        state[name] = torch.from_numpy(arr.copy())
    return state


@dataclass(frozen=True)
class GeneratorCheckpoint:
    """Trained denoiser weights plus config; generator_id is a content hash."""

    config: DiffusionConfig
    state: dict
    generator_id: str
    train_losses: tuple[float, ...] = ()

    @staticmethod
    def create(config: DiffusionConfig, state: dict, train_losses=()) -> "GeneratorCheckpoint":
        blob = _serialize_state(state)
        cfg_json = json.dumps(asdict(config), sort_keys=True).encode()
        gen_id = hashlib.sha256(blob + cfg_json).hexdigest()[:16]
        return GeneratorCheckpoint(config=config, state=state, generator_id=gen_id, train_losses=tuple(train_losses))

    def to_module(self) -> NoisePredictor:
        net = NoisePredictor(channels=self.config.channels, base_width=self.config.base_width)
        net.load_state_dict(self.state)
        net.eval()
        return net

    def save(self, path: str | Path) -> None:
        blob = _serialize_state(self.state)
        header = json.dumps(
            {
                "config": asdict(self.config),
                "generator_id": self.generator_id,
                "train_losses": list(self.train_losses),
            },
            sort_keys=True,
        ).encode()
        with Path(path).open("wb") as fh:
            fh.write(_CHECKPOINT_MAGIC)
            fh.write(struct.pack("<I", len(header)))
            fh.write(header)
            fh.write(blob)

    @staticmethod
    def load(path: str | Path) -> "GeneratorCheckpoint":
        raw = Path(path).read_bytes()
        if raw[:8] != _CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a generator checkpoint")
        (header_len,) = struct.unpack_from("<I", raw, 8)
        header = json.loads(raw[12 : 12 + header_len].decode())
        state = _deserialize_state(raw[12 + header_len :])
        return GeneratorCheckpoint(
            config=DiffusionConfig(**header["config"]),
            state=state,
            generator_id=header["generator_id"],
            train_losses=tuple(header["train_losses"]),
        )


def _load_training_images(manifest: Manifest, config: DiffusionConfig) -> np.ndarray:
    imgs = []
    for record in manifest:
        img = load_image(record.image_path)
        if (img.height, img.width, img.channels) != (config.image_size, config.image_size, config.channels):
            raise ValueError(
                f"record {record.id}: image is {img.height}x{img.width}x{img.channels}, "
                f"config wants {config.image_size}x{config.image_size}x{config.channels}"
            )
        imgs.append(np.transpose(img.data, (2, 0, 1)))
    return np.stack(imgs)


def train_normal_generator(normals: Manifest, config: DiffusionConfig, seed: int) -> GeneratorCheckpoint:
    """Train the denoiser to predict added noise on normal images only.

    Any record with a positive label is contamination and aborts the run.
    Deterministic for a fixed seed; per-epoch mean loss is logged and kept on
    the checkpoint.
    """
    if len(normals) == 0:
        raise ValueError("cannot train on an empty manifest")
    for record in normals:
        if record.labels.any():
            raise ContaminationError(f"record {record.id} carries positive labels; normals only")

    data = _load_training_images(normals, config)  # N,C,H,W in [0,1]
    data = torch.from_numpy(data * 2.0 - 1.0)  # [-1,1] internally
    sched = _noise_schedule(config)
    alpha_bar = torch.from_numpy(np.sqrt(sched["alpha_bar"]).astype(np.float32))
    one_minus = torch.from_numpy(np.sqrt(1.0 - sched["alpha_bar"]).astype(np.float32))

    torch.manual_seed(seed)
    net = NoisePredictor(channels=config.channels, base_width=config.base_width)
    opt = torch.optim.Adam(net.parameters(), lr=config.learning_rate)
    n = data.shape[0]
    epoch_losses = []
    for epoch in range(config.train_epochs):
        order = philox_generator(seed, "gen-epoch-order", epoch).permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            batch = data[idx]
            gen = philox_generator(seed, "gen-train-noise", epoch * 100000 + start)
            t = torch.from_numpy(gen.integers(0, config.timesteps, size=len(idx)))
            eps = torch.from_numpy(gen.standard_normal(size=batch.shape, dtype=np.float64).astype(np.float32))
            noisy = alpha_bar[t][:, None, None, None] * batch + one_minus[t][:, None, None, None] * eps
            pred = net(noisy, t)
            loss = ((pred - eps) ** 2).mean()
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        mean_loss = float(np.mean(losses))
        epoch_losses.append(mean_loss)
        log.info("generator epoch %d: mean loss %.5f", epoch, mean_loss)

    state = {k: v.detach().clone() for k, v in net.state_dict().items()}
    return GeneratorCheckpoint.create(config=config, state=state, train_losses=epoch_losses)


def _reverse_step(
    net: NoisePredictor,
    x: torch.Tensor,
    t: int,
    sched: dict[str, np.ndarray],
    seed: int,
) -> torch.Tensor:
    """One ancestral step x_t -> x_{t-1} with keyed posterior noise."""
    beta = sched["betas"][t]
    alpha = sched["alphas"][t]
    ab = sched["alpha_bar"][t]
    with torch.no_grad():
        eps = net(x, torch.tensor([t]))
    mean = (x - (beta / math.sqrt(1.0 - ab)) * eps) / math.sqrt(alpha)
    if t == 0:
        return mean
    z = _gaussian(seed, "reverse", t, tuple(x.shape))
    return mean + math.sqrt(sched["posterior_var"][t]) * z


def _finish(x: torch.Tensor) -> np.ndarray:
    out = ((x[0].numpy() + 1.0) / 2.0).clip(0.0, 1.0)
    return np.transpose(out, (1, 2, 0)).astype(np.float32)


def sample_unconditional(ckpt: GeneratorCheckpoint, seed: "NoiseSeed | int") -> ImageTensor:
    """Full reverse trajectory from pure noise; clamped to [0, 1]."""
    s = _as_seed(seed)
    cfg = ckpt.config
    net = ckpt.to_module()
    sched = _noise_schedule(cfg)
    shape = (1, cfg.channels, cfg.image_size, cfg.image_size)
    x = _gaussian(s, "init", cfg.timesteps, shape)
    for t in range(cfg.timesteps - 1, -1, -1):
        x = _reverse_step(net, x, t, sched, s)
    return ImageTensor(_finish(x))


def inpaint(
    ckpt: GeneratorCheckpoint, image: ImageTensor, mask: InpaintMask, seed: "NoiseSeed | int"
) -> ImageTensor:
    """Regenerate masked pixels; unmasked pixels stay exactly the source values.

    At every reverse step the unmasked region is overwritten with the
    forward-noised original at the matching timestep, and the returned image
    composites the source back outside the mask bit-for-bit.
    """
    if (mask.bits.shape[0], mask.bits.shape[1]) != (image.height, image.width):
        raise ValueError(
            f"mask shape {mask.bits.shape} does not match image {image.height}x{image.width}"
        )
    cfg = ckpt.config
    if (image.height, image.width, image.channels) != (cfg.image_size, cfg.image_size, cfg.channels):
        raise ValueError(
            f"image {image.height}x{image.width}x{image.channels} does not match "
            f"generator config {cfg.image_size}x{cfg.image_size}x{cfg.channels}"
        )
    s = _as_seed(seed)
    net = ckpt.to_module()
    sched = _noise_schedule(cfg)
    orig = torch.from_numpy(np.transpose(image.data, (2, 0, 1)).copy()).unsqueeze(0) * 2.0 - 1.0
    m = torch.from_numpy(mask.bits.astype(np.float32))[None, None, :, :]
    shape = tuple(orig.shape)

    x = _gaussian(s, "init", cfg.timesteps, shape)
    for t in range(cfg.timesteps - 1, -1, -1):
        x = _reverse_step(net, x, t, sched, s)
        if t > 0:
            ab_prev = sched["alpha_bar"][t - 1]
            eps_known = _gaussian(s, "known", t, shape)
            known = math.sqrt(ab_prev) * orig + math.sqrt(1.0 - ab_prev) * eps_known
            x = m * x + (1.0 - m) * known

    out = _finish(x)
    bits = mask.bits[:, :, None]
    composite = np.where(bits, out, image.data)
    return ImageTensor(composite.astype(np.float32))
