"""Synthetic long-tailed multi-label world with exact lesion masks.

Images are geometric "lesions" superimposed on a smoothed-noise background.
Every sample stores its pristine background and per-class masks, which gives
the pipeline an analytic inpainting oracle and ground truth to test against.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cam import InpaintMask
from .core import (
    ClassRegistry,
    ImageTensor,
    LabelVector,
    Manifest,
    SampleRecord,
    load_image,
    philox_generator,
    save_image,
)
from .knowledge import EntanglementMatrix

log = logging.getLogger(__name__)

_PLACEMENT_RETRIES = 12


@dataclass(frozen=True)
class LesionSpec:
    """Per-class shape recipe: sizes are given at 64px and scale with the image."""

    shape: str  # "ellipse" or "bar"
    intensity: float  # additive offset, may be negative
    min_radius: int
    max_radius: int

    def __post_init__(self):
        if self.shape not in ("ellipse", "bar", "ring", "cross"):
            raise ValueError(f"shape must be ellipse/bar/ring/cross, got {self.shape!r}")
        if not 0 < self.min_radius <= self.max_radius:
            raise ValueError("need 0 < min_radius <= max_radius")


@dataclass(frozen=True)
class SynthWorldConfig:
    num_classes: int
    class_frequencies: tuple[float, ...]
    lesion_specs: tuple[LesionSpec, ...]
    entangle_prob: np.ndarray  # K x K symmetric pairwise overlap probabilities
    image_size: int = 64
    background_level: float = 0.45
    background_amplitude: float = 0.08
    background_smoothing: int = 3
    seed: int = 0

    def __post_init__(self):
        K = self.num_classes
        if len(self.class_frequencies) != K or len(self.lesion_specs) != K:
            raise ValueError("frequencies and lesion specs must cover every class")
        freqs = np.asarray(self.class_frequencies)
        if freqs.min() < 0.0 or freqs.max() > 1.0:
            raise ValueError("frequencies must lie in [0, 1]")
        arr = np.asarray(self.entangle_prob, dtype=np.float64)
        if arr.shape != (K, K):
            raise ValueError(f"entangle_prob must be {K}x{K}, got {arr.shape}")
        if arr.min() < 0.0 or arr.max() > 1.0 or not np.allclose(arr, arr.T):
            raise ValueError("entangle_prob must be symmetric with values in [0, 1]")
        arr.flags.writeable = False
        object.__setattr__(self, "entangle_prob", arr)

    @property
    def registry(self) -> ClassRegistry:
        return ClassRegistry(tuple(f"c{i:02d}" for i in range(self.num_classes)))


def default_world_config(seed: int = 0, image_size: int = 64) -> SynthWorldConfig:
    """K=8 long-tailed world: six abundant classes, two rare (2%) tail classes.

    Every class gets a distinct shape/polarity signature so the classes are
    mutually separable by a small CNN.
    """
    specs = (
        LesionSpec("ellipse", 0.38, 7, 11),
        LesionSpec("bar", 0.34, 7, 11),
        LesionSpec("ellipse", -0.30, 6, 10),
        LesionSpec("bar", -0.26, 6, 10),
        LesionSpec("ring", 0.30, 6, 9),
        LesionSpec("cross", 0.28, 6, 9),
        LesionSpec("ring", -0.30, 6, 10),
        LesionSpec("cross", -0.28, 6, 10),
    )
    return SynthWorldConfig(
        num_classes=8,
        class_frequencies=(0.40, 0.34, 0.28, 0.22, 0.16, 0.12, 0.02, 0.02),
        lesion_specs=specs,
        entangle_prob=np.zeros((8, 8)),
        image_size=image_size,
        seed=seed,
    )


@dataclass
class GroundTruthSample:
    present: tuple[int, ...]
    masks: dict[int, np.ndarray]  # class index -> H x W booleans
    background: np.ndarray  # H x W x 1 floats, u8-quantized
    degraded: tuple[str, ...] = ()


class GroundTruthStore:
    """Per-sample oracle state keyed by record id."""

    def __init__(self):
        self.samples: dict[str, GroundTruthSample] = {}

    def add(self, record_id: str, sample: GroundTruthSample) -> None:
        self.samples[record_id] = sample

    def get(self, record_id: str) -> GroundTruthSample:
        return self.samples[record_id]

    def __len__(self) -> int:
        return len(self.samples)

    def save(self, out_dir: str | Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        index = {}
        for rid, s in sorted(self.samples.items()):
            index[rid] = {"present": list(s.present), "degraded": list(s.degraded)}
            save_image(ImageTensor(s.background), out_dir / f"{rid}_bg.png")
            for k, mask in sorted(s.masks.items()):
                save_image(ImageTensor(mask.astype(np.float32)[:, :, None]), out_dir / f"{rid}_mask{k:02d}.png")
        (out_dir / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")

    @staticmethod
    def load(out_dir: str | Path) -> "GroundTruthStore":
        out_dir = Path(out_dir)
        index = json.loads((out_dir / "index.json").read_text())
        store = GroundTruthStore()
        for rid, meta in index.items():
            background = load_image(out_dir / f"{rid}_bg.png").data
            masks = {}
            for k in meta["present"]:
                masks[k] = load_image(out_dir / f"{rid}_mask{k:02d}.png").plane() > 0.5
            store.add(
                rid,
                GroundTruthSample(
                    present=tuple(meta["present"]),
                    masks=masks,
                    background=background,
                    degraded=tuple(meta["degraded"]),
                ),
            )
        return store


def _smooth_background(rng: np.random.Generator, size: int, cfg: SynthWorldConfig) -> np.ndarray:
    noise = rng.standard_normal((size, size))
    window = max(3, size // 9) | 1
    kernel = np.ones(window) / window
    for _ in range(cfg.background_smoothing):
        noise = np.apply_along_axis(lambda r: np.convolve(r, kernel, mode="same"), 0, noise)
        noise = np.apply_along_axis(lambda r: np.convolve(r, kernel, mode="same"), 1, noise)
    spread = noise.std() or 1.0
    bg = cfg.background_level + cfg.background_amplitude * (noise / spread)
    return np.clip(bg, 0.0, 1.0)


def _lesion_mask(spec: LesionSpec, center: tuple[int, int], radius: int, size: int, rng: np.random.Generator) -> np.ndarray:
    cy, cx = center
    yy, xx = np.mgrid[0:size, 0:size]
    if spec.shape == "ellipse":
        ry = radius
        rx = max(2, int(round(radius * rng.uniform(0.6, 1.0))))
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    if spec.shape == "ring":
        r2 = (yy - cy) ** 2 + (xx - cx) ** 2
        inner = max(1, radius // 2)
        return (r2 <= radius**2) & (r2 >= inner**2)
    if spec.shape == "cross":
        half_thick = max(1, radius // 3)
        horiz = (np.abs(yy - cy) <= half_thick) & (np.abs(xx - cx) <= radius)
        vert = (np.abs(yy - cy) <= radius) & (np.abs(xx - cx) <= half_thick)
        return horiz | vert
    # bar
    half_len = radius
    half_thick = max(1, radius // 3)
    if rng.uniform() < 0.5:
        return (np.abs(yy - cy) <= half_thick) & (np.abs(xx - cx) <= half_len)
    return (np.abs(yy - cy) <= half_len) & (np.abs(xx - cx) <= half_thick)


def _place_class(
    spec: LesionSpec,
    size: int,
    rng: np.random.Generator,
    occupied: np.ndarray,
    overlap_target: np.ndarray | None,
) -> tuple[np.ndarray, bool]:
    """Place one lesion; returns (mask, placement_ok).

    With an overlap target the center lands on a target pixel (guaranteed
    overlap). Otherwise placement retries until it avoids every existing
    lesion, and degrades to an overlapping position if retries run out.
    """
    scale = size / 64.0
    radius = max(2, int(round(rng.integers(spec.min_radius, spec.max_radius + 1) * scale)))
    if overlap_target is not None:
        pixels = np.argwhere(overlap_target)
        cy, cx = pixels[rng.integers(0, len(pixels))]
        return _lesion_mask(spec, (int(cy), int(cx)), radius, size, rng), True
    mask = None
    for _ in range(_PLACEMENT_RETRIES):
        cy = int(rng.integers(radius, size - radius))
        cx = int(rng.integers(radius, size - radius))
        mask = _lesion_mask(spec, (cy, cx), radius, size, rng)
        if not (mask & occupied).any():
            return mask, True
    return mask, False


def _render_sample(cfg: SynthWorldConfig, rng: np.random.Generator) -> GroundTruthSample:
    size = cfg.image_size
    background = _smooth_background(rng, size, cfg)
    background = np.round(background * 255.0) / 255.0  # match PNG quantization
    present = [k for k in range(cfg.num_classes) if rng.uniform() < cfg.class_frequencies[k]]

    masks: dict[int, np.ndarray] = {}
    degraded: list[str] = []
    occupied = np.zeros((size, size), dtype=bool)
    for k in present:
        overlap_target = None
        for partner in present:
            if partner >= k or partner not in masks:
                continue
            p = cfg.entangle_prob[k, partner]
            if p > 0 and rng.uniform() < p:
                overlap_target = masks[partner]
                break
        mask, ok = _place_class(cfg.lesion_specs[k], size, rng, occupied, overlap_target)
        if not ok:
            degraded.append(f"class {k}: placement overlap not avoided")
        masks[k] = mask
        occupied |= mask

    return GroundTruthSample(
        present=tuple(present),
        masks=masks,
        background=background[:, :, None].astype(np.float32),
        degraded=tuple(degraded),
    )


def render_image(cfg: SynthWorldConfig, sample: GroundTruthSample) -> ImageTensor:
    """Background plus additive per-class offsets (superposition, like projections)."""
    img = sample.background[:, :, 0].copy()
    for k in sample.present:
        img = img + cfg.lesion_specs[k].intensity * sample.masks[k]
    return ImageTensor(np.clip(img, 0.0, 1.0)[:, :, None].astype(np.float32))


def generate_synthetic_dataset(
    cfg: SynthWorldConfig,
    out_dir: str | Path,
    n_samples: int,
    split_tag: str = "train",
) -> tuple[Manifest, GroundTruthStore]:
    """Write images, manifest, and ground truth; byte-identical for a fixed config."""
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    registry = cfg.registry
    store = GroundTruthStore()
    records = []
    n_degraded = 0
    for i in range(n_samples):
        rng = philox_generator(cfg.seed, "synth", split_tag, i)
        sample = _render_sample(cfg, rng)
        rid = f"{split_tag}-{i:05d}"
        img_path = images_dir / f"{rid}.png"
        save_image(render_image(cfg, sample), img_path)
        store.add(rid, sample)
        if sample.degraded:
            n_degraded += 1
            log.warning("sample %s degraded: %s", rid, "; ".join(sample.degraded))
        records.append(
            SampleRecord(
                id=rid,
                image_path=str(img_path),
                labels=LabelVector.from_indices(sample.present, registry.K),
            )
        )
    if n_degraded:
        log.warning("%d/%d samples carry degraded placements", n_degraded, n_samples)
    manifest = Manifest(registry=registry, records=tuple(records), split_tag=split_tag)
    store.save(out_dir / f"ground_truth_{split_tag}")
    return manifest, store


def true_entanglement_matrix(cfg: SynthWorldConfig) -> EntanglementMatrix:
    """The world's configured pairwise overlap probabilities as a knowledge matrix."""
    return EntanglementMatrix(
        names=tuple(cfg.registry.names),
        scores=np.asarray(cfg.entangle_prob, dtype=np.float64),
        provenance="synthetic ground truth",
    )


def measured_entanglement(store: GroundTruthStore, K: int) -> np.ndarray:
    """Empirical mask-overlap frequency among co-present pairs."""
    co_present = np.zeros((K, K))
    overlapped = np.zeros((K, K))
    for sample in store.samples.values():
        for a in sample.present:
            for b in sample.present:
                if a >= b:
                    continue
                co_present[a, b] += 1
                if (sample.masks[a] & sample.masks[b]).any():
                    overlapped[a, b] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        rate = np.where(co_present > 0, overlapped / np.maximum(co_present, 1), 0.0)
    return rate + rate.T


def oracle_inpaint(image: ImageTensor, mask: InpaintMask, gt: GroundTruthSample) -> ImageTensor:
    """Perfect inpainter: masked pixels take the pristine background values."""
    if mask.bits.shape != (image.height, image.width):
        raise ValueError(f"mask shape {mask.bits.shape} does not match image {image.height}x{image.width}")
    if gt.background.shape != image.data.shape:
        raise ValueError("ground-truth background shape does not match the image")
    bits = mask.bits[:, :, None]
    return ImageTensor(np.where(bits, gt.background, image.data).astype(np.float32))


class OracleInpainter:
    """Inpainter interface over the ground-truth store; isolates pipeline logic."""

    generator_id = "oracle"

    def __init__(self, store: GroundTruthStore):
        self.store = store

    def inpaint(self, image: ImageTensor, mask: InpaintMask, seed: int, *, record_id: str) -> ImageTensor:
        return oracle_inpaint(image, mask, self.store.get(record_id))
