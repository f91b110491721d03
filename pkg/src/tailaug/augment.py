"""Per-sample synthesis: decide targets, mask them, inpaint, rewrite labels.

Emits an augmented manifest plus a one-line-per-input provenance log, fully
deterministic for a fixed generation seed.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np

from . import diffusion
from .cam import InpaintMask, TorchClassifierHandle, cam_to_mask, grad_cam, union_masks
from .core import (
    ClassRegistry,
    ImageTensor,
    LabelVector,
    Manifest,
    ProvenanceRecord,
    SampleRecord,
    derive_seed,
    load_image,
    save_image,
    save_manifest,
)
from .knowledge import KnowledgeBackend, query_entanglement, select_inpaint_targets
from .stats import HeadTailPartition

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GenerationConfig:
    cam_threshold: float = 0.5
    dilation_radius: int = 2
    entangle_threshold: float = 0.5
    max_mask_fraction: float = 0.5
    seed: int = 0
    retain_mode: str = "threshold"

    def __post_init__(self):
        if not 0.0 <= self.cam_threshold <= 1.0:
            raise ValueError("cam_threshold must lie in [0, 1]")
        if not 0.0 <= self.entangle_threshold <= 1.0:
            raise ValueError("entangle_threshold must lie in [0, 1]")
        if not 0.0 < self.max_mask_fraction <= 1.0:
            raise ValueError("max_mask_fraction must lie in (0, 1]")
        if self.dilation_radius < 0:
            raise ValueError("dilation_radius must be >= 0")


class Inpainter(Protocol):
    generator_id: str

    def inpaint(self, image: ImageTensor, mask: InpaintMask, seed: int, *, record_id: str) -> ImageTensor: ...


class DiffusionInpainter:
    """Adapts a trained generator checkpoint to the per-record inpaint interface."""

    def __init__(self, ckpt: diffusion.GeneratorCheckpoint):
        self.ckpt = ckpt
        self.generator_id = ckpt.generator_id

    def inpaint(self, image: ImageTensor, mask: InpaintMask, seed: int, *, record_id: str) -> ImageTensor:
        return diffusion.inpaint(self.ckpt, image, mask, seed)


def _as_inpainter(inpainter) -> Inpainter:
    if isinstance(inpainter, diffusion.GeneratorCheckpoint):
        return DiffusionInpainter(inpainter)
    return inpainter


@dataclass(frozen=True)
class AugmentedSample:
    image: ImageTensor
    labels: LabelVector
    provenance: ProvenanceRecord


@dataclass(frozen=True)
class Skip:
    source_id: str
    reason: str


def synthesize_sample(
    record: SampleRecord,
    classifier: TorchClassifierHandle,
    inpainter,
    backend: KnowledgeBackend,
    partition: HeadTailPartition,
    cfg: GenerationConfig,
    registry: ClassRegistry,
    image: ImageTensor | None = None,
) -> AugmentedSample | Skip:
    """Synthesize one sample, or a Skip naming why nothing was emitted.

    Pipeline: entanglement decision -> per-target activation map -> mask
    union -> inpaint -> label rewrite (targets cleared, tails and retained
    heads preserved).
    """
    inpainter = _as_inpainter(inpainter)
    present = set(record.labels.present())
    present_heads = sorted(present & partition.head)
    present_tails = sorted(present & partition.tail)
    if not present_heads:
        return Skip(record.id, "no-head")
    if not present_tails:
        return Skip(record.id, "no-tail")

    head_names = [registry.name(i) for i in present_heads]
    tail_names = [registry.name(i) for i in present_tails]
    scores = query_entanglement(backend, head_names, tail_names, registry)
    decision = select_inpaint_targets(
        record.labels, partition, scores, cfg.entangle_threshold, registry, retain_mode=cfg.retain_mode
    )
    targets = sorted(decision.inpaint_targets)
    if not targets:
        return Skip(record.id, "all-heads-retained")

    if image is None:
        image = load_image(record.image_path)
    masks = []
    for k in targets:
        activation = grad_cam(classifier, image, k)
        mask = cam_to_mask(activation, cfg.cam_threshold, cfg.dilation_radius)
        # Either failure mode leaves the lesion visible while its label would
        # be cleared, so the sample cannot be trusted.
        if activation.is_empty() or mask.is_empty():
            return Skip(record.id, "empty-cam")
        masks.append(mask)
    union = union_masks(masks)
    if union.area_fraction > cfg.max_mask_fraction:
        return Skip(record.id, "mask-too-large")

    noise_seed = derive_seed(cfg.seed, "inpaint-noise", record.id)
    new_image = inpainter.inpaint(image, union, noise_seed, record_id=record.id)

    flags = record.labels.flags.copy()
    for k in targets:
        flags[k] = False
    provenance = ProvenanceRecord(
        source_id=record.id,
        inpainted_classes=tuple(targets),
        retained_head_classes=tuple(sorted(decision.retained_heads)),
        mask_area_fraction=union.area_fraction,
        generator_id=inpainter.generator_id,
        noise_seed=noise_seed,
        cam_threshold=cfg.cam_threshold,
    )
    return AugmentedSample(image=new_image, labels=LabelVector(flags), provenance=provenance)


def run_generation(
    manifest: Manifest,
    classifier: TorchClassifierHandle,
    inpainter,
    backend: KnowledgeBackend,
    partition: HeadTailPartition,
    cfg: GenerationConfig,
    out_dir: str | Path,
) -> tuple[Manifest, list[dict]]:
    """Synthesize over a whole manifest; write images, manifest, provenance JSONL.

    One provenance line per input record, emitted or skipped with a reason.
    Per-record errors are logged and recorded as skips; the pass continues.
    """
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    records = []
    provenance_lines = []
    for record in manifest:
        try:
            result = synthesize_sample(record, classifier, inpainter, backend, partition, cfg, manifest.registry)
        except Exception as exc:
            log.error("record %s failed: %s", record.id, exc)
            provenance_lines.append({"source_id": record.id, "status": "skipped:error", "error": str(exc)})
            continue
        if isinstance(result, Skip):
            provenance_lines.append({"source_id": result.source_id, "status": f"skipped:{result.reason}"})
            continue
        aug_id = f"aug-{record.id}"
        img_path = images_dir / f"{aug_id}.png"
        save_image(result.image, img_path)
        records.append(SampleRecord(id=aug_id, image_path=str(img_path), labels=result.labels))
        provenance_lines.append({"status": "emitted", **result.provenance.to_json_dict()})

    augmented = Manifest(registry=manifest.registry, records=tuple(records), split_tag="augmented")
    save_manifest(augmented, out_dir / "manifest_augmented.csv")
    with (out_dir / "provenance.jsonl").open("w") as fh:
        for line in provenance_lines:
            fh.write(json.dumps(line, sort_keys=True) + "\n")
    log.info(
        "generation: %d/%d emitted (%d skipped)",
        len(records),
        len(manifest),
        len(manifest) - len(records),
    )
    return augmented, provenance_lines
