"""Tail-class augmentation for long-tailed multi-label imaging.

Pipeline: activation-map-guided masking of abundant (head) lesion classes,
diffusion inpainting back to normal texture, knowledge-guided protection of
entangled rare (tail) lesions, and a progressive schedule that ramps the
synthesized data into fine-tuning.
"""

__version__ = "0.1.0"

from .core import (
    ClassRegistry,
    ImageTensor,
    LabelVector,
    Manifest,
    ProvenanceRecord,
    SampleRecord,
    load_manifest,
    save_manifest,
    split_manifest,
)

__all__ = [
    "ClassRegistry",
    "ImageTensor",
    "LabelVector",
    "Manifest",
    "ProvenanceRecord",
    "SampleRecord",
    "load_manifest",
    "save_manifest",
    "split_manifest",
]
