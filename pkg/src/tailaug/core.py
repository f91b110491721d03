"""Domain types shared by every stage: class registry, images, labels, manifests."""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image


class ManifestSchemaError(ValueError):
    """Manifest header does not match the registry."""


class ManifestValidationError(ValueError):
    """A manifest cell is outside the accepted domain."""


# The 13-category chest X-ray profile used by the public label CSVs.
CXR_CLASSES = (
    "Enlarged Cardiomediastinum",
    "Cardiomegaly",
    "Lung Opacity",
    "Lung Lesion",
    "Edema",
    "Consolidation",
    "Pneumonia",
    "Atelectasis",
    "Pneumothorax",
    "Pleural Effusion",
    "Pleural Other",
    "Fracture",
    "Support Devices",
)

# Rare categories of that profile (the red-marked tail of the published split).
CXR_TAIL_CLASSES = (
    "Enlarged Cardiomediastinum",
    "Lung Lesion",
    "Consolidation",
    "Pneumonia",
    "Pleural Other",
    "Fracture",
)


@dataclass(frozen=True)
class ClassRegistry:
    """Ordered list of class names; index <-> name is a bijection."""

    names: tuple[str, ...]

    def __post_init__(self):
        if len(self.names) < 2:
            raise ValueError("registry needs at least 2 classes")
        if len(set(self.names)) != len(self.names):
            raise ValueError("registry names must be unique")

    @property
    def K(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ValueError(f"unknown class name: {name!r}") from None

    def name(self, index: int) -> str:
        return self.names[index]

    def __iter__(self):
        return iter(self.names)


def cxr_registry() -> ClassRegistry:
    return ClassRegistry(CXR_CLASSES)


def save_registry(registry: ClassRegistry, path: str | Path) -> None:
    Path(path).write_text(json.dumps(list(registry.names), indent=2) + "\n")


def load_registry(path: str | Path) -> ClassRegistry:
    names = json.loads(Path(path).read_text())
    if not isinstance(names, list) or not all(isinstance(n, str) for n in names):
        raise ValueError(f"registry file {path} must hold a JSON list of names")
    return ClassRegistry(tuple(names))


@dataclass(frozen=True)
class ImageTensor:
    """H x W x C float image with values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"image must be HxWxC with positive dims, got {arr.shape}")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("image values must lie in [0, 1]")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def plane(self, channel: int = 0) -> np.ndarray:
        """One channel as an H x W array."""
        return self.data[:, :, channel]

    def __eq__(self, other) -> bool:
        return isinstance(other, ImageTensor) and np.array_equal(self.data, other.data)


def load_image(path: str | Path) -> ImageTensor:
    """Decode an 8-bit grayscale or RGB file to floats via /255."""
    with Image.open(path) as img:
        if img.mode not in ("L", "RGB"):
            img = img.convert("L")
        arr = np.asarray(img, dtype=np.uint8)
    return ImageTensor(arr.astype(np.float32) / 255.0)


def save_image(image: ImageTensor, path: str | Path) -> None:
    """Quantize to 8 bits and write a PNG (grayscale for C=1, RGB for C=3)."""
    arr = np.round(image.data * 255.0).astype(np.uint8)
    if arr.shape[2] == 1:
        pil = Image.fromarray(arr[:, :, 0], mode="L")
    elif arr.shape[2] == 3:
        pil = Image.fromarray(arr, mode="RGB")
    else:
        raise ValueError(f"cannot encode {arr.shape[2]}-channel image as PNG")
    pil.save(path, format="PNG")


@dataclass(frozen=True)
class LabelVector:
    """K binary flags aligned to a ClassRegistry."""

    flags: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.flags, dtype=bool)
        arr.flags.writeable = False
        object.__setattr__(self, "flags", arr)

    @property
    def K(self) -> int:
        return int(self.flags.shape[0])

    def present(self) -> tuple[int, ...]:
        return tuple(int(i) for i in np.flatnonzero(self.flags))

    def any(self) -> bool:
        return bool(self.flags.any())

    def __eq__(self, other) -> bool:
        return isinstance(other, LabelVector) and np.array_equal(self.flags, other.flags)

    @staticmethod
    def from_indices(indices: Iterable[int], K: int) -> "LabelVector":
        flags = np.zeros(K, dtype=bool)
        for i in indices:
            flags[i] = True
        return LabelVector(flags)


@dataclass(frozen=True)
class SampleRecord:
    id: str
    image_path: str
    labels: LabelVector


@dataclass(frozen=True)
class Manifest:
    """A labeled sample collection bound to one registry."""

    registry: ClassRegistry
    records: tuple[SampleRecord, ...]
    split_tag: str = "train"

    def __post_init__(self):
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"duplicate record ids in manifest: {dupes[:5]}")
        for r in self.records:
            if r.labels.K != self.registry.K:
                raise ValueError(f"record {r.id} has {r.labels.K} flags, registry has {self.registry.K}")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Manifest)
            and self.registry == other.registry
            and self.split_tag == other.split_tag
            and self.records == other.records
        )


@dataclass(frozen=True)
class ProvenanceRecord:
    """Lineage of one synthesized sample, enough to replay it exactly."""

    source_id: str
    inpainted_classes: tuple[int, ...]
    retained_head_classes: tuple[int, ...]
    mask_area_fraction: float
    generator_id: str
    noise_seed: int
    cam_threshold: float

    def __post_init__(self):
        if set(self.inpainted_classes) & set(self.retained_head_classes):
            raise ValueError("inpainted and retained class sets must be disjoint")
        if not 0.0 <= self.mask_area_fraction <= 1.0:
            raise ValueError("mask_area_fraction must lie in [0, 1]")

    def to_json_dict(self) -> dict:
        return {
            "source_id": self.source_id,
            "inpainted_classes": list(self.inpainted_classes),
            "retained_head_classes": list(self.retained_head_classes),
            "mask_area_fraction": self.mask_area_fraction,
            "generator_id": self.generator_id,
            "noise_seed": self.noise_seed,
            "cam_threshold": self.cam_threshold,
        }

    @staticmethod
    def from_json_dict(d: dict) -> "ProvenanceRecord":
        return ProvenanceRecord(
            source_id=d["source_id"],
            inpainted_classes=tuple(d["inpainted_classes"]),
            retained_head_classes=tuple(d["retained_head_classes"]),
            mask_area_fraction=d["mask_area_fraction"],
            generator_id=d["generator_id"],
            noise_seed=d["noise_seed"],
            cam_threshold=d["cam_threshold"],
        )


def load_manifest(path: str | Path, registry: ClassRegistry, split_tag: str = "train") -> Manifest:
    """Parse a `id,path,<class names...>` CSV into a Manifest.

    Label cells must be exactly "0" or "1"; anything else raises a
    ManifestValidationError naming the offending row and column. Relative
    image paths resolve against the CSV's own directory.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    base = os.path.dirname(os.path.abspath(path))
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestSchemaError(f"{path}: empty file, expected a header row") from None
        expected = ["id", "path", *registry.names]
        if header != expected:
            raise ManifestSchemaError(f"{path}: header {header!r} does not match registry columns {expected!r}")
        records = []
        for row_num, row in enumerate(reader, start=2):
            if len(row) != len(expected):
                raise ManifestValidationError(f"{path}: row {row_num} has {len(row)} cells, expected {len(expected)}")
            flags = np.zeros(registry.K, dtype=bool)
            for k, cell in enumerate(row[2:]):
                if cell == "1":
                    flags[k] = True
                elif cell != "0":
                    raise ManifestValidationError(
                        f"{path}: row {row_num}, column {registry.names[k]!r}: "
                        f"label cell must be 0 or 1, got {cell!r}"
                    )
            img_path = row[1]
            if img_path and not os.path.isabs(img_path):
                img_path = os.path.normpath(os.path.join(base, img_path))
            records.append(SampleRecord(id=row[0], image_path=img_path, labels=LabelVector(flags)))
    return Manifest(registry=registry, records=tuple(records), split_tag=split_tag)


def _portable_path(image_path: str, base: str) -> str:
    """Relative form when the image lives under the manifest's directory."""
    if not os.path.isabs(image_path):
        return image_path
    rel = os.path.relpath(image_path, base)
    return rel if not rel.startswith("..") else image_path


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    base = os.path.dirname(os.path.abspath(path))
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "path", *manifest.registry.names])
        for r in manifest.records:
            writer.writerow([r.id, _portable_path(r.image_path, base), *(int(f) for f in r.labels.flags)])


def split_manifest(manifest: Manifest, train_fraction: float, seed: int) -> tuple[Manifest, Manifest]:
    """Random disjoint train/test split; train gets floor(n * fraction) records."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie strictly inside (0, 1), got {train_fraction}")
    n = len(manifest.records)
    order = np.random.Generator(np.random.Philox(key=np.uint64(seed & 0xFFFFFFFFFFFFFFFF))).permutation(n)
    n_train = int(np.floor(n * train_fraction))
    train_idx = sorted(order[:n_train])
    test_idx = sorted(order[n_train:])
    train = Manifest(manifest.registry, tuple(manifest.records[i] for i in train_idx), split_tag="train")
    test = Manifest(manifest.registry, tuple(manifest.records[i] for i in test_idx), split_tag="test")
    return train, test


def derive_seed(master: int, *labels: object) -> int:
    """Fan a master seed out to a stable per-stage seed (63-bit)."""
    h = hashlib.sha256(repr((int(master),) + tuple(str(l) for l in labels)).encode()).digest()
    return int.from_bytes(h[:8], "big") & 0x7FFFFFFFFFFFFFFF


def philox_generator(seed: int, *labels: object) -> np.random.Generator:
    """Counter-based generator keyed by (seed, labels); independent per key."""
    h = hashlib.sha256(repr((int(seed),) + tuple(str(l) for l in labels)).encode()).digest()
    key = np.frombuffer(h[:16], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
