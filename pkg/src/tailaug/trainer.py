"""Multi-label classifier training, losses, and per-class F1 evaluation."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .cam import TorchClassifierHandle
from .core import ClassRegistry, ImageTensor, Manifest, SampleRecord, load_image, philox_generator
from .diffusion import _deserialize_state, _serialize_state
from .schedule import EpochView
from .stats import HeadTailPartition

log = logging.getLogger(__name__)

_CHECKPOINT_MAGIC = b"TAUGCLS1"

# Reference full-scale settings (256x256, batch 128); desk-scale defaults below.
FULL_SCALE = {"image_size": 256, "batch_size": 128, "learning_rate": 1e-3, "epochs": 10}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 2e-3
    optimizer: str = "adam"
    loss: str = "bce"  # "bce" or "focal"
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    image_size: int = 64
    channels: int = 1
    base_width: int = 24
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.loss not in ("bce", "focal"):
            raise ValueError(f"loss must be 'bce' or 'focal', got {self.loss!r}")


def _check_finite(t: torch.Tensor, name: str) -> None:
    if not torch.isfinite(t).all():
        raise ValueError(f"{name} contains non-finite values")


def bce_multilabel_loss(logits, labels) -> torch.Tensor:
    """Mean per-class binary cross-entropy on sigmoid outputs.

    Stable form: y*softplus(-z) + (1-y)*softplus(z), averaged over every
    class (and batch element, if batched).
    """
    z = torch.as_tensor(logits)
    y = torch.as_tensor(labels, dtype=z.dtype)
    _check_finite(z, "logits")
    _check_finite(y, "labels")
    loss = y * F.softplus(-z) + (1.0 - y) * F.softplus(z)
    return loss.mean()


def focal_loss(logits, labels, gamma: float = 2.0, alpha: float = 0.25) -> torch.Tensor:
    """Binary cross-entropy modulated by (1 - p_t)^gamma and scaled by alpha.

    p_t is the predicted probability of the true flag; gamma=0, alpha=1
    reduces exactly to bce_multilabel_loss.
    """
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]")
    z = torch.as_tensor(logits)
    y = torch.as_tensor(labels, dtype=z.dtype)
    _check_finite(z, "logits")
    _check_finite(y, "labels")
    # -log p_t and (1 - p_t), each in the numerically safe form
    neg_log_pt = y * F.softplus(-z) + (1.0 - y) * F.softplus(z)
    one_minus_pt = y * torch.sigmoid(-z) + (1.0 - y) * torch.sigmoid(z)
    loss = alpha * one_minus_pt.pow(gamma) * neg_log_pt
    return loss.mean()


class SmallCNN(nn.Module):
    """4-block CNN; conv4 is the spatial target layer for activation maps."""

    def __init__(self, num_classes: int, channels: int = 1, base_width: int = 16):
        super().__init__()
        w = base_width
        self.conv1 = nn.Sequential(nn.Conv2d(channels, w, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2))
        self.conv2 = nn.Sequential(nn.Conv2d(w, w * 2, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2))
        self.conv3 = nn.Sequential(nn.Conv2d(w * 2, w * 4, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2))
        self.conv4 = nn.Sequential(nn.Conv2d(w * 4, w * 4, 3, padding=1), nn.ReLU())
        self.head = nn.Linear(w * 4, num_classes)

    def forward(self, x):
        h = self.conv4(self.conv3(self.conv2(self.conv1(x))))
        pooled = h.mean(dim=(2, 3))
        return self.head(pooled)


@dataclass(frozen=True)
class ClassifierCheckpoint:
    registry: ClassRegistry
    config: TrainConfig
    state: dict
    train_log: tuple[dict, ...] = ()

    def to_module(self) -> SmallCNN:
        net = SmallCNN(num_classes=self.registry.K, channels=self.config.channels, base_width=self.config.base_width)
        net.load_state_dict(self.state)
        net.eval()
        return net

    def handle(self) -> TorchClassifierHandle:
        """Fresh CAM handle; each concurrent worker should own its own."""
        return TorchClassifierHandle(self.to_module(), target_layer="conv4", num_classes=self.registry.K)

    def save(self, path: str | Path) -> None:
        blob = _serialize_state(self.state)
        header = json.dumps(
            {
                "classes": list(self.registry.names),
                "config": asdict(self.config),
                "train_log": list(self.train_log),
            },
            sort_keys=True,
        ).encode()
        with Path(path).open("wb") as fh:
            fh.write(_CHECKPOINT_MAGIC)
            fh.write(struct.pack("<I", len(header)))
            fh.write(header)
            fh.write(blob)

    @staticmethod
    def load(path: str | Path) -> "ClassifierCheckpoint":
        raw = Path(path).read_bytes()
        if raw[:8] != _CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a classifier checkpoint")
        (header_len,) = struct.unpack_from("<I", raw, 8)
        header = json.loads(raw[12 : 12 + header_len].decode())
        return ClassifierCheckpoint(
            registry=ClassRegistry(tuple(header["classes"])),
            config=TrainConfig(**header["config"]),
            state=_deserialize_state(raw[12 + header_len :]),
            train_log=tuple(header["train_log"]),
        )


class _ImageCache:
    """Loads each record's image once; records repeat across epoch views."""

    def __init__(self, image_size: int, channels: int):
        self.image_size = image_size
        self.channels = channels
        self._cache: dict[str, np.ndarray] = {}

    def get(self, record: SampleRecord) -> np.ndarray:
        if record.id not in self._cache:
            img = load_image(record.image_path)
            if (img.height, img.width, img.channels) != (self.image_size, self.image_size, self.channels):
                raise ValueError(
                    f"record {record.id}: image is {img.height}x{img.width}x{img.channels}, "
                    f"config wants {self.image_size}x{self.image_size}x{self.channels}"
                )
            self._cache[record.id] = np.transpose(img.data, (2, 0, 1))
        return self._cache[record.id]


def constant_provider(manifest: Manifest) -> Callable[[int], EpochView]:
    """Baseline provider: the same full manifest at every epoch."""

    def provider(epoch: int) -> EpochView:
        return EpochView(records=manifest.records, n_original=len(manifest), n_augmented=0)

    return provider


def train_classifier(
    cfg: TrainConfig,
    epoch_provider: Callable[[int], EpochView],
    registry: ClassRegistry,
    init_from: ClassifierCheckpoint | None = None,
) -> ClassifierCheckpoint:
    """Train (or fine-tune, via init_from) on per-epoch dataset views.

    Deterministic for a fixed cfg.seed; the returned checkpoint carries the
    per-epoch {epoch, view_size, mean_loss} log.
    """
    torch.manual_seed(cfg.seed)
    net = SmallCNN(num_classes=registry.K, channels=cfg.channels, base_width=cfg.base_width)
    if init_from is not None:
        net.load_state_dict(init_from.state)
    if cfg.optimizer != "adam":
        raise ValueError(f"unsupported optimizer {cfg.optimizer!r}")
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    cache = _ImageCache(cfg.image_size, cfg.channels)

    def batch_loss(logits, targets):
        if cfg.loss == "focal":
            return focal_loss(logits, targets, gamma=cfg.focal_gamma, alpha=cfg.focal_alpha)
        return bce_multilabel_loss(logits, targets)

    train_log = []
    net.train()
    for epoch in range(cfg.epochs):
        view = epoch_provider(epoch)
        if len(view) == 0:
            raise ValueError(f"epoch {epoch}: provider yielded an empty view")
        images = np.stack([cache.get(r) for r in view.records])
        targets = np.stack([r.labels.flags for r in view.records]).astype(np.float32)
        order = philox_generator(cfg.seed, "cls-epoch-order", epoch).permutation(len(view))
        losses = []
        for start in range(0, len(view), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb = torch.from_numpy(images[idx])
            yb = torch.from_numpy(targets[idx])
            logits = net(xb)
            loss = batch_loss(logits, yb)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        mean_loss = float(np.mean(losses))
        train_log.append({"epoch": epoch, "view_size": len(view), "mean_loss": mean_loss})
        log.info("classifier epoch %d: view %d, mean loss %.5f", epoch, len(view), mean_loss)

    net.eval()
    state = {k: v.detach().clone() for k, v in net.state_dict().items()}
    return ClassifierCheckpoint(registry=registry, config=cfg, state=state, train_log=tuple(train_log))


@dataclass(frozen=True)
class PerClassMetrics:
    name: str
    precision: float
    recall: float
    f1: float
    support: int
    predicted: int
    included: bool


@dataclass(frozen=True)
class EvalReport:
    per_class: tuple[PerClassMetrics, ...]
    macro_f1: float
    head_macro_f1: float
    tail_macro_f1: float
    threshold: float

    def to_json_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "macro_f1": self.macro_f1,
            "head_macro_f1": self.head_macro_f1,
            "tail_macro_f1": self.tail_macro_f1,
            "per_class": [asdict(m) for m in self.per_class],
        }


def _predict_probs(ckpt: ClassifierCheckpoint, manifest: Manifest, batch_size: int = 64) -> np.ndarray:
    net = ckpt.to_module()
    cache = _ImageCache(ckpt.config.image_size, ckpt.config.channels)
    images = np.stack([cache.get(r) for r in manifest.records])
    probs = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            xb = torch.from_numpy(images[start : start + batch_size])
            probs.append(torch.sigmoid(net(xb)).numpy())
    return np.concatenate(probs)


def _f1_from_counts(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


def report_from_predictions(
    predictions: np.ndarray,
    truth: np.ndarray,
    registry: ClassRegistry,
    partition: HeadTailPartition,
    threshold: float,
) -> EvalReport:
    """Per-class precision/recall/F1 from boolean prediction and truth matrices.

    Classes with no positives in either truth or predictions carry support=0
    and are excluded from the macro means.
    """
    per_class = []
    for k, name in enumerate(registry.names):
        tp = int(np.sum(predictions[:, k] & truth[:, k]))
        fp = int(np.sum(predictions[:, k] & ~truth[:, k]))
        fn = int(np.sum(~predictions[:, k] & truth[:, k]))
        support = int(truth[:, k].sum())
        predicted = int(predictions[:, k].sum())
        included = support > 0 or predicted > 0
        precision, recall, f1 = _f1_from_counts(tp, fp, fn) if included else (0.0, 0.0, 0.0)
        per_class.append(
            PerClassMetrics(
                name=name, precision=precision, recall=recall, f1=f1,
                support=support, predicted=predicted, included=included,
            )
        )

    def mean_f1(indices):
        vals = [per_class[i].f1 for i in indices if per_class[i].included]
        return float(np.mean(vals)) if vals else 0.0

    return EvalReport(
        per_class=tuple(per_class),
        macro_f1=mean_f1(range(registry.K)),
        head_macro_f1=mean_f1(sorted(partition.head)),
        tail_macro_f1=mean_f1(sorted(partition.tail)),
        threshold=threshold,
    )


def evaluate(
    ckpt: ClassifierCheckpoint,
    test: Manifest,
    partition: HeadTailPartition,
    threshold: float = 0.5,
) -> EvalReport:
    """Threshold sigmoid outputs and score per-class F1 with head/tail aggregates."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie strictly inside (0, 1), got {threshold}")
    if len(test) == 0:
        raise ValueError("cannot evaluate on an empty manifest")
    if test.registry != ckpt.registry:
        raise ValueError("test manifest registry does not match the checkpoint registry")
    probs = _predict_probs(ckpt, test)
    predictions = probs >= threshold
    truth = np.stack([r.labels.flags for r in test.records])
    return report_from_predictions(predictions, truth, ckpt.registry, partition, threshold)


@dataclass(frozen=True)
class DeltaReport:
    per_class: tuple[dict, ...]
    macro_f1: float
    head_macro_f1: float
    tail_macro_f1: float

    def to_json_dict(self) -> dict:
        return {
            "macro_f1": self.macro_f1,
            "head_macro_f1": self.head_macro_f1,
            "tail_macro_f1": self.tail_macro_f1,
            "per_class": list(self.per_class),
        }


def compare_reports(baseline: EvalReport, treated: EvalReport) -> DeltaReport:
    """Per-class and aggregate F1 deltas (treated minus baseline)."""
    base_names = [m.name for m in baseline.per_class]
    treat_names = [m.name for m in treated.per_class]
    if base_names != treat_names:
        raise ValueError("reports cover different class registries")
    per_class = tuple(
        {"name": b.name, "f1_delta": t.f1 - b.f1, "baseline_f1": b.f1, "treated_f1": t.f1}
        for b, t in zip(baseline.per_class, treated.per_class)
    )
    return DeltaReport(
        per_class=per_class,
        macro_f1=treated.macro_f1 - baseline.macro_f1,
        head_macro_f1=treated.head_macro_f1 - baseline.head_macro_f1,
        tail_macro_f1=treated.tail_macro_f1 - baseline.tail_macro_f1,
    )
