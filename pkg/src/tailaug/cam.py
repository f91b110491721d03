"""Gradient-weighted class activation maps and their conversion to inpaint masks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .core import ImageTensor


class CamCapabilityError(RuntimeError):
    """The classifier cannot produce a spatial feature map at the target layer."""


class TorchClassifierHandle:
    """Wraps a torch module so activation maps can read its internals.

    forward() gives per-class logits; activations_at/gradients_at expose the
    hooked target layer after a backward pass. Gradient state is mutated, so
    one handle must not be shared across concurrent workers.
    """

    def __init__(self, module: torch.nn.Module, target_layer: str, num_classes: int):
        self.module = module
        self.target_layer = target_layer
        self.num_classes = num_classes
        self._activations: torch.Tensor | None = None
        self._gradients: torch.Tensor | None = None
        layers = dict(module.named_modules())
        if target_layer not in layers:
            raise CamCapabilityError(f"module has no layer named {target_layer!r}")
        layer = layers[target_layer]
        layer.register_forward_hook(self._forward_hook)
        layer.register_full_backward_hook(self._backward_hook)

    def _forward_hook(self, module, inp, out):
        self._activations = out

    def _backward_hook(self, module, grad_in, grad_out):
        self._gradients = grad_out[0].detach()

    def _to_input(self, image: ImageTensor) -> torch.Tensor:
        # HWC [0,1] -> 1CHW; copy because ImageTensor data is frozen
        arr = np.transpose(image.data, (2, 0, 1)).copy()
        return torch.from_numpy(arr).unsqueeze(0)

    def forward(self, image: ImageTensor) -> np.ndarray:
        self.module.eval()
        with torch.no_grad():
            logits = self.module(self._to_input(image))
        return logits[0].numpy()

    def run_with_gradients(self, image: ImageTensor, class_id: int) -> None:
        """Forward plus backward of one class logit; fills the hook caches."""
        self.module.eval()
        self.module.zero_grad(set_to_none=True)
        self._activations = None
        self._gradients = None
        inp = self._to_input(image).requires_grad_(True)
        logits = self.module(inp)
        logits[0, class_id].backward()
        if self._activations is None or self._gradients is None:
            raise CamCapabilityError(f"target layer {self.target_layer!r} was never reached")
        if self._activations.dim() != 4:
            raise CamCapabilityError(
                f"target layer {self.target_layer!r} must yield a spatial feature map, "
                f"got shape {tuple(self._activations.shape)}"
            )

    def activations_at(self, layer: str) -> torch.Tensor:
        if layer != self.target_layer or self._activations is None:
            raise CamCapabilityError(f"no cached activations for layer {layer!r}")
        return self._activations.detach()

    def gradients_at(self, layer: str, class_id: int) -> torch.Tensor:
        if layer != self.target_layer or self._gradients is None:
            raise CamCapabilityError(f"no cached gradients for layer {layer!r}")
        return self._gradients


@dataclass(frozen=True)
class ActivationMap:
    """Normalized H x W activation map for one class."""

    values: np.ndarray
    source_class: int

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float32)
        if arr.ndim != 2:
            raise ValueError(f"activation map must be HxW, got {arr.shape}")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("activation map values must lie in [0, 1]")
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    def is_empty(self) -> bool:
        return not bool((self.values > 0).any())


@dataclass(frozen=True)
class InpaintMask:
    """H x W booleans; set bits are the region to regenerate."""

    bits: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.bits, dtype=bool)
        if arr.ndim != 2:
            raise ValueError(f"mask must be HxW, got {arr.shape}")
        arr.flags.writeable = False
        object.__setattr__(self, "bits", arr)

    @property
    def area_fraction(self) -> float:
        return float(self.bits.sum() / self.bits.size)

    def is_empty(self) -> bool:
        return not bool(self.bits.any())


def grad_cam(classifier: TorchClassifierHandle, image: ImageTensor, class_id: int) -> ActivationMap:
    """Standard gradient-weighted activation map for one class.

    Channel weights are the spatially averaged gradients of the class logit at
    the target layer; the map is the rectified weighted activation sum,
    bilinearly upsampled to the image size and min-max normalized to [0, 1].
    An identically-zero rectified map comes back as all zeros.
    """
    if not 0 <= class_id < classifier.num_classes:
        raise ValueError(f"class_id {class_id} outside [0, {classifier.num_classes})")
    classifier.run_with_gradients(image, class_id)
    acts = classifier.activations_at(classifier.target_layer)[0]  # C,h,w
    grads = classifier.gradients_at(classifier.target_layer, class_id)[0]
    weights = grads.mean(dim=(1, 2), keepdim=True)
    raw = F.relu((weights * acts).sum(dim=0, keepdim=True))
    upsampled = F.interpolate(
        raw.unsqueeze(0), size=(image.height, image.width), mode="bilinear", align_corners=False
    )[0, 0]
    m = upsampled.numpy().astype(np.float32)
    lo, hi = float(m.min()), float(m.max())
    if hi <= 0.0:
        return ActivationMap(values=np.zeros_like(m), source_class=class_id)
    if hi == lo:
        return ActivationMap(values=np.ones_like(m), source_class=class_id)
    return ActivationMap(values=np.clip((m - lo) / (hi - lo), 0.0, 1.0), source_class=class_id)


def _dilate(bits: np.ndarray, radius: int) -> np.ndarray:
    """Binary dilation with a (2r+1) square structuring element."""
    if radius == 0:
        return bits.copy()
    h, w = bits.shape
    out = np.zeros_like(bits)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            out[max(0, dy) : h + min(0, dy), max(0, dx) : w + min(0, dx)] |= bits[
                max(0, -dy) : h + min(0, -dy), max(0, -dx) : w + min(0, -dx)
            ]
    return out


def cam_to_mask(activation: ActivationMap, threshold: float, dilation_radius: int = 0) -> InpaintMask:
    """Threshold the map (>=) and dilate by a square element of the given radius."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    if dilation_radius < 0:
        raise ValueError("dilation_radius must be >= 0")
    bits = activation.values >= threshold
    return InpaintMask(bits=_dilate(bits, dilation_radius))


def union_masks(masks: list[InpaintMask]) -> InpaintMask:
    if not masks:
        raise ValueError("cannot union an empty mask list")
    shape = masks[0].bits.shape
    out = np.zeros(shape, dtype=bool)
    for m in masks:
        if m.bits.shape != shape:
            raise ValueError(f"mask shape mismatch: {m.bits.shape} vs {shape}")
        out |= m.bits
    return InpaintMask(bits=out)


def scale_dilation_radius(base_radius: int, base_size: int, image_size: int) -> int:
    """Scale the dilation radius proportionally with image resolution."""
    return max(0, round(base_radius * image_size / base_size))


def save_activation_png(activation: ActivationMap, path) -> None:
    """Debug dump: the normalized map as an 8-bit grayscale PNG."""
    from PIL import Image

    arr = np.round(activation.values * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def save_mask_png(mask: InpaintMask, path) -> None:
    """Debug dump: the mask as a 1-bit PNG."""
    from PIL import Image

    Image.fromarray(mask.bits).convert("1").save(path, format="PNG")
