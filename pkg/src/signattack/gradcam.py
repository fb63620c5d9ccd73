"""Grad-CAM saliency maps and the three-panel explanation images."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .images import bilinear_resize
from .model import Model

# (value, (r, g, b)) stops of the saliency colormap
COLORMAP_STOPS = (
    (0.0, (0, 0, 128)),
    (0.25, (0, 128, 255)),
    (0.5, (0, 255, 0)),
    (0.75, (255, 255, 0)),
    (1.0, (255, 0, 0)),
)
GUTTER = 2


@dataclass
class SaliencyMap:
    values: np.ndarray
    source_layer: str
    target_class: int


def normalize_max(values: np.ndarray) -> np.ndarray:
    """Divide by the maximum; an all-zero map stays zero."""
    peak = float(np.max(values)) if values.size else 0.0
    return values / peak if peak > 0 else np.zeros_like(values)


def gradcam(model: Model, image: np.ndarray, target_class: int | None = None,
            layer_id: str | None = None) -> SaliencyMap:
    """Grad-CAM for ``target_class`` (default: predicted class) at a conv layer
    (default: the last one). Gradients are taken of the pre-softmax logit."""
    convs = model.conv_layer_names
    if layer_id is None:
        layer_id = convs[-1]
    if layer_id not in convs:
        raise ValueError(f"layer {layer_id!r} is not a conv layer; valid: {', '.join(convs)}")
    image = np.asarray(image, dtype=np.float64)
    model.check_images(image[None])
    logits, acts = model.forward(Tensor(image[None]), capture=layer_id)
    if target_class is None:
        target_class = int(np.argmax(logits.data[0]))
    if not 0 <= target_class < model.num_classes:
        raise ValueError(f"target_class {target_class} out of range")
    pick = np.zeros(logits.shape)
    pick[0, target_class] = 1.0
    score = ad.sum_all(ad.mul(logits, Tensor(pick)))
    (g,) = ad.grad(score, [acts])
    a = acts.data[0]  # (h, w, K)
    weights = g[0].mean(axis=(0, 1))
    cam = np.maximum(a @ weights, 0.0)
    res = model.resolution
    cam = bilinear_resize(cam, res, res)  # convex weights keep it >= 0
    return SaliencyMap(normalize_max(cam), layer_id, target_class)


def colormap(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] values to 8-bit RGB by piecewise-linear interpolation."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    xs = np.array([s[0] for s in COLORMAP_STOPS])
    out = np.empty(v.shape + (3,), dtype=np.uint8)
    for ch in range(3):
        ys = np.array([s[1][ch] for s in COLORMAP_STOPS], dtype=np.float64)
        out[..., ch] = np.floor(np.interp(v, xs, ys) + 0.5).astype(np.uint8)
    return out


def overlay(image: np.ndarray, saliency, blend: float = 0.5) -> np.ndarray:
    """(1 - blend) * image + blend * colormap(saliency), as floats in [0, 1]."""
    values = saliency.values if isinstance(saliency, SaliencyMap) else np.asarray(saliency)
    image = np.asarray(image, dtype=np.float64)
    if image.shape[:2] != values.shape:
        raise ValueError(f"image {image.shape[:2]} and saliency {values.shape} differ in size")
    if not 0.0 <= blend <= 1.0:
        raise ValueError("blend must lie in [0, 1]")
    if blend == 0:
        return image.copy()
    colors = colormap(values) / 255.0
    return (1.0 - blend) * image + blend * colors


def explanation_triptych(image: np.ndarray, saliency, region_threshold: float = 0.6,
                         blend: float = 0.5) -> np.ndarray:
    """original | overlay | original masked to saliency >= threshold,
    separated by white gutters."""
    values = saliency.values if isinstance(saliency, SaliencyMap) else np.asarray(saliency)
    if not 0.0 < region_threshold < 1.0:
        raise ValueError("region_threshold must lie in (0, 1)")
    image = np.asarray(image, dtype=np.float64)
    h, w, _ = image.shape
    masked = image * (values >= region_threshold)[..., None]
    gutter = np.ones((h, GUTTER, 3))
    return np.concatenate(
        [image, gutter, overlay(image, values, blend), gutter, masked], axis=1
    )
