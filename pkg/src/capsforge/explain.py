"""Gradient-weighted class activation maps (classic and ++ weighting) and overlays."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import tensor as T
from .io import atomic_write_text
from .models import Model
from .tensor import Tensor

OVERLAY_ALPHA = 0.4
VARIANTS = ("cam", "plusplus")


@dataclass(frozen=True)
class Heatmap:
    values: np.ndarray  # [H, W] in [0, 1]
    layer: str
    target_class: int
    vanished: bool = False  # gradients or activations were identically zero

    @property
    def shape(self):
        return self.values.shape


def upsample(grid: np.ndarray, shape) -> np.ndarray:
    """Bilinear resize with pixel-centre alignment and edge clamping."""
    h, w = grid.shape
    H, W = shape
    ys = (np.arange(H) + 0.5) * h / H - 0.5
    xs = (np.arange(W) + 0.5) * w / W - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return ndimage.map_coordinates(grid, [yy, xx], order=1, mode="nearest")


def normalize(values: np.ndarray) -> tuple[np.ndarray, bool]:
    lo, hi = float(values.min()), float(values.max())
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        return np.zeros_like(values), True
    return (values - lo) / (hi - lo), False


def _channel_weights(acts: np.ndarray, grads: np.ndarray, variant: str) -> np.ndarray:
    """Per-channel weights for one sample; ``acts``/``grads`` are [C, h, w]."""
    if variant == "cam":
        return grads.mean(axis=(1, 2))
    g2, g3 = grads**2, grads**3
    denom = 2.0 * g2 + acts.sum(axis=(1, 2), keepdims=True) * g3
    coef = np.where(denom != 0.0, g2 / np.where(denom != 0.0, denom, 1.0), 0.0)
    return (coef * np.maximum(grads, 0.0)).sum(axis=(1, 2))


def gradcam_batch(model: Model, images, target_class: int, layer: str | None = None, variant: str = "cam") -> list[Heatmap]:
    """Heatmaps for a batch; samples are independent so one backward pass serves all."""
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
    if target_class not in (0, 1):
        raise ValueError(f"target_class must be 0 or 1, got {target_class}")
    layer = layer or model.conv_layers[-1]
    with T.no_grad():
        feats = model.feature_map(images, layer)
    if feats.ndim != 4:
        raise ValueError(f"layer {layer!r} is not convolutional (output shape {feats.shape})")
    acts = Tensor(feats.data, requires_grad=True)
    scores = model.scores_from(layer, acts)
    B = scores.shape[0]
    select = np.zeros(scores.shape)
    select[:, target_class] = 1.0
    # parameters sit on the graph too; their stale gradients would block backward
    model.zero_grad()
    T.tsum(T.mul(scores, Tensor(select))).backward()
    model.zero_grad()
    grads = acts.grad
    out = []
    for b in range(B):
        w = _channel_weights(acts.data[b], grads[b], variant)
        cam = np.maximum(np.tensordot(w, acts.data[b], axes=1), 0.0)
        values, vanished = normalize(upsample(cam, model.config.image_shape))
        out.append(Heatmap(values, layer, target_class, vanished))
    return out


def gradcam(model: Model, image, target_class: int = 1, layer: str | None = None, variant: str = "cam") -> Heatmap:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f"gradcam expects one 2-D image, got shape {image.shape}")
    return gradcam_batch(model, image[None], target_class, layer, variant)[0]


def average_heatmap(model: Model, images, target_class: int = 1, layer: str | None = None, variant: str = "cam", batch_size: int = 16) -> Heatmap:
    """Pixelwise mean of per-image heatmaps, renormalised to [0, 1]."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 3 or len(images) == 0:
        raise ValueError("average_heatmap needs a non-empty [N, H, W] image stack")
    total = None
    for start in range(0, len(images), batch_size):
        for hm in gradcam_batch(model, images[start : start + batch_size], target_class, layer, variant):
            total = hm.values.copy() if total is None else total + hm.values
    values, vanished = normalize(total / len(images))
    return Heatmap(values, layer or model.conv_layers[-1], target_class, vanished)


def colormap(values: np.ndarray) -> np.ndarray:
    """Linear blue (0) to red (1): ``(v, 0, 1 - v)``."""
    v = np.clip(values, 0.0, 1.0)
    return np.stack([v, np.zeros_like(v), 1.0 - v], axis=-1)


def overlay(heatmap, image, alpha: float = OVERLAY_ALPHA) -> np.ndarray:
    """RGB blend ``(1 - alpha) * gray + alpha * colormap(heat)``."""
    values = heatmap.values if isinstance(heatmap, Heatmap) else np.asarray(heatmap, dtype=np.float64)
    image = np.asarray(image, dtype=np.float64)
    if values.shape != image.shape:
        raise ValueError(f"heatmap {values.shape} and image {image.shape} differ in size")
    gray = np.repeat(image[..., None], 3, axis=-1)
    return (1.0 - alpha) * gray + alpha * colormap(values)


def total_variation(values: np.ndarray) -> float:
    return float(np.abs(np.diff(values, axis=0)).sum() + np.abs(np.diff(values, axis=1)).sum())


def annulus_mask(shape, cx: float, cy: float, pupil_r: float, iris_r: float) -> np.ndarray:
    yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]]
    d = np.hypot(xx - cx, yy - cy)
    return (d >= pupil_r) & (d <= iris_r)


def annulus_mass(values: np.ndarray, mask: np.ndarray) -> tuple[float, float]:
    """Mean heat per pixel inside and outside ``mask``."""
    return float(values[mask].mean()), float(values[~mask].mean())


def heatmap_csv(heatmap: Heatmap) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for row in heatmap.values:
        w.writerow([f"{v:.6f}" for v in row])
    return buf.getvalue()


def save_heatmap_csv(heatmap: Heatmap, path) -> None:
    atomic_write_text(path, heatmap_csv(heatmap))
