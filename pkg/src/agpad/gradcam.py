"""Grad-CAM heatmaps over backbone taps or attention-refined maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import PA, PADModel
from .tensor import Tensor

TARGETS = ("probability", "logit")


@dataclass
class Heatmap:
    values: np.ndarray  # H x W, in [0, 1]
    layer: str


def heatmap_from_gradients(fmap: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """ReLU of the gradient-weighted channel sum, divided by its max.

    ``fmap`` and ``grads`` are ``C x H x W``. Channel weights are the spatial
    means of the gradients. An all-zero map is returned as is.
    """
    weights = grads.mean(axis=(-2, -1))
    cam = np.maximum(np.tensordot(weights, fmap, axes=(0, 0)), 0.0)
    peak = cam.max()
    return cam / peak if peak > 0 else np.zeros_like(cam)


def grad_cam_tensor(score: Tensor, feature: Tensor) -> np.ndarray:
    """Grad-CAM of a scalar ``score`` with respect to an intermediate ``feature``."""
    score.backward()
    grads = feature.grad if feature.grad is not None else np.zeros_like(feature.data)
    fmap, grads = feature.data, grads
    if fmap.ndim == 4:
        fmap, grads = fmap[0], grads[0]
    return heatmap_from_gradients(fmap.astype(np.float64), grads.astype(np.float64))


def available_layers(model: PADModel) -> list[str]:
    names = ["tap3", "tap4", "tap5", "attended"]
    if model.fusion.mode == "hierarchical":
        names += ["att3", "att4", "att5"]
    return names


def grad_cam(model: PADModel, image: np.ndarray, target_layer: str = "attended", target_class: int = PA,
             target: str = "probability", score_scale: float = 1.0) -> Heatmap:
    """Heatmap for one ``C x H x W`` image.

    ``target`` picks what is differentiated: the class probability (default)
    or the raw class logit. ``score_scale`` multiplies the target first.
    """
    if target_layer not in available_layers(model):
        raise KeyError(f"unknown layer {target_layer!r}; available: {available_layers(model)}")
    if target not in TARGETS:
        raise ValueError(f"target must be one of {TARGETS}, got {target!r}")
    x = Tensor(np.asarray(image, dtype=model.dtype)[None])
    model.zero_grad()
    feats = model.features(x)
    logits = feats["logits"]
    out = T.softmax(logits, axis=-1) if target == "probability" else logits
    score = T.select(out, target_class)
    if score_scale != 1.0:
        score = T.scale(score, Tensor(np.array([score_scale]), dtype=model.dtype))
    feature = feats[target_layer]
    # the leaf image does not require grad; make sure the path to the feature is kept
    if not feature.requires_grad:
        return Heatmap(np.zeros(feature.shape[-2:]), target_layer)
    values = grad_cam_tensor(T.sum_all(score), feature)
    model.zero_grad()
    return Heatmap(values, target_layer)


# ---------------------------------------------------------------------------
# rendering


def bilinear_resize(values: np.ndarray, height: int, width: int) -> np.ndarray:
    """Resize a 2-D array with half-pixel-centred bilinear sampling."""
    h, w = values.shape
    ys = np.clip((np.arange(height) + 0.5) * h / height - 0.5, 0, h - 1)
    xs = np.clip((np.arange(width) + 0.5) * w / width - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = values[y0][:, x0] * (1 - fx) + values[y0][:, x1] * fx
    bot = values[y1][:, x0] * (1 - fx) + values[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def jet(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] values to RGB with a jet-style ramp; output is ``H x W x 3``."""
    v = np.clip(values, 0.0, 1.0)[..., None]
    r = np.clip(1.5 - np.abs(4 * v - 3), 0, 1)
    g = np.clip(1.5 - np.abs(4 * v - 2), 0, 1)
    b = np.clip(1.5 - np.abs(4 * v - 1), 0, 1)
    return np.concatenate([r, g, b], axis=-1)


def upsample_overlay(heatmap: Heatmap | np.ndarray, image: np.ndarray, opacity: float = 0.5) -> np.ndarray:
    """Blend the heatmap over the image; returns ``H x W x 3`` RGB in [0, 1].

    Per-pixel blend weight is ``opacity * heat``, so cold pixels keep the
    image untouched.
    """
    values = heatmap.values if isinstance(heatmap, Heatmap) else np.asarray(heatmap)
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[0] if img.shape[0] == 1 else img.transpose(1, 2, 0)
    if values.shape[0] > img.shape[0] or values.shape[1] > img.shape[1]:
        raise ValueError(f"heatmap {values.shape} larger than image {img.shape[:2]}")
    rgb = np.repeat(img[..., None], 3, axis=-1) if img.ndim == 2 else img
    heat = bilinear_resize(values, rgb.shape[0], rgb.shape[1])
    weight = opacity * heat[..., None]
    return (1 - weight) * rgb + weight * jet(heat)
