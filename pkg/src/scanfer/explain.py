"""Grad-CAM heatmaps over the deeper backbone tap, written as PGM/PPM."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Sample, encode_pgm, encode_ppm, resize_bilinear
from .model import FerModel, as_image_batch, backbone_forward, cci_branch
from .tensor import Tensor, no_grad

RED = np.array([1.0, 0.0, 0.0])


@dataclass(frozen=True)
class Heatmap:
    values: np.ndarray
    source_shape: tuple[int, int]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def heatmap_from(activation: np.ndarray, gradient: np.ndarray, out_size: tuple[int, int] | None = None) -> Heatmap:
    """Grad-CAM map from one ``C x h x w`` activation and the score gradient w.r.t. it.

    Channel weights are the spatial means of the gradient; the weighted sum is
    rectified, resampled to ``out_size`` and scaled so its maximum is 1.
    """
    alpha = gradient.mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(alpha, activation, axes=([0], [0])), 0.0)
    source = cam.shape
    if out_size is not None:
        cam = np.maximum(resize_bilinear(cam, out_size), 0.0)
    peak = cam.max()
    values = cam / peak if peak > 0 else np.zeros_like(cam)
    return Heatmap(values, source)


def gradcam(model: FerModel, image: np.ndarray, target_class: int) -> Heatmap:
    """Heatmap for ``target_class`` on a single ``3 x S x S`` image.

    The score is the sum of the CCI heads' logits for the class, since they
    are the only outputs that depend on the deeper tap.
    """
    n = model.config.num_classes
    if not 0 <= int(target_class) < n:
        raise ValueError(f"target class must lie in [0, {n}), got {target_class}")
    x = as_image_batch(model, image)
    if x.shape[0] != 1:
        raise ValueError("gradcam takes exactly one image")
    with no_grad():
        _, lower = backbone_forward(model, x, training=False)
    activation = Tensor(lower.data, requires_grad=True)
    _, logits = cci_branch(model, activation, training=False)
    score = logits[0][0, int(target_class)]
    for z in logits[1:]:
        score = score + z[0, int(target_class)]
    score.backward()
    grad = activation.grad if activation.grad is not None else np.zeros(activation.shape)
    size = model.config.backbone.input_size
    return heatmap_from(activation.data[0], grad[0], (size, size))


def overlay(heatmap: Heatmap, base: np.ndarray) -> np.ndarray:
    if base.shape != (3,) + heatmap.shape:
        raise ValueError(f"base image {base.shape} does not match heatmap {heatmap.shape}")
    w = heatmap.values[None]
    return base * (1.0 - w) + RED[:, None, None] * w


def render_heatmap(heatmap: Heatmap, base: Sample | np.ndarray | None = None) -> tuple[bytes, bytes | None]:
    """Return ``(pgm_bytes, ppm_overlay_bytes)``; the overlay is None without a base image."""
    pgm = encode_pgm(heatmap.values)
    if base is None:
        return pgm, None
    pixels = base.pixels if isinstance(base, Sample) else base
    return pgm, encode_ppm(overlay(heatmap, pixels))
