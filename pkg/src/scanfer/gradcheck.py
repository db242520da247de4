"""Finite-difference verification of the full model's parameter gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import FerModel, model_forward
from .tensor import finite_diff_check, smooth_indices

TOLERANCE = 1e-4


@dataclass
class TensorCheck:
    name: str
    max_rel_error: float
    probed: int
    skipped: int


def check_model_gradients(model: FerModel, images: np.ndarray, labels, per_tensor: int = 16,
                          h: float = 1e-5, seed: int = 0) -> list[TensorCheck]:
    """Compare backward() against central differences of the training-mode loss.

    Up to ``per_tensor`` elements of every parameter are probed, drawn in a
    seeded order and restricted to points where the loss is smooth within +-h.
    Running BN statistics are restored afterwards.
    """
    rng = np.random.default_rng(seed)
    saved = {name: buf.copy() for name, buf in model.named_buffers()}

    def loss(_):
        return model_forward(model, images, labels, training=True).loss

    results = []
    for name, param in model.named_parameters():
        order = rng.permutation(param.size)
        picked = smooth_indices(loss, param, h, order, limit=per_tensor)
        skipped = int(np.flatnonzero(order == picked[-1])[0]) + 1 - len(picked) if picked else param.size
        err = finite_diff_check(loss, param, h, picked) if picked else float("inf")
        results.append(TensorCheck(name, err, len(picked), skipped))

    for name, buf in model.named_buffers():
        buf[...] = saved[name]
    return results
