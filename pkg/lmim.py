# lmim.py
"""Local MI constraint: patch-wise discriminator over pre-GAP feature maps and the label."""
import logging
from typing import Optional

import numpy as np

from errors import ShapeError
from layers import Conv2d, Module
from mi import bce_mi_objective
from tensor import RngStream, Tensor, concat

logger = logging.getLogger(__name__)


def one_hot(labels, num_classes: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ShapeError("one_hot", f"labels must lie in [0, {num_classes}), got range [{labels.min()}, {labels.max()}]")
    out = np.zeros(labels.shape + (num_classes,), dtype=dtype)
    np.put_along_axis(out, labels[..., None], 1, axis=-1)
    return out


def broadcast_label(y: np.ndarray, height: int, width: int) -> np.ndarray:
    """Repeat a one-hot vector (C,) or batch (N, C) over an H x W grid -> (C, H, W) / (N, C, H, W)."""
    if height < 1 or width < 1:
        raise ShapeError("broadcast_label", f"grid must be at least 1x1, got {height}x{width}")
    y = np.asarray(y)
    return np.ascontiguousarray(np.broadcast_to(y[..., None, None], y.shape + (height, width)))


class LocalDiscriminator(Module):
    """Two 1x1 convolutions (C + D) -> hidden -> 1 with a ReLU between; sigmoid applied by callers."""

    def __init__(self, feature_channels: int, num_classes: int, hidden: int, rng: RngStream):
        self.feature_channels, self.num_classes = feature_channels, num_classes
        self.conv1 = Conv2d(feature_channels + num_classes, hidden, 1, rng)
        self.conv2 = Conv2d(hidden, 1, 1, rng)

    def logits(self, features: Tensor, ycast: np.ndarray) -> Tensor:
        """features (N, D, H, W), ycast (N, C, H, W) -> raw scores (N, H, W)."""
        if features.ndim != 4 or np.ndim(ycast) != 4:
            raise ShapeError("lmim_scores", f"expected 4-d inputs, got {features.shape} and {np.shape(ycast)}")
        if features.shape[1] != self.feature_channels or ycast.shape[1] != self.num_classes:
            raise ShapeError(
                "lmim_scores",
                f"channels ({features.shape[1]} + {ycast.shape[1]}) do not match "
                f"discriminator ({self.feature_channels} + {self.num_classes})",
            )
        if features.shape[0] != ycast.shape[0] or features.shape[2:] != ycast.shape[2:]:
            raise ShapeError("lmim_scores", f"feature map {features.shape} and label grid {ycast.shape} disagree")
        x = concat([features, Tensor(ycast.astype(features.dtype))], axis=1)
        h = self.conv1(x).relu()
        out = self.conv2(h)
        n, _, hh, ww = out.shape
        return out.reshape(n, hh, ww)

    def __call__(self, features: Tensor, ycast: np.ndarray) -> Tensor:
        return self.logits(features, ycast).sigmoid()


def lmim_scores(f: Tensor, ycast: np.ndarray, d: LocalDiscriminator) -> Tensor:
    """Per-patch dependence probabilities; accepts a single (D, H, W) map or a batch."""
    if f.ndim == 3:
        out = d(f.reshape(1, *f.shape), np.asarray(ycast)[None])
        return out.reshape(*out.shape[1:])
    return d(f, ycast)


def lmim_objective(paired: Tensor, unpaired: Tensor) -> Tensor:
    """L_LMIM: mean over batch, time steps and patches of log s_p + log(1 - s_u)."""
    if paired.shape != unpaired.shape:
        raise ShapeError("lmim_objective", f"paired {paired.shape} and unpaired {unpaired.shape} layouts differ")
    return bce_mi_objective(paired, unpaired)


def lmim_loss(
    feature_maps: Tensor,
    labels: np.ndarray,
    perm: np.ndarray,
    frames: int,
    d: LocalDiscriminator,
) -> Tensor:
    """
    L_LMIM for a batch.

    feature_maps is (B*T, D, H, W) in batch-major order; `perm` is the
    in-batch label permutation, reused for every time step.
    """
    bt, _, height, width = feature_maps.shape
    batch = bt // frames
    y = one_hot(labels, d.num_classes)
    y_paired = np.repeat(y, frames, axis=0)
    y_unpaired = np.repeat(y[perm], frames, axis=0)
    paired = d(feature_maps, broadcast_label(y_paired, height, width))
    unpaired = d(feature_maps, broadcast_label(y_unpaired, height, width))
    logger.debug("[lmim] batch=%d frames=%d grid=%dx%d", batch, frames, height, width)
    return lmim_objective(paired, unpaired)
