# gmim.py
"""Global MI constraint: frame-weight head, weighted temporal pooling and the global discriminator."""
import logging

import numpy as np

from errors import SamplingError, ShapeError
from layers import LSTMLayer, Linear, Module
from lmim import one_hot
from mi import bce_mi_objective
from tensor import RngStream, Tensor, concat

logger = logging.getLogger(__name__)


class WeightHead(Module):
    """
    Single-layer LSTM over the GAP features followed by a linear map to one
    scalar per step; beta_t = ReLU(W_linear h_t + b_linear).

    b_linear starts at 1.0 so the initial weights are positive.
    """

    def __init__(self, input_size: int, hidden: int, rng: RngStream, bias_init: float = 1.0):
        self.lstm = LSTMLayer(input_size, hidden, rng)
        self.linear = Linear(hidden, 1, rng)
        self.linear.bias.data[...] = bias_init

    def __call__(self, g: Tensor) -> Tensor:
        h = self.lstm(g)
        b, t, _ = h.shape
        return self.linear(h).reshape(b, t).relu()


def frame_weights(g: Tensor, head: WeightHead) -> Tensor:
    """(B, T, D) or (T, D) GAP features -> nonnegative (B, T) / (T,) weights."""
    if g.ndim == 2:
        return head(g.reshape(1, *g.shape)).reshape(g.shape[0])
    return head(g)


def weighted_pool(z: Tensor, beta: Tensor) -> Tensor:
    """O = sum_t beta_t Z_t / T; the divisor is the frame count, not sum(beta)."""
    single = z.ndim == 2
    if single:
        z = z.reshape(1, *z.shape)
        beta = beta.reshape(1, -1)
    if beta.ndim != 2 or beta.shape != z.shape[:2]:
        raise ShapeError("weighted_pool", f"weights {beta.shape} do not match states {z.shape[:2]}")
    frames = z.shape[1]
    b = beta.shape[0]
    o = (z * beta.reshape(b, frames, 1)).sum(axis=1) * (1.0 / frames)
    return o.reshape(o.shape[1]) if single else o


class GlobalDiscriminator(Module):
    """Two linear layers (2N + C) -> hidden -> 1 with a ReLU between; sigmoid output."""

    def __init__(self, representation_size: int, num_classes: int, hidden: int, rng: RngStream):
        self.representation_size, self.num_classes = representation_size, num_classes
        self.linear1 = Linear(representation_size + num_classes, hidden, rng)
        self.linear2 = Linear(hidden, 1, rng)

    def __call__(self, o: Tensor, y: np.ndarray) -> Tensor:
        if o.shape[-1] != self.representation_size or np.shape(y)[-1] != self.num_classes:
            raise ShapeError(
                "gmim_discriminator",
                f"inputs ({o.shape[-1]} + {np.shape(y)[-1]}) do not match ({self.representation_size} + {self.num_classes})",
            )
        x = concat([o, Tensor(np.asarray(y, dtype=o.dtype))], axis=-1)
        out = self.linear2(self.linear1(x).relu())
        return out.reshape(out.shape[0]).sigmoid()


def gmim_objective(o: Tensor, labels: np.ndarray, perm: np.ndarray, d: GlobalDiscriminator) -> Tensor:
    """L_GMIM: mean log d(o, y) over paired + mean log(1 - d(o, y')) over in-batch unpaired labels."""
    labels = np.asarray(labels)
    if len(labels) < 2:
        raise SamplingError(f"GMIM needs a batch of at least 2, got {len(labels)}")
    y = one_hot(labels, d.num_classes)
    paired = d(o, y)
    unpaired = d(o, y[perm])
    return bce_mi_objective(paired, unpaired)
