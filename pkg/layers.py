# layers.py
"""Parameterised building blocks on top of tensor.py."""
import logging
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from errors import CheckpointError, ShapeError
from tensor import Parameter, RngStream, Tensor, concat, conv2d, conv3d, get_default_dtype, stack

logger = logging.getLogger(__name__)


# -----------------------------
# Initialisation
# -----------------------------
def uniform_fan_in(rng: RngStream, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(1, fan_in))
    return rng.generator.uniform(-bound, bound, size=shape).astype(get_default_dtype())


def orthogonal(rng: RngStream, rows: int, cols: int) -> np.ndarray:
    a = rng.generator.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return q[:rows, :cols].astype(get_default_dtype())


def _recurrent_matrix(rng: RngStream, hidden: int, gates: int) -> np.ndarray:
    return np.concatenate([orthogonal(rng, hidden, hidden) for _ in range(gates)], axis=1)


# -----------------------------
# Module
# -----------------------------
class Module:
    """Container that discovers Parameters and sub-Modules from its attributes."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for key, value in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{path}.{i}", item

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def children(self) -> Iterator["Module"]:
        for value in vars(self).values():
            if isinstance(value, Module):
                yield value
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield item

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> List[str]:
        """Copy matching arrays in; returns the names that were left untouched."""
        missing = []
        for name, p in self.named_parameters():
            if name not in state:
                missing.append(name)
                continue
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise CheckpointError(f"parameter '{name}' has shape {arr.shape}, model expects {p.shape}")
            p.data = arr.astype(p.dtype).copy()
        if strict and missing:
            raise CheckpointError(f"checkpoint lacks parameters: {', '.join(missing)}")
        return missing

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self


# -----------------------------
# Dense and convolutional layers
# -----------------------------
class Linear(Module):
    """y = x @ weight + bias, weight stored (in, out)."""

    def __init__(self, in_features: int, out_features: int, rng: RngStream, bias: bool = True):
        self.in_features, self.out_features = in_features, out_features
        self.weight = Parameter(uniform_fan_in(rng, (in_features, out_features), in_features), "weight")
        self.bias = Parameter(uniform_fan_in(rng, (out_features,), in_features), "bias") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ShapeError("linear", f"expected last extent {self.in_features}, got shape {x.shape}")
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int, rng: RngStream, stride: int = 1, padding: int = 0):
        fan_in = in_channels * kernel * kernel
        self.stride, self.padding = stride, padding
        self.weight = Parameter(uniform_fan_in(rng, (out_channels, in_channels, kernel, kernel), fan_in), "weight")
        self.bias = Parameter(uniform_fan_in(rng, (out_channels,), fan_in), "bias")

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Conv3d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel, rng: RngStream, stride=1, padding=0):
        kernel = tuple(kernel)
        fan_in = in_channels * int(np.prod(kernel))
        self.stride, self.padding = tuple(stride), tuple(padding)
        self.weight = Parameter(uniform_fan_in(rng, (out_channels, in_channels) + kernel, fan_in), "weight")
        self.bias = Parameter(uniform_fan_in(rng, (out_channels,), fan_in), "bias")

    def __call__(self, x: Tensor) -> Tensor:
        return conv3d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


# -----------------------------
# Recurrent layers
# -----------------------------
class GRULayer(Module):
    """
    Unidirectional gated-recurrent layer over (B, T, in) inputs.

    Gate order in the packed matrices is (reset, update, candidate):
        r = σ(x W_ir + b_ir + h W_hr + b_hr)
        z = σ(x W_iz + b_iz + h W_hz + b_hz)
        n = tanh(x W_in + b_in + r ⊙ (h W_hn + b_hn))
        h' = (1 − z) ⊙ n + z ⊙ h
    """

    def __init__(self, input_size: int, hidden: int, rng: RngStream):
        self.input_size, self.hidden = input_size, hidden
        self.w_ih = Parameter(uniform_fan_in(rng, (input_size, 3 * hidden), input_size), "w_ih")
        self.w_hh = Parameter(_recurrent_matrix(rng, hidden, 3), "w_hh")
        self.b_ih = Parameter(uniform_fan_in(rng, (3 * hidden,), hidden), "b_ih")
        self.b_hh = Parameter(uniform_fan_in(rng, (3 * hidden,), hidden), "b_hh")

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[2] != self.input_size:
            raise ShapeError("gru", f"expected (B, T, {self.input_size}), got {x.shape}")
        b, t_len, _ = x.shape
        n = self.hidden
        xs = x @ self.w_ih + self.b_ih
        h = Tensor(np.zeros((b, n), dtype=x.dtype))
        outs = []
        for t in range(t_len):
            gx = xs[:, t]
            gh = h @ self.w_hh + self.b_hh
            r = (gx[:, :n] + gh[:, :n]).sigmoid()
            z = (gx[:, n:2 * n] + gh[:, n:2 * n]).sigmoid()
            cand = (gx[:, 2 * n:] + r * gh[:, 2 * n:]).tanh()
            h = (1.0 - z) * cand + z * h
            outs.append(h)
        return stack(outs, axis=1)


class LSTMLayer(Module):
    """Unidirectional long-short-term-memory layer, gate order (input, forget, cell, output)."""

    def __init__(self, input_size: int, hidden: int, rng: RngStream):
        self.input_size, self.hidden = input_size, hidden
        self.w_ih = Parameter(uniform_fan_in(rng, (input_size, 4 * hidden), input_size), "w_ih")
        self.w_hh = Parameter(_recurrent_matrix(rng, hidden, 4), "w_hh")
        self.b_ih = Parameter(uniform_fan_in(rng, (4 * hidden,), hidden), "b_ih")
        self.b_hh = Parameter(uniform_fan_in(rng, (4 * hidden,), hidden), "b_hh")

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[2] != self.input_size:
            raise ShapeError("lstm", f"expected (B, T, {self.input_size}), got {x.shape}")
        b, t_len, _ = x.shape
        n = self.hidden
        xs = x @ self.w_ih + self.b_ih
        h = Tensor(np.zeros((b, n), dtype=x.dtype))
        c = Tensor(np.zeros((b, n), dtype=x.dtype))
        outs = []
        for t in range(t_len):
            gates = xs[:, t] + h @ self.w_hh + self.b_hh
            i = gates[:, :n].sigmoid()
            f = gates[:, n:2 * n].sigmoid()
            g = gates[:, 2 * n:3 * n].tanh()
            o = gates[:, 3 * n:].sigmoid()
            c = f * c + i * g
            h = o * c.tanh()
            outs.append(h)
        return stack(outs, axis=1)


class BiGRU(Module):
    """Forward and time-reversed GRU; output channels are [forward | backward]."""

    def __init__(self, input_size: int, hidden: int, rng: RngStream):
        self.forward_layer = GRULayer(input_size, hidden, rng)
        self.backward_layer = GRULayer(input_size, hidden, rng)

    def __call__(self, x: Tensor) -> Tensor:
        fwd = self.forward_layer(x)
        bwd = self.backward_layer(x.flip(1)).flip(1)
        return concat([fwd, bwd], axis=-1)
