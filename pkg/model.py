# model.py
"""
Conv-recurrent word classifier.

Front-end: 3D conv (temporal stride 1, T preserved) -> spatial max-pool ->
per-frame residual 2D backbone -> GAP. Back-end: stacked bidirectional GRUs,
temporal pooling (plain mean, or frame-weighted when the weight head is on),
linear classifier.
"""
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from config import ModelConfig, from_text, to_text
from errors import CheckpointError, ConfigError, ShapeError
from gmim import WeightHead, weighted_pool
from layers import BiGRU, Conv2d, Conv3d, Linear, Module
from tensor import RngStream, Tensor, dropout, max_pool2d, no_grad

logger = logging.getLogger(__name__)

CKPT_MAGIC = b"MIMCKPT1"
CKPT_VERSION = 1

# init streams per component so variants share identical shared-part weights
FRONTEND_STREAM, BACKEND_STREAM, CLASSIFIER_STREAM, HEAD_STREAM = 101, 102, 103, 104


class ResidualBlock(Module):
    """conv3x3 -> ReLU -> conv3x3, plus identity (or 1x1 projection) shortcut, then ReLU."""

    def __init__(self, in_channels: int, out_channels: int, stride: int, rng: RngStream):
        self.conv1 = Conv2d(in_channels, out_channels, 3, rng, stride=stride, padding=1)
        self.conv2 = Conv2d(out_channels, out_channels, 3, rng, stride=1, padding=1)
        self.shortcut = None
        if in_channels != out_channels or stride != 1:
            self.shortcut = Conv2d(in_channels, out_channels, 1, rng, stride=stride)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.conv2(self.conv1(x).relu())
        skip = self.shortcut(x) if self.shortcut is not None else x
        return (h + skip).relu()


class FrontEnd(Module):
    def __init__(self, cfg: ModelConfig, rng: RngStream):
        self.config = cfg
        c = cfg.frontend_channels
        self.conv3d = Conv3d(1, c, cfg.conv3d_kernel, rng, stride=cfg.conv3d_stride, padding=cfg.conv3d_padding)
        self.stem = Conv2d(c, c, 7, rng, stride=2, padding=3) if cfg.resnet_stem else None
        blocks = []
        for out_c, stride in zip(cfg.backbone_channels, cfg.backbone_strides):
            blocks.append(ResidualBlock(c, out_c, stride, rng))
            c = out_c
        self.blocks = blocks

    def volume(self, frames: Tensor) -> Tensor:
        """(B, T, 1, S, S) -> 3D-conv activations (B, C, T, H, W)."""
        cfg = self.config
        if frames.ndim != 5 or frames.shape[1:] != (cfg.frames, 1, cfg.image_size, cfg.image_size):
            raise ShapeError(
                "frontend",
                f"expected (B, {cfg.frames}, 1, {cfg.image_size}, {cfg.image_size}), got {frames.shape}",
            )
        return self.conv3d(frames.transpose(0, 2, 1, 3, 4)).relu()

    def __call__(self, frames: Tensor) -> Tuple[Tensor, Tensor]:
        b, t = frames.shape[:2]
        x = self.volume(frames)
        c, h, w = x.shape[1], x.shape[3], x.shape[4]
        x = x.transpose(0, 2, 1, 3, 4).reshape(b * t, c, h, w)
        x = max_pool2d(x, self.config.pool_window)
        if self.stem is not None:
            x = max_pool2d(self.stem(x).relu(), 3, 2)
        for block in self.blocks:
            x = block(x)
        maps = x
        g = maps.mean(axis=(2, 3)).reshape(b, t, maps.shape[1])
        return g, maps


class BackEnd(Module):
    def __init__(self, cfg: ModelConfig, rng: RngStream):
        self.keep_prob = cfg.keep_prob
        layers = []
        size = cfg.feature_channels
        for _ in range(cfg.gru_layers):
            layers.append(BiGRU(size, cfg.gru_hidden, rng))
            size = 2 * cfg.gru_hidden
        self.layers = layers

    def __call__(self, g: Tensor, rng: Optional[RngStream] = None) -> Tensor:
        z = g
        for i, layer in enumerate(self.layers):
            if i > 0:
                z = dropout(z, self.keep_prob, rng, self.training)
            z = layer(z)
        return z


@dataclass
class ForwardOutputs:
    feature_maps: Tensor  # (B*T, D, H, W), pre-GAP
    g: Tensor  # (B, T, D)
    z: Tensor  # (B, T, 2N)
    beta: Optional[Tensor]  # (B, T) when the weight head is on
    o: Tensor  # (B, 2N)
    logits: Tensor  # (B, C)

    def named(self) -> List[Tuple[str, Tensor]]:
        items = [("feature_maps", self.feature_maps), ("g", self.g), ("z", self.z)]
        if self.beta is not None:
            items.append(("beta", self.beta))
        return items + [("o", self.o), ("logits", self.logits)]


class SequenceClassifier(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.config = cfg.validate()
        self.frontend = FrontEnd(cfg, RngStream(seed, FRONTEND_STREAM))
        self.backend = BackEnd(cfg, RngStream(seed, BACKEND_STREAM))
        self.classifier = Linear(2 * cfg.gru_hidden, cfg.num_classes, RngStream(seed, CLASSIFIER_STREAM))
        self.weight_head = None
        if cfg.frame_weights:
            self.weight_head = WeightHead(cfg.feature_channels, cfg.weight_head_hidden, RngStream(seed, HEAD_STREAM))

    def __call__(self, frames, rng: Optional[RngStream] = None, freeze_frontend: bool = False) -> ForwardOutputs:
        x = as_frames(frames)
        if freeze_frontend:
            with no_grad():
                g, maps = self.frontend(x)
        else:
            g, maps = self.frontend(x)
        z = self.backend(g, rng)
        if self.weight_head is not None:
            beta = self.weight_head(g)
            o = weighted_pool(z, beta)
        else:
            beta = None
            o = z.mean(axis=1)
        return ForwardOutputs(maps, g, z, beta, o, self.classifier(o))


def as_frames(frames) -> Tensor:
    """Accept (B, T, S, S) or (B, T, 1, S, S) arrays/tensors; float input keeps its dtype, anything else becomes float32."""
    if not isinstance(frames, Tensor):
        arr = np.asarray(frames)
        dtype = arr.dtype if np.issubdtype(arr.dtype, np.floating) else np.float32
        frames = Tensor(arr.astype(dtype, copy=False))
    if frames.ndim == 4:
        frames = frames.reshape(frames.shape[0], frames.shape[1], 1, frames.shape[2], frames.shape[3])
    return frames


def frontend_forward(model: SequenceClassifier, frames) -> Tuple[Tensor, Tensor]:
    """G (B, T, D) and the per-frame pre-GAP feature maps (B*T, D, H, W)."""
    return model.frontend(as_frames(frames))


def backend_forward(model: SequenceClassifier, g: Tensor, rng: Optional[RngStream] = None) -> Tensor:
    if g.ndim != 3 or g.shape[2] != model.config.feature_channels:
        raise ShapeError("backend", f"expected (B, T, {model.config.feature_channels}), got {g.shape}")
    return model.backend(g, rng)


def classify(logits: Union[Tensor, np.ndarray]) -> np.ndarray:
    """Softmax class probabilities over the last axis."""
    t = logits if isinstance(logits, Tensor) else Tensor(np.asarray(logits, dtype=np.float64))
    return t.softmax(axis=-1).data


# -----------------------------
# Checkpoints
# -----------------------------
@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: Dict[str, np.ndarray]

    def model_state(self) -> Dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if not k.startswith(("lmim.", "gmim."))}

    def aux_state(self, prefix: str) -> Dict[str, np.ndarray]:
        cut = len(prefix) + 1
        return {k[cut:]: v for k, v in self.tensors.items() if k.startswith(prefix + ".")}


def save_checkpoint(path: Union[str, Path], model: SequenceClassifier, aux: Optional[Dict[str, Module]] = None) -> Path:
    """
    Layout (little-endian): magic 'MIMCKPT1', u32 version, u32 config length,
    config text (KEY=value lines), u32 tensor count, then per tensor: u32 name
    length, name, u32 ndim, ndim x u32 extents, float32 data.
    """
    tensors = list(model.state_dict().items())
    for prefix, module in (aux or {}).items():
        if module is not None:
            tensors += [(f"{prefix}.{n}", a) for n, a in module.state_dict().items()]
    cfg_text = to_text(model.config).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(cfg_text)))
        f.write(cfg_text)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            nb = name.encode("utf-8")
            arr = np.asarray(arr)
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return path


def read_checkpoint(path: Union[str, Path]) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None

    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"checkpoint truncated at byte offset {pos}")
        out = blob[pos:pos + n]
        pos += n
        return out

    if take(8) != CKPT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    version, cfg_len = struct.unpack("<II", take(8))
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    cfg_at = pos
    try:
        config = from_text(ModelConfig, take(cfg_len).decode("utf-8")).validate()
    except (UnicodeDecodeError, ConfigError) as e:
        raise CheckpointError(f"corrupt config block at byte offset {cfg_at}: {e}") from None
    (count,) = struct.unpack("<I", take(4))
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name_at = pos
        try:
            name = take(name_len).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"corrupt tensor name at byte offset {name_at}") from None
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(blob):
        raise CheckpointError(f"trailing bytes after tensor {count} at byte offset {pos}")
    return Checkpoint(config, tensors)


def load_model(path: Union[str, Path], config: Optional[ModelConfig] = None, strict: bool = True) -> SequenceClassifier:
    """Build the classifier stored in a checkpoint; discriminator tensors are ignored."""
    ckpt = read_checkpoint(path)
    model = SequenceClassifier(config or ckpt.config)
    model.load_state_dict(ckpt.model_state(), strict=strict)
    return model.eval()
