# synth.py
"""
Synthetic word-in-sequence data.

Every class owns a glyph: a polyline traced as a moving pen. A sample shows the
class glyph being drawn inside a random sub-window [start, end) of the T
frames; the remaining frames animate a dimmed distractor picked from the other
classes' glyphs plus a pool of random paths. The two members of a confusable
pair share all glyph control points but the last.

Samples are a pure function of (seed, class, sample index), so generation can
run on any number of workers and still give identical bytes.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from config import SynthSpec
from errors import DatasetFormatError, DomainError
from tensor import RngStream

logger = logging.getLogger(__name__)

DATASET_MAGIC = b"MIMSEQ01"
DATASET_VERSION = 1
HEADER_BYTES = 28  # magic + version + samples, T, S, C
MAX_RECORD_BYTES = 1 << 31

GLYPH_SEGMENTS = 14
GLYPH_STEP = 0.1
GLYPH_TAG = 1 << 62
DISTRACTOR_TAG = 2 << 62

PEN_HALF_WIDTH = 0.6  # pixels
HEAD_RADIUS = 1.5


@dataclass
class VideoSequence:
    frames: np.ndarray  # (T, 1, S, S) float32 in [0, 1]
    label: int
    window: Optional[Tuple[int, int]] = None

    @property
    def start(self) -> int:
        return self.window[0] if self.window else 0

    @property
    def end(self) -> int:
        return self.window[1] if self.window else 0


# -----------------------------
# Glyphs
# -----------------------------
def _random_walk(gen: np.random.Generator, segments: int = GLYPH_SEGMENTS) -> np.ndarray:
    """Equal-step polyline in unit coordinates, kept inside [0.15, 0.85]^2."""
    pts = [gen.uniform(0.3, 0.7, size=2)]
    heading = gen.uniform(0.0, 2 * np.pi)
    for _ in range(segments):
        heading += gen.normal(0.0, 1.0)
        step = GLYPH_STEP * np.array([np.cos(heading), np.sin(heading)])
        nxt = pts[-1] + step
        for axis in range(2):
            if not 0.15 <= nxt[axis] <= 0.85:
                step[axis] = -step[axis]
        pts.append(np.clip(pts[-1] + step, 0.15, 0.85))
    return np.asarray(pts)


def class_glyph(spec: SynthSpec, cls: int) -> np.ndarray:
    """Control points (GLYPH_SEGMENTS + 1, 2) of a class glyph."""
    if not 0 <= cls < spec.num_classes:
        raise DomainError(f"class {cls} outside [0, {spec.num_classes})")
    for a, b in spec.confusable_pairs:
        if cls == b:
            pts = class_glyph(spec, a).copy()
            gen = RngStream(spec.seed, GLYPH_TAG | cls).generator
            prev = pts[-2]
            # the partner ends on a different final stroke of the same length
            while True:
                angle = gen.uniform(0.0, 2 * np.pi)
                end = np.clip(prev + GLYPH_STEP * np.array([np.cos(angle), np.sin(angle)]), 0.15, 0.85)
                if np.linalg.norm(end - pts[-1]) > 0.5 * GLYPH_STEP:
                    break
            pts[-1] = end
            return pts
    return _random_walk(RngStream(spec.seed, GLYPH_TAG | cls).generator)


def distractor_choices(spec: SynthSpec) -> int:
    """Distractors open to one sample: the other classes' glyphs (when enabled) plus the path pool."""
    return (spec.num_classes - 1 if spec.glyph_distractors else 0) + spec.distractor_pool


def distractor_path(spec: SynthSpec, k: int, cls: int) -> np.ndarray:
    """Choice k for a sample of class `cls`; the own class glyph is never a distractor."""
    if not 0 <= k < distractor_choices(spec):
        raise DomainError(f"distractor {k} outside [0, {distractor_choices(spec)})")
    if spec.glyph_distractors:
        if k < spec.num_classes - 1:
            return class_glyph(spec, k if k < cls else k + 1)
        k -= spec.num_classes - 1
    return _random_walk(RngStream(spec.seed, DISTRACTOR_TAG | k).generator)


def _segment_distance(px: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.linalg.norm(px - a, axis=-1)
    t = np.clip(((px - a) @ ab) / denom, 0.0, 1.0)
    return np.linalg.norm(px - (a + t[..., None] * ab), axis=-1)


def render_trace(points: np.ndarray, progress: float, size: int, head: bool = True) -> np.ndarray:
    """Antialiased drawing of the first `progress` (0..1) of a polyline on a size x size canvas."""
    scaled = points * (size - 1)
    ys, xs = np.mgrid[0:size, 0:size]
    px = np.stack([xs, ys], axis=-1).astype(np.float64)
    canvas = np.zeros((size, size))
    segments = len(scaled) - 1
    reach = float(np.clip(progress, 0.0, 1.0)) * segments
    full = int(np.floor(reach))
    tip = scaled[0]
    for i in range(min(full + 1, segments)):
        a, b = scaled[i], scaled[i + 1]
        if i == full:
            b = a + (reach - full) * (b - a)
        d = _segment_distance(px, a, b)
        canvas = np.maximum(canvas, np.clip(1.0 - np.maximum(d - PEN_HALF_WIDTH, 0.0), 0.0, 1.0))
        tip = b
    if head:
        d = np.linalg.norm(px - tip, axis=-1)
        canvas = np.maximum(canvas, np.clip(1.0 + HEAD_RADIUS - d, 0.0, 1.0))
    return canvas


def _shift(img: np.ndarray, dx: int, dy: int) -> np.ndarray:
    out = np.zeros_like(img)
    h, w = img.shape
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[yd, xd] = img[ys, xs]
    return out


# -----------------------------
# Samples
# -----------------------------
def sample_stream(spec: SynthSpec, cls: int, index: int) -> RngStream:
    return RngStream(spec.seed, (int(cls) << 32) | int(index))


def generate_sample(spec: SynthSpec, cls: int, index: int) -> VideoSequence:
    if not 0 <= cls < spec.num_classes:
        raise DomainError(f"class {cls} outside [0, {spec.num_classes})")
    if index < 0 or index >= 1 << 32:
        raise DomainError(f"sample index {index} outside [0, 2^32)")
    gen = sample_stream(spec, cls, index).generator
    T, S = spec.frames, spec.image_size

    length = int(gen.integers(spec.window_min, spec.window_max + 1))
    start = int(gen.integers(0, T - length + 1))
    warp = gen.uniform(*spec.speed_warp)
    brightness = 1.0 + gen.uniform(-spec.brightness_jitter, spec.brightness_jitter)
    dx, dy = (int(v) for v in gen.integers(-spec.translation, spec.translation + 1, size=2))
    choices = distractor_choices(spec)
    pick = int(gen.integers(0, max(choices, 1)))
    noise = gen.normal(0.0, spec.noise_std, size=(T, S, S)) if spec.noise_std > 0 else np.zeros((T, S, S))

    glyph = class_glyph(spec, cls)
    distractor = distractor_path(spec, pick, cls) if choices > 0 else None
    out_len = max(T - length, 1)

    frames = np.zeros((T, S, S))
    for t in range(T):
        if start <= t < start + length:
            phase = ((t - start + 1) / length) ** warp
            img = render_trace(glyph, phase, S)
        elif distractor is not None:
            j = t if t < start else t - length
            img = spec.distractor_gain * render_trace(distractor, (j + 1) / out_len, S)
        else:
            img = np.zeros((S, S))
        frames[t] = _shift(img, dx, dy) * brightness
    frames = np.clip(frames + noise, 0.0, 1.0).astype(np.float32)
    return VideoSequence(frames.reshape(T, 1, S, S), int(cls), (start, start + length))


# -----------------------------
# Datasets
# -----------------------------
@dataclass
class SequenceDataset:
    frames: np.ndarray  # (n, T, 1, S, S) float32
    labels: np.ndarray  # (n,) int64
    windows: np.ndarray  # (n, 2) int64, [start, end); absent = (0, 0)
    num_classes: int

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def frames_per_sample(self) -> int:
        return int(self.frames.shape[1])

    @property
    def image_size(self) -> int:
        return int(self.frames.shape[-1])

    def __getitem__(self, i: int) -> VideoSequence:
        s, e = (int(v) for v in self.windows[i])
        return VideoSequence(self.frames[i], int(self.labels[i]), (s, e) if e > s else None)

    def subset(self, idx: Sequence[int]) -> "SequenceDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return SequenceDataset(self.frames[idx], self.labels[idx], self.windows[idx], self.num_classes)

    def batches(self, batch_size: int, rng: Optional[RngStream] = None) -> Iterator[np.ndarray]:
        """Index batches; shuffled when `rng` is given. A trailing batch of one is dropped."""
        order = np.arange(len(self))
        if rng is not None:
            order = rng.generator.permutation(order)
        for lo in range(0, len(order), batch_size):
            idx = order[lo:lo + batch_size]
            if len(idx) >= 2:
                yield idx

    @classmethod
    def from_samples(cls, samples: Iterable[VideoSequence], num_classes: int) -> "SequenceDataset":
        samples = list(samples)
        if not samples:
            raise DatasetFormatError("cannot build a dataset from zero samples")
        shapes = {s.frames.shape for s in samples}
        if len(shapes) != 1:
            raise DatasetFormatError(f"inconsistent sample extents: {sorted(shapes)}")
        frames = np.stack([np.asarray(s.frames, dtype=np.float32) for s in samples])
        if frames.ndim == 4:
            frames = frames[:, :, None]
        labels = np.array([s.label for s in samples], dtype=np.int64)
        windows = np.array([[s.start, s.end] for s in samples], dtype=np.int64)
        return cls(frames, labels, windows, num_classes)


def split_indices(spec: SynthSpec, split: str) -> List[Tuple[int, int]]:
    """(class, sample index) pairs; labels assigned round-robin, test indices offset from train."""
    if split == "train":
        n, offset = spec.train_per_class * spec.num_classes, 0
    elif split == "test":
        n, offset = spec.test_per_class * spec.num_classes, spec.test_index_offset
    else:
        raise DomainError(f"unknown split '{split}' (train | test)")
    return [(i % spec.num_classes, offset + i) for i in range(n)]


def generate_split(spec: SynthSpec, split: str, workers: int = 1) -> SequenceDataset:
    spec.validate()
    keys = split_indices(spec, split)
    logger.info("[synth] %s split: %d samples, %d classes, workers=%d", split, len(keys), spec.num_classes, workers)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            samples = list(pool.map(lambda k: generate_sample(spec, *k), keys))
    else:
        samples = [generate_sample(spec, c, i) for c, i in keys]
    return SequenceDataset.from_samples(samples, spec.num_classes)


def class_balance(dataset: Union[SequenceDataset, Sequence[VideoSequence]], num_classes: Optional[int] = None) -> np.ndarray:
    if isinstance(dataset, SequenceDataset):
        labels, num_classes = dataset.labels, num_classes or dataset.num_classes
    else:
        labels = np.array([s.label for s in dataset], dtype=np.int64)
    if num_classes is None:
        raise DomainError("class_balance needs num_classes for a plain sample list")
    return np.bincount(np.asarray(labels, dtype=np.int64), minlength=num_classes)[:num_classes]


def shuffle_outside_window(dataset: SequenceDataset, rng: RngStream) -> SequenceDataset:
    """
    Copy in which, at every frame position, the frames lying outside their
    sample's [start, end) are permuted across samples. Window frames stay put;
    samples without a window count as all-outside.
    """
    T = dataset.frames_per_sample
    starts, ends = dataset.windows[:, 0], dataset.windows[:, 1]
    frames = dataset.frames.copy()
    for t in range(T):
        outside = np.flatnonzero((ends == 0) | (t < starts) | (t >= ends))
        if len(outside) > 1:
            frames[outside, t] = dataset.frames[rng.generator.permutation(outside), t]
    return SequenceDataset(frames, dataset.labels.copy(), dataset.windows.copy(), dataset.num_classes)


# -----------------------------
# DatasetFile
# -----------------------------
def _record_dtype(frames: int, size: int) -> np.dtype:
    return np.dtype([("label", "<u4"), ("start", "<u4"), ("end", "<u4"), ("frames", "<f4", (frames, size, size))])


def write_dataset(dataset: Union[SequenceDataset, Sequence[VideoSequence]], path: Union[str, Path], num_classes: Optional[int] = None) -> Path:
    """
    Header: magic 'MIMSEQ01', then version, samples, T, S, C as u32 LE.
    Records: label, start, end as u32 LE, then T*S*S float32 LE.
    """
    if not isinstance(dataset, SequenceDataset):
        if num_classes is None:
            raise DatasetFormatError("num_classes is required when writing a plain sample list")
        dataset = SequenceDataset.from_samples(dataset, num_classes)
    n, T = len(dataset), dataset.frames_per_sample
    S = dataset.image_size
    records = np.zeros(n, dtype=_record_dtype(T, S))
    records["label"] = dataset.labels
    records["start"] = dataset.windows[:, 0]
    records["end"] = dataset.windows[:, 1]
    records["frames"] = dataset.frames.reshape(n, T, S, S)
    header = np.array([DATASET_VERSION, n, T, S, dataset.num_classes], dtype="<u4")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(header.tobytes())
        f.write(records.tobytes())
    logger.info("[synth] wrote %d samples to %s", n, path)
    return path


def read_dataset(path: Union[str, Path]) -> SequenceDataset:
    path = Path(path)
    try:
        f = open(path, "rb")
    except OSError as e:
        raise DatasetFormatError(f"cannot open dataset {path}: {e}") from None
    with f:
        magic = f.read(8)
        if magic != DATASET_MAGIC:
            raise DatasetFormatError(f"{path}: bad magic {magic!r}", offset=0)
        raw = f.read(HEADER_BYTES - 8)
        if len(raw) != HEADER_BYTES - 8:
            raise DatasetFormatError(f"{path}: header truncated", offset=8 + len(raw))
        version, n, T, S, C = (int(v) for v in np.frombuffer(raw, dtype="<u4"))
        if version != DATASET_VERSION:
            raise DatasetFormatError(f"{path}: unsupported version {version}", offset=8)
        if min(T, S, C) < 1:
            raise DatasetFormatError(f"{path}: zero extent in header (T={T}, S={S}, C={C})", offset=12)
        record_bytes = 12 + 4 * T * S * S
        if record_bytes > MAX_RECORD_BYTES:
            raise DatasetFormatError(f"{path}: extent overflow, record of {record_bytes} bytes", offset=12)
        payload = f.read()

    expected = n * record_bytes
    if len(payload) < expected:
        k = len(payload) // record_bytes
        raise DatasetFormatError(
            f"{path}: truncated in record {k} of {n}",
            offset=HEADER_BYTES + k * record_bytes,
        )
    if len(payload) > expected:
        raise DatasetFormatError(f"{path}: {len(payload) - expected} trailing bytes after last record", offset=HEADER_BYTES + expected)

    records = np.frombuffer(payload, dtype=_record_dtype(T, S), count=n)
    labels = records["label"].astype(np.int64)
    starts, ends = records["start"].astype(np.int64), records["end"].astype(np.int64)
    bad = np.flatnonzero((labels >= C) | (ends > T) | ((ends > 0) & (starts >= ends)) | ((ends == 0) & (starts != 0)))
    if bad.size:
        k = int(bad[0])
        raise DatasetFormatError(
            f"{path}: record {k} out of range (label={labels[k]}, window=[{starts[k]}, {ends[k]}))",
            offset=HEADER_BYTES + k * record_bytes,
        )
    frames = records["frames"].reshape(n, T, 1, S, S).copy()
    return SequenceDataset(frames, labels, np.stack([starts, ends], axis=1), C)
