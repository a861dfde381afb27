# train.py
"""
Training and evaluation.

One Adam instance drives the classifier and the live discriminators together
on L_total = CE - L_LMIM - L_GMIM, so the network descends the cross-entropy
while the discriminators ascend the MI bounds. The backend-then-joint schedule
freezes the front-end for the first `phase1_epochs` epochs.
"""
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from config import ModelConfig, SynthSpec, TrainConfig, VARIANTS
from db import insert_df
from errors import NonFiniteLossError, VariantError
from gmim import GlobalDiscriminator, gmim_objective
from gradcheck import GradCheckReport, grad_check
from layers import Module
from lmim import LocalDiscriminator, lmim_loss
from mi import unpaired_permutation
from model import ForwardOutputs, SequenceClassifier, read_checkpoint, save_checkpoint
from optim import Adam, lr_schedule
from synth import SequenceDataset, generate_sample, read_dataset
from tensor import RngStream, Tensor, default_dtype, no_grad

logger = logging.getLogger(__name__)

SHUFFLE_STREAM, DROPOUT_STREAM, SAMPLER_STREAM = 1, 2, 3
LMIM_STREAM, GMIM_STREAM = 201, 202

METRIC_COLUMNS = ["epoch", "phase", "split", "accuracy", "lr", "cross_entropy", "l_lmim", "l_gmim", "total"]


# -----------------------------
# Loss
# -----------------------------
@dataclass
class LossBreakdown:
    cross_entropy: float
    l_lmim: float = 0.0
    l_gmim: float = 0.0
    total: float = 0.0

    @classmethod
    def compose(cls, cross_entropy: float, l_lmim: float = 0.0, l_gmim: float = 0.0) -> "LossBreakdown":
        return cls(cross_entropy, l_lmim, l_gmim, cross_entropy - l_lmim - l_gmim)


class MimHeads(Module):
    """The discriminators a variant trains; absent heads are None."""

    def __init__(self, lmim: Optional[LocalDiscriminator] = None, gmim: Optional[GlobalDiscriminator] = None):
        self.lmim = lmim
        self.gmim = gmim


def build_heads(cfg: ModelConfig, variant: str, seed: int = 0) -> MimHeads:
    if variant not in VARIANTS:
        raise VariantError(f"unknown variant '{variant}' (expected one of {', '.join(VARIANTS)})")
    if variant == "baseline":
        return MimHeads()
    lmim = LocalDiscriminator(cfg.feature_channels, cfg.num_classes, cfg.lmim_width, RngStream(seed, LMIM_STREAM))
    gmim = None
    if variant == "glmim":
        gmim = GlobalDiscriminator(2 * cfg.gru_hidden, cfg.num_classes, cfg.gmim_hidden, RngStream(seed, GMIM_STREAM))
    return MimHeads(lmim, gmim)


def variant_model_config(cfg: ModelConfig, variant: str) -> ModelConfig:
    """glmim needs the frame-weight head; the other variants pool by temporal mean."""
    return replace(cfg, frame_weights=(variant == "glmim"))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """-sum_i Y_i log Yhat_i averaged over the batch."""
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    onehot = np.zeros((b, c), dtype=logits.dtype)
    onehot[np.arange(b), labels] = 1
    return -(logits.log_softmax(axis=-1) * Tensor(onehot)).sum() * (1.0 / b)


def total_loss(
    outputs: ForwardOutputs,
    labels: np.ndarray,
    variant: str,
    heads: Optional[MimHeads] = None,
    perm: Optional[np.ndarray] = None,
) -> Tuple[Tensor, LossBreakdown, Dict[str, Tensor]]:
    """Returns the differentiable total, its float breakdown and the named term tensors."""
    if variant not in VARIANTS:
        raise VariantError(f"unknown variant '{variant}' (expected one of {', '.join(VARIANTS)})")
    heads = heads or MimHeads()
    ce = cross_entropy(outputs.logits, labels)
    terms: Dict[str, Tensor] = {"cross_entropy": ce}
    total = ce
    if variant in ("lmim", "glmim"):
        if heads.lmim is None or perm is None:
            raise VariantError(f"variant '{variant}' needs a local discriminator and an unpaired permutation")
        t = outputs.g.shape[1]
        terms["l_lmim"] = lmim_loss(outputs.feature_maps, labels, perm, t, heads.lmim)
        total = total - terms["l_lmim"]
    if variant == "glmim":
        if heads.gmim is None or outputs.beta is None:
            raise VariantError("variant 'glmim' needs a global discriminator and the frame-weight head")
        terms["l_gmim"] = gmim_objective(outputs.o, labels, perm, heads.gmim)
        total = total - terms["l_gmim"]
    terms["total"] = total
    breakdown = LossBreakdown.compose(
        float(ce.data),
        float(terms["l_lmim"].data) if "l_lmim" in terms else 0.0,
        float(terms["l_gmim"].data) if "l_gmim" in terms else 0.0,
    )
    return total, breakdown, terms


def check_finite(named: List[Tuple[str, Tensor]], where: str = "") -> None:
    for name, t in named:
        if not np.isfinite(t.data).all():
            raise NonFiniteLossError(name, where)


# -----------------------------
# Evaluation
# -----------------------------
@dataclass
class Collected:
    logits: np.ndarray
    o: np.ndarray
    beta: Optional[np.ndarray]

    @property
    def predictions(self) -> np.ndarray:
        return self.logits.argmax(axis=1)


def collect_outputs(model: SequenceClassifier, dataset: SequenceDataset, batch_size: int = 32) -> Collected:
    """Eval-mode forward over a dataset in order; no graph is recorded."""
    was_training = model.training
    model.eval()
    logits, reps, betas = [], [], []
    with no_grad():
        for lo in range(0, len(dataset), batch_size):
            out = model(dataset.frames[lo:lo + batch_size])
            logits.append(out.logits.data)
            reps.append(out.o.data)
            if out.beta is not None:
                betas.append(out.beta.data)
    model.train(was_training)
    width = 2 * model.config.gru_hidden
    return Collected(
        np.concatenate(logits) if logits else np.zeros((0, model.config.num_classes)),
        np.concatenate(reps) if reps else np.zeros((0, width)),
        np.concatenate(betas) if betas else None,
    )


def per_class_accuracy(predictions: np.ndarray, labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Accuracy per class; NaN where the class has no samples."""
    labels = np.asarray(labels, dtype=np.int64)
    correct = np.bincount(labels, weights=(np.asarray(predictions) == labels).astype(np.float64), minlength=num_classes)
    counts = np.bincount(labels, minlength=num_classes)
    out = np.full(num_classes, np.nan)
    np.divide(correct[:num_classes], counts[:num_classes], out=out, where=counts[:num_classes] > 0)
    return out


def accuracy(predictions: np.ndarray, labels: np.ndarray) -> float:
    labels = np.asarray(labels)
    return float(np.mean(np.asarray(predictions) == labels)) if labels.size else float("nan")


def evaluation_loss(
    model: SequenceClassifier,
    dataset: SequenceDataset,
    variant: str,
    heads: MimHeads,
    batch_size: int = 32,
) -> Tuple[np.ndarray, LossBreakdown]:
    """Predictions and sample-weighted loss breakdown; unpaired labels use a cyclic shift of one."""
    model.eval()
    preds, sums, seen = [], np.zeros(3), np.zeros(3)
    with no_grad():
        for lo in range(0, len(dataset), batch_size):
            frames = dataset.frames[lo:lo + batch_size]
            labels = dataset.labels[lo:lo + batch_size]
            out = model(frames)
            preds.append(out.logits.data.argmax(axis=1))
            b = len(labels)
            live = variant if b >= 2 else "baseline"
            perm = (np.arange(b) + 1) % b
            _, parts, terms = total_loss(out, labels, live, heads, perm)
            # MI terms average over the samples that evaluated them
            counted = np.array([b, b * ("l_lmim" in terms), b * ("l_gmim" in terms)])
            sums += counted * np.array([parts.cross_entropy, parts.l_lmim, parts.l_gmim])
            seen += counted
    model.train()
    mean = sums / np.maximum(seen, 1)
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64), LossBreakdown.compose(*mean)


def metrics_row(
    epoch: int,
    phase: int,
    split: str,
    predictions: np.ndarray,
    labels: np.ndarray,
    num_classes: int,
    lr: float,
    parts: LossBreakdown,
    seconds: Optional[float] = None,
) -> Dict[str, object]:
    row: Dict[str, object] = {
        "epoch": epoch,
        "phase": phase,
        "split": split,
        "accuracy": accuracy(predictions, labels),
        "lr": lr,
        "cross_entropy": parts.cross_entropy,
        "l_lmim": parts.l_lmim,
        "l_gmim": parts.l_gmim,
        "total": parts.total,
    }
    for c, acc in enumerate(per_class_accuracy(predictions, labels, num_classes)):
        row[f"acc_class_{c}"] = acc
    if seconds is not None:
        row["seconds"] = seconds
    return row


def append_metrics(path: Path, rows: List[Dict[str, object]]) -> pd.DataFrame:
    """Append rows to the metrics CSV (header on first write); empty classes are written as N/A."""
    df = pd.DataFrame(rows)
    first = not path.exists()
    df.to_csv(path, mode="w" if first else "a", header=first, index=False, na_rep="N/A")
    return df


# -----------------------------
# Training
# -----------------------------
@dataclass
class TrainResult:
    checkpoint: Path
    metrics_path: Path
    metrics: pd.DataFrame
    test_accuracy: float
    model: SequenceClassifier = field(repr=False)
    heads: MimHeads = field(repr=False)


def _as_dataset(data: Union[str, Path, SequenceDataset]) -> SequenceDataset:
    return data if isinstance(data, SequenceDataset) else read_dataset(data)


def train(
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    train_data: Union[str, Path, SequenceDataset],
    test_data: Union[str, Path, SequenceDataset],
    out_dir: Union[str, Path],
    init_from: Optional[Union[str, Path]] = None,
    name: Optional[str] = None,
    run_id: Optional[int] = None,
) -> TrainResult:
    cfg.validate()
    model_cfg = variant_model_config(model_cfg, cfg.variant)
    train_set, test_set = _as_dataset(train_data), _as_dataset(test_data)
    for label, ds in (("train", train_set), ("test", test_set)):
        if ds.num_classes != model_cfg.num_classes or ds.frames_per_sample != model_cfg.frames or ds.image_size != model_cfg.image_size:
            model_cfg = _adopt_extents(model_cfg, ds, label)

    model = SequenceClassifier(model_cfg, seed=cfg.seed)
    heads = build_heads(model_cfg, cfg.variant, seed=cfg.seed)
    if init_from is not None:
        ckpt = read_checkpoint(init_from)
        left = model.load_state_dict(ckpt.model_state(), strict=False)
        if heads.lmim is not None and ckpt.aux_state("lmim"):
            heads.lmim.load_state_dict(ckpt.aux_state("lmim"))
        logger.info("[train] initialized from %s (%d parameters kept fresh)", init_from, len(left))

    opt = Adam(model.parameters() + heads.parameters(), lr=cfg.lr_start, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)
    if model.weight_head is not None:
        opt.scale_lr(model.weight_head.parameters(), cfg.head_lr_scale)
    shuffle = RngStream(cfg.seed, SHUFFLE_STREAM)
    drop = RngStream(cfg.seed, DROPOUT_STREAM)
    sampler = RngStream(cfg.seed, SAMPLER_STREAM)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    name = name or f"{cfg.variant}_seed{cfg.seed}"
    metrics_path = out_dir / f"{name}_metrics.csv"
    if metrics_path.exists():
        metrics_path.unlink()

    logger.info(
        "[train] %s: variant=%s schedule=%s epochs=%d batch=%d params=%d heads=%d",
        name, cfg.variant, cfg.phase_schedule, cfg.epochs, cfg.batch_size,
        model.num_parameters(), heads.num_parameters(),
    )

    lr, history, tables = cfg.lr_start, [], []
    test_acc = float("nan")
    for epoch in range(1, cfg.epochs + 1):
        phase = 1 if cfg.phase_schedule == "backend-then-joint" and epoch <= cfg.phase1_epochs else 2
        frozen = phase == 1
        if frozen:
            opt.freeze(model.frontend.parameters())
        else:
            opt.unfreeze()
        opt.lr = lr
        model.train()
        heads.train()
        started = time.perf_counter()

        preds, labels_seen, sums, seen = [], [], np.zeros(3), 0
        for step, idx in enumerate(train_set.batches(cfg.batch_size, shuffle)):
            labels = train_set.labels[idx]
            opt.zero_grad()
            out = model(train_set.frames[idx], rng=drop, freeze_frontend=frozen)
            perm = unpaired_permutation(len(idx), sampler)
            loss, parts, terms = total_loss(out, labels, cfg.variant, heads, perm)
            where = f"epoch {epoch} step {step}"
            check_finite(out.named(), where)
            check_finite(list(terms.items()), where)
            loss.backward()
            opt.step()

            preds.append(out.logits.data.argmax(axis=1))
            labels_seen.append(labels)
            sums += len(idx) * np.array([parts.cross_entropy, parts.l_lmim, parts.l_gmim])
            seen += len(idx)
            logger.debug("[train] %s step %d: ce=%.4f lmim=%.4f gmim=%.4f", where, step, parts.cross_entropy, parts.l_lmim, parts.l_gmim)

        seconds = time.perf_counter() - started if cfg.record_wallclock else None
        train_parts = LossBreakdown.compose(*(sums / max(seen, 1)))
        test_preds, test_parts = evaluation_loss(model, test_set, cfg.variant, heads, cfg.batch_size)
        test_acc = accuracy(test_preds, test_set.labels)
        rows = [
            metrics_row(epoch, phase, "train", np.concatenate(preds), np.concatenate(labels_seen), model_cfg.num_classes, lr, train_parts, seconds),
            metrics_row(epoch, phase, "test", test_preds, test_set.labels, model_cfg.num_classes, lr, test_parts, seconds),
        ]
        tables.append(append_metrics(metrics_path, rows))
        logger.info(
            "[train] epoch %d phase %d: train_acc=%.4f test_acc=%.4f ce=%.4f lmim=%.4f gmim=%.4f lr=%.1e",
            epoch, phase, rows[0]["accuracy"], test_acc, train_parts.cross_entropy, train_parts.l_lmim, train_parts.l_gmim, lr,
        )

        history.append(test_acc)
        lr = lr_schedule(history, lr, patience=cfg.patience, floor=cfg.lr_floor)

    metrics = pd.concat(tables, ignore_index=True)
    if run_id is not None:
        insert_df(run_id, "train", metrics.assign(run=name))
    ckpt_path = save_checkpoint(out_dir / f"{name}.ckpt", model, aux={"lmim": heads.lmim, "gmim": heads.gmim})
    logger.info("[train] %s finished: test_acc=%.4f checkpoint=%s", name, test_acc, ckpt_path)
    return TrainResult(ckpt_path, metrics_path, metrics, test_acc, model, heads)


def _adopt_extents(cfg: ModelConfig, ds: SequenceDataset, label: str) -> ModelConfig:
    """Datasets define T, S and C; the model config follows them."""
    logger.info(
        "[train] %s set extents T=%d S=%d C=%d override model config", label, ds.frames_per_sample, ds.image_size, ds.num_classes
    )
    return replace(cfg, frames=ds.frames_per_sample, image_size=ds.image_size, num_classes=ds.num_classes)


def loss_grad_check(
    model_cfg: ModelConfig,
    variant: str = "glmim",
    seed: int = 0,
    max_elements: Optional[int] = 3,
    tolerance: float = 1e-3,
) -> GradCheckReport:
    """
    Finite-difference check of L_total on a 2-sample batch in 64-bit mode,
    covering the classifier and every live discriminator. Dropout is on, with
    the mask stream rebuilt per evaluation so the loss is a pure function.
    """
    model_cfg = variant_model_config(model_cfg, variant)
    spec = SynthSpec(
        num_classes=model_cfg.num_classes,
        frames=model_cfg.frames,
        image_size=model_cfg.image_size,
        window_min=min(2, model_cfg.frames),
        window_max=model_cfg.frames,
        confusable_pairs=(),
        seed=seed,
    )
    samples = [generate_sample(spec, c % model_cfg.num_classes, i) for i, c in enumerate((0, 1))]
    frames = np.stack([s.frames for s in samples]).astype(np.float64)
    labels = np.array([s.label for s in samples])
    perm = np.array([1, 0])
    with default_dtype(np.float64):
        model = SequenceClassifier(model_cfg, seed=seed).train()
        heads = build_heads(model_cfg, variant, seed=seed)

        def loss() -> Tensor:
            out = model(frames, rng=RngStream(seed, DROPOUT_STREAM))
            return total_loss(out, labels, variant, heads, perm)[0]

        named = list(model.named_parameters()) + list(heads.named_parameters("heads."))
        return grad_check(loss, named, tolerance=tolerance, max_elements=max_elements, rng=RngStream(seed, 9))
