# reports.py
"""
Analysis exports for trained checkpoints: per-class tables with confusable-pair
deltas, per-sequence frame-weight traces, and a 2-D PCA of the pooled
representations.
"""
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from errors import ConfigError, DomainError, VariantError
from model import SequenceClassifier, load_model
from synth import SequenceDataset
from tensor import RngStream
from train import collect_outputs, per_class_accuracy

logger = logging.getLogger(__name__)

ModelSource = Union[str, Path, SequenceClassifier]

PROTOCOL_STREAM = 301


def _model(source: ModelSource) -> SequenceClassifier:
    return source if isinstance(source, SequenceClassifier) else load_model(source)


def write_table(df: pd.DataFrame, path: Union[str, Path], sheet: str = "report") -> Path:
    """CSV by default; `.xlsx` paths go through openpyxl with fitted column widths."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix.lower() != ".xlsx":
        df.to_csv(path, index=False, na_rep="N/A")
        return path
    with pd.ExcelWriter(path, engine="openpyxl") as writer:
        df.fillna("N/A").to_excel(writer, sheet_name=sheet, index=False)
        worksheet = writer.sheets[sheet]
        for column in worksheet.columns:
            longest = max((len(str(cell.value)) for cell in column if cell.value is not None), default=0)
            worksheet.column_dimensions[column[0].column_letter].width = min(longest + 2, 50)
    return path


def predictions_frame(dataset: SequenceDataset, predictions: np.ndarray) -> pd.DataFrame:
    labels = dataset.labels
    return pd.DataFrame(
        {
            "index": np.arange(len(dataset)),
            "label": labels,
            "predicted": np.asarray(predictions, dtype=np.int64),
            "correct": (np.asarray(predictions) == labels).astype(np.int64),
        }
    )


# -----------------------------
# Per-class accuracy
# -----------------------------
def report_per_class(
    checkpoints: Dict[str, ModelSource],
    dataset: SequenceDataset,
    confusable_pairs: Sequence[Tuple[int, int]] = (),
    batch_size: int = 32,
) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """
    Class x variant accuracy table, plus a pair table.

    With more than one checkpoint, `delta_<name>` columns hold the accuracy
    change of each later checkpoint against the first one. Classes absent from
    the dataset get NaN (written as N/A). The pair table lists each configured
    confusable pair and closes with the mean deltas over confusable and over
    the remaining classes.
    """
    if not checkpoints:
        raise DomainError("report_per_class needs at least one checkpoint")
    names = list(checkpoints)
    C = dataset.num_classes
    for pair in confusable_pairs:
        if len(pair) != 2 or not all(0 <= int(c) < C for c in pair):
            raise ConfigError(f"confusable pair {pair} is outside the dataset's {C} classes")
    table = pd.DataFrame({"class": np.arange(C), "count": np.bincount(dataset.labels, minlength=C)[:C]})
    for name in names:
        model = _model(checkpoints[name])
        preds = collect_outputs(model, dataset, batch_size).predictions
        table[f"acc_{name}"] = per_class_accuracy(preds, dataset.labels, C)
        logger.info("[report] %s: %d samples evaluated", name, len(dataset))
    base = names[0]
    for name in names[1:]:
        table[f"delta_{name}"] = table[f"acc_{name}"] - table[f"acc_{base}"]

    pair_rows: List[Dict[str, object]] = []
    in_pairs = sorted({c for pair in confusable_pairs for c in pair})
    for a, b in confusable_pairs:
        row: Dict[str, object] = {"pair": f"{a}-{b}"}
        for name in names:
            row[f"acc_{name}"] = table.loc[[a, b], f"acc_{name}"].mean()
        for name in names[1:]:
            row[f"delta_{name}"] = table.loc[[a, b], f"delta_{name}"].mean()
        pair_rows.append(row)
    others = [c for c in range(C) if c not in in_pairs]
    for label, members in (("confusable", in_pairs), ("other", others)):
        row = {"pair": f"mean_{label}"}
        for name in names:
            row[f"acc_{name}"] = table.loc[members, f"acc_{name}"].mean() if members else np.nan
        for name in names[1:]:
            row[f"delta_{name}"] = table.loc[members, f"delta_{name}"].mean() if members else np.nan
        pair_rows.append(row)
    return table, pd.DataFrame(pair_rows)


# -----------------------------
# Frame weights
# -----------------------------
def export_beta(source: ModelSource, dataset: SequenceDataset, batch_size: int = 32) -> pd.DataFrame:
    """One row per sequence: index, beta_0..beta_{T-1}, start, end."""
    model = _model(source)
    if model.weight_head is None:
        raise VariantError("checkpoint has no frame-weight head (baseline or lmim model)")
    beta = collect_outputs(model, dataset, batch_size).beta
    T = beta.shape[1]
    df = pd.DataFrame(beta, columns=[f"beta_{t}" for t in range(T)])
    df.insert(0, "index", np.arange(len(dataset)))
    df["start"] = dataset.windows[:, 0]
    df["end"] = dataset.windows[:, 1]
    return df


def beta_localization(traces: pd.DataFrame, ratio: float = 2.0) -> float:
    """
    Fraction of sequences whose mean weight inside [start, end) is at least
    `ratio` times the mean weight outside. Rows without a window, or whose
    window covers every frame, are left out.
    """
    beta = traces.filter(regex=r"^beta_\d+$").to_numpy(dtype=np.float64)
    starts, ends = traces["start"].to_numpy(), traces["end"].to_numpy()
    T = beta.shape[1]
    hits, counted = 0, 0
    for row, s, e in zip(beta, starts, ends):
        if e <= s or (s == 0 and e >= T):
            continue
        inside = row[s:e].mean()
        outside = np.concatenate([row[:s], row[e:]]).mean()
        counted += 1
        hits += bool(inside > 0 and inside >= ratio * outside)
    if counted == 0:
        raise DomainError("no sequence has a target window with frames outside it")
    return hits / counted


# -----------------------------
# Representation spread
# -----------------------------
def select_protocol(dataset: SequenceDataset, classes: int = 6, per_class: int = 20, seed: int = 0) -> np.ndarray:
    """Indices of `per_class` random samples from each of `classes` random classes."""
    gen = RngStream(seed, PROTOCOL_STREAM).generator
    present = np.flatnonzero(np.bincount(dataset.labels, minlength=dataset.num_classes))
    chosen = np.sort(gen.choice(present, size=min(classes, len(present)), replace=False))
    picks = []
    for c in chosen:
        members = np.flatnonzero(dataset.labels == c)
        picks.append(np.sort(gen.choice(members, size=min(per_class, len(members)), replace=False)))
    return np.concatenate(picks) if picks else np.zeros(0, dtype=np.int64)


def pca_project(vectors: np.ndarray, components: int = 2) -> Tuple[np.ndarray, np.ndarray]:
    """Centre, eigendecompose the covariance, project onto the leading components (largest first)."""
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise DomainError(f"PCA needs at least 3 samples, got {x.shape[0] if x.ndim else 0}")
    centred = x - x.mean(axis=0)
    cov = centred.T @ centred / (x.shape[0] - 1)
    values, vecs = np.linalg.eigh(cov)
    order = np.argsort(values)[::-1][:components]
    basis = vecs[:, order]
    # sign fix: the largest-magnitude loading of each component is positive
    flip = np.sign(basis[np.argmax(np.abs(basis), axis=0), np.arange(basis.shape[1])])
    basis = basis * np.where(flip == 0, 1.0, flip)
    return centred @ basis, values[order]


def class_variance_ratio(vectors: np.ndarray, labels: np.ndarray) -> float:
    """Between-class over within-class variance (sample-weighted)."""
    x = np.asarray(vectors, dtype=np.float64)
    labels = np.asarray(labels)
    mu = x.mean(axis=0)
    between, within = 0.0, 0.0
    for c in np.unique(labels):
        members = x[labels == c]
        centre = members.mean(axis=0)
        between += len(members) * float(np.sum((centre - mu) ** 2))
        within += float(np.sum((members - centre) ** 2))
    if within == 0.0:
        return float("inf") if between > 0 else float("nan")
    return between / within


def export_pca(
    source: ModelSource,
    dataset: SequenceDataset,
    classes: Optional[Iterable[int]] = None,
    per_class: Optional[int] = None,
    seed: int = 0,
    batch_size: int = 32,
) -> Tuple[pd.DataFrame, float]:
    """
    Project the pooled representations O onto their top two principal axes.

    `classes` restricts to a class subset; with `per_class` set and no
    subset, the random classes x per_class protocol is used (6 classes when
    unspecified). Returns (x, y, class) rows and the class variance ratio of
    the unprojected O.
    """
    if classes is not None:
        keep = np.isin(dataset.labels, list(classes))
        idx = np.flatnonzero(keep)
        if per_class is not None:
            idx = np.concatenate([idx[dataset.labels[idx] == c][:per_class] for c in sorted(set(classes))])
    elif per_class is not None:
        idx = select_protocol(dataset, 6, per_class, seed)
    else:
        idx = np.arange(len(dataset))
    subset = dataset.subset(idx)
    if len(subset) < 3:
        raise DomainError(f"PCA needs at least 3 samples, got {len(subset)}")
    o = collect_outputs(_model(source), subset, batch_size).o
    coords, _ = pca_project(o)
    ratio = class_variance_ratio(o, subset.labels)
    logger.info("[report] pca over %d samples, class variance ratio %.4f", len(subset), ratio)
    return pd.DataFrame({"x": coords[:, 0], "y": coords[:, 1], "class": subset.labels}), ratio
