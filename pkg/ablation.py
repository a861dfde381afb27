# ablation.py
"""
Baseline / +LMIM / +GLMIM ablation over several seeds.

Per seed: baseline and lmim train from scratch with the joint schedule; glmim
starts from that seed's lmim checkpoint (classifier and local discriminator)
and runs backend-then-joint.
"""
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import pandas as pd

from config import ModelConfig, TrainConfig
from reports import report_per_class, write_table
from synth import SequenceDataset, read_dataset
from train import TrainResult, train

logger = logging.getLogger(__name__)


@dataclass
class AblationResult:
    runs: pd.DataFrame  # seed, variant, test_accuracy, checkpoint
    summary: pd.DataFrame  # variant, mean_accuracy, std_accuracy, seeds
    per_class: pd.DataFrame  # seed-averaged class x variant table
    pairs: pd.DataFrame  # seed-averaged confusable-pair rows

    def mean_accuracy(self, variant: str) -> float:
        return float(self.summary.set_index("variant").loc[variant, "mean_accuracy"])


def run_seed(
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    train_set: SequenceDataset,
    test_set: SequenceDataset,
    out_dir: Path,
    seed: int,
    run_id: Optional[int] = None,
) -> Dict[str, TrainResult]:
    results: Dict[str, TrainResult] = {}
    for variant in ("baseline", "lmim"):
        step = replace(cfg, variant=variant, seed=seed, phase_schedule="joint")
        results[variant] = train(step, model_cfg, train_set, test_set, out_dir, run_id=run_id)
    step = replace(cfg, variant="glmim", seed=seed, phase_schedule="backend-then-joint")
    results["glmim"] = train(step, model_cfg, train_set, test_set, out_dir, init_from=results["lmim"].checkpoint, run_id=run_id)
    return results


def run_ablation(
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    train_data: Union[str, Path, SequenceDataset],
    test_data: Union[str, Path, SequenceDataset],
    out_dir: Union[str, Path],
    seeds: Sequence[int] = (0, 1, 2),
    confusable_pairs: Sequence[Tuple[int, int]] = (),
    run_id: Optional[int] = None,
) -> AblationResult:
    train_set = train_data if isinstance(train_data, SequenceDataset) else read_dataset(train_data)
    test_set = test_data if isinstance(test_data, SequenceDataset) else read_dataset(test_data)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    rows: List[Dict[str, object]] = []
    tables, pair_tables = [], []
    for seed in seeds:
        logger.info("[ablate] seed %d", seed)
        results = run_seed(cfg, model_cfg, train_set, test_set, out_dir, seed, run_id)
        for variant, res in results.items():
            rows.append({"seed": seed, "variant": variant, "test_accuracy": res.test_accuracy, "checkpoint": str(res.checkpoint)})
        table, pairs = report_per_class({v: r.model for v, r in results.items()}, test_set, confusable_pairs, cfg.batch_size)
        tables.append(table.assign(seed=seed))
        pair_tables.append(pairs.assign(seed=seed))

    runs = pd.DataFrame(rows)
    summary = (
        runs.groupby("variant", sort=False)["test_accuracy"]
        .agg(mean_accuracy="mean", std_accuracy="std", seeds="count")
        .reset_index()
    )
    per_class = pd.concat(tables).drop(columns="seed").groupby("class", as_index=False).mean()
    pairs = pd.concat(pair_tables).drop(columns="seed").groupby("pair", as_index=False, sort=False).mean()

    write_table(runs, out_dir / "ablation_runs.csv")
    write_table(summary, out_dir / "ablation_summary.csv")
    write_table(per_class, out_dir / "ablation_per_class.csv")
    write_table(pairs, out_dir / "ablation_pairs.csv")
    for r in summary.itertuples():
        logger.info("[ablate] %-8s mean=%.4f std=%.4f over %d seeds", r.variant, r.mean_accuracy, r.std_accuracy, r.seeds)
    return AblationResult(runs, summary, per_class, pairs)
