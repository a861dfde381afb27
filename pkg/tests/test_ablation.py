from pathlib import Path

import pandas as pd
import pytest

from ablation import run_ablation
from config import ModelConfig, SynthSpec, TrainConfig, build_config, read_config_file, split_sections
from model import load_model
from reports import beta_localization, export_beta, export_pca
from synth import generate_split, shuffle_outside_window
from tensor import RngStream
from train import accuracy, collect_outputs

DESK_CONF = Path(__file__).resolve().parent.parent / "configs" / "desk_train.conf"


def test_single_seed_ablation_writes_all_tables(tmp_path, tiny_model_config, tiny_train_set, tiny_test_set):
    cfg = TrainConfig(epochs=1, batch_size=4, lr_start=1e-3, lr_floor=1e-4, phase1_epochs=1)
    result = run_ablation(cfg, tiny_model_config, tiny_train_set, tiny_test_set, tmp_path, seeds=(0,), confusable_pairs=[(0, 1)])

    assert list(result.runs["variant"]) == ["baseline", "lmim", "glmim"]
    assert list(result.summary.columns) == ["variant", "mean_accuracy", "std_accuracy", "seeds"]
    assert (result.summary["seeds"] == 1).all()
    for variant in ("baseline", "lmim", "glmim"):
        assert 0.0 <= result.mean_accuracy(variant) <= 1.0
    assert list(result.pairs["pair"]) == ["0-1", "mean_confusable", "mean_other"]
    assert {"acc_baseline", "acc_lmim", "acc_glmim", "delta_glmim"} <= set(result.per_class.columns)
    for name in ("runs", "summary", "per_class", "pairs"):
        assert (tmp_path / f"ablation_{name}.csv").exists()
    runs = pd.read_csv(tmp_path / "ablation_runs.csv")
    assert all(Path(p).exists() for p in runs["checkpoint"])


# -----------------------------
# Desk protocol (trained models)
# -----------------------------
@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    model_vals, train_vals, synth_vals = split_sections(read_config_file(str(DESK_CONF)), ModelConfig, TrainConfig, SynthSpec)
    model_cfg = build_config(ModelConfig, model_vals).validate()
    cfg = build_config(TrainConfig, train_vals).validate()
    spec = build_config(SynthSpec, synth_vals).validate()
    train_set = generate_split(spec, "train", workers=4)
    test_set = generate_split(spec, "test", workers=4)
    out = tmp_path_factory.mktemp("desk")
    result = run_ablation(cfg, model_cfg, train_set, test_set, out, seeds=(0, 1, 2), confusable_pairs=spec.confusable_pairs)
    return result, test_set


def _checkpoint(result, variant, seed=0):
    runs = result.runs
    return runs.loc[(runs["variant"] == variant) & (runs["seed"] == seed), "checkpoint"].iloc[0]


@pytest.mark.slow
def test_desk_ablation_orders_the_variants(desk):
    result, _ = desk
    assert result.mean_accuracy("glmim") >= result.mean_accuracy("baseline") + 0.02
    assert result.mean_accuracy("lmim") >= result.mean_accuracy("baseline")


@pytest.mark.slow
def test_local_constraint_helps_confusable_pairs_most(desk):
    result, _ = desk
    pairs = result.pairs.set_index("pair")
    assert pairs.loc["mean_confusable", "delta_lmim"] > pairs.loc["mean_other", "delta_lmim"]


@pytest.mark.slow
def test_frame_weights_peak_inside_the_target_window(desk):
    result, test_set = desk
    traces = export_beta(_checkpoint(result, "glmim"), test_set)
    assert beta_localization(traces) >= 0.70


@pytest.mark.slow
def test_weighted_pooling_spreads_classes_further_apart(desk):
    result, test_set = desk
    _, glmim_ratio = export_pca(_checkpoint(result, "glmim"), test_set, per_class=20, seed=0)
    _, baseline_ratio = export_pca(_checkpoint(result, "baseline"), test_set, per_class=20, seed=0)
    assert glmim_ratio > baseline_ratio


@pytest.mark.slow
def test_shuffling_outside_window_frames_keeps_accuracy(desk):
    result, test_set = desk
    model = load_model(_checkpoint(result, "glmim"))
    shuffled = shuffle_outside_window(test_set, RngStream(0, 17))
    before = accuracy(collect_outputs(model, test_set).predictions, test_set.labels)
    after = accuracy(collect_outputs(model, shuffled).predictions, shuffled.labels)
    assert abs(after - before) <= 0.01
