# cli.py
"""
Command-line entry point.

    python cli.py gen --out runs/data
    python cli.py train --train-data runs/data/train.mimseq --test-data runs/data/test.mimseq --variant lmim
    python cli.py eval --checkpoint runs/train/lmim_seed0.ckpt --data runs/data/test.mimseq
    python cli.py ablate --train-data ... --test-data ... --seeds 0,1,2
    python cli.py export-beta --checkpoint runs/train/glmim_seed0.ckpt --data runs/data/test.mimseq
    python cli.py export-pca --checkpoint ... --data ... --per-class 20
    python cli.py gradcheck
    python cli.py mi-oracle

Every subcommand reads `--config FILE` (flat KEY=value) first; flags win.
Exit code 0 on success; otherwise one `error category=<c> message=<m>` line
on stderr and a category-specific exit code.
"""
import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from ablation import run_ablation
from config import (
    ModelConfig,
    SynthSpec,
    TrainConfig,
    build_config,
    load_environment,
    log_level,
    output_dir,
    read_config_file,
    split_sections,
)
from db import insert_df
from errors import CheckFailedError, ConfigError, MimError
from gradcheck import primitive_suite
from jobs import trigger_job
from mi import LOG2, fit_tabular_discriminator, jensen_shannon_divergence, optimal_discrete_estimate, product_of_marginals, standard_joints
from model import load_model
from reports import beta_localization, export_beta, export_pca, predictions_frame, report_per_class, write_table
from synth import class_balance, generate_split, read_dataset, write_dataset
from train import accuracy, collect_outputs, loss_grad_check, train

logger = logging.getLogger(__name__)

ORACLE_TOLERANCE = 0.02


# -----------------------------
# Config resolution
# -----------------------------
def _add_fields(parser: argparse.ArgumentParser, cls: type, prefix: str) -> None:
    group = parser.add_argument_group(cls.__name__)
    for f in dataclasses.fields(cls):
        group.add_argument(f"--{f.name.replace('_', '-')}", dest=f"{prefix}__{f.name}", default=None, metavar="VALUE")


def _flags(args: argparse.Namespace, prefix: str) -> Dict[str, str]:
    lead = f"{prefix}__"
    return {k[len(lead):]: v for k, v in vars(args).items() if k.startswith(lead) and v is not None}


def resolve_configs(args: argparse.Namespace) -> Tuple[ModelConfig, TrainConfig, SynthSpec]:
    """defaults < --config file < flags"""
    file_values = read_config_file(args.config) if getattr(args, "config", None) else {}
    model_file, train_file, synth_file = split_sections(file_values, ModelConfig, TrainConfig, SynthSpec)
    model_base = ModelConfig.full_scale() if getattr(args, "full_scale", False) else ModelConfig()
    model_cfg = build_config(ModelConfig, _flags(args, "model"), base=build_config(ModelConfig, model_file, base=model_base))
    train_cfg = build_config(TrainConfig, _flags(args, "train"), base=build_config(TrainConfig, train_file))
    synth = build_config(SynthSpec, _flags(args, "synth"), base=build_config(SynthSpec, synth_file))
    return model_cfg, train_cfg, synth


def explicit_pairs(args: argparse.Namespace, spec: SynthSpec) -> Tuple[Tuple[int, int], ...]:
    """Confusable pairs only when a flag or the config file names them."""
    file_values = read_config_file(args.config) if getattr(args, "config", None) else {}
    _, _, synth_file = split_sections(file_values, ModelConfig, TrainConfig, SynthSpec)
    given = "confusable_pairs" in synth_file or "confusable_pairs" in _flags(args, "synth")
    return tuple(spec.confusable_pairs) if given else ()


def _int_list(text: Optional[str], flag: str) -> Optional[List[int]]:
    if text is None:
        return None
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{flag}: expected comma-separated integers, got '{text}'") from None


def _out(path: Optional[str], default: str) -> Path:
    p = Path(path) if path else output_dir() / default
    p.mkdir(parents=True, exist_ok=True)
    return p


# -----------------------------
# Jobs
# -----------------------------
def cmd_gen(run_id: Optional[int], args: argparse.Namespace) -> Dict[str, Any]:
    _, _, spec = resolve_configs(args)
    spec.validate()
    out = _out(args.out, "data")
    splits = ("train", "test") if args.split == "both" else (args.split,)
    meta: Dict[str, Any] = {}
    for split in splits:
        ds = generate_split(spec, split, workers=args.workers)
        path = write_dataset(ds, out / f"{split}.mimseq")
        counts = class_balance(ds)
        logger.info("[gen] %s: %d samples, class counts %s..%s", split, len(ds), counts.min(), counts.max())
        print(f"{split}: {path} samples={len(ds)}")
        meta[split] = {"path": str(path), "samples": len(ds)}
    return meta


def cmd_train(run_id: Optional[int], args: argparse.Namespace) -> Dict[str, Any]:
    model_cfg, train_cfg, _ = resolve_configs(args)
    res = train(
        train_cfg.validate(),
        model_cfg.validate(),
        args.train_data,
        args.test_data,
        _out(args.out, "train"),
        init_from=args.init_from,
        name=args.name,
        run_id=run_id,
    )
    print(f"test_accuracy={res.test_accuracy:.6f} checkpoint={res.checkpoint} metrics={res.metrics_path}")
    return {"test_accuracy": res.test_accuracy, "checkpoint": str(res.checkpoint)}


def cmd_eval(run_id: Optional[int], args: argparse.Namespace) -> Dict[str, Any]:
    _, train_cfg, spec = resolve_configs(args)
    data = read_dataset(args.data)
    out = _out(args.out, "eval")
    names = [Path(c).stem for c in args.checkpoint]
    if len(set(names)) < len(names):
        names = [f"{n}_{i}" for i, n in enumerate(names)]
    models = {n: load_model(c) for n, c in zip(names, args.checkpoint)}

    first = names[0]
    preds = collect_outputs(models[first], data, train_cfg.batch_size).predictions
    write_table(predictions_frame(data, preds), out / "predictions.csv")
    table, pairs = report_per_class(models, data, explicit_pairs(args, spec), train_cfg.batch_size)
    suffix = ".xlsx" if args.format == "xlsx" else ".csv"
    write_table(table, out / f"per_class{suffix}", sheet="per_class")
    write_table(pairs, out / f"pairs{suffix}", sheet="pairs")
    insert_df(run_id, "eval", table)

    acc = accuracy(preds, data.labels)
    print(f"accuracy={acc:.6f} samples={len(data)} checkpoint={first}")
    return {"accuracy": acc, "checkpoints": names}


def cmd_ablate(run_id: Optional[int], args: argparse.Namespace) -> Dict[str, Any]:
    model_cfg, train_cfg, spec = resolve_configs(args)
    seeds = _int_list(args.seeds, "--seeds") or [0, 1, 2]
    result = run_ablation(
        train_cfg.validate(),
        model_cfg.validate(),
        args.train_data,
        args.test_data,
        _out(args.out, "ablate"),
        seeds=seeds,
        confusable_pairs=explicit_pairs(args, spec),
        run_id=run_id,
    )
    insert_df(run_id, "ablate", result.summary)
    for r in result.summary.itertuples():
        print(f"{r.variant}: mean={r.mean_accuracy:.6f} std={r.std_accuracy:.6f} seeds={r.seeds}")
    return {"summary": result.summary.to_dict(orient="records")}


def cmd_export_beta(run_id: Optional[int], args: argparse.Namespace) -> Dict[str, Any]:
    _, train_cfg, _ = resolve_configs(args)
    data = read_dataset(args.data)
    traces = export_beta(args.checkpoint, data, train_cfg.batch_size)
    path = write_table(traces, args.out or output_dir() / "beta.csv")
    share = beta_localization(traces, ratio=args.ratio)
    print(f"rows={len(traces)} localized={share:.4f} ratio={args.ratio} out={path}")
    return {"rows": len(traces), "localized": share}


def cmd_export_pca(run_id: Optional[int], args: argparse.Namespace) -> Dict[str, Any]:
    _, train_cfg, _ = resolve_configs(args)
    data = read_dataset(args.data)
    classes = _int_list(args.classes, "--classes")
    points, ratio = export_pca(args.checkpoint, data, classes, args.per_class, args.seed, train_cfg.batch_size)
    path = write_table(points, args.out or output_dir() / "pca.csv")
    print(f"rows={len(points)} class_variance_ratio={ratio:.6f} out={path}")
    return {"rows": len(points), "class_variance_ratio": ratio}


def cmd_gradcheck(run_id: Optional[int], args: argparse.Namespace) -> Dict[str, Any]:
    model_cfg, _, _ = resolve_configs(args)
    report = primitive_suite(instances=args.instances, seed=args.seed, tolerance=args.tolerance)
    if not args.skip_model:
        report.extend(loss_grad_check(model_cfg, args.variant, args.seed, args.max_elements, args.tolerance))
    frame = report.to_frame()
    if args.out:
        write_table(frame, args.out)
    print(f"checked={len(frame)} max_rel_error={report.max_rel_error:.3e} passed={report.passed}")
    if not report.passed:
        names = ", ".join(e.name for e in report.failures()[:5])
        raise CheckFailedError(f"gradient mismatch in {len(report.failures())} entries ({names})")
    return {"checked": len(frame), "max_rel_error": report.max_rel_error}


def mi_oracle_table(steps: int = 3000, lr: float = 0.05, seed: int = 0) -> pd.DataFrame:
    rows = []
    for name, joint in standard_joints(seed).items():
        _, fitted = fit_tabular_discriminator(joint, steps=steps, lr=lr, seed=seed)
        optimum = optimal_discrete_estimate(joint)
        rows.append(
            {
                "joint": name,
                "fitted": fitted,
                "optimal": optimum,
                "jsd_bound": 2 * jensen_shannon_divergence(joint, product_of_marginals(joint)) - 2 * LOG2,
                "gap": optimum - fitted,
            }
        )
    return pd.DataFrame(rows)


def cmd_mi_oracle(run_id: Optional[int], args: argparse.Namespace) -> Dict[str, Any]:
    table = mi_oracle_table(args.steps, args.lr, args.seed)
    if args.out:
        write_table(table, args.out)
    for r in table.itertuples():
        print(f"{r.joint}: fitted={r.fitted:.6f} optimal={r.optimal:.6f} jsd_bound={r.jsd_bound:.6f} gap={r.gap:.2e}")
    insert_df(run_id, "mi-oracle", table)
    worst = float(np.abs(table["gap"]).max())
    if worst > ORACLE_TOLERANCE:
        raise CheckFailedError(f"fitted discriminator is {worst:.4f} from the optimum (tolerance {ORACLE_TOLERANCE})")
    return {"max_gap": worst}


# -----------------------------
# Parser
# -----------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mim", description="MI-constrained sequence classification toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, handler, help_text: str, sections: Tuple[Tuple[type, str], ...] = ()) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat KEY=value configuration file")
        p.add_argument("--label", default="", help="run label stored in the ledger")
        for cls, prefix in sections:
            _add_fields(p, cls, prefix)
        p.set_defaults(handler=handler)
        return p

    model_train = ((ModelConfig, "model"), (TrainConfig, "train"))

    def batch_flag(p: argparse.ArgumentParser) -> None:
        p.add_argument("--batch-size", dest="train__batch_size", default=None, metavar="VALUE")

    def pairs_flag(p: argparse.ArgumentParser) -> None:
        p.add_argument("--confusable-pairs", dest="synth__confusable_pairs", default=None, metavar="A-B,C-D")

    p = command("gen", cmd_gen, "generate synthetic train/test datasets", ((SynthSpec, "synth"),))
    p.add_argument("--out", help="output directory")
    p.add_argument("--split", choices=("train", "test", "both"), default="both")
    p.add_argument("--workers", type=int, default=1)

    p = command("train", cmd_train, "train one variant", model_train)
    p.add_argument("--train-data", required=True)
    p.add_argument("--test-data", required=True)
    p.add_argument("--out", help="output directory")
    p.add_argument("--init-from", help="checkpoint to initialize from")
    p.add_argument("--name", help="run name (default <variant>_seed<seed>)")
    p.add_argument("--full-scale", action="store_true", help="start from the full-size model preset")

    p = command("eval", cmd_eval, "accuracy, predictions and per-class tables")
    batch_flag(p)
    pairs_flag(p)
    p.add_argument("--checkpoint", action="append", required=True, help="repeat to compare checkpoints; the first is the reference")
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="output directory")
    p.add_argument("--format", choices=("csv", "xlsx"), default="csv")

    p = command("ablate", cmd_ablate, "baseline / lmim / glmim over several seeds", model_train)
    pairs_flag(p)
    p.add_argument("--train-data", required=True)
    p.add_argument("--test-data", required=True)
    p.add_argument("--out", help="output directory")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--full-scale", action="store_true")

    p = command("export-beta", cmd_export_beta, "per-sequence frame weights with target windows")
    batch_flag(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="output file (.csv or .xlsx)")
    p.add_argument("--ratio", type=float, default=2.0)

    p = command("export-pca", cmd_export_pca, "2-D PCA of pooled representations")
    batch_flag(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="output file (.csv or .xlsx)")
    p.add_argument("--classes", help="comma-separated class subset")
    p.add_argument("--per-class", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)

    p = command("gradcheck", cmd_gradcheck, "finite-difference checks of primitives and the total loss", ((ModelConfig, "model"),))
    p.add_argument("--instances", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--variant", default="glmim")
    p.add_argument("--max-elements", type=int, default=3)
    p.add_argument("--skip-model", action="store_true")
    p.add_argument("--out", help="report file (.csv or .xlsx)")

    p = command("mi-oracle", cmd_mi_oracle, "fit tabular discriminators on the reference joints")
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="report file (.csv or .xlsx)")

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    load_environment()
    logging.basicConfig(
        level=getattr(logging, log_level(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        trigger_job(args.command, args.handler, args, label=args.label)
    except MimError as e:
        print(e.one_line(), file=sys.stderr)
        return e.exit_code
    except Exception as e:
        print(f"error category=internal message={' '.join(str(e).split())}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
