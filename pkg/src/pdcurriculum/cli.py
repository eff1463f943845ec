"""Command-line driver: generate, pretrain, train, evaluate, occlude, search, report.

Layout of an experiment directory::

    data/            train.csv val.csv test.csv <ood>.csv pretrain*.csv, volumes/, *_truth.json
    pretrain/        backbone.safetensors, log.jsonl
    runs/<strategy>/run_<k>/   model.safetensors, plan.json, log.jsonl, result.json
    reports/         report.json (mean (SD) per strategy x dataset), runs.csv, table.md
    occlusion/       <subject_id>_heatmap.f32/.json and <subject_id>_heatmap_<plane>.png
    search/          trials.csv, best_config.json
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import random
import sys
from dataclasses import replace
from pathlib import Path

import torch

from .config import PRETRAIN_SEED_OFFSET, ExperimentConfig, StrategySpec, config_to_json, load_config
from .curriculum import build_episode_plan
from .data_model import apportion, load_manifest, split_manifest
from .evaluation import aggregate_runs, evaluate_model, validation_threshold, zero_shot_eval
from .interpretation import export_overlay, occlusion_sensitivity
from .model import Checkpoint, load_model, parameter_count
from .synthetic import generate_cohort, write_cohort
from .training import (
    CohortTensors,
    SearchSpace,
    hyperparameter_search,
    prepare_model,
    pretrain_proxy,
    run_curriculum_training,
    write_jsonl,
)

log = logging.getLogger("pdcurriculum")


def _dump(obj, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    return path


class Experiment:
    """Paths and cached cohorts for one config."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.root = Path(config.output_dir)
        self._tensors: dict[str, CohortTensors] = {}

    @property
    def data_dir(self) -> Path:
        return self.root / "data"

    @property
    def pretrained_path(self) -> Path:
        return self.root / "pretrain" / "backbone.safetensors"

    def run_dir(self, strategy: StrategySpec, run: int) -> Path:
        return self.root / "runs" / strategy.label / f"run_{run}"

    @property
    def dataset_names(self) -> list[str]:
        return ["test"] + [o.name for o in self.config.ood]

    def manifest(self, name: str):
        path = self.data_dir / f"{name}.csv"
        if not path.exists():
            raise FileNotFoundError(f"{path} missing; run the generate command first")
        return load_manifest(path, canonical_shape=self.config.synthetic.shape)

    def tensors(self, name: str) -> CohortTensors:
        if name not in self._tensors:
            self._tensors[name] = CohortTensors.from_manifest(self.manifest(name))
        return self._tensors[name]


# ---------------------------------------------------------------- commands


def cmd_generate(config: ExperimentConfig) -> Path:
    exp = Experiment(config)
    cohort, truth = generate_cohort(replace(config.synthetic, id_prefix="sub"))
    for name, part in zip(("train", "val", "test"), split_manifest(cohort, config.split)):
        write_cohort(part, truth, exp.data_dir, name)
    for i, spec in enumerate(config.ood):
        ood, ood_truth = generate_cohort(config.synthetic_for_ood(i))
        write_cohort(ood, ood_truth, exp.data_dir, spec.name)
    pre, _ = generate_cohort(config.synthetic_for_pretrain())
    frac = config.pretrain.val_fraction
    pre_train, pre_val = _two_way_split(pre, frac, config.seed)
    write_cohort(pre_train, None, exp.data_dir, "pretrain")
    write_cohort(pre_val, None, exp.data_dir, "pretrain_val")
    _dump(config_to_json(config), exp.root / "config.json")
    log.info("wrote dataset to %s", exp.data_dir)
    return exp.data_dir


def _two_way_split(manifest, val_fraction: float, seed: int):
    """Seeded train/val split of the pretraining cohort, stratified by sex."""
    rng = random.Random(seed)
    val_ids = []
    for sex in sorted({r.sex.value for r in manifest.records}):
        ids = sorted(r.subject_id for r in manifest.records if r.sex.value == sex)
        rng.shuffle(ids)
        n_train, n_val = apportion(len(ids), (1 - val_fraction, val_fraction))
        val_ids += ids[n_train:]
    held_out = set(val_ids)
    train_ids = [s for s in manifest.subject_ids if s not in held_out]
    return manifest.subset(train_ids, "pretrain"), manifest.subset(sorted(val_ids), "pretrain_val")


def cmd_pretrain(config: ExperimentConfig) -> Path:
    exp = Experiment(config)
    train, val = exp.tensors("pretrain"), exp.tensors("pretrain_val")
    tc = replace(config.train, seed=config.seed + PRETRAIN_SEED_OFFSET, epochs_per_episode=config.pretrain.epochs,
                 pretrained=None)
    result = pretrain_proxy(train, val, config.backbone, tc)
    result.checkpoint.save(exp.pretrained_path)
    write_jsonl(result.log, exp.pretrained_path.parent / "log.jsonl")
    _dump({"val_sex_accuracy": result.val_accuracy}, exp.pretrained_path.parent / "result.json")
    log.info("pretraining val sex accuracy %.3f", result.val_accuracy)
    return exp.pretrained_path


def train_run(exp: Experiment, strategy: StrategySpec, run: int) -> Path:
    config = exp.config
    pretrained = None
    if strategy.pretrained:
        if not exp.pretrained_path.exists():
            raise FileNotFoundError(f"{exp.pretrained_path} missing; run the pretrain command first")
        pretrained = str(exp.pretrained_path)
    tc = config.train_config(strategy, run, pretrained)
    train_manifest = exp.manifest("train")
    train, val = exp.tensors("train"), exp.tensors("val")
    plan = build_episode_plan(train_manifest, tc.kind, tc.balance, tc.seed)
    model = prepare_model(config.backbone, tc, float(train.age.mean()))
    result = run_curriculum_training(train, val, plan, tc, model)
    out = exp.run_dir(strategy, run)
    out.mkdir(parents=True, exist_ok=True)
    plan.save(out / "plan.json")
    result.write_log(out / "log.jsonl")
    result.best_checkpoint.save(out / "model.safetensors")
    _dump({"train_config": tc.to_json(), "stop_reasons": result.stop_reasons,
           "episode_sizes": plan.sizes, "parameter_count": parameter_count(result.model)},
          out / "result.json")
    log.info("%s run %d: %d epochs, stop %s", strategy.label, run, len(result.log), result.stop_reasons)
    return out


def cmd_train(config: ExperimentConfig) -> list[Path]:
    torch.use_deterministic_algorithms(True)
    exp = Experiment(config)
    return [train_run(exp, s, k) for s in config.strategy_grid for k in range(config.n_runs)]


def cmd_evaluate(config: ExperimentConfig) -> Path:
    exp = Experiment(config)
    per_run, rows = [], []
    variant = config.backbone.variant.value
    for strategy in config.strategy_grid:
        reports: dict[str, list] = {name: [] for name in exp.dataset_names}
        for k in range(config.n_runs):
            ckpt = exp.run_dir(strategy, k) / "model.safetensors"
            if not ckpt.exists():
                raise FileNotFoundError(f"{ckpt} missing; run the train command first")
            model = load_model(ckpt)
            threshold = validation_threshold(model, exp.tensors("val"))
            for name in exp.dataset_names:
                data = exp.tensors(name)
                rep = evaluate_model(model, data, threshold) if name == "test" else zero_shot_eval(model, data, threshold)
                reports[name].append(rep)
                per_run.append({"architecture": variant, "strategy": strategy.label, "run": k,
                                "seed": config.seed + k, "dataset": name, **rep.to_json()})
        for name, reps in reports.items():
            agg = aggregate_runs(reps)
            rows.append({
                "architecture": variant,
                "pretrained": strategy.pretrained,
                "strategy": strategy.label,
                "dataset": name,
                "n_runs": len(reps),
                "mean": agg.mean,
                "sd": agg.sd,
                "roc_auc": agg.formatted("roc_auc"),
                "accuracy": agg.formatted("accuracy"),
                "precision": agg.formatted("precision"),
            })
    out = exp.root / "reports"
    out.mkdir(parents=True, exist_ok=True)
    _dump({"rows": rows}, out / "report.json")
    with (out / "runs.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(per_run[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(per_run)
    return out / "report.json"


def _find_subject(exp: Experiment, subject_id: str):
    for name in ["train", "val"] + exp.dataset_names:
        path = exp.data_dir / f"{name}.csv"
        if path.exists():
            manifest = load_manifest(path, canonical_shape=exp.config.synthetic.shape)
            if subject_id in manifest.subject_ids:
                return manifest, manifest.get(subject_id)
    raise KeyError(f"subject {subject_id!r} not found in any manifest under {exp.data_dir}")


def cmd_occlude(config: ExperimentConfig, checkpoint: str | Path | None, subject_id: str) -> dict[str, Path]:
    from .preprocessing import z_transform

    exp = Experiment(config)
    if checkpoint is None:
        checkpoint = exp.run_dir(config.strategy_grid[0], 0) / "model.safetensors"
    model = load_model(Checkpoint.load(checkpoint))
    manifest, record = _find_subject(exp, subject_id)
    volume = z_transform(manifest.load_volume(record))
    heat = occlusion_sensitivity(model, volume, config.occlusion)
    return export_overlay(heat, volume, exp.root / "occlusion" / f"{subject_id}_heatmap")


def cmd_search(config: ExperimentConfig) -> Path:
    exp = Experiment(config)
    strategy = config.strategy_grid[0]
    base = config.train_config(strategy, 0)
    train_manifest = exp.manifest("train")
    train, val = exp.tensors("train"), exp.tensors("val")
    plan = build_episode_plan(train_manifest, base.kind, base.balance, base.seed)
    result = hyperparameter_search(SearchSpace(), config.search.n_trials, config.seed,
                                   config.search.budget_epochs, train, val, plan, config.backbone, base)
    out = exp.root / "search"
    out.mkdir(parents=True, exist_ok=True)
    with (out / "trials.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(result.trials[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(result.trials)
    _dump({"best_trial": result.best_trial, "train_config": result.best_config.to_json()}, out / "best_config.json")
    return out / "best_config.json"


def cmd_report(config: ExperimentConfig) -> Path:
    exp = Experiment(config)
    path = exp.root / "reports" / "report.json"
    if not path.exists():
        raise FileNotFoundError(f"{path} missing; run the evaluate command first")
    rows = json.loads(path.read_text())["rows"]
    datasets = list(dict.fromkeys(r["dataset"] for r in rows))
    strategies = list(dict.fromkeys((r["architecture"], r["pretrained"], r["strategy"]) for r in rows))
    header = ["Architecture", "Pretrained", "Strategy"] + [f"{d} ROC-AUC" for d in datasets]
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for arch, pre, strat in strategies:
        cells = [arch, "yes" if pre else "-", strat]
        for d in datasets:
            match = [r for r in rows if (r["architecture"], r["pretrained"], r["strategy"], r["dataset"]) == (arch, pre, strat, d)]
            cells.append(match[0]["roc_auc"] if match else "")
        lines.append("| " + " | ".join(cells) + " |")
    table = "\n".join(lines) + "\n"
    out = exp.root / "reports" / "table.md"
    out.write_text(table)
    print(table, end="")
    return out


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="experiment JSON file")
    common.add_argument("--seed", type=int, help="override the experiment seed")
    common.add_argument("--output", help="override output_dir")
    common.add_argument("--runs", type=int, help="override n_runs")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="pdcurriculum", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("generate", "pretrain", "train", "evaluate", "search", "report"):
        sub.add_parser(name, parents=[common])
    occ = sub.add_parser("occlude", parents=[common])
    occ.add_argument("--subject", required=True)
    occ.add_argument("--checkpoint", help="model checkpoint (default: first strategy, run 0)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        config = load_config(args.config, seed=args.seed, output=args.output, runs=args.runs)
        if args.command == "generate":
            cmd_generate(config)
        elif args.command == "pretrain":
            cmd_pretrain(config)
        elif args.command == "train":
            cmd_train(config)
        elif args.command == "evaluate":
            cmd_evaluate(config)
        elif args.command == "occlude":
            cmd_occlude(config, args.checkpoint, args.subject)
        elif args.command == "search":
            cmd_search(config)
        elif args.command == "report":
            cmd_report(config)
    except Exception as exc:  # one-line diagnostic, nonzero exit
        print(f"error: {type(exc).__name__}: {exc}".splitlines()[0], file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
