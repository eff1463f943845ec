import csv
import json
from pathlib import Path

import numpy as np
import pytest

from pdcurriculum.cli import cmd_evaluate, cmd_generate, cmd_occlude, cmd_report, cmd_train, main
from pdcurriculum.config import ConfigError, config_to_json, load_config, parse_config
from pdcurriculum.data_model import load_manifest
from pdcurriculum.evaluation import EvaluationReport, aggregate_runs
from pdcurriculum.preprocessing import read_volume

SMALL = {
    "seed": 3,
    "n_runs": 2,
    "backbone": {"variant": "tiny_densenet_3d", "init_features": 16, "growth_rate": 8, "block_layers": [1, 1, 1, 1]},
    "synthetic": {"shape": [32, 32, 32], "n_controls": 16, "n_per_stage": [4, 4, 4, 4],
                  "effect_sizes": [1.0, 1.5, 2.0, 2.5]},
    "split": {"train_fraction": 0.6, "val_fraction": 0.2, "test_fraction": 0.2},
    "train": {"epochs_per_episode": 1, "batch_size": 16, "learning_rate": 0.001},
    "occlusion": {"patch_size": 16, "stride": 8},
    "pretrain": {"n_subjects": 12, "epochs": 1},
    "search": {"n_trials": 1, "budget_epochs": 1},
    "ood": [{"name": "siteb", "offset": 2.0, "n_controls": 8, "n_per_stage": [2, 2, 2, 2]}],
    "strategies": [{"kind": "curriculum"}, {"kind": "none", "pretrained": True}],
}


def write_config(tmp_path, raw=SMALL, name="config.json"):
    raw = dict(raw, output_dir=str(tmp_path / "exp"))
    path = tmp_path / name
    path.write_text(json.dumps(raw))
    return path


def _tree(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_split_section_field_names():
    # the example config above must parse
    cfg = parse_config(SMALL)
    assert cfg.split.train_fraction == 0.6 and cfg.backbone.growth_rate == 8


def test_generate_is_byte_identical(tmp_path):
    a = load_config(write_config(tmp_path), output=str(tmp_path / "a"))
    b = load_config(write_config(tmp_path), output=str(tmp_path / "b"))
    cmd_generate(a)
    cmd_generate(b)
    ta, tb = _tree(tmp_path / "a" / "data"), _tree(tmp_path / "b" / "data")
    assert ta.keys() == tb.keys() and ta == tb
    assert {"train.csv", "val.csv", "test.csv", "siteb.csv", "pretrain.csv", "pretrain_val.csv",
            "train_truth.json", "siteb_truth.json"} <= set(ta)
    for name in ("train", "val", "test", "siteb", "pretrain", "pretrain_val"):
        load_manifest(tmp_path / "a" / "data" / f"{name}.csv")
    # the seed moves every generated file
    c = load_config(write_config(tmp_path), output=str(tmp_path / "c"), seed=4)
    cmd_generate(c)
    assert _tree(tmp_path / "c" / "data")["train.csv"] != ta["train.csv"]


def test_config_round_trip_and_rejections(tmp_path):
    cfg = load_config(write_config(tmp_path))
    assert parse_config(config_to_json(cfg)) == cfg
    for bad, match in [
        ({"synthetic": {"shapes": [1, 2, 3]}}, "unknown key"),
        ({"colour": 1}, "unknown top-level"),
        ({"train": {"seed": 5}}, "unknown key"),
        ({"train": {"batch_size": 3}}, "batch_size"),
        ({"backbone": {"variant": "resnet"}}, "backbone"),
        ({"ood": [{"name": "test"}]}, "ood names"),
        ({"n_runs": 0}, "n_runs"),
    ]:
        with pytest.raises(ConfigError, match=match):
            parse_config({**SMALL, **bad})


def test_cli_error_exit(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"synthetic": {"shapes": [1]}}))
    assert main(["generate", "--config", str(bad)]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert err[-1].startswith("error: ") and "shapes" in err[-1]
    assert main(["train", "--config", str(write_config(tmp_path))]) == 1
    assert "generate" in capsys.readouterr().err.strip().splitlines()[-1]


@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    path = write_config(tmp)
    for command in ("generate", "pretrain", "train", "evaluate", "report"):
        assert main([command, "--config", str(path)]) == 0, command
    return tmp, path, load_config(path)


def test_train_outputs(experiment):
    tmp, _, cfg = experiment
    runs = tmp / "exp" / "runs"
    assert sorted(p.name for p in runs.iterdir()) == ["curriculum", "none_pretrained"]
    for label in ("curriculum", "none_pretrained"):
        for k in range(2):
            d = runs / label / f"run_{k}"
            assert {"model.safetensors", "plan.json", "log.jsonl", "result.json"} <= {p.name for p in d.iterdir()}
    result = json.loads((runs / "none_pretrained" / "run_0" / "result.json").read_text())
    assert result["train_config"]["pretrained"].endswith("backbone.safetensors")
    assert len(result["episode_sizes"]) == 1


def test_train_rerun_identical(experiment, tmp_path):
    tmp, path, cfg = experiment
    runs = tmp / "exp" / "runs"
    before = _tree(runs)
    assert main(["train", "--config", str(path)]) == 0
    after = _tree(runs)
    logs = [k for k in before if k.endswith(("log.jsonl", "result.json", "plan.json"))]
    assert logs and all(before[k] == after[k] for k in logs)


def test_report_schema_and_consistency(experiment):
    tmp, _, cfg = experiment
    report = json.loads((tmp / "exp" / "reports" / "report.json").read_text())
    rows = report["rows"]
    keys = [(r["strategy"], r["dataset"]) for r in rows]
    assert sorted(keys) == sorted((s, d) for s in ("curriculum", "none_pretrained") for d in ("test", "siteb"))
    with (tmp / "exp" / "reports" / "runs.csv").open() as fh:
        per_run = list(csv.DictReader(fh))
    for row in rows:
        reps = [EvaluationReport(float(r["roc_auc"]), float(r["threshold"]), float(r["accuracy"]),
                                 float(r["precision"]), int(r["n_pos"]), int(r["n_neg"]))
                for r in per_run if (r["strategy"], r["dataset"]) == (row["strategy"], row["dataset"])]
        assert len(reps) == row["n_runs"] == 2
        agg = aggregate_runs(reps)
        for metric, value in agg.mean.items():
            assert row["mean"][metric] == pytest.approx(value, abs=1e-12)
        assert row["roc_auc"] == agg.formatted("roc_auc")
    table = (tmp / "exp" / "reports" / "table.md").read_text()
    assert "curriculum" in table and "siteb ROC-AUC" in table


def test_evaluate_twice_identical(experiment):
    tmp, _, cfg = experiment
    first = (tmp / "exp" / "reports" / "report.json").read_bytes()
    cmd_evaluate(cfg)
    assert (tmp / "exp" / "reports" / "report.json").read_bytes() == first


def test_occlude_naming_and_distinct_maps(experiment):
    tmp, path, cfg = experiment
    test = load_manifest(tmp / "exp" / "data" / "test.csv")
    patient = next(r.subject_id for r in test.records if r.is_patient)
    control = next(r.subject_id for r in test.records if not r.is_patient)
    assert main(["occlude", "--config", str(path), "--subject", patient]) == 0
    written = cmd_occlude(cfg, None, control)
    out = tmp / "exp" / "occlusion"
    names = {p.name for p in out.iterdir()}
    for sid in (patient, control):
        assert {f"{sid}_heatmap.f32", f"{sid}_heatmap.json", f"{sid}_heatmap_axial.png",
                f"{sid}_heatmap_coronal.png", f"{sid}_heatmap_sagittal.png"} <= names
    a = read_volume(out / f"{patient}_heatmap.f32").data
    b = read_volume(written["heatmap"]).data
    assert a.shape == tuple(cfg.synthetic.shape) and not np.array_equal(a, b)


def test_occlude_unknown_subject(experiment, capsys):
    _, path, _ = experiment
    assert main(["occlude", "--config", str(path), "--subject", "nobody"]) == 1
    assert "nobody" in capsys.readouterr().err


def test_search_outputs(experiment):
    tmp, path, _ = experiment
    assert main(["search", "--config", str(path)]) == 0
    best = json.loads((tmp / "exp" / "search" / "best_config.json").read_text())
    with (tmp / "exp" / "search" / "trials.csv").open() as fh:
        trials = list(csv.DictReader(fh))
    assert len(trials) == 1
    assert best["train_config"]["learning_rate"] == pytest.approx(float(trials[0]["learning_rate"]))


def test_runs_override(tmp_path):
    cfg = load_config(write_config(tmp_path), runs=1, seed=11)
    assert cfg.n_runs == 1 and cfg.seed == 11 and cfg.train_config(cfg.strategy_grid[0], 0).seed == 11
