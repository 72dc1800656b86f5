#!/usr/bin/env python3
"""
命令行端到端流程测试

使用 smoke 预设依次执行各子命令，检查产物结构、溯源信息、退出码与可复现性
"""

import sys

import numpy as np
import pandas as pd
import pytest
from click.testing import CliRunner
from loguru import logger

from experiments.presets import ExperimentPresets
from experiments.runner import GRADIENT_SIMILARITY_MARGIN, ExperimentRunner, holds, rank, summarize_orderings
from main import cli
from mia_lab.smoothing import logit_gradient
from utils.artifacts import read_json
from utils.error_handler import NumericFailureError, StageError

pytestmark = pytest.mark.integration

SMOKE = "preset:smoke"


@pytest.fixture(autouse=True)
def restore_logging():
    """命令会重设日志输出，测试结束后恢复默认的 stderr 输出"""
    yield
    logger.remove()
    logger.add(sys.stderr, level="WARNING")


def invoke(out_dir, *args, jobs=1, seed=None):
    options = ["--config", SMOKE, "--out", str(out_dir), "--log-dir", str(out_dir / "logs"), "--jobs", str(jobs)]
    if seed is not None:
        options += ["--seed", str(seed)]
    return CliRunner().invoke(cli, options + list(args))


def run_steps(out_dir, *commands, jobs=1):
    for command in commands:
        result = invoke(out_dir, *command, jobs=jobs)
        assert result.exit_code == 0, result.output
    return out_dir


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """完整执行一次 run-all"""
    out_dir = tmp_path_factory.mktemp("pipeline")
    result = invoke(out_dir, "run-all")
    assert result.exit_code == 0, result.output
    return out_dir


class TestShowConfig:
    """配置解析"""

    def test_resolved_config_and_hash(self, tmp_path):
        result = invoke(tmp_path, "show-config", seed=42)
        assert result.exit_code == 0, result.output
        lines = result.output.splitlines()
        expected = ExperimentPresets.smoke().with_overrides(seed=42, out=str(tmp_path))
        assert f"config_hash={expected.fingerprint}" in lines
        document = next(line for line in lines if line.startswith("{"))
        assert '"master_seed":42' in document

    def test_hash_ignores_output_dir(self):
        a = ExperimentPresets.smoke().with_overrides(out="a")
        b = ExperimentPresets.smoke().with_overrides(out="b")
        assert a.fingerprint == b.fingerprint
        assert a.fingerprint != ExperimentPresets.smoke().with_overrides(seed=1).fingerprint

    def test_output_dir_from_environment(self, tmp_path):
        runner = CliRunner(env={"MIA_LAB_OUT_DIR": str(tmp_path / "from_env"), "MIA_LAB_LOG_DIR": str(tmp_path)})
        result = runner.invoke(cli, ["--config", SMOKE, "show-config"])
        assert result.exit_code == 0, result.output
        assert (tmp_path / "from_env").as_posix() in result.output

    def test_unknown_preset(self, tmp_path):
        result = CliRunner().invoke(cli, ["--config", "preset:nope", "--log-dir", str(tmp_path), "show-config"])
        assert result.exit_code == 2

    def test_invalid_config_file(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"model": {"variants": []}}', encoding="utf-8")
        result = CliRunner().invoke(cli, ["--config", str(path), "--log-dir", str(tmp_path), "show-config"])
        assert result.exit_code == 2

    def test_yaml_config(self, tmp_path):
        path = tmp_path / "exp.yaml"
        path.write_text("name: yaml_run\nmaster_seed: 9\n", encoding="utf-8")
        result = CliRunner().invoke(cli, ["--config", str(path), "--log-dir", str(tmp_path), "show-config"])
        assert result.exit_code == 0, result.output
        assert '"name":"yaml_run"' in result.output


class TestExitCodes:
    """错误到退出码的映射"""

    def test_train_without_data(self, tmp_path):
        assert invoke(tmp_path, "train").exit_code == 3

    def test_unknown_variant(self, tmp_path):
        run_steps(tmp_path, ["gen-data"])
        assert invoke(tmp_path, "train", "--variant", "missing").exit_code == 2

    def test_evaluate_without_attack(self, tmp_path):
        run_steps(tmp_path, ["gen-data"], ["train", "--variant", "hard"])
        assert invoke(tmp_path, "evaluate", "--variant", "hard").exit_code == 3

    def test_verification_failure(self, tmp_path, mocker):
        mocker.patch(
            "mia_lab.verification.logit_gradient",
            side_effect=lambda p, target: logit_gradient(p, target) + 1e-3,
        )
        result = invoke(tmp_path, "verify-gradients", "--instances", "5", "--network-instances", "1")
        assert result.exit_code == 5
        assert read_json(tmp_path / "verification.json")["payload"]["passed"] is False

    def test_stage_failure_keeps_partial_run(self, tmp_path, mocker):
        run_steps(tmp_path, ["gen-data"], ["train", "--variant", "hard"])
        mocker.patch("mia_lab.inversion.optimize_latents", side_effect=NumericFailureError("溢出"))
        result = invoke(tmp_path, "attack", "--mode", "ppa", "--variant", "hard")
        assert result.exit_code == 4
        document = read_json(tmp_path / "attacks" / "hard" / "ppa" / "attack_run.json")
        assert document["provenance"]["partial"] is True
        assert document["provenance"]["failed_stage"] == "optimization"
        assert "candidates" in document["payload"]["classes"]["0"]

    def test_stage_failure_raised_by_runner(self, tmp_path, mocker):
        config = ExperimentPresets.smoke().with_overrides(out=str(tmp_path))
        runner = ExperimentRunner(config)
        runner.cmd_gen_data()
        runner.cmd_train(["neg"])
        mocker.patch("mia_lab.inversion.select_results", side_effect=NumericFailureError("溢出"))
        with pytest.raises(StageError) as excinfo:
            runner.cmd_attack("ppa", ["neg"])
        assert excinfo.value.stage == "selection"


class TestPipeline:
    """run-all 的产物"""

    def test_artifact_layout(self, pipeline):
        expected = [
            "config.json",
            "data/train.csv",
            "data/test.csv",
            "data/aux.csv",
            "data/provenance.json",
            "models/training.json",
            "models/eval_model.json",
            "models/hard_history.csv",
            "attacks/pos/simple/attack_run.json",
            "attacks/neg/simple_uncapped/attack_run.json",
            "attacks/hard/ppa/attack_run.json",
            "metrics/pos.json",
            "metrics/neg_embedding.csv",
            "robustness/hard_fgsm.json",
            "robustness/hard_pgd.json",
            "summary.json",
        ]
        for relative in expected:
            assert (pipeline / relative).is_file(), relative

    def test_provenance(self, pipeline):
        expected_hash = ExperimentPresets.smoke().fingerprint
        for relative in ("data/provenance.json", "models/training.json", "metrics/hard.json", "summary.json"):
            document = read_json(pipeline / relative)
            assert document["provenance"]["config_hash"] == expected_hash
            assert document["provenance"]["master_seed"] == 0
            assert len(document["payload_hash"]) == 64

    def test_data_splits_are_disjoint(self, pipeline):
        provenance = read_json(pipeline / "data/provenance.json")["payload"]
        sizes = {name: split["size"] for name, split in provenance["splits"].items()}
        assert sum(sizes.values()) == 90
        assert sizes["aux"] == 18

    def test_simple_attacks(self, pipeline):
        capped = read_json(pipeline / "attacks/hard/simple/attack_run.json")["payload"]
        uncapped = read_json(pipeline / "attacks/hard/simple_uncapped/attack_run.json")["payload"]
        capped_runs = capped["classes"]["2"]["trajectories"]
        uncapped_runs = uncapped["classes"]["2"]["trajectories"]
        assert [t["candidate_index"] for t in capped_runs] == [0, 1]
        assert len(capped["classes"]["2"]["selected"]["points"]) == 2
        assert all(t["steps"] <= 100 for t in capped_runs)
        assert [t["steps"] for t in uncapped_runs] == [30, 30]
        assert {t["stop_reason"] for t in uncapped_runs} == {"max_steps"}

    def test_simple_summary_takes_medians(self, pipeline):
        hard = read_json(pipeline / "summary.json")["payload"]["models"]["hard"]["simple"]
        assert hard["starts"] == 2
        per_start = hard["per_start"]
        assert hard["steps"] == pytest.approx(np.median([s["steps"] for s in per_start]))
        assert hard["nearest_train_distance"] == pytest.approx(
            np.median([s["nearest_train_distance"] for s in per_start])
        )

    def test_ppa_run(self, pipeline):
        payload = read_json(pipeline / "attacks/pos/ppa/attack_run.json")["payload"]
        assert [s["status"] for s in payload["stages"]] == ["completed"] * 3
        for c in ("0", "1", "2"):
            entry = payload["classes"][c]
            assert len(entry["selected"]["points"]) == 2
            assert len(entry["trajectories"]) == 4
        files = sorted((pipeline / "attacks/pos/ppa/trajectories").glob("class0_*.csv"))
        assert len(files) == 4
        trajectory = pd.read_csv(files[0])
        assert list(trajectory.columns[:5]) == ["step", "x_0", "x_1", "z_0", "z_1"]
        assert len(trajectory) == 16

    def test_metrics_report(self, pipeline):
        document = read_json(pipeline / "metrics/hard.json")
        report = document["payload"]
        assert report["k"] == 2
        assert 0.0 <= report["acc_at_1"] <= report["acc_at_k"] <= 1.0
        assert report["delta_eval"] >= 0.0
        assert any("δ_face" in note for note in report["notes"])
        eval_checkpoint = read_json(pipeline / "models/training.json")["payload"]["models"]["eval_model"]
        assert document["provenance"]["eval_model"]["checkpoint_sha256"] == eval_checkpoint["checkpoint_sha256"]
        attack_run = read_json(pipeline / "attacks/hard/ppa/attack_run.json")
        assert document["provenance"]["attack_run_hash"] == attack_run["payload_hash"]

    def test_eval_model_is_wider(self, pipeline):
        models = read_json(pipeline / "models/training.json")["payload"]["models"]
        assert models["eval_model"]["hidden_dims"] == [16, 16, 16]
        assert models["hard"]["hidden_dims"] == [8, 8]
        assert models["eval_model"]["train_seed"] != models["hard"]["train_seed"]

    def test_summary_orderings(self, pipeline):
        summary = read_json(pipeline / "summary.json")["payload"]
        assert set(summary["models"]) == {"pos", "hard", "neg"}
        for key in ("simple_distance", "simple_steps", "acc_at_1", "xi_train", "neg_delta_eval"):
            entry = summary["orderings"][key]
            assert sorted(entry["ranking"]) == ["hard", "neg", "pos"]
            assert entry["expected"] == ["pos", "hard", "neg"]
            assert entry["holds"] in (True, False)

    def test_summary_gradient_margin_and_robustness(self, pipeline):
        orderings = read_json(pipeline / "summary.json")["payload"]["orderings"]
        similarity = orderings["gradient_similarity"]
        assert similarity["expected"] == ["hard", "neg"]
        assert similarity["margin"] == GRADIENT_SIMILARITY_MARGIN == 0.2
        for key in ("fgsm_untargeted_success", "pgd_untargeted_success"):
            assert orderings[key]["expected"] == ["hard", "neg"]
            assert orderings[key]["holds"] in (True, False)
        assert orderings["neg_logit_intra_inter_ratio"]["expected"] == ["pos", "hard"]

    def test_gradient_similarity_from_random_targets(self, pipeline):
        summary = read_json(pipeline / "metrics/neg.json")["payload"]["gradient_similarity"]
        assert summary["source"] == "random_targets"
        assert summary["trajectories"] + summary["excluded_trajectories"] == 6
        series = pd.read_csv(pipeline / "metrics/neg_gradient_similarity.csv")
        assert list(series.columns) == ["step", "mean", "std", "count"]
        assert len(series) == 4

    def test_robustness_sweep(self, pipeline):
        report = read_json(pipeline / "robustness/hard_pgd.json")["payload"]
        assert [p["epsilon"] for p in report["sweep"]] == [0.1, 0.6]
        assert [p["step_size"] for p in report["sweep"]] == pytest.approx([0.1 / 3, 0.2])
        assert report["data_margin_linf"] > 0.0
        summary = read_json(pipeline / "summary.json")["payload"]["models"]["hard"]["robustness"]
        assert summary["pgd"]["sweep"] == report["sweep"]

    def test_robustness_command_sweep(self, pipeline):
        result = invoke(pipeline, "robustness", "--attack", "bim", "--variant", "hard", "--sweep", "0.05",
                        "--sweep", "0.3")
        assert result.exit_code == 0, result.output
        report = read_json(pipeline / "robustness/hard_bim.json")["payload"]
        assert [p["epsilon"] for p in report["sweep"]] == [0.05, 0.3]
        assert report["sweep"][1]["untargeted_success_rate"] == report["untargeted_success_rate"]

    def test_confidence_grid(self, pipeline):
        result = invoke(pipeline, "confidence-grid", "--model", "hard", "--resolution", "3",
                        "--bounds", "-1", "1", "-2", "2")
        assert result.exit_code == 0, result.output
        grid = pd.read_csv(pipeline / "grids/hard_confidence.csv")
        assert list(grid.columns) == ["x1", "x2", "p_0", "p_1", "p_2"]
        assert len(grid) == 9
        np.testing.assert_allclose(grid[["p_0", "p_1", "p_2"]].sum(axis=1), 1.0)
        assert grid["x1"].min() == -1.0 and grid["x2"].max() == 2.0

    def test_confidence_grid_unknown_model(self, pipeline):
        assert invoke(pipeline, "confidence-grid", "--model", "nobody").exit_code == 3

    def test_verify_gradients(self, pipeline):
        result = invoke(pipeline, "verify-gradients", "--instances", "20", "--network-instances", "2")
        assert result.exit_code == 0, result.output
        assert read_json(pipeline / "verification.json")["payload"]["passed"] is True


class TestReproducibility:
    """相同配置与种子的重复运行"""

    ARTIFACTS = ("data/provenance.json", "models/training.json", "attacks/hard/ppa/attack_run.json")

    def test_parallel_run_matches_serial(self, tmp_path):
        commands = (["gen-data"], ["train"], ["attack", "--mode", "ppa", "--variant", "hard"])
        serial = run_steps(tmp_path / "serial", *commands, jobs=1)
        parallel = run_steps(tmp_path / "parallel", *commands, jobs=3)
        for relative in self.ARTIFACTS:
            assert read_json(serial / relative)["payload_hash"] == read_json(parallel / relative)["payload_hash"]
        assert (serial / "models/hard.json").read_bytes() == (parallel / "models/hard.json").read_bytes()

    def test_different_seed_changes_data(self, tmp_path):
        for seed in (0, 1):
            result = invoke(tmp_path / str(seed), "gen-data", seed=seed)
            assert result.exit_code == 0, result.output
        a = read_json(tmp_path / "0/data/provenance.json")["payload"]["splits"]["train"]["sha256"]
        b = read_json(tmp_path / "1/data/provenance.json")["payload"]["splits"]["train"]["sha256"]
        assert a != b


class TestOrderingHelpers:
    """排序汇总"""

    def test_rank_puts_missing_last(self):
        assert rank({"a": 1.0, "b": float("nan"), "c": 3.0}, descending=True) == ["c", "a", "b"]

    def test_holds(self):
        values = {"pos": 3.0, "hard": 2.0, "neg": 2.0}
        assert holds(values, ["pos", "hard", "neg"]) is True
        assert holds(values, ["pos", "hard", "neg"], strict=True) is False
        assert holds({"pos": None, "hard": 1.0}, ["pos", "hard"]) is None

    def test_holds_with_margin(self):
        assert holds({"hard": 0.9, "neg": 0.7}, ["hard", "neg"], strict=True, margin=0.2) is True
        assert holds({"hard": 0.9, "neg": 0.75}, ["hard", "neg"], strict=True, margin=0.2) is False
        assert holds({"hard": 0.9, "neg": 0.75}, ["hard", "neg"], strict=True) is True


def toy_models(hard_similarity: float, neg_similarity: float) -> dict:
    def entry(distance, steps, similarity, success):
        return {
            "simple": {"nearest_train_distance": distance, "steps": steps},
            "acc_at_1": 1.0,
            "xi_train": 1.0,
            "delta_eval": 0.1,
            "mean_gradient_similarity": similarity,
            "intra_inter_ratio": 0.5,
            "logit_intra_inter_ratio": 0.3,
            "robustness": {"fgsm": {"untargeted": success, "targeted": success}},
        }

    return {
        "pos": entry(0.1, 80.0, 0.95, 0.3),
        "hard": entry(0.4, 20.0, hard_similarity, 0.2),
        "neg": entry(9.0, 1.0, neg_similarity, 0.0),
    }


class TestSummarizeOrderings:
    """summary.json 中的排序判定"""

    def test_gradient_similarity_needs_margin(self):
        close = summarize_orderings(toy_models(0.9, 0.8))["gradient_similarity"]
        wide = summarize_orderings(toy_models(0.9, 0.5))["gradient_similarity"]
        assert close["holds"] is False
        assert wide["holds"] is True
        assert close["margin"] == GRADIENT_SIMILARITY_MARGIN

    def test_robustness_ordering(self):
        orderings = summarize_orderings(toy_models(0.9, 0.5))
        assert orderings["fgsm_untargeted_success"]["ranking"] == ["pos", "hard", "neg"]
        assert orderings["fgsm_untargeted_success"]["holds"] is True
        assert "pgd_untargeted_success" not in orderings

    def test_simple_orderings(self):
        orderings = summarize_orderings(toy_models(0.9, 0.5))
        assert orderings["simple_distance"]["holds"] is True
        assert orderings["simple_steps"]["holds"] is True
        assert "margin" not in orderings["simple_steps"]

    def test_missing_similarity_is_undecided(self):
        models = toy_models(0.9, 0.5)
        models["neg"]["mean_gradient_similarity"] = None
        assert summarize_orderings(models)["gradient_similarity"]["holds"] is None
