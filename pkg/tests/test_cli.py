import json
import subprocess
import sys
from pathlib import Path

import pytest

from tailaug.cli import DEFAULTS, load_config, run_command

TINY = {
    "world.num_train": 120,
    "world.num_test": 40,
    "world.image_size": 32,
    "train.epochs": 2,
    "finetune.epochs": 2,
    "train.base_width": 8,
}


def write_config(tmp_path, extra=None):
    body = dict(TINY)
    body.update(extra or {})
    lines = ["# tiny test config"] + [f"{k}={v}" for k, v in body.items()]
    path = tmp_path / "run.cfg"
    path.write_text("\n".join(lines) + "\n")
    return path


class TestConfig:
    def test_defaults_complete(self):
        cfg = load_config(None)
        assert cfg == DEFAULTS

    def test_file_and_overrides(self, tmp_path):
        path = write_config(tmp_path)
        cfg = load_config(path, overrides=["schedule.beta=0.9"], seed=42)
        assert cfg["world.num_train"] == 120
        assert cfg["schedule.beta"] == 0.9
        assert cfg["seed"] == 42

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("no.such.key=1\n")
        with pytest.raises(ValueError, match="unknown config key"):
            load_config(path)
        with pytest.raises(ValueError, match="unknown config key"):
            load_config(None, overrides=["nope=2"])

    def test_malformed_line_rejected(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("just a line without equals\n")
        with pytest.raises(ValueError, match="KEY=VALUE"):
            load_config(path)


class TestDispatch:
    def test_unknown_subcommand_exits_2_with_usage(self):
        result = subprocess.run(
            [sys.executable, "-m", "tailaug", "frobnicate"],
            capture_output=True,
            text=True,
        )
        assert result.returncode == 2
        assert "usage" in result.stderr.lower()

    def test_unknown_subcommand_via_run_command(self, capsys):
        assert run_command(["frobnicate"]) == 2

    def test_stage_failure_is_nonzero_and_names_stage(self, tmp_path, capsys):
        cfg = write_config(tmp_path, {"partition.policy": "explicit", "partition.tail_names": "bogus"})
        code = run_command(["--config", str(cfg), "--out", str(tmp_path / "run"), "pipeline"])
        captured = capsys.readouterr()
        assert code != 0
        assert "stats" in captured.err


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli_stages")
    cfg = write_config(tmp)
    world = tmp / "world"
    assert run_command(["--config", str(cfg), "--out", str(world), "synth"]) == 0
    return tmp, cfg, world


class TestStages:
    def test_synth_outputs(self, run_dir):
        tmp, cfg, world = run_dir
        assert (world / "manifest_train.csv").exists()
        assert (world / "manifest_test.csv").exists()
        assert (world / "registry.json").exists()
        assert (world / "entanglement_true.json").exists()
        assert (world / "resolved_config.txt").exists()
        summary = json.loads((world / "summary.json").read_text())
        assert summary["schema_version"] == 1
        assert summary["synth"]["train_records"] == 120

    def test_stats_report(self, run_dir, tmp_path):
        tmp, cfg, world = run_dir
        report_path = tmp_path / "stats.json"
        code = run_command(
            [
                "--config", str(cfg), "--out", str(tmp_path / "statsrun"), "stats",
                "--manifest", str(world / "manifest_train.csv"),
                "--registry", str(world / "registry.json"),
                "--report", str(report_path),
            ]
        )
        assert code == 0
        report = json.loads(report_path.read_text())
        assert report["total_samples"] == 120
        assert len(report["classes"]) == 8
        assert {row["group"] for row in report["classes"]} <= {"head", "tail"}

    def test_classifier_generate_finetune_evaluate_chain(self, run_dir, tmp_path):
        tmp, cfg, world = run_dir
        ckpt = tmp_path / "baseline.ckpt"
        code = run_command(
            [
                "--config", str(cfg), "--out", str(tmp_path / "train"), "train-classifier",
                "--manifest", str(world / "manifest_train.csv"),
                "--registry", str(world / "registry.json"),
                "--checkpoint", str(ckpt),
            ]
        )
        assert code == 0 and ckpt.exists()

        gen_dir = tmp_path / "generation"
        code = run_command(
            [
                "--config", str(cfg), "--out", str(gen_dir),
                "--set", "gen.debug_dump=2", "--set", "gen.cam_threshold=0.4",
                "generate",
                "--manifest", str(world / "manifest_train.csv"),
                "--registry", str(world / "registry.json"),
                "--classifier", str(ckpt),
                "--world", str(world),
            ]
        )
        assert code == 0
        assert (gen_dir / "provenance.jsonl").exists()
        aug_manifest = gen_dir / "manifest_augmented.csv"
        assert aug_manifest.exists()
        summary = json.loads((gen_dir / "summary.json").read_text())
        if summary["generate"]["emitted"] > 0:
            dumped = list((gen_dir / "debug").glob("*_cam.png"))
            assert dumped and all(p.with_name(p.name.replace("_cam", "_mask")).exists() for p in dumped)

        tuned = tmp_path / "tuned.ckpt"
        code = run_command(
            [
                "--config", str(cfg), "--out", str(tmp_path / "ft"), "finetune",
                "--manifest", str(world / "manifest_train.csv"),
                "--augmented", str(aug_manifest),
                "--registry", str(world / "registry.json"),
                "--init", str(ckpt),
                "--checkpoint", str(tuned),
            ]
        )
        assert code == 0 and tuned.exists()

        report_path = tmp_path / "eval.json"
        code = run_command(
            [
                "--config", str(cfg), "--out", str(tmp_path / "ev"), "evaluate",
                "--checkpoint", str(tuned),
                "--test", str(world / "manifest_test.csv"),
                "--registry", str(world / "registry.json"),
                "--train-manifest", str(world / "manifest_train.csv"),
                "--report", str(report_path),
            ]
        )
        assert code == 0
        report = json.loads(report_path.read_text())
        assert set(report) >= {"macro_f1", "head_macro_f1", "tail_macro_f1", "per_class", "threshold"}

    def test_train_gen_subcommand(self, run_dir, tmp_path):
        tmp, cfg, world = run_dir
        # build a normals-only manifest from the world's unlabeled records
        from tailaug.core import load_manifest, load_registry, save_manifest, Manifest

        registry = load_registry(world / "registry.json")
        manifest = load_manifest(world / "manifest_train.csv", registry)
        normals = tuple(r for r in manifest if not r.labels.any())[:24]
        normals_path = world / "manifest_normals.csv"
        save_manifest(Manifest(registry, normals, "train"), normals_path)
        ckpt = tmp_path / "gen.ckpt"
        code = run_command(
            [
                "--config", str(cfg), "--out", str(tmp_path / "tg"),
                "--set", "diffusion.timesteps=10", "--set", "diffusion.train_epochs=1",
                "train-gen",
                "--normals", str(normals_path),
                "--registry", str(world / "registry.json"),
                "--checkpoint", str(ckpt),
            ]
        )
        assert code == 0 and ckpt.exists()
        summary = json.loads((tmp_path / "tg" / "summary.json").read_text())
        assert len(summary["train_gen"]["train_losses"]) == 1


def test_llm_backend_falls_back_to_matrix(tmp_path):
    import numpy as np

    from tailaug import knowledge
    from tailaug.cli import _FallbackBackend

    def dead_transport(prompt):
        raise OSError("endpoint unreachable")

    llm = knowledge.LLMBackend(
        knowledge.LLMConfig(endpoint="http://unit.test", model="m", max_retries=1, backoff_base=0.0),
        transport=dead_transport,
    )
    matrix = knowledge.EntanglementMatrix(names=("A", "T"), scores=np.array([[0.0, 0.6], [0.6, 0.0]]))
    backend = _FallbackBackend(llm, knowledge.MatrixBackend(matrix))
    assert backend.query([("A", "T")]) == {("A", "T"): 0.6}


class TestPipeline:
    def test_mini_pipeline_and_report(self, tmp_path):
        cfg = write_config(tmp_path)
        out = tmp_path / "run"
        assert run_command(["--config", str(cfg), "--seed", "5", "--out", str(out), "pipeline"]) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["schema_version"] == 1
        assert summary["generation"]["inputs"] == 120
        assert (out / "classifier_baseline.ckpt").exists()
        assert (out / "classifier_finetuned.ckpt").exists()
        assert (out / "report.md").exists()
        assert (out / "class_distribution.png").exists()
        assert (out / "f1_delta.png").exists()
        assert (out / "resolved_config.txt").exists()
        # schedule counts logged per epoch
        assert len(summary["schedule"]["per_epoch_included"]) == 2
        # standalone report re-render succeeds on the same run dir
        assert run_command(["--out", str(tmp_path / "r"), "report", "--run", str(out)]) == 0
