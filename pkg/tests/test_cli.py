"""End-to-end checks of the command-line app: config plumbing, exit codes,
artifact layout, and byte-level reproducibility of runs."""

import json
from pathlib import Path
from unittest import mock

import numpy as np
import pytest
import yaml

from quadball.cli import (
    DIVERGENCE_LIMIT,
    EXIT_CONFIG,
    EXIT_DIVERGED,
    EXIT_IO,
    EXIT_OK,
    METRICS_COLUMNS,
    RunConfig,
    load_config,
    main,
)
from quadball.nn import load_checkpoint
from quadball.ppo import NonFiniteLoss, PpoUpdater


def tiny_config(tmp_path, **overrides) -> Path:
    base = dict(env_count=2, steps_per_env=16, iterations=2, max_episode_steps=50)
    cfg = RunConfig(**{**base, **overrides})
    path = tmp_path / "run.yaml"
    with open(path, "w") as f:
        yaml.safe_dump(cfg.to_dict(), f)
    return path


def read_metrics(path):
    lines = Path(path).read_text().splitlines()
    assert lines[0].startswith("# config_digest: ")
    header = lines[1].split(",")
    rows = [line.split(",") for line in lines[2:]]
    return lines[0].split(": ")[1], header, rows


class TestConfig:
    def test_defaults_round_trip(self, capsys):
        assert main(["defaults"]) == EXIT_OK
        text = capsys.readouterr().out
        cfg = RunConfig.from_dict(yaml.safe_load(text))
        assert cfg == RunConfig()
        assert cfg.digest() == RunConfig().digest()

    def test_digest_tracks_semantics_only(self, tmp_path):
        base = load_config(tiny_config(tmp_path))
        seeded = RunConfig(env_count=2, steps_per_env=16, iterations=2,
                           max_episode_steps=50, master_seed=7)
        assert base.digest() != seeded.digest()

    def test_unknown_top_level_key(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("schema: quadball/1\nnot_a_knob: 1\n")
        assert main(["train", "--config", str(path), "--out", str(tmp_path / "o")]) == EXIT_CONFIG

    def test_unknown_section_key(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("schema: quadball/1\nppo:\n  learning_rte: 0.1\n")
        assert main(["train", "--config", str(path), "--out", str(tmp_path / "o")]) == EXIT_CONFIG

    def test_wrong_schema(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("schema: quadball/999\n")
        assert main(["train", "--config", str(path), "--out", str(tmp_path / "o")]) == EXIT_CONFIG

    def test_invalid_section_value(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("schema: quadball/1\nppo:\n  gamma: 1.5\n")
        assert main(["train", "--config", str(path), "--out", str(tmp_path / "o")]) == EXIT_CONFIG

    def test_missing_config_file_is_io_error(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "nope.yaml"),
                     "--out", str(tmp_path / "o")]) == EXIT_IO

    def test_shipped_configs_load(self):
        root = Path(__file__).resolve().parents[1] / "configs"
        for name in ("default.yaml", "stage0.yaml", "smoke.yaml"):
            cfg = load_config(root / name)
            assert len(cfg.digest()) == 64

    def test_stage0_config_pins_curriculum(self):
        root = Path(__file__).resolve().parents[1] / "configs"
        cfg = load_config(root / "stage0.yaml")
        assert cfg.curriculum.factor_initial == cfg.curriculum.factor_final == 0.2
        assert cfg.curriculum.speed_final_deg == 0.0
        assert cfg.disturbance.probability == 0.0


class TestTrain:
    def test_artifacts_and_metrics_shape(self, tmp_path):
        cfg_path = tiny_config(tmp_path)
        out = tmp_path / "run"
        assert main(["train", "--config", str(cfg_path), "--out", str(out)]) == EXIT_OK
        assert (out / "config.yaml").exists()
        assert (out / "final.ckpt").exists()
        digest, header, rows = read_metrics(out / "metrics.csv")
        assert tuple(header) == METRICS_COLUMNS
        assert len(rows) == 2
        assert [r[0] for r in rows] == ["0", "1"]
        assert digest == load_config(cfg_path).digest()
        # one wall-time row per iteration lives in a separate file
        timing = (out / "timing.csv").read_text().splitlines()
        assert len(timing) == 2 + 2

        params, head = load_checkpoint(out / "final.ckpt")
        assert head["iteration"] == 2
        assert head["config_digest"] == digest
        assert head["config"]["env_count"] == 2

    def test_seed_override_changes_digest(self, tmp_path):
        cfg_path = tiny_config(tmp_path)
        out = tmp_path / "run"
        assert main(["train", "--config", str(cfg_path), "--seed", "9",
                     "--out", str(out)]) == EXIT_OK
        digest, _, _ = read_metrics(out / "metrics.csv")
        assert digest != load_config(cfg_path).digest()

    def test_rerun_is_byte_identical(self, tmp_path):
        cfg_path = tiny_config(tmp_path)
        for name in ("a", "b"):
            assert main(["train", "--config", str(cfg_path),
                         "--out", str(tmp_path / name)]) == EXIT_OK
        assert (tmp_path / "a/metrics.csv").read_bytes() == (tmp_path / "b/metrics.csv").read_bytes()
        assert (tmp_path / "a/final.ckpt").read_bytes() == (tmp_path / "b/final.ckpt").read_bytes()

    def test_worker_count_does_not_change_results(self, tmp_path, monkeypatch):
        cfg_path = tiny_config(tmp_path)
        assert main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "a")]) == EXIT_OK
        monkeypatch.setenv("QUADBALL_WORKERS", "1")
        assert main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "b")]) == EXIT_OK
        assert (tmp_path / "a/metrics.csv").read_bytes() == (tmp_path / "b/metrics.csv").read_bytes()
        assert (tmp_path / "a/final.ckpt").read_bytes() == (tmp_path / "b/final.ckpt").read_bytes()

    def test_checkpoint_interval(self, tmp_path):
        cfg_path = tiny_config(tmp_path, checkpoint_interval=1)
        out = tmp_path / "run"
        assert main(["train", "--config", str(cfg_path), "--out", str(out)]) == EXIT_OK
        assert (out / "ckpt_000001.ckpt").exists()
        assert (out / "ckpt_000002.ckpt").exists()

    def test_divergence_aborts_with_exit_4(self, tmp_path):
        cfg_path = tiny_config(tmp_path, iterations=DIVERGENCE_LIMIT + 2)
        out = tmp_path / "run"

        def boom(self, *a, **k):
            raise NonFiniteLoss("poisoned")

        with mock.patch.object(PpoUpdater, "update", boom):
            code = main(["train", "--config", str(cfg_path), "--out", str(out)])
        assert code == EXIT_DIVERGED
        # a metrics row is still written for every attempted iteration
        _, _, rows = read_metrics(out / "metrics.csv")
        assert len(rows) == DIVERGENCE_LIMIT
        assert rows[-1][8] == "nan"  # clip_fraction column
        assert (out / "final.ckpt").exists()


class TestEvalInspect:
    @pytest.fixture(scope="class")
    @staticmethod
    def trained(tmp_path_factory):
        tmp = tmp_path_factory.mktemp("trained")
        cfg_path = tiny_config(tmp)
        out = tmp / "run"
        assert main(["train", "--config", str(cfg_path), "--out", str(out)]) == EXIT_OK
        return out / "final.ckpt"

    def test_eval_outputs(self, trained, tmp_path):
        out = tmp_path / "ev"
        assert main(["eval", "--checkpoint", str(trained), "--axis", "yaw",
                     "--speed-deg", "15", "--episodes", "2",
                     "--out", str(out)]) == EXIT_OK
        summary = json.loads((out / "summary.json").read_text())
        assert summary["axis"] == "yaw"
        assert len(summary["episodes"]) == 2
        assert summary["aggregate"]["mean_survival_time"] > 0
        lines = (out / "ep_000.csv").read_text().splitlines()
        assert lines[0].startswith("# config_digest: ")
        cols = lines[1].split(",")
        assert cols[0] == "time" and "delta_q" in cols and "r_total" in cols
        assert len(lines) >= 3
        first = dict(zip(cols, lines[2].split(",")))
        assert float(first["time"]) == pytest.approx(0.01)
        assert abs(float(first["delta_q"])) < 0.2  # starts near the target

    def test_eval_reruns_identical(self, trained, tmp_path):
        for name in ("x", "y"):
            assert main(["eval", "--checkpoint", str(trained), "--episodes", "2",
                         "--out", str(tmp_path / name)]) == EXIT_OK
        for f in ("ep_000.csv", "ep_001.csv", "summary.json"):
            assert (tmp_path / "x" / f).read_bytes() == (tmp_path / "y" / f).read_bytes()

    def test_inspect_prints_shapes(self, trained, capsys):
        assert main(["inspect", "--checkpoint", str(trained)]) == EXIT_OK
        out = capsys.readouterr().out
        assert "quadball-checkpoint/1" in out
        assert "130 -> 256 -> 128 -> 12" in out
        assert "parameter count:  134553" in out

    def test_inspect_truncated_checkpoint(self, trained, tmp_path):
        stub = tmp_path / "trunc.ckpt"
        stub.write_bytes(trained.read_bytes()[:100])
        assert main(["inspect", "--checkpoint", str(stub)]) == EXIT_CONFIG

    def test_eval_missing_checkpoint(self, tmp_path):
        assert main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"),
                     "--out", str(tmp_path / "o")]) == EXIT_IO
