"""
Command-line tests: exit codes, the end-to-end command flow and output files.
"""
import json
from pathlib import Path

import numpy as np
import pytest
from pydantic import ValidationError

from hiedit.cli import build_parser, cli_values, exit_code_for, main, read_image, write_preview
from hiedit.config import write_config
from hiedit.errors import ConfigError, DataIOError, InvariantViolation
from hiedit.model import TrainState
from hiedit.tensor_io import load_archive, read_tensor, write_tensor


@pytest.fixture
def config_file(config, tmp_path):
    return str(write_config(config, tmp_path / "cfg"))


@pytest.fixture(scope="module")
def trained(tmp_path_factory, make_config):
    """gen-data then one training step, shared by the eval and edit tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg = str(write_config(make_config({"train.steps": 1}), root / "cfg"))
    assert main(["--config", cfg, "gen-data", "--out-dir", str(root / "data")]) == 0
    assert main(["--config", cfg, "train", "--dataset", str(root / "data"), "--out-dir", str(root / "run")]) == 0
    return root, cfg


class TestExitCodes:
    """Every failure maps to one exit code."""

    @pytest.mark.parametrize("error,code", [
        (ConfigError("x"), 1),
        (DataIOError("x", "p"), 2),
        (InvariantViolation("x"), 3),
        (OSError("x"), 2),
        (RuntimeError("x"), 3),
    ])
    def test_mapping(self, error, code):
        assert exit_code_for(error) == code

    def test_validation_error_is_a_config_failure(self):
        with pytest.raises(ValidationError) as info:
            TrainState(step="x")
        assert exit_code_for(info.value) == 1

    def test_unknown_config_key(self):
        assert main(["--set", "model.widht=4", "selftest", "--seeds", "1"]) == 1

    def test_invalid_config_value(self):
        assert main(["--set", "model.heads=3", "selftest", "--seeds", "1"]) == 1

    def test_missing_config_file(self, tmp_path):
        assert main(["--config", str(tmp_path / "absent.json"), "selftest", "--seeds", "1"]) == 2

    def test_eval_needs_a_checkpoint(self, config_file, dataset_dir, tmp_path):
        assert main(["--config", config_file, "eval", "--dataset", str(dataset_dir),
                     "--out-dir", str(tmp_path / "eval")]) == 1

    def test_dataset_shape_mismatch(self, config_file, dataset_dir, tmp_path):
        assert main(["--config", config_file, "--set", "image.height=16", "train", "--dataset", str(dataset_dir),
                     "--out-dir", str(tmp_path / "run")]) == 1

    def test_missing_dataset(self, config_file, tmp_path):
        assert main(["--config", config_file, "train", "--dataset", str(tmp_path / "none"),
                     "--out-dir", str(tmp_path / "run")]) == 2


class TestArguments:
    """Flag parsing and precedence inputs."""

    def test_cli_values_only_include_set_flags(self):
        args = build_parser().parse_args(["--seed", "3", "train", "--dataset", "d", "--out-dir", "o",
                                          "--no-wall-time"])
        assert cli_values(args) == {"seed": 3, "train.record_wall_time": False}

    def test_category_mix_flag(self):
        args = build_parser().parse_args(["gen-data", "--out-dir", "o", "--category-mix",
                                          "Physical=2,Temporal=1,Causal=1,Story=0"])
        assert cli_values(args)["data.category_mix"]["Physical"] == 2.0

    def test_repeatable_overrides(self):
        args = build_parser().parse_args(["--set", "seed=1", "--set", "threads=2", "selftest"])
        assert args.overrides == ["seed=1", "threads=2"]


class TestImages:
    def test_ppm_preview_round_trip(self, tmp_path):
        img = np.random.default_rng(0).random((8, 8, 3))
        write_preview(tmp_path / "x.ppm", img)
        back = read_image(tmp_path / "x.ppm")
        assert back.shape == (8, 8, 3)
        assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12

    def test_rbt_image(self, tmp_path):
        img = np.full((4, 4, 3), 0.25)
        write_tensor(tmp_path / "x.rbt", img)
        assert np.array_equal(read_image(tmp_path / "x.rbt"), img)

    def test_unsupported_format(self, tmp_path):
        with pytest.raises(DataIOError):
            read_image(tmp_path / "x.png")


class TestCommands:
    """gen-data, train, eval, edit and selftest through ``main``."""

    def test_gen_data_summary(self, config_file, tmp_path, capsys):
        assert main(["--config", config_file, "gen-data", "--count", "4", "--out-dir", str(tmp_path / "d")]) == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary["count"] == 4
        assert set(summary["categories"]) == {"Physical", "Temporal", "Causal", "Story"}

    def test_train_outputs(self, trained):
        root, _ = trained
        assert (root / "run" / "checkpoints" / "step-000001" / "lora.rba").exists()
        assert len((root / "run" / "train_log.jsonl").read_text().splitlines()) == 1

    def test_eval_with_checkpoint(self, trained, capsys):
        root, cfg = trained
        code = main(["--config", cfg, "eval", "--dataset", str(root / "data"), "--checkpoint",
                     str(root / "run" / "checkpoints" / "step-000001"), "--out-dir", str(root / "eval")])
        assert code == 0
        report = json.loads((root / "eval" / "metrics.json").read_text())
        assert report["split"] == "val"
        assert report["overall"]["count"] == 4
        assert "overall" in capsys.readouterr().out

    def test_eval_force_targets(self, trained):
        root, cfg = trained
        code = main(["--config", cfg, "eval", "--dataset", str(root / "data"), "--force-targets",
                     "--out-dir", str(root / "forced")])
        assert code == 0
        report = json.loads((root / "forced" / "metrics.json").read_text())
        assert report["overall"]["l1"] == 0.0

    def test_edit_with_guidance_dump(self, trained):
        root, cfg = trained
        source = sorted((root / "data" / "blobs").glob("*.src.rbt"))[0]
        out = root / "edit" / "cube"
        code = main(["--config", cfg, "edit", "--checkpoint", str(root / "run" / "checkpoints" / "step-000001"),
                     "--image", str(source), "--instruction", "What would happen if the cube melted?",
                     "--out", str(out), "--dump-guidance"])
        assert code == 0
        edited = read_tensor(root / "edit" / "cube.rbt")
        assert edited.shape == (32, 32, 3)
        assert (root / "edit" / "cube.ppm").exists()
        tensors, manifest = load_archive(root / "edit" / "cube.guidance.rba")
        assert tensors["V"].shape[0] == 4
        assert {"V", "V_hat", "R_bar_vis", "e_bar_vis", "R_bar_txt", "e_bar_txt"} == set(tensors)
        assert manifest["layers"] == sorted(tensors)

    def test_edit_missing_image(self, trained):
        root, cfg = trained
        code = main(["--config", cfg, "edit", "--checkpoint", str(root / "run" / "checkpoints" / "step-000001"),
                     "--image", str(root / "nothing.rbt"), "--instruction", "What if the cube melted?",
                     "--out", str(root / "edit" / "none")])
        assert code == 2

    def test_edit_checkpoint_dimension_mismatch(self, trained):
        root, cfg = trained
        source = sorted((root / "data" / "blobs").glob("*.src.rbt"))[0]
        code = main(["--config", cfg, "--set", "cme.n_e=5", "edit", "--checkpoint",
                     str(root / "run" / "checkpoints" / "step-000001"), "--image", str(source),
                     "--instruction", "What if the cube melted?", "--out", str(root / "edit" / "bad")])
        assert code == 1

    def test_selftest_command(self, capsys):
        assert main(["selftest", "--seeds", "1"]) == 0
        assert json.loads(capsys.readouterr().out)["passed"] is True


def _run_all(root, cfg, steps):
    """gen-data, train and eval into ``root``; returns the files every run must reproduce."""
    assert main(["--config", cfg, "gen-data", "--out-dir", str(root / "data")]) == 0
    assert main(["--config", cfg, "train", "--dataset", str(root / "data"), "--out-dir", str(root / "run"),
                 "--steps", str(steps), "--no-wall-time"]) == 0
    latest = (root / "run" / "checkpoints" / "latest.txt").read_text().strip()
    assert main(["--config", cfg, "eval", "--dataset", str(root / "data"), "--checkpoint",
                 str(root / "run" / "checkpoints" / Path(latest).name), "--out-dir", str(root / "eval")]) == 0
    files = [root / "run" / "train_log.jsonl", root / "eval" / "metrics.json", root / "eval" / "metrics.txt"]
    files += sorted((root / "run" / "checkpoints").rglob("*.rba"))
    files += sorted((root / "run" / "checkpoints").rglob("state.json"))
    return {str(f.relative_to(root)): f.read_bytes() for f in files}


class TestDeterminism:
    """Two runs from the same seed write identical bytes."""

    def _compare(self, make_config, tmp_path, steps):
        cfg = str(write_config(make_config({"train.checkpoint_every": 2, "train.log_every": 1}), tmp_path / "cfg"))
        first = _run_all(tmp_path / "a", cfg, steps)
        second = _run_all(tmp_path / "b", cfg, steps)
        assert sorted(first) == sorted(second)
        assert any(name.endswith("lora.rba") for name in first)
        for name, content in first.items():
            assert second[name] == content, f"{name} differs between runs"

    def test_short_run_is_byte_identical(self, make_config, tmp_path):
        self._compare(make_config, tmp_path, steps=4)

    @pytest.mark.slow
    def test_hundred_step_run_is_byte_identical(self, make_config, tmp_path):
        self._compare(make_config, tmp_path, steps=100)
