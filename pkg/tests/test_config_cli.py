"""Run-config loading and the ``changen`` command line."""

import json

import numpy as np
import pytest

from pychangen.cli import build_parser, main
from pychangen.config import RunConfig, load_run_config, run_config_from_dict
from pychangen.errors import ConfigurationError
from pychangen.events import EventKind


def write_config(path, data):
    path.write_text(json.dumps(data))
    return path


class TestRunConfig:
    def test_defaults(self):
        config = run_config_from_dict({})
        assert config.condition_kind == "semantic"
        assert [s.kind for s in config.event_specs] == [EventKind.CREATE]

    def test_csv_relative_to_config(self, tmp_path):
        (tmp_path / "conf").mkdir()
        (tmp_path / "conf" / "t.csv").write_text("bg,a,b\n1,0,0\n0.2,0.5,0.3\n0,0,1\n")
        path = write_config(tmp_path / "conf" / "run.json", {
            "scene": {"height": 32, "width": 32, "num_classes": 3},
            "events": [{"kind": "edit", "transition": {"csv": "t.csv"}},
                       {"kind": "remove", "selection_prob": 0.25}],
            "guidance": {"lambda": 0.3, "T": 20},
            "series_length": 2,
        })
        config = load_run_config(path)
        edit = config.event_specs[0]
        assert edit.transition.class_names == ["bg", "a", "b"]
        assert np.allclose(edit.transition.probs[1], [0.2, 0.5, 0.3])
        assert config.event_specs[1].selection_prob == 0.25
        assert config.guidance.guided_steps == 6
        assert config.series_length == 2

    def test_edit_defaults_to_uniform(self):
        config = run_config_from_dict({"scene": {"num_classes": 4}, "events": [{"kind": "edit"}]})
        assert np.allclose(config.event_specs[0].transition.probs, 0.25)

    def test_optional_blocks(self):
        config = run_config_from_dict({
            "denoiser": {"hidden_dim": 64, "num_heads": 4},
            "training": {"steps": 10},
            "detector": {"width": 8},
        })
        assert config.denoiser.hidden_dim == 64
        assert config.training.steps == 10
        assert config.detector.width == 8
        assert set(config.to_dict()) >= {"denoiser", "training", "detector"}

    @pytest.mark.parametrize("data", [
        {"events": [{"kind": "teleport"}]},
        {"events": []},
        {"condition_kind": "depth"},
        {"guidance": {"guidance_ratio": 2.0}},
        {"scene": {"num_classes": 1}},
        {"training": {"epochs": 3}},
        {"events": [{"kind": "edit", "transition": {"probs": [[1.0, 0.0]]}}]},
    ])
    def test_invalid(self, data):
        with pytest.raises(ConfigurationError):
            run_config_from_dict(data)

    def test_unreadable_file(self, tmp_path):
        with pytest.raises(ConfigurationError):
            load_run_config(tmp_path / "missing.json")
        (tmp_path / "bad.json").write_text("{")
        with pytest.raises(ConfigurationError):
            load_run_config(tmp_path / "bad.json")

    def test_to_dict_reloads(self):
        config = RunConfig()
        again = run_config_from_dict(json.loads(json.dumps(config.to_dict())))
        assert again.scene_spec == config.scene_spec
        assert again.guidance == config.guidance


class TestParser:
    def test_generate_flags(self):
        args = build_parser().parse_args([
            "generate", "--checkpoint", "c.pt", "--out", "o", "--count", "8",
            "--lambda", "0.25", "--T", "30", "--workers", "2",
        ])
        assert args.guidance_ratio == 0.25
        assert args.num_steps == 30
        assert args.workers == 2
        assert args.scene_seed_offset == 0

    def test_requires_subcommand(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args([])


class TestMain:
    @pytest.fixture
    def dataset(self, tmp_path, semantic_checkpoint):
        config = write_config(tmp_path / "run.json", {
            "scene": {"height": 16, "width": 16, "num_classes": 2,
                      "object_count_range": [1, 2], "object_size_range": [3, 6]},
            "events": [{"kind": "remove", "selection_prob": 0.5}],
            "guidance": {"guidance_ratio": 0.5, "num_steps": 4},
        })
        code = main(["-q", "generate", "--checkpoint", str(semantic_checkpoint),
                     "--config", str(config), "--out", str(tmp_path), "--count", "1"])
        assert code == 0
        return tmp_path / "Changen2-S1-1"

    def test_verify_and_stats(self, dataset, capsys):
        assert main(["verify", str(dataset)]) == 0
        assert "OK" in capsys.readouterr().out
        assert main(["stats", "--json", str(dataset)]) == 0
        stats = json.loads(capsys.readouterr().out)
        assert stats["samples"] == 1

    def test_verify_failure_exit_code(self, dataset):
        (dataset / "samples" / "000000" / "t1.png").write_bytes(b"broken")
        assert main(["verify", str(dataset)]) == 1

    def test_errors_become_exit_code(self, tmp_path):
        assert main(["stats", str(tmp_path / "nothing")]) == 1
