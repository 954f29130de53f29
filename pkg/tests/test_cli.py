import argparse
import json

import pytest

from app.cli import (EXIT_MISSING_ARTIFACT, EXIT_OK, EXIT_STORM, build_parser, main, parse_seeds,
                     resolve_experiment)
from app.config_manager import ConfigManager, resolve_config_path
from app.experiment import RESULTS_FILE, ExperimentConfig

from tests.test_experiment import TINY_CONFIG


@pytest.fixture
def config_file(tmp_path):
    def write(**experiment):
        data = json.loads(json.dumps(TINY_CONFIG))
        data["experiment"].update(experiment)
        data["paths"] = {"output_dir": str(tmp_path / "out"), "model_dir": "model"}
        path = tmp_path / "config.json"
        path.write_text(json.dumps(data))
        return str(path)
    yield write
    ConfigManager.reload()


def test_parse_seeds():
    assert parse_seeds("3") == [3]
    assert parse_seeds("0,1,2") == [0, 1, 2]
    assert parse_seeds("0-4") == [0, 1, 2, 3, 4]
    assert parse_seeds("1, 5-6") == [1, 5, 6]
    with pytest.raises(argparse.ArgumentTypeError):
        parse_seeds(",")


def test_overrides_apply_on_top_of_config(config_file, tmp_path):
    args = build_parser().parse_args([
        "run", "--config", config_file(), "--seed", "0-2", "--kappa", "0.2", "--domain-order", "3,2,1,0",
        "--ablation", "no-R", "--no-split", "--ood-score", "msp", "--out", str(tmp_path / "elsewhere"),
    ])
    exp = resolve_experiment(args)
    assert exp.seeds == [0, 1, 2]
    assert exp.stream.kappa == 0.2
    assert exp.stream.domain_order == [3, 2, 1, 0]
    assert exp.adapter.ablation == "no-S-R"
    assert exp.ood_score == "msp"
    assert exp.output_path == tmp_path / "elsewhere"
    assert exp.stream.batch_size == 12


def test_env_config_path(monkeypatch, tmp_path):
    monkeypatch.setenv("DOCO_CONFIG", str(tmp_path / "from_env.json"))
    assert resolve_config_path() == tmp_path / "from_env.json"
    assert resolve_config_path("explicit.json").name == "explicit.json"


def test_output_root_env(monkeypatch, config_file, tmp_path):
    monkeypatch.setenv("DOCO_OUTPUT_ROOT", str(tmp_path / "env_out"))
    exp = resolve_experiment(build_parser().parse_args(["run", "--config", config_file()]))
    assert exp.output_path == tmp_path / "env_out"


def test_unknown_axis_is_rejected():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["sweep", "--axis", "lr"])


def test_run_without_checkpoint_exits_2(config_file):
    assert main(["run", "--config", config_file()]) == EXIT_MISSING_ARTIFACT


def test_pretrain_run_verify(config_file, tmp_path):
    path = config_file(seeds=[0])
    assert main(["pretrain", "--config", path]) == EXIT_OK
    assert main(["run", "--config", path]) == EXIT_OK
    assert main(["run", "--config", path, "--method", "source-only"]) == EXIT_OK
    results = (tmp_path / "out" / RESULTS_FILE).read_text().splitlines()
    assert len(results) == 3
    assert main(["verify", "--config", path, "--row", "1"]) == EXIT_OK
    assert (tmp_path / "out" / "doco.log").exists()


def test_storm_exits_3(config_file):
    path = config_file(seeds=[0], storm_threshold=-1.0)
    assert main(["pretrain", "--config", path]) == EXIT_OK
    assert main(["run", "--config", path]) == EXIT_STORM


def test_experiment_built_from_section_accessors(config_file, tmp_path):
    path = config_file(seeds=[4])
    cm = ConfigManager.reload(path)
    assert cm.path == tmp_path / "config.json"
    assert cm.stream_settings["batch_size"] == 12
    exp = ExperimentConfig.from_config(cm)
    assert exp == ExperimentConfig.from_dict(json.loads((tmp_path / "config.json").read_text()))
    assert exp.seeds == [4]
    assert exp.adapter.prompt_length == 2
