"""CLI: config validation, exit codes, end-to-end smoke at tiny scale."""

import json

import pytest

from blockgen import cli
from blockgen.configs import DEFAULTS, load_config
from blockgen.errors import ConfigError
from blockgen.storage import read_json


TINY_OVERRIDES = [
    "diffusion.height=16", "diffusion.width=16", "diffusion.total_steps=12",
    "diffusion.threshold_step=6", "diffusion.channels=[8,12,16]",
    "diffusion.attn_dim=16", "diffusion.text_dim=16", "diffusion.time_dim=16",
    "encoder.height=16", "encoder.width=16",
    "train_diffusion.n_scenes=4", "train_diffusion.epochs=1",
    "dataset.n_sets=3", "dataset.m=3",
    "finetune.epochs=1", "finetune.sets_per_batch=3",
    "benchmark.n_per_kind=3",
]


def test_load_config_defaults_and_merge(tmp_path):
    config = load_config()
    assert config == DEFAULTS
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"experiment_id": "x", "dataset": {"m": 7}}))
    config = load_config(path)
    assert config["experiment_id"] == "x"
    assert config["dataset"]["m"] == 7
    assert config["dataset"]["n_sets"] == DEFAULTS["dataset"]["n_sets"]


def test_load_config_rejects_unknown_keys(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"dataset": {"nope": 1}}))
    with pytest.raises(ConfigError):
        load_config(path)
    path.write_text(json.dumps({"zorble": 1}))
    with pytest.raises(ConfigError):
        load_config(path)


def test_overrides_parse_json_and_reject_unknown_paths():
    config = load_config(overrides=["dataset.m=9", "loss.mode=\"sets\""])
    assert config["dataset"]["m"] == 9
    assert config["loss"]["mode"] == "sets"
    with pytest.raises(ConfigError):
        load_config(overrides=["dataset.zorble=9"])
    with pytest.raises(ConfigError):
        load_config(overrides=["no_equals_sign"])


def test_cli_exit_2_on_bad_config(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{\"zorble\": 1}")
    code = cli.main(["generate", "--config", str(bad), "--out", str(tmp_path)])
    assert code == cli.EXIT_VALIDATION
    assert "validation failure" in capsys.readouterr().err


def test_cli_exit_2_when_checkpoint_missing(tmp_path, capsys):
    code = cli.main([
        "generate", "--out", str(tmp_path), "--seed", "1",
        "--override", "dataset.stitched_fraction=0.5",
        *[f"--override={o}" for o in TINY_OVERRIDES],
    ])
    assert code == cli.EXIT_VALIDATION
    assert "denoiser checkpoint" in capsys.readouterr().err


def test_generate_is_reproducible(tmp_path, capsys):
    args = ["generate", "--seed", "3", *[f"--override={o}" for o in TINY_OVERRIDES]]
    assert cli.main([*args, "--out", str(tmp_path / "a")]) == 0
    out_a = capsys.readouterr().out
    assert cli.main([*args, "--out", str(tmp_path / "b")]) == 0
    out_b = capsys.readouterr().out
    assert out_a.split("sha256")[1] == out_b.split("sha256")[1]
    manifest = read_json(tmp_path / "a" / "datasets" / "default" / "manifest.json")
    assert len(manifest["sets"]) == 3


@pytest.mark.slow
def test_full_pipeline_smoke(tmp_path, capsys):
    """generate -> train-diffusion -> finetune -> eval -> ablate -> report."""
    common = ["--out", str(tmp_path), "--seed", "5",
              *[f"--override={o}" for o in TINY_OVERRIDES]]
    assert cli.main(["train-diffusion", *common]) == 0
    assert cli.main([
        "generate", *common,
        "--override", "dataset.stitched_fraction=0.5",
        "--override", "dataset.num_steps=4",
        "--override", "dataset.filter_scorer=\"oracle\"",
    ]) == 0
    assert cli.main(["finetune", *common]) == 0
    assert cli.main(["eval", *common]) == 0
    assert cli.main([
        "ablate", *common,
        "--override",
        'ablation.cells=[{"name":"sets","loss_mode":"sets","dataset":"default","epochs":1}]',
        "--override", "ablation.seeds=[0]",
    ]) == 0
    assert cli.main(["report", *common]) == 0
    out = capsys.readouterr().out
    assert "report artifacts" in out
    assert (tmp_path / "report" / "default" / "report.json").exists()
    assert (tmp_path / "results" / "default-ablation.csv").exists()
    assert (tmp_path / "checkpoints" / "default-denoiser.ckpt").exists()
    assert (tmp_path / "checkpoints" / "default-adapters.ckpt").exists()


def test_cli_entry_help():
    with pytest.raises(SystemExit) as exc:
        cli.main(["--help"])
    assert exc.value.code == 0
