"""Config parsing: defaults, overrides, rejection of unknown keys."""

import pytest

from tensorjump.config import DEFAULTS, RunConfig, load_config


def test_defaults_available_without_file():
    cfg = load_config(None)
    assert cfg["schedule.kind"] == "two_sided"
    assert cfg["schedule.sigma_p"] == 3.0
    assert cfg["sample.steps"] == 100


def test_parse_and_types(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(
        "# comment\n"
        "world.kind = double_well\n"
        "world.dt = 0.02\n"
        "train.total_steps = 500\n"
        "train.enhanced_sampling = true\n"
        "compare.sigma_p_grid = 1.0, 2.0\n"
        "analysis.crystal = ref/crystal.tct\n"
    )
    cfg = load_config(str(path))
    assert cfg["world.dt"] == 0.02
    assert cfg["train.total_steps"] == 500
    assert cfg["train.enhanced_sampling"] is True
    assert cfg["compare.sigma_p_grid"] == (1.0, 2.0)
    # paths resolve relative to the config file
    assert cfg["analysis.crystal"].startswith(str(tmp_path))


def test_unknown_key_rejected(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("world.gravity = 9.81\n")
    with pytest.raises(ValueError, match="unknown config key"):
        load_config(str(path))


def test_malformed_line(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("just words\n")
    with pytest.raises(ValueError, match="key = value"):
        load_config(str(path))


def test_every_key_has_documented_default():
    cfg = RunConfig()
    for key in DEFAULTS:
        cfg[key]  # must not raise
    assert "world.kind" in cfg.describe()
