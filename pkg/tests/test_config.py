"""Tests for the INI config loader and override mechanism.

Covers:
- File parsing with typed values and inline comments
- section.key=value overrides (precedence, validation)
- Strict schema: unknown sections/keys and bad values are errors
- Building ModelConfig / TrainConfig from resolved values
- The stable one-line echo used in log headers
"""

import numpy as np
import pytest

from agileir.config import (ConfigError, apply_overrides, echo, load_file,
                            model_config, parse_value, resolve, train_config)


@pytest.fixture
def seed():
    np.random.seed(42)
    yield
    np.random.seed(None)


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text(
        "[model]\n"
        "preset = agileir\n"
        "scale = 3          ; x3 run\n"
        "[train]\n"
        "iters = 500\n"
        "lr0 = 1e-4\n"
        "milestones = 100,200\n"
        "[paths]\n"
        "out_dir = runs/demo\n"
    )
    return str(path)


class TestParsing:
    """Typed value parsing against the schema."""

    def test_int_float_bool(self):
        assert parse_value("train", "iters", "250") == 250
        assert parse_value("train", "lr0", "2e-4") == 2e-4
        assert parse_value("model", "cascade", "false") is False
        assert parse_value("model", "cascade", "Yes") is True

    def test_milestones_list(self):
        assert parse_value("train", "milestones", "10,20,30") == (10, 20, 30)
        assert parse_value("train", "milestones", "") is None

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match="unknown config section"):
            parse_value("optimizer", "lr", "0.1")

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            parse_value("train", "momentum", "0.9")

    def test_bad_value(self):
        with pytest.raises(ConfigError, match="bad value"):
            parse_value("train", "iters", "lots")


class TestFileLoading:
    """INI files with comments and missing-file handling."""

    def test_load(self, cfg_file):
        values = load_file(cfg_file)
        assert values[("model", "scale")] == 3  # inline comment stripped
        assert values[("train", "iters")] == 500
        assert values[("train", "milestones")] == (100, 200)
        assert values[("paths", "out_dir")] == "runs/demo"

    def test_missing_file(self):
        with pytest.raises(ConfigError, match="not found"):
            load_file("/nonexistent/run.ini")

    def test_unknown_key_in_file(self, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text("[train]\nwarmup = 5\n")
        with pytest.raises(ConfigError, match="unknown config key"):
            load_file(str(path))


class TestOverrides:
    """Command-line section.key=value overrides."""

    def test_override_wins_over_file(self, cfg_file):
        values = resolve(cfg_file, ["train.iters=99"])
        assert values[("train", "iters")] == 99
        assert values[("train", "lr0")] == 1e-4  # untouched

    def test_later_override_wins(self):
        values = resolve(None, ["train.seed=1", "train.seed=2"])
        assert values[("train", "seed")] == 2

    def test_malformed_override(self):
        with pytest.raises(ConfigError, match="section.key=value"):
            apply_overrides({}, ["iters=99"])

    def test_defaults_without_file(self):
        values = resolve(None, [])
        assert values[("model", "preset")] == "agileir"
        assert values[("model", "scale")] == 2
        assert values[("paths", "out_dir")] == "runs/out"


class TestBuildConfigs:
    """Resolved values feed the dataclasses."""

    def test_model_config_from_preset(self, cfg_file):
        cfg = model_config(load_file(cfg_file))
        assert cfg.scale == 3 and cfg.cascade is True and cfg.channels == 60

    def test_model_field_overrides_preset(self):
        values = resolve(None, ["model.channels=48", "model.groups=2"])
        cfg = model_config(values)
        assert cfg.channels == 48 and cfg.groups == 2

    def test_unknown_preset(self):
        values = resolve(None, ["model.preset=enormous"])
        with pytest.raises(ConfigError, match="unknown preset"):
            model_config(values)

    def test_invalid_combination_surfaces_as_config_error(self):
        values = resolve(None, ["model.channels=50"])  # 50 % 4 groups != 0
        with pytest.raises(ConfigError):
            model_config(values)

    def test_train_config(self, cfg_file):
        tcfg = train_config(load_file(cfg_file))
        assert tcfg.iters == 500 and tcfg.lr0 == 1e-4
        assert tcfg.resolved_milestones() == (100, 200)

    def test_train_defaults_preserved(self):
        tcfg = train_config(resolve(None, []))
        assert tcfg.beta1 == 0.9 and tcfg.beta2 == 0.9
        assert tcfg.lr0 == 2e-4 and tcfg.charb_eps == 1e-3


class TestEcho:
    """Header line describing the effective configuration."""

    def test_sorted_and_stable(self):
        values = resolve(None, ["train.seed=3", "model.scale=4"])
        line = echo(values)
        assert line == echo(dict(reversed(list(values.items()))))
        assert "model.scale=4" in line and "train.seed=3" in line
        keys = [p.split("=")[0] for p in line.split()]
        assert keys == sorted(keys)
