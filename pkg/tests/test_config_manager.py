"""Tests for configuration loading, overrides, validation and hashing."""

import json
from pathlib import Path

import pytest
import yaml

from rsm_codg.config_manager import ConfigurationError, ConfigurationManager, parse_flat_config, parse_scalar
from rsm_codg.models import SynthSpec, TrainConfig

CONFIG_DIR = Path(__file__).resolve().parent.parent / "config"


class TestFlatFormat:
    def test_sections_comments_and_types(self):
        text = "# profile\nmodel.tie_branches = false\n[training]\nlr = 3e-3  # faster\n\nepochs = 60\n"
        parsed = parse_flat_config(text)
        assert parsed == {"training": {"lr": 0.003, "epochs": 60}, "model": {"tie_branches": False}}

    def test_line_without_equals(self):
        with pytest.raises(ConfigurationError, match="Line 2"):
            parse_flat_config("[training]\nlr 0.1\n")

    def test_key_without_section(self):
        with pytest.raises(ConfigurationError, match="no section"):
            parse_flat_config("lr = 0.1\n")

    @pytest.mark.parametrize("text, expected", [("1e-4", 1e-4), ("null", None), ("true", True), ("abc", "abc")])
    def test_scalars(self, text, expected):
        assert parse_scalar(text) == expected


class TestLoading:
    def test_desk_profile(self, tmp_path):
        path = tmp_path / "desk.cfg"
        path.write_text("[model]\nhidden = 32\nheads = 4\n[training]\nlr = 3e-3\n", encoding="utf-8")
        manager = ConfigurationManager(str(path))
        assert manager.get("model.hidden") == 32
        assert manager.get("training.lr") == 0.003
        assert manager.get("training.epochs") == 120

    def test_yaml_and_json(self, tmp_path):
        yaml_path = tmp_path / "run.yaml"
        yaml_path.write_text(yaml.safe_dump({"loss": {"temperature": 0.2}}), encoding="utf-8")
        json_path = tmp_path / "run.json"
        json_path.write_text(json.dumps({"training": {"epochs": 5}}), encoding="utf-8")
        assert ConfigurationManager(str(yaml_path)).get("loss.temperature") == 0.2
        assert ConfigurationManager(str(json_path)).get("training.epochs") == 5

    def test_unknown_key_is_named(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("[training]\nlearning_rate = 0.1\n", encoding="utf-8")
        with pytest.raises(ConfigurationError) as info:
            ConfigurationManager(str(path))
        assert info.value.keys == ["training.learning_rate"]

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError, match="not found"):
            ConfigurationManager(str(tmp_path / "absent.yaml"))

    def test_integer_valued_float_becomes_int(self):
        manager = ConfigurationManager.from_dict({"training": {"epochs": 10.0}})
        assert manager.get("training.epochs") == 10
        assert isinstance(manager.get("training.epochs"), int)


class TestOverrides:
    def test_set_unknown_key(self):
        with pytest.raises(ConfigurationError):
            ConfigurationManager().set("training.nope", 1)

    def test_seed_from_environment(self):
        manager = ConfigurationManager()
        manager.apply_environment({"RSMC_SEED": "11"})
        assert manager.get("training.seed") == 11

    def test_bad_environment_seed(self):
        with pytest.raises(ConfigurationError, match="RSMC_SEED"):
            ConfigurationManager().apply_environment({"RSMC_SEED": "eleven"})

    def test_no_codg_switches_off_loss_terms(self):
        manager = ConfigurationManager()
        manager.set("ablation.no_codg", True)
        ablation = manager.get_all()["ablation"]
        assert ablation["no_mmd"] and ablation["no_contrast"] and ablation["no_orth"]
        assert manager.train_config().ablations() == ["no_codg", "no_mmd", "no_contrast", "no_orth"]


class TestShippedProfiles:
    @pytest.mark.parametrize("name", ["desk_scale.cfg", "rsm_codg_config.yaml"])
    def test_generator_shift_matches_the_default(self, name):
        manager = ConfigurationManager(str(CONFIG_DIR / name))
        assert manager.get("synth.shift") == SynthSpec().shift == 2.0
        assert manager.synth_spec() == SynthSpec()

    def test_alignment_settings_round_trip(self):
        config = ConfigurationManager(str(CONFIG_DIR / "rsm_codg_config.yaml")).train_config()
        assert config.align_lr_scale == TrainConfig.align_lr_scale
        assert config.lambda_align == TrainConfig.lambda_align


class TestValidation:
    def test_defaults_are_valid(self):
        assert ConfigurationManager().validate_config()

    @pytest.mark.parametrize("key, value, fragment", [
        ("model.heads", 6, "does not divide"),
        ("training.lr", 0.0, "training.lr"),
        ("model.dropout", 1.0, "model.dropout"),
        ("model.precision", 16, "32 or 64"),
        ("model.sparse_period", 0, "model.sparse_period"),
        ("training.align_lr_scale", 0.0, "training.align_lr_scale"),
        ("loss.align", -1.0, "loss.align"),
    ])
    def test_invalid_values(self, key, value, fragment):
        manager = ConfigurationManager()
        manager.set(key, value)
        errors = manager.validation_errors()
        assert any(fragment in error for error in errors)
        assert not manager.validate_config()


class TestHash:
    def test_output_and_logging_do_not_change_hash(self):
        first, second = ConfigurationManager(), ConfigurationManager()
        second.set("output.directory", "/elsewhere")
        second.set("logging.level", "DEBUG")
        assert first.config_hash() == second.config_hash()

    def test_hyperparameters_change_hash(self):
        first, second = ConfigurationManager(), ConfigurationManager()
        second.set("loss.temperature", 0.1)
        assert first.config_hash() != second.config_hash()

    def test_save_and_reload(self, tmp_path):
        manager = ConfigurationManager()
        manager.set("training.epochs", 7)
        manager.save_config(str(tmp_path / "saved.yaml"))
        assert ConfigurationManager(str(tmp_path / "saved.yaml")).config_hash() == manager.config_hash()
