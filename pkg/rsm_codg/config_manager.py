"""
Configuration management module for run settings.

This module handles loading, validation, and management of configuration
settings from YAML/JSON files or flat ``section.key = value`` documents,
with defaults, environment and command-line overrides.
"""

import copy
import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional

import yaml

from .models import SynthSpec, TrainConfig

logger = logging.getLogger(__name__)

SEED_ENV = "RSMC_SEED"
# Sections left out of the config hash; they do not change results.
UNHASHED_SECTIONS = ("output", "logging")


class ConfigurationError(ValueError):
    """Raised for unknown keys, unreadable files or invalid values."""

    def __init__(self, message: str, keys: Optional[List[str]] = None):
        super().__init__(message)
        self.keys = keys or []


class ConfigurationManager:
    """Manages run configuration settings."""

    DEFAULT_CONFIG = {
        "data": {
            "path": None,  # None synthesizes from the synth section
        },
        "synth": {
            "subjects": 6,
            "classes": 3,
            "per_subject": 200,
            "window": 10,
            "snr": 2.0,
            "shift": 2.0,
            "seed": 3
        },
        "model": {
            "hidden": 64,
            "heads": 8,
            "local_window": 2,
            "sparse_period": None,  # None for max(1, T // 4)
            "tie_branches": True,
            "embed_dim": 32,
            "classifier_hidden": 64,
            "dropout": 0.4,
            "layer_norm_eps": 1e-5,
            "bn_momentum": 0.1,
            "precision": 32
        },
        "training": {
            "lr": 1e-4,
            "weight_decay": 5e-4,
            "align_lr_scale": 0.01,
            "step_size": 15,
            "gamma": 0.7,
            "epochs": 120,
            "batch_size": 64,
            "noise_std": 0.12,
            "seed": 3,
            "patience": 20,
            "val_fraction": 0.1,
            "fold_workers": 1
        },
        "loss": {
            "contrast": 1.0,
            "orth": 0.01,
            "mmd": 1.0,
            "align": 0.1,
            "temperature": 0.5
        },
        "ablation": {
            "no_align": False,
            "no_rgrm": False,
            "no_mstt": False,
            "no_codg": False,
            "no_mmd": False,
            "no_contrast": False,
            "no_orth": False
        },
        "output": {
            "directory": "./runs",
            "save_checkpoints": True
        },
        "logging": {
            "level": "INFO",
            "format": "%(asctime)s - %(name)s - %(levelname)s - %(message)s",
            "file": None  # None for console only, or specify file path
        }
    }

    def __init__(self, config_path: Optional[str] = None):
        """Initialize configuration manager with optional config file path."""
        self.config = copy.deepcopy(self.DEFAULT_CONFIG)
        if config_path:
            self.load_config(config_path)

    @classmethod
    def from_dict(cls, config: Mapping[str, Any]) -> "ConfigurationManager":
        """
        Build a manager from a nested dictionary such as a run's config echo.

        Raises:
            ConfigurationError: If the dictionary holds unknown keys
        """
        manager = cls()
        unknown = manager._merge_config(manager.config, config)
        if unknown:
            raise ConfigurationError(f"Unknown configuration keys: {', '.join(unknown)}", unknown)
        return manager

    def load_config(self, config_path: str) -> None:
        """
        Load configuration from a YAML, JSON or flat key=value file.

        Raises:
            ConfigurationError: If the file is missing, unparsable or holds unknown keys
        """
        config_file = Path(config_path)
        if not config_file.exists():
            raise ConfigurationError(f"Configuration file {config_path} not found")
        try:
            text = config_file.read_text(encoding="utf-8")
            suffix = config_file.suffix.lower()
            if suffix in (".yaml", ".yml"):
                user_config = yaml.safe_load(text) or {}
            elif suffix == ".json":
                user_config = json.loads(text)
            else:
                user_config = parse_flat_config(text)
        except (yaml.YAMLError, json.JSONDecodeError) as e:
            raise ConfigurationError(f"Cannot parse {config_path}: {e}") from e
        if not isinstance(user_config, dict):
            raise ConfigurationError(f"{config_path} must hold a mapping of sections")

        unknown = self._merge_config(self.config, user_config)
        if unknown:
            raise ConfigurationError(f"Unknown configuration keys in {config_path}: {', '.join(unknown)}", unknown)
        logger.info(f"Configuration loaded from {config_path}")

    def _merge_config(self, default: Dict[str, Any], user: Mapping[str, Any], prefix: str = "") -> List[str]:
        """Recursively merge user configuration into defaults; returns unknown dotted keys."""
        unknown: List[str] = []
        for key, value in user.items():
            path = f"{prefix}{key}"
            if key not in default:
                unknown.append(path)
            elif isinstance(default[key], dict):
                if not isinstance(value, dict):
                    unknown.append(path)
                else:
                    unknown.extend(self._merge_config(default[key], value, path + "."))
            else:
                default[key] = _coerce(default[key], value)
        return unknown

    def get(self, key_path: str, default: Any = None) -> Any:
        """Get configuration value using dot notation (e.g., 'training.lr')."""
        value = self.config
        try:
            for key in key_path.split('.'):
                value = value[key]
            return value
        except (KeyError, TypeError):
            return default

    def set(self, key_path: str, value: Any) -> None:
        """
        Set configuration value using dot notation (e.g., 'training.lr').

        Raises:
            ConfigurationError: If the key is not a known setting
        """
        keys = key_path.split('.')
        config = self.config
        for key in keys[:-1]:
            if not isinstance(config.get(key), dict):
                raise ConfigurationError(f"Unknown configuration key: {key_path}", [key_path])
            config = config[key]
        if keys[-1] not in config or isinstance(config[keys[-1]], dict):
            raise ConfigurationError(f"Unknown configuration key: {key_path}", [key_path])
        config[keys[-1]] = _coerce(config[keys[-1]], value)
        logger.debug(f"Configuration updated: {key_path} = {value}")

    def override_config(self, overrides: Dict[str, Any]) -> None:
        """Override configuration with provided key-value pairs using dot notation."""
        for key_path, value in overrides.items():
            self.set(key_path, value)
        if overrides:
            logger.info(f"Configuration overridden with {len(overrides)} settings")

    def apply_environment(self, environ: Optional[Mapping[str, str]] = None) -> None:
        """Apply ``RSMC_SEED`` to training.seed when set."""
        environ = os.environ if environ is None else environ
        raw = environ.get(SEED_ENV)
        if raw is None or raw == "":
            return
        try:
            seed = int(raw)
        except ValueError as e:
            raise ConfigurationError(f"{SEED_ENV} must be an integer, got {raw!r}", [SEED_ENV]) from e
        self.set("training.seed", seed)
        logger.info(f"Seed {seed} taken from {SEED_ENV}")

    def get_all(self) -> Dict[str, Any]:
        """Get the effective configuration; no_codg switches off the three loss terms."""
        effective = copy.deepcopy(self.config)
        if effective["ablation"]["no_codg"]:
            for flag in ("no_mmd", "no_contrast", "no_orth"):
                effective["ablation"][flag] = True
        return effective

    def save_config(self, config_path: str) -> None:
        """Save current configuration to file (JSON or YAML based on extension)."""
        config_file = Path(config_path)
        config_file.parent.mkdir(parents=True, exist_ok=True)
        with open(config_file, 'w', encoding='utf-8') as f:
            if config_file.suffix.lower() in ('.yaml', '.yml'):
                yaml.safe_dump(self.config, f, default_flow_style=False, indent=2, sort_keys=True)
            else:
                json.dump(self.config, f, indent=2, ensure_ascii=False, sort_keys=True)
        logger.info(f"Configuration saved to {config_path}")

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON of the effective config, output and logging excluded."""
        hashed = {k: v for k, v in self.get_all().items() if k not in UNHASHED_SECTIONS}
        canonical = json.dumps(hashed, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_config(self.get_all())

    def synth_spec(self) -> SynthSpec:
        return SynthSpec(**self.get_all()["synth"])

    def validation_errors(self) -> List[str]:
        """Every invalid setting as a message naming its key."""
        errors: List[str] = []

        def check(key: str, condition: bool, message: str) -> None:
            if not condition:
                errors.append(f"{key}: {message}")

        for key in ("training.lr", "training.epochs", "training.batch_size", "training.step_size",
                    "model.hidden", "model.heads", "model.embed_dim", "model.classifier_hidden",
                    "loss.temperature", "training.fold_workers", "training.align_lr_scale"):
            check(key, _number(self.get(key)) and self.get(key) > 0, "must be positive")
        for key in ("training.weight_decay", "training.noise_std", "training.patience", "model.local_window",
                    "loss.contrast", "loss.orth", "loss.mmd", "loss.align", "synth.shift"):
            check(key, _number(self.get(key)) and self.get(key) >= 0, "must be non-negative")
        check("training.gamma", _number(self.get("training.gamma")) and 0 < self.get("training.gamma") <= 1,
              "must lie in (0, 1]")
        check("training.val_fraction", _number(self.get("training.val_fraction"))
              and 0 <= self.get("training.val_fraction") < 1, "must lie in [0, 1)")
        check("model.dropout", _number(self.get("model.dropout")) and 0 <= self.get("model.dropout") < 1,
              "must lie in [0, 1)")
        hidden, heads = self.get("model.hidden"), self.get("model.heads")
        if _number(hidden) and _number(heads) and heads > 0 and hidden % heads:
            errors.append(f"model.heads: {heads} does not divide model.hidden {hidden}")
        period = self.get("model.sparse_period")
        check("model.sparse_period", period is None or (_number(period) and period >= 1), "must be >= 1 or null")
        check("model.precision", self.get("model.precision") in (32, 64), "must be 32 or 64")
        for key in ("synth.subjects", "synth.classes", "synth.per_subject", "synth.window"):
            check(key, _number(self.get(key)) and self.get(key) >= 1, "must be >= 1")
        check("synth.snr", _number(self.get("synth.snr")) and self.get("synth.snr") > 0, "must be positive")
        valid_log_levels = ['DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL']
        check("logging.level", str(self.get("logging.level")).upper() in valid_log_levels,
              f"must be one of {valid_log_levels}")
        return errors

    def validate_config(self) -> bool:
        """Validate configuration settings and return True if valid."""
        errors = self.validation_errors()
        for error in errors:
            logger.error(f"Invalid configuration: {error}")
        return not errors


def parse_flat_config(text: str) -> Dict[str, Any]:
    """
    Parse a flat ``section.key = value`` document.

    ``[section]`` headers prefix the keys that follow; ``#`` starts a
    comment. Values are typed like YAML scalars (numbers, booleans, null,
    quoted strings).

    Raises:
        ConfigurationError: On a line without ``=`` or a key without a section
    """
    config: Dict[str, Any] = {}
    section = ""
    for number, raw_line in enumerate(text.splitlines(), 1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ConfigurationError(f"Line {number}: expected 'key = value', got {raw_line.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        path = f"{section}.{key}" if section else key
        if "." not in path:
            raise ConfigurationError(f"Line {number}: key {key!r} has no section", [key])
        *parents, leaf = path.split(".")
        node = config
        for parent in parents:
            node = node.setdefault(parent, {})
        node[leaf] = parse_scalar(value)
    return config


def parse_scalar(text: str) -> Any:
    """YAML scalar typing, with exponent floats such as ``1e-4`` read as numbers."""
    try:
        value = yaml.safe_load(text) if text else None
    except yaml.YAMLError:
        return text
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            return value
    return value


def _number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _coerce(default: Any, value: Any) -> Any:
    """Bring a user value to the type of its default where that is lossless."""
    if isinstance(value, str) and not isinstance(default, str):
        value = parse_scalar(value)
    if isinstance(default, bool):
        return value
    if isinstance(default, float) and _number(value):
        return float(value)
    if isinstance(default, int) and isinstance(value, float) and value.is_integer():
        return int(value)
    return value
