"""
Configuration manager for Kernel Warehouse.
Handles loading, defaulting and validation of run configurations.
"""
import copy
import json
import logging
from json.decoder import JSONDecodeError
from typing import Any, Dict, List

from src.attention import AttentionFunction, BetaStrategy, Fc2Init
from src.presets import expand_preset
from src.scheduler import LR_SCHEDULES
from src.tensor_core import DTYPES
from src.utils.helpers import parse_rational
from src.utils.logging_utils import log_configuration_loaded
from src.warehouse import InitScheme

logger = logging.getLogger(__name__)

DEFAULTS: Dict[str, Any] = {
    "warehouse": {
        "defaults": {
            "b": "1",
            "scale_divisors": [1, 1, 1],
            "beta_strategy": "one_to_one",
        },
        "groups": {},
        "attention_function": "caf",
        "reduction": 16,
        "hidden_floor": 8,
        "fc2_init": "beta",
        "init": "kaiming_normal",
    },
    "train": {
        "seed": 0,
        "epochs": 30,
        "warmup_epochs": 5,
        "batch_size": 32,
        "dtype": "float32",
        "optimizer": {"lr": 0.05, "momentum": 0.9, "weight_decay": 1e-4},
        "lr_schedule": "cosine",
    },
    "data": {
        "seed": 0,
        "classes": 10,
        "samples_per_class": 64,
        "image_size": 16,
        "channels": 3,
        "noise_std": 0.3,
    },
    "gradcheck": {
        "eps": 1e-5,
        "tau": 0.5,
        "threshold": 1e-4,
        "batch_size": 2,
        "num_coords": 64,
        "seed": 0,
        "attention_std": 0.05,
    },
    "logging": {
        "level": "INFO",
        "log_dir": "./logs",
    },
}

_INT_KEYS = {
    "train": ("seed", "epochs", "warmup_epochs", "batch_size"),
    "data": ("seed", "classes", "samples_per_class", "image_size", "channels"),
    "gradcheck": ("batch_size", "num_coords", "seed"),
}
_FLOAT_KEYS = {
    "train.optimizer": ("lr", "momentum", "weight_decay"),
    "data": ("noise_std",),
    "gradcheck": ("eps", "tau", "threshold", "attention_std"),
}


class ConfigError(ValueError):
    """Raised for unreadable or invalid configuration documents."""


def merge_dicts(source: Dict[str, Any], default: Dict[str, Any]) -> None:
    """Recursively merges default dict into source dict; existing values win."""
    for key, value in default.items():
        if key not in source:
            source[key] = copy.deepcopy(value)
        elif isinstance(value, dict) and isinstance(source[key], dict):
            merge_dicts(source[key], value)


class ConfigManager:
    """
    Loads one run configuration and exposes dotted lookups.
    """

    def __init__(self, config_path: str):
        """
        Initialize configuration manager.

        Args:
            config_path: Path to the JSON configuration document

        Raises:
            ConfigError: If the file is missing, not JSON or fails validation
        """
        self.config_path = config_path
        logger.debug(f"ConfigManager initialized with config: {config_path}")
        self.settings = self._load_json_file(config_path)
        self._prepare()

    @classmethod
    def from_dict(cls, settings: Dict[str, Any], source: str = "<memory>") -> "ConfigManager":
        """Build a manager around an in-memory document (defaults and validation still apply)."""
        manager = cls.__new__(cls)
        manager.config_path = source
        manager.settings = copy.deepcopy(settings)
        manager._prepare()
        return manager

    def _prepare(self) -> None:
        if not isinstance(self.settings, dict) or not self.settings:
            raise ConfigError(f"Configuration {self.config_path} is empty")
        self._expand_model_preset()
        merge_dicts(self.settings, DEFAULTS)
        self._validate_settings()
        log_configuration_loaded(logger, self.config_path, sorted(self.settings))

    def _load_json_file(self, file_path: str) -> Dict[str, Any]:
        try:
            with open(file_path, 'r', encoding='utf-8') as f:
                config = json.load(f)
            logger.info(f"Loaded configuration from {file_path}")
            return config
        except FileNotFoundError as e:
            logger.error(f"Configuration file not found: {file_path}")
            raise ConfigError(f"Configuration file not found: {file_path}") from e
        except JSONDecodeError as e:
            logger.error(f"Invalid JSON in configuration file '{file_path}': {e}")
            raise ConfigError(f"Invalid JSON in '{file_path}': {e}") from e
        except OSError as e:
            logger.error(f"Error loading configuration from '{file_path}': {e}")
            raise ConfigError(f"Cannot read '{file_path}': {e}") from e

    def _expand_model_preset(self) -> None:
        model = self.settings.get("model")
        if not isinstance(model, dict):
            raise ConfigError("Missing required configuration section: 'model'")
        preset = model.get("preset")
        if preset is None:
            return
        try:
            expanded = expand_preset(preset, model.get("preset_options"))
        except ValueError as e:
            raise ConfigError(str(e)) from e
        # explicit keys next to the preset override the expansion
        for key, value in model.items():
            if key not in ("preset", "preset_options"):
                expanded[key] = value
        self.settings["model"] = expanded
        logger.info(f"Expanded model preset '{preset}' into {len(expanded['layers'])} layers")

    def _validate_settings(self) -> None:
        for section in ("model", "warehouse", "train", "data", "gradcheck", "logging"):
            if not isinstance(self.settings.get(section), dict):
                raise ConfigError(f"Invalid type for configuration section '{section}'. Expected object")

        layers = self.settings["model"].get("layers")
        if not isinstance(layers, list) or not layers:
            raise ConfigError("Model layer list is empty")

        for section, keys in _INT_KEYS.items():
            for key in keys:
                value = self.get_config_value(f"{section}.{key}")
                if isinstance(value, bool) or not isinstance(value, int):
                    raise ConfigError(f"Invalid type for '{section}.{key}'. Expected int, got {value!r}")
        for section, keys in _FLOAT_KEYS.items():
            for key in keys:
                value = self.get_config_value(f"{section}.{key}")
                if isinstance(value, bool) or not isinstance(value, (int, float)):
                    raise ConfigError(f"Invalid type for '{section}.{key}'. Expected number, got {value!r}")

        self._validate_specific_settings()
        logger.debug("Configuration validated")

    def _validate_specific_settings(self) -> None:
        train = self.settings["train"]
        if train["epochs"] < 0 or train["warmup_epochs"] < 0 or train["batch_size"] < 1:
            raise ConfigError("train.epochs and train.warmup_epochs must be >= 0 and train.batch_size >= 1")
        if train["dtype"] not in DTYPES:
            raise ConfigError(f"Invalid 'train.dtype' {train['dtype']!r}. Expected one of {sorted(DTYPES)}")
        if train["lr_schedule"] not in LR_SCHEDULES:
            raise ConfigError(f"Invalid 'train.lr_schedule' {train['lr_schedule']!r}. Expected one of {list(LR_SCHEDULES)}")

        data = self.settings["data"]
        if data["classes"] < 2 or data["samples_per_class"] < 1 or data["image_size"] < 1 or data["channels"] < 1:
            raise ConfigError("data needs classes >= 2 and positive samples_per_class, image_size and channels")

        gradcheck = self.settings["gradcheck"]
        if gradcheck["eps"] <= 0 or not 0.0 <= gradcheck["tau"] <= 1.0:
            raise ConfigError("gradcheck.eps must be positive and gradcheck.tau within [0, 1]")

        level = self.settings["logging"].get("level")
        if not isinstance(level, str) or level.upper() not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            raise ConfigError(f"Invalid 'logging.level' {level!r}")

        self._validate_warehouse()

    def _validate_warehouse(self) -> None:
        warehouse = self.settings["warehouse"]
        enums = (
            ("attention_function", AttentionFunction),
            ("fc2_init", Fc2Init),
            ("init", InitScheme),
        )
        for key, enum in enums:
            try:
                enum(warehouse[key])
            except ValueError as e:
                raise ConfigError(f"Invalid 'warehouse.{key}' {warehouse[key]!r}. Expected one of {[m.value for m in enum]}") from e

        if not isinstance(warehouse["groups"], dict):
            raise ConfigError("Invalid type for 'warehouse.groups'. Expected object")
        entries: List[tuple] = [("defaults", warehouse["defaults"])] + list(warehouse["groups"].items())
        for name, entry in entries:
            if not isinstance(entry, dict):
                raise ConfigError(f"Invalid warehouse settings for '{name}'. Expected object")
            try:
                if "b" in entry:
                    parse_rational(entry["b"])
                if "beta_strategy" in entry:
                    BetaStrategy.parse(entry["beta_strategy"])
            except (ValueError, OverflowError) as e:
                raise ConfigError(f"Invalid warehouse settings for '{name}': {e}") from e
            divisors = entry.get("scale_divisors", [1, 1, 1])
            if (
                not isinstance(divisors, list)
                or len(divisors) != 3
                or any(isinstance(d, bool) or not isinstance(d, int) or d < 1 for d in divisors)
            ):
                raise ConfigError(f"Invalid 'scale_divisors' for '{name}': expected three positive ints, got {divisors!r}")

    def get_config_value(self, key_path: str, default=None):
        """
        Get configuration value using dot notation.

        Args:
            key_path: Dot-separated path to configuration value (e.g., "train.optimizer.lr")
            default: Default value if key not found

        Returns:
            Configuration value or default
        """
        keys = key_path.split('.')
        value = self.settings

        for key in keys:
            if isinstance(value, dict) and key in value:
                value = value[key]
            else:
                return default

        return value
