# File: config.py
# Manages experiment configuration using a YAML file (config.yaml).
# Handles loading, writing the defaults, and providing access to configuration settings,
# and turns them into a validated ExperimentConfig.

import os
import logging
import yaml
import shutil
from copy import deepcopy
from threading import Lock
from typing import Dict, Any, Optional, List
from pathlib import Path

from pydantic import ValidationError

from models import ExperimentConfig, StageConfig, SynthSpec

# Standard logger setup
logger = logging.getLogger(__name__)

# --- File Path Constants ---
# Default configuration file, looked up relative to the working directory.
CONFIG_FILE_PATH = Path("config.yaml")

DEFAULT_OUTPUT_PATH = Path("./outputs")

# Environment variable overriding logging.level.
LOG_ENV_VAR = "EVOMERGE_LOG"
LOG_LEVELS = ("quiet", "info", "debug")

# Generation budgets per preset: (stage 1, stage 2).
PIPELINE_PRESETS: Dict[str, tuple] = {
    "in_domain": (20, 20),
    "large_pool": (20, 40),
}

# --- Default Configuration Structure ---
# Complete expected structure of 'config.yaml' with default values. Used as the
# content of `init-config` and as the base every loaded file is merged onto.
DEFAULT_CONFIG: Dict[str, Any] = {
    "experiment": {
        "seed": 0,  # Drives the world generator and both CMA-ES stages.
        "output_dir": str(DEFAULT_OUTPUT_PATH),  # Where merge/analyze/ablate write results.
        "world_source": "synth",  # 'synth', 'world' or 'repository'.
        "world_path": None,  # Directory written by `gen` (world_source: world).
        "repository_path": None,  # Adapter repository directory (world_source: repository).
    },
    "synth": {  # Planted-world recipe (world_source: synth).
        "input_dim": 32,
        "class_count": 8,
        "rank": 4,
        "n_adapters": 20,
        "n_relevant": 5,
        "n_adversarial": 0,
        "noise_level": 0.5,
        "noise_side": "A",  # 'A' or 'B'; B-side noise gives a negative control.
        "signal_scale": 1.0,
        "base_scale": 1.0,
        "n_layers": 1,
        "n_val": 256,
    },
    "pipeline": {
        "preset": "large_pool",  # 'in_domain' (20 + 20 generations) or 'large_pool' (20 + 40).
    },
    "stage1": {
        "lambda_reg": 0.05,  # L1 coefficient on alpha.
        "generations": None,  # None = take the preset budget.
        "population": 20,
        "sigma0": 0.05,
    },
    "stage2": {
        "lambda_reg": 0.05,  # L1 coefficient on beta.
        "generations": None,
        "population": 20,
        "sigma0": 0.05,
        "beta_bound": 1.5,  # Symmetric box half-width for beta.
    },
    "oracle": {
        "mode": "local",  # 'local' evaluates in-process; 'remote' talks to a fitness server.
        "endpoint": None,  # Base URL, e.g. http://127.0.0.1:8765
        "timeout_s": 30.0,
        "workers": 1,  # Concurrent evaluations per generation.
    },
    "server": {
        "host": "127.0.0.1",
        "port": 8765,
        "reply_cache_size": 4096,  # Entries in the LRU reply cache; 0 disables it.
    },
    "analysis": {
        "retention_grid": [0.1, 0.2, 0.3, 0.5, 0.7, 1.0],
        "bound_trials": 1000,
    },
    "sweeps": {  # `sweep` command; worlds come from the synth recipe.
        "pool_sizes": [10, 20, 40],  # Pool sizes, relevant share kept.
        "distractor_counts": [0, 5, 10],  # Irrelevant adapters added to the pool.
        "sample_sizes": [16, 64, 256],  # Search-time validation sizes.
        "seeds": 3,  # Seeds per value, counting up from experiment.seed.
        "holdout_examples": 2048,  # Held-out set every point is scored on.
    },
    "logging": {
        "level": "info",  # 'quiet', 'info' or 'debug'.
    },
}


class ConfigError(ValueError):
    """Configuration file or values are unusable."""


def _deep_merge_dicts(source: Dict, destination: Dict) -> Dict:
    """
    Recursively merges the 'source' dictionary into the 'destination' dictionary.
    Keys from 'source' overwrite existing keys in 'destination'; nested dictionaries
    are merged. The 'destination' dictionary is modified in place.
    """
    for key, value in source.items():
        if isinstance(value, dict):
            node = destination.setdefault(key, {})
            if isinstance(node, dict):
                _deep_merge_dicts(value, node)
            else:  # Destination node is not a dict: overwrite it entirely.
                destination[key] = deepcopy(value)
        else:
            destination[key] = value
    return destination


def _set_nested_value(d: Dict, keys: List[str], value: Any):
    """Sets a value in a nested dictionary using a list of keys."""
    for key in keys[:-1]:
        d = d.setdefault(key, {})
    d[keys[-1]] = value


def _get_nested_value(d: Dict, keys: List[str], default: Any = None) -> Any:
    """Gets a value from a nested dictionary using a list of keys."""
    for key in keys:
        if isinstance(d, dict) and key in d:
            d = d[key]
        else:
            return default
    return d


class YamlConfigManager:
    """
    Reads configuration from a YAML file and merges it over DEFAULT_CONFIG. Access is
    thread-safe; the file is read on first use and never written back.
    """

    def __init__(self, config_path: Optional[Path] = None, required: bool = False):
        self.config_path = Path(config_path) if config_path is not None else CONFIG_FILE_PATH
        self.required = required
        self.config: Dict[str, Any] = {}
        self._loaded = False
        self._lock = Lock()

    def _load_defaults(self) -> Dict[str, Any]:
        return deepcopy(DEFAULT_CONFIG)

    def _ensure_loaded(self):
        if not self._loaded:
            self.load_config()

    def load_config(self) -> Dict[str, Any]:
        """
        Loads the configuration from the YAML file and merges it over the defaults.
        A missing file means in-memory defaults unless the manager is `required`, in
        which case it is an error. Invalid YAML is always an error.
        """
        with self._lock:
            base_defaults = self._load_defaults()
            path = self.config_path

            if path.exists():
                logger.info(f"Loading configuration from: {path}")
                try:
                    with open(path, "r", encoding="utf-8") as f:
                        yaml_data = yaml.safe_load(f)
                except yaml.YAMLError as e:
                    raise ConfigError(f"Error parsing YAML from {path}: {e}") from e
                except OSError as e:
                    raise ConfigError(f"Cannot read {path}: {e}") from e
                if yaml_data is None:
                    yaml_data = {}
                if not isinstance(yaml_data, dict):
                    raise ConfigError(f"Invalid format in {path}. Expected a mapping at the top level.")
                effective_config = deepcopy(base_defaults)
                _deep_merge_dicts(yaml_data, effective_config)
                self.config = effective_config
                logger.debug(f"Merged configuration from {path}.")
            elif self.required:
                raise ConfigError(f"Configuration file {path} does not exist")
            else:
                logger.info(f"{path} not found. Using built-in defaults (write them with `init-config`).")
                self.config = base_defaults

            self._loaded = True
            logger.debug(f"Current configuration: {self.config}")
            return self.config

    def get(self, key_path: str, default: Any = None) -> Any:
        """
        Retrieves a value by dot-separated path (e.g. 'stage1.sigma0'). Mutable values
        are returned as deep copies.
        """
        self._ensure_loaded()
        keys = key_path.split(".")
        with self._lock:
            value = _get_nested_value(self.config, keys, default)
        return deepcopy(value) if isinstance(value, (dict, list)) else value

    def set_value(self, key_path: str, value: Any) -> None:
        """In-memory override, not persisted (used for command-line flags)."""
        self._ensure_loaded()
        with self._lock:
            _set_nested_value(self.config, key_path.split("."), value)

    # --- Type-specific Getters ---
    def get_string(self, key_path: str, default: Optional[str] = None) -> str:
        raw_value = self.get(key_path)
        if raw_value is None:
            if default is not None:
                logger.debug(f"Config string '{key_path}' is None, using default: '{default}'")
                return default
            return ""
        return str(raw_value)

    def get_int(self, key_path: str, default: Optional[int] = None) -> int:
        raw_value = self.get(key_path)
        if raw_value is None:
            if default is not None:
                logger.debug(f"Config '{key_path}' is None, using default: {default}")
                return default
            raise ConfigError(f"Mandatory integer config '{key_path}' is missing")
        if isinstance(raw_value, bool):
            raise ConfigError(f"'{key_path}' must be an integer, got a boolean")
        try:
            return int(raw_value)
        except (ValueError, TypeError) as e:
            raise ConfigError(f"Invalid integer value '{raw_value}' for '{key_path}'") from e

    def get_path(self, key_path: str, default_str_path: Optional[str] = None) -> Optional[Path]:
        value = self.get(key_path)
        if isinstance(value, (str, Path)) and str(value):
            path = Path(value)
        elif default_str_path is not None:
            logger.debug(f"Config path '{key_path}' not set, using default: '{default_str_path}'")
            path = Path(default_str_path)
        else:
            return None
        return path


def write_default_config(path: Optional[Path] = None, force: bool = False) -> Path:
    """
    Writes DEFAULT_CONFIG to `path` through a temporary file. An existing file is kept
    unless `force` is set, in which case it is moved to '<name>.bak' first.
    """
    path = Path(path) if path is not None else CONFIG_FILE_PATH
    if path.exists() and not force:
        raise ConfigError(f"{path} already exists; pass --force to overwrite it")
    temp_file = path.with_suffix(path.suffix + ".tmp")
    backup_file = path.with_suffix(path.suffix + ".bak")
    try:
        if path.parent and not path.parent.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
        with open(temp_file, "w", encoding="utf-8") as f:
            yaml.safe_dump(DEFAULT_CONFIG, f, default_flow_style=False, sort_keys=False, indent=2)
        if path.exists():
            shutil.move(str(path), str(backup_file))
            logger.info(f"Backed up existing configuration to {backup_file}")
        os.replace(temp_file, path)
    except OSError as e:
        if temp_file.exists():
            os.remove(temp_file)
        raise ConfigError(f"Failed to write configuration to {path}: {e}") from e
    logger.info(f"Default configuration written to {path}")
    return path


def _get_default_from_structure(key_path: str) -> Any:
    return _get_nested_value(DEFAULT_CONFIG, key_path.split("."))


def get_log_level(manager: YamlConfigManager) -> str:
    """EVOMERGE_LOG wins over logging.level; unknown values fall back to 'info'."""
    env_value = os.environ.get(LOG_ENV_VAR)
    if env_value:
        level = env_value.strip().lower()
        if level in LOG_LEVELS:
            return level
        logger.warning(f"Ignoring {LOG_ENV_VAR}={env_value!r}; expected one of {LOG_LEVELS}")
    level = manager.get_string("logging.level", _get_default_from_structure("logging.level")).lower()
    return level if level in LOG_LEVELS else "info"


def get_output_path(manager: YamlConfigManager) -> Path:
    return manager.get_path(
        "experiment.output_dir", _get_default_from_structure("experiment.output_dir")
    )


def _stage_config(manager: YamlConfigManager, section: str, preset_generations: int, seed: int) -> StageConfig:
    values = manager.get(section, {}) or {}
    if not isinstance(values, dict):
        raise ConfigError(f"section '{section}' must be a mapping")
    values = dict(values)
    if values.get("generations") is None:
        values["generations"] = preset_generations
    values["seed"] = seed
    fixed = values.get("fixed_betas") or {}
    values["fixed_betas"] = {int(k): float(v) for k, v in dict(fixed).items()}
    try:
        return StageConfig.model_validate(values)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first.get("loc", ()))
        raise ConfigError(f"invalid configuration at '{section}.{where}': {first.get('msg', e)}") from e


def get_experiment_config(manager: YamlConfigManager) -> ExperimentConfig:
    """
    Builds the validated experiment description. The experiment seed drives the world
    generator (synth.seed), Stage 1 (seed) and Stage 2 (seed + 1).
    """
    try:
        seed = manager.get_int("experiment.seed", 0)
        preset = manager.get_string("pipeline.preset", "large_pool")
        if preset not in PIPELINE_PRESETS:
            raise ConfigError(f"unknown pipeline preset '{preset}'; choose from {sorted(PIPELINE_PRESETS)}")
        gens1, gens2 = PIPELINE_PRESETS[preset]

        source = manager.get_string("experiment.world_source", "synth")
        synth = world_path = repository_path = None
        if source == "synth":
            synth_values = dict(manager.get("synth", {}) or {})
            synth_values["seed"] = seed
            synth = SynthSpec.model_validate(synth_values)
        elif source == "world":
            world_path = manager.get_string("experiment.world_path") or None
            if world_path is None:
                raise ConfigError("world_source 'world' needs experiment.world_path")
        elif source == "repository":
            repository_path = manager.get_string("experiment.repository_path") or None
            if repository_path is None:
                raise ConfigError("world_source 'repository' needs experiment.repository_path")
        else:
            raise ConfigError(f"unknown world_source '{source}'; choose synth, world or repository")

        analysis = manager.get("analysis", {}) or {}
        return ExperimentConfig(
            seed=seed,
            output_dir=str(get_output_path(manager)),
            synth=synth,
            world_path=world_path,
            repository_path=repository_path,
            stage1=_stage_config(manager, "stage1", gens1, seed),
            stage2=_stage_config(manager, "stage2", gens2, seed + 1),
            oracle=manager.get("oracle", {}) or {},
            server=manager.get("server", {}) or {},
            retention_grid=analysis.get("retention_grid", DEFAULT_CONFIG["analysis"]["retention_grid"]),
            bound_trials=analysis.get("bound_trials", DEFAULT_CONFIG["analysis"]["bound_trials"]),
            sweeps=manager.get("sweeps", {}) or {},
        )
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first.get("loc", ()))
        raise ConfigError(f"invalid configuration at '{where}': {first.get('msg', e)}") from e
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"invalid configuration: {e}") from e
