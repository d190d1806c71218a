"""
Experiment Configuration Manager
Layered configuration for florg_sim runs: defaults, flat experiment files, environment and flags
"""

import os
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import yaml
from pydantic import ValidationError

from .config_validator import EXPERIMENT_KEYS, TASK_KEYS, ConfigValidator, split_keys
from .errors import ConfigError
from .federation import ExperimentConfig
from .tasks import TaskSpec
from . import mylogger

logger = mylogger.get_logger(__name__)

DEFAULTS_PATH = "config/defaults.yaml"
SEED_ENV_VAR = "FLORG_SEED"


class FlorgConfigManager:
    """Configuration management for experiment runs

    Precedence, highest first: command-line flags, FLORG_SEED, the experiment
    file, config/defaults.yaml, then the model defaults.
    """

    def __init__(self, project_root: Optional[Path] = None):
        self.project_root = Path(project_root) if project_root else self._find_project_root()
        self._validator = ConfigValidator()

    def _find_project_root(self) -> Path:
        """Find the project root directory containing config/defaults.yaml"""
        current = Path(__file__).parent
        while current != current.parent:
            if (current / DEFAULTS_PATH).exists():
                return current
            current = current.parent

        # Fallback to parent of the package directory
        return Path(__file__).parent.parent

    def _load_yaml(self, relative_path: str) -> Dict[str, Any]:
        """Load YAML file relative to project root"""
        file_path = self.project_root / relative_path

        if not file_path.exists():
            logger.warning(f"Configuration file not found: {file_path}")
            return {}

        try:
            with open(file_path, "r") as f:
                content = yaml.safe_load(f) or {}
            logger.debug(f"Loaded configuration from {file_path}")
            return content
        except yaml.YAMLError as e:
            raise ConfigError(f"Failed to parse {file_path}: {e}") from e

    def _save_yaml(self, file_path: Path, data: Dict[str, Any]) -> None:
        """Save YAML file, creating parent directories"""
        file_path = Path(file_path)
        file_path.parent.mkdir(parents=True, exist_ok=True)

        try:
            with open(file_path, "w") as f:
                yaml.safe_dump(data, f, default_flow_style=False, indent=2, sort_keys=False)
            logger.debug(f"Saved configuration to {file_path}")
        except OSError as e:
            logger.error(f"Failed to save configuration to {file_path}: {e}")
            raise

    def _deep_merge(self, base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
        """Deep merge two dictionaries, with override taking precedence"""
        result = base.copy()

        for key, value in override.items():
            if key in result and isinstance(result[key], dict) and isinstance(value, dict):
                result[key] = self._deep_merge(result[key], value)
            else:
                result[key] = value

        return result

    # Layers
    def get_defaults(self) -> Dict[str, Any]:
        """Site defaults (version controlled)"""
        defaults = self._load_yaml(DEFAULTS_PATH)
        if not isinstance(defaults, dict):
            raise ConfigError(f"{DEFAULTS_PATH} must be a mapping of flat keys")
        self._validator.validate(defaults)
        return defaults

    def parse_flat_file(self, path: Union[str, Path]) -> Tuple[Dict[str, Any], Dict[str, int]]:
        """Parse `key = value` lines; returns (values, key -> line number)"""
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as e:
            raise ConfigError(f"Cannot read config file {path}: {e}") from e

        values: Dict[str, Any] = {}
        lines: Dict[str, int] = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"expected 'key = value', got: {raw.strip()!r}", line=lineno)
            key, _, value = (part.strip() for part in line.partition("="))
            if not key or not key.isidentifier():
                raise ConfigError(f"invalid key {key!r}", key=key or None, line=lineno)
            if key in values:
                raise ConfigError(f"duplicate key {key} (first set on line {lines[key]})", key=key, line=lineno)
            if not value:
                raise ConfigError(f"missing value for {key}", key=key, line=lineno)
            values[key] = self._parse_value(value)
            lines[key] = lineno
        self._validator.validate(values, lines)
        logger.debug(f"Parsed {len(values)} keys from {path}")
        return values, lines

    @staticmethod
    def _parse_value(text: str) -> Any:
        # YAML 1.1 reads "5e-5" as a string; numbers without a dot still need a float fallback.
        try:
            value = yaml.safe_load(text)
        except yaml.YAMLError:
            value = text
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                return value
        return value

    def get_env_overrides(self) -> Dict[str, Any]:
        raw = os.environ.get(SEED_ENV_VAR)
        if raw is None or raw.strip() == "":
            return {}
        try:
            seed = int(raw)
        except ValueError as e:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got: {raw!r}", key=SEED_ENV_VAR) from e
        if seed < 0:
            raise ConfigError(f"{SEED_ENV_VAR} must be >= 0, got: {seed}", key=SEED_ENV_VAR)
        return {"seed": seed}

    # Merged configuration
    def get_merged_config(
        self,
        path: Optional[Union[str, Path]] = None,
        overrides: Optional[Dict[str, Any]] = None,
        use_env: bool = True,
    ) -> Dict[str, Any]:
        """Flat configuration after applying every layer"""
        merged = self.get_defaults()
        if path is not None:
            file_values, _ = self.parse_flat_file(path)
            merged = self._deep_merge(merged, file_values)
        if use_env:
            merged = self._deep_merge(merged, self.get_env_overrides())
        if overrides:
            flags = {k: v for k, v in overrides.items() if v is not None}
            self._validator.validate(flags)
            merged = self._deep_merge(merged, flags)
        return merged

    def build(self, flat: Dict[str, Any]) -> ExperimentConfig:
        """Typed ExperimentConfig from a validated flat mapping"""
        task_kwargs, experiment_kwargs = split_keys(flat)
        seed = experiment_kwargs.get("seed", 0)
        try:
            task = TaskSpec(**task_kwargs, seed=seed)
            return ExperimentConfig(task=task, **experiment_kwargs)
        except ValidationError as e:
            first = e.errors()[0]
            where = ".".join(str(part) for part in first["loc"])
            prefix = f"{where}: " if where else ""
            raise ConfigError(f"invalid configuration: {prefix}{first['msg']}") from e

    def to_flat(self, cfg: ExperimentConfig) -> Dict[str, Any]:
        """Inverse of build(), with enum values as plain strings (manifest output)"""
        task = cfg.task.model_dump(mode="json")
        experiment = cfg.model_dump(mode="json", exclude={"task"})
        flat = {key: task[field] for key, field in TASK_KEYS.items()}
        flat.update({key: experiment[field] for key, field in EXPERIMENT_KEYS.items()})
        return flat


def parse_config(path: Union[str, Path], project_root: Optional[Path] = None) -> ExperimentConfig:
    """Experiment file over defaults; unspecified keys take the defaults."""
    manager = FlorgConfigManager(project_root)
    return manager.build(manager.get_merged_config(path, use_env=False))


def resolve_config(
    path: Optional[Union[str, Path]],
    overrides: Optional[Dict[str, Any]] = None,
    project_root: Optional[Path] = None,
) -> ExperimentConfig:
    """Full precedence chain: flags > FLORG_SEED > file > defaults."""
    manager = FlorgConfigManager(project_root)
    return manager.build(manager.get_merged_config(path, overrides))
