"""
Experiment Configuration Validator
Validates flat experiment configuration against the key schema and range rules
"""

from typing import Any, Dict, Optional

from .adapter import InitScheme
from .baselines import SchemeId
from .errors import ConfigError
from .tasks import TaskKind
from . import mylogger

logger = mylogger.get_logger(__name__)

# Flat key -> TaskSpec field
TASK_KEYS = {
    "task_kind": "kind",
    "d_out": "d_out",
    "d_in": "d_in",
    "num_samples": "num_samples",
    "num_eval_samples": "num_eval_samples",
    "true_rank": "true_rank",
    "noise_std": "noise_std",
    "num_classes": "num_classes",
    "num_layers": "num_layers",
    "cluster_separation": "cluster_separation",
}

# Flat key -> ExperimentConfig field
EXPERIMENT_KEYS = {
    "scheme": "scheme",
    "num_clients": "num_clients",
    "rounds": "rounds",
    "eta": "eta",
    "rank": "rank",
    "alpha": "alpha",
    "rho": "dirichlet_rho",
    "participation_ratio": "participation_ratio",
    "batch_size": "batch_size",
    "local_epochs": "local_epochs",
    "align": "align",
    "init_scheme": "init_scheme",
    "weighting": "weighting",
    "seed": "seed",
    "target_loss_ratio": "target_loss_ratio",
    "log_every": "log_every",
}

KNOWN_KEYS = frozenset(TASK_KEYS) | frozenset(EXPERIMENT_KEYS)


class ConfigValidator:
    """Validate flat experiment configuration"""

    def __init__(self):
        self.positive_ints = {
            "d_out", "d_in", "num_samples", "num_eval_samples", "num_classes", "num_layers",
            "num_clients", "rounds", "rank", "batch_size", "local_epochs", "log_every",
        }
        self.non_negative_ints = {"true_rank", "seed"}
        self.positive_reals = {"alpha", "rho", "target_loss_ratio"}
        self.non_negative_reals = {"eta", "noise_std", "cluster_separation"}
        self.choices = {
            "task_kind": {k.value for k in TaskKind},
            "scheme": {s.value for s in SchemeId},
            "init_scheme": {s.value for s in InitScheme},
            "weighting": {"uniform", "dataset_size"},
        }

    def validate(self, config: Dict[str, Any], lines: Optional[Dict[str, int]] = None) -> None:
        """Validate a flat key -> value mapping; `lines` maps keys to their source line for messages"""
        lines = lines or {}
        self._validate_known_keys(config, lines)
        for key, value in config.items():
            line = lines.get(key)
            if key in self.positive_ints:
                self._validate_int(key, value, 1, line)
            elif key in self.non_negative_ints:
                self._validate_int(key, value, 0, line)
            elif key in self.positive_reals:
                self._validate_real(key, value, line, strict=True)
            elif key in self.non_negative_reals:
                self._validate_real(key, value, line, strict=False)
            elif key in self.choices:
                self._validate_choice(key, value, line)
            elif key == "align":
                self._validate_bool(key, value, line)
            elif key == "participation_ratio":
                self._validate_ratio(key, value, line)
        logger.debug(f"Validated {len(config)} configuration keys")

    def _validate_known_keys(self, config: Dict[str, Any], lines: Dict[str, int]) -> None:
        unknown = sorted(set(config) - KNOWN_KEYS)
        if unknown:
            key = unknown[0]
            raise ConfigError(f"Unknown configuration key: {key}", key=key, line=lines.get(key))

    def _validate_int(self, key: str, value: Any, minimum: int, line: Optional[int]) -> None:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got: {value!r}", key=key, line=line)
        if value < minimum:
            raise ConfigError(f"{key} must be >= {minimum}, got: {value}", key=key, line=line)

    def _validate_real(self, key: str, value: Any, line: Optional[int], strict: bool) -> None:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got: {value!r}", key=key, line=line)
        if value != value or value in (float("inf"), float("-inf")):
            raise ConfigError(f"{key} must be finite, got: {value}", key=key, line=line)
        if strict and value <= 0:
            raise ConfigError(f"{key} must be > 0, got: {value}", key=key, line=line)
        if not strict and value < 0:
            raise ConfigError(f"{key} must be >= 0, got: {value}", key=key, line=line)

    def _validate_ratio(self, key: str, value: Any, line: Optional[int]) -> None:
        self._validate_real(key, value, line, strict=True)
        if value > 1:
            raise ConfigError(f"{key} must be in (0, 1], got: {value}", key=key, line=line)

    def _validate_choice(self, key: str, value: Any, line: Optional[int]) -> None:
        allowed = self.choices[key]
        if value not in allowed:
            raise ConfigError(
                f"{key} must be one of {sorted(allowed)}, got: {value!r}", key=key, line=line,
            )

    def _validate_bool(self, key: str, value: Any, line: Optional[int]) -> None:
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false, got: {value!r}", key=key, line=line)


def split_keys(config: Dict[str, Any]) -> tuple:
    """Split a validated flat mapping into (TaskSpec kwargs, ExperimentConfig kwargs)."""
    task = {TASK_KEYS[k]: v for k, v in config.items() if k in TASK_KEYS}
    experiment = {EXPERIMENT_KEYS[k]: v for k, v in config.items() if k in EXPERIMENT_KEYS}
    return task, experiment