"""
Run configuration for the CHIP classification pipeline
Composes the model, training and augmentation configs with the
cross-validation and reporting settings into one serializable RunConfig.
"""
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, Optional, Union

import storage
from services.cv_service import TrainConfig, validate_train_config
from services.errors import ConfigError
from services.metrics_service import DEFAULT_IMAGE_THRESHOLD, DEFAULT_MAX_THRESHOLD, DEFAULT_RATIO_THRESHOLD
from services.model_service import ModelConfig, validate_model_config

# written next to every command's outputs
RUN_CONFIG_FILE = "run_config.json"

DEFAULT_K = 5
DEFAULT_OUT_DIR = "results"


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    k: int = DEFAULT_K
    seed: int = 0
    stratified: bool = True
    jobs: int = 1
    image_threshold: float = DEFAULT_IMAGE_THRESHOLD
    ratio_threshold: float = DEFAULT_RATIO_THRESHOLD
    max_threshold: float = DEFAULT_MAX_THRESHOLD
    manifest: Optional[str] = None
    out_dir: str = DEFAULT_OUT_DIR

    def to_dict(self) -> Dict:
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        data["model"] = self.model.to_dict()
        data["train"] = self.train.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("Run config must be a JSON object.")
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"Unknown run config keys: {sorted(unknown)}")
        values = dict(data)
        try:
            if "model" in values:
                values["model"] = ModelConfig.from_dict(values["model"])
            if "train" in values:
                values["train"] = TrainConfig.from_dict(values["train"])
        except TypeError as exc:
            raise ConfigError(f"Malformed run config: {exc}") from exc
        return cls(**values)

    def with_seed(self, seed: int) -> "RunConfig":
        """
        Reseed the whole run: fold assignment, model init, batch order and
        augmentation all derive from this one value.
        """
        augmentation = replace(self.train.augmentation, seed=seed)
        return replace(
            self,
            seed=seed,
            model=replace(self.model, seed=seed),
            train=replace(self.train, seed=seed, augmentation=augmentation),
        )


def validate_run_config(config: RunConfig) -> None:
    validate_model_config(config.model)
    validate_train_config(config.train)
    if not isinstance(config.k, int) or config.k < 2:
        raise ConfigError(f"k must be an integer of at least 2, got {config.k}.")
    if not isinstance(config.jobs, int) or config.jobs < 1:
        raise ConfigError(f"jobs must be at least 1, got {config.jobs}.")
    for name in ("image_threshold", "ratio_threshold", "max_threshold"):
        value = getattr(config, name)
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number, got {value!r}.")
        if not 0.0 <= value <= 1.0:
            raise ConfigError(f"{name} must be within [0, 1], got {value}.")


def load_run_config(path: Optional[Union[str, Path]] = None) -> RunConfig:
    """Defaults, or the values of a JSON config file on top of them."""
    if path is None:
        return RunConfig()
    if not Path(path).is_file():
        raise ConfigError(f"Config file {path} does not exist.")
    return RunConfig.from_dict(storage.read_json(path))


def save_run_config(config: RunConfig, out_dir: Union[str, Path]) -> Path:
    return storage.write_json(storage.ensure_dir(out_dir) / RUN_CONFIG_FILE, config.to_dict())
