# ccanlab/config.py
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from dotenv import load_dotenv

from ccanlab.common import ConfigError, validate_layers, validate_window

# Load environment variables from .env
load_dotenv()

logger = logging.getLogger(__name__)

# Read lab defaults from environment variables
DEFAULT_SEED = int(os.getenv("CCANLAB_SEED", 1))
LOG_LEVEL = os.getenv("CCANLAB_LOG_LEVEL", "INFO").upper()
WORKERS = int(os.getenv("CCANLAB_WORKERS", 1))
DTYPE = os.getenv("CCANLAB_DTYPE", "float32")

TASKS = ("copy", "local-fusion", "global-sort")
MODES = ("nat", "at")


@dataclass
class ModelConfig:
    """Hyperparameters of the encoder-decoder. `ccan_layers` holds 1-based decoder layers."""
    vocab_size: int = 68
    d_model: int = 64
    n_heads: int = 4
    enc_layers: int = 4
    dec_layers: int = 4
    d_ff: int = 128
    win: int = 9
    ccan_layers: Optional[Tuple[int, ...]] = None
    max_len: int = 64
    length_offset_range: int = 8
    dropout: float = 0.1
    length_loss_weight: float = 0.1
    mode: str = "nat"
    seed: int = DEFAULT_SEED

    def __post_init__(self):
        # None means "every decoder layer"
        if self.ccan_layers is None:
            self.ccan_layers = tuple(range(1, self.dec_layers + 1))
        else:
            self.ccan_layers = tuple(sorted(set(int(x) for x in self.ccan_layers)))

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def validate(self) -> "ModelConfig":
        if self.vocab_size <= 4:
            raise ConfigError(f"vocab_size must exceed the 4 reserved ids, got {self.vocab_size}")
        for name in ("d_model", "n_heads", "enc_layers", "dec_layers", "d_ff", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        validate_window(self.win)
        validate_layers(self.ccan_layers, self.dec_layers)
        if self.length_offset_range < 0:
            raise ConfigError("length_offset_range must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {', '.join(MODES)}, got {self.mode!r}")
        return self


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    warmup_steps: int = 200
    batch_size: int = 64
    max_steps: int = 3000
    val_every: int = 250
    keep_top: int = 3
    average_top: bool = True
    clip_norm: float = 1.0

    def validate(self) -> "TrainConfig":
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("adam betas must lie in [0, 1)")
        for name in ("batch_size", "max_steps", "val_every", "keep_top"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be non-negative")
        return self


@dataclass
class RunConfig:
    """Everything a training run needs; validated before the first step."""
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    task: str = "local-fusion"
    train_path: str = ""
    valid_path: str = ""
    vocab_path: str = ""
    out_dir: str = "runs/default"
    seed: int = DEFAULT_SEED

    def validate(self) -> "RunConfig":
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; valid tasks: {', '.join(TASKS)}")
        self.model.validate()
        self.train.validate()
        return self

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["model"]["ccan_layers"] = list(self.model.ccan_layers)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        data = dict(data)
        model = _build(ModelConfig, data.pop("model", {}) or {})
        train = _build(TrainConfig, data.pop("train", {}) or {})
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown run config keys: {', '.join(sorted(unknown))}")
        return cls(model=model, train=train, **data)


def _build(kind, values: Dict[str, Any]):
    known = {f.name for f in fields(kind)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown {kind.__name__} keys: {', '.join(sorted(unknown))}")
    return kind(**values)


def read_config_data(path: str) -> Dict[str, Any]:
    """Raw JSON object of a run config file, before defaults are applied."""
    config_path = Path(path)
    if not config_path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(config_path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}")
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    logger.info(f"Loaded run config from {path}")
    return data


def load_run_config(path: str) -> RunConfig:
    return RunConfig.from_dict(read_config_data(path))


def save_run_config(config: RunConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(config.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
