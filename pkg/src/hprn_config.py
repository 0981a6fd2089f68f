"""
Configuration for the HPRN network and its training runs.

Config files are flat key=value text (the same syntax as a .env file) and are
parsed with python-dotenv. Keys are exactly the dataclass field names below;
command-line flags override file values.

Example:
    channels=32
    n_mrb=2
    ssrm_scales=8,12,16,20
    tcrm_grid=4x4
    lr0=0.00012
"""

import dataclasses
import os
from dataclasses import dataclass, field, fields
from typing import Any, Dict, Optional, Tuple, get_type_hints

from dotenv import dotenv_values, load_dotenv

from hprn_errors import ContractError

PROJECT_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

TCRM_POSITIONS = ("1", "2", "3", "multi")
PSNR_FORMULAS = ("standard", "eq19")


@dataclass
class HPRNConfig:
    """Architecture and objective settings. Defaults are the full-size network."""

    bands: int = 31
    channels: int = 200
    n_mrb: int = 10
    tcrm_r: int = 16
    tcrm_grid: Tuple[int, int] = (4, 4)
    tcrm_position: str = "3"
    tcrm_heads: int = 4
    attention_scaling: bool = True
    use_tcrm: bool = True
    ssrm_groups: int = 64
    ssrm_scales: Tuple[int, ...] = (8, 12, 16, 20)
    ssrm_shared_embedding: bool = True
    ssrm_residual: bool = True
    use_ssrm: bool = True
    sopc_tau: float = 2.0
    slic_compactness: float = 10.0
    slic_max_iters: int = 10
    seed: int = 0

    def validate(self) -> "HPRNConfig":
        for name in ("bands", "channels", "n_mrb", "tcrm_r", "tcrm_heads", "ssrm_groups", "slic_max_iters"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive, got {getattr(self, name)}")
        if self.tcrm_position not in TCRM_POSITIONS:
            raise ContractError(f"tcrm_position must be one of {TCRM_POSITIONS}, got '{self.tcrm_position}'")
        if min(self.tcrm_grid) < 1:
            raise ContractError(f"tcrm_grid must be positive, got {self.tcrm_grid}")
        token_dim = self.tcrm_grid[0] * self.tcrm_grid[1]
        if self.use_tcrm and token_dim % self.tcrm_heads:
            raise ContractError(f"tcrm_heads={self.tcrm_heads} does not divide token dim {token_dim}")
        if not self.ssrm_scales or min(self.ssrm_scales) < 1:
            raise ContractError(f"ssrm_scales must be a non-empty list of positive ints, got {self.ssrm_scales}")
        if self.sopc_tau < 0:
            raise ContractError(f"sopc_tau must be >= 0, got {self.sopc_tau}")
        if self.slic_compactness <= 0:
            raise ContractError(f"slic_compactness must be > 0, got {self.slic_compactness}")
        return self


@dataclass
class TrainConfig:
    """Optimizer, schedule and run settings."""

    lr0: float = 0.00012
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-8
    decay_power: float = 1.5
    epochs: int = 100
    steps_per_epoch: int = 50
    batch_size: int = 4
    patch_size: int = 64
    precision: str = "float32"
    prefetch: int = 0
    psnr_formula: str = "standard"
    run_dir: str = field(default_factory=lambda: os.path.join(os.getenv("HPRN_RUNS_DIR", "runs"), "default"))

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    def validate(self) -> "TrainConfig":
        if self.lr0 <= 0:
            raise ContractError(f"lr0 must be > 0, got {self.lr0}")
        for name in ("beta1", "beta2"):
            if not 0 <= getattr(self, name) < 1:
                raise ContractError(f"{name} must lie in [0, 1), got {getattr(self, name)}")
        if self.decay_power <= 0:
            raise ContractError(f"decay_power must be > 0, got {self.decay_power}")
        if not 1 <= self.epochs <= 100:
            raise ContractError(f"epochs must lie in [1, 100], got {self.epochs}")
        for name in ("steps_per_epoch", "batch_size", "patch_size"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive, got {getattr(self, name)}")
        if self.precision not in ("float32", "float64"):
            raise ContractError(f"precision must be float32 or float64, got '{self.precision}'")
        if self.psnr_formula not in PSNR_FORMULAS:
            raise ContractError(f"psnr_formula must be one of {PSNR_FORMULAS}, got '{self.psnr_formula}'")
        return self


# ========================================
# Parsing
# ========================================
def _parse_bool(key: str, raw: str) -> bool:
    value = raw.strip().lower()
    if value in ("on", "true", "yes", "1"):
        return True
    if value in ("off", "false", "no", "0"):
        return False
    raise ContractError(f"{key}: expected on/off, got '{raw}'")


def _coerce(key: str, annotation: Any, raw: Any) -> Any:
    if not isinstance(raw, str):
        if annotation is str:
            return str(raw)
        return tuple(raw) if isinstance(raw, list) else raw
    try:
        if annotation is bool:
            return _parse_bool(key, raw)
        if annotation is int:
            return int(raw)
        if annotation is float:
            return float(raw)
        if annotation == Tuple[int, int]:
            parts = raw.lower().replace(",", "x").split("x")
            if len(parts) != 2:
                raise ValueError(raw)
            return (int(parts[0]), int(parts[1]))
        if annotation == Tuple[int, ...]:
            return tuple(int(p) for p in raw.split(",") if p.strip())
    except ValueError:
        raise ContractError(f"{key}: cannot parse '{raw}'")
    return raw.strip()


def build_config(cls, values: Dict[str, Any]):
    """Instantiate a config dataclass from raw (string or typed) values."""
    hints = get_type_hints(cls)
    kwargs = {k: _coerce(k, hints[k], v) for k, v in values.items() if v is not None}
    return cls(**kwargs).validate()


def load_config_file(path: Optional[str]) -> Dict[str, str]:
    """Read a flat key=value file. Missing path -> empty mapping."""
    if not path:
        return {}
    if not os.path.exists(path):
        raise FileNotFoundError(f"Config file not found: {path}")
    return {k: v for k, v in dotenv_values(path).items() if v is not None}


def load_configs(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> Tuple[HPRNConfig, TrainConfig]:
    """
    Build both configs from a config file plus overrides.

    Args:
        path: Optional key=value config file
        overrides: Values that win over the file (e.g. command-line flags)

    Returns:
        Tuple of (HPRNConfig, TrainConfig)
    """
    raw = load_config_file(path)
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})

    model_keys = {f.name for f in fields(HPRNConfig)}
    train_keys = {f.name for f in fields(TrainConfig)}
    unknown = [k for k in raw if k not in model_keys and k not in train_keys]
    if unknown:
        raise ContractError(f"Unknown config key '{unknown[0]}'")

    model_cfg = build_config(HPRNConfig, {k: v for k, v in raw.items() if k in model_keys})
    train_cfg = build_config(TrainConfig, {k: v for k, v in raw.items() if k in train_keys})
    return model_cfg, train_cfg


def format_config(cfg) -> str:
    """Render a config dataclass back into key=value lines."""
    lines = []
    for key, value in dataclasses.asdict(cfg).items():
        if isinstance(value, bool):
            value = "on" if value else "off"
        elif isinstance(value, tuple) and key == "tcrm_grid":
            value = f"{value[0]}x{value[1]}"
        elif isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def load_environment():
    """Load the project-root .env (HPRN_DATA_DIR, HPRN_RUNS_DIR, HPRN_RUN_SLOW, HPRN_QUIET)."""
    load_dotenv(os.path.join(PROJECT_ROOT, ".env"))
