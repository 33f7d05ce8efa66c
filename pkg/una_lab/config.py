"""Run configuration.

Configs are flat ``key=value`` files (``#`` starts a comment). They are parsed
as an OmegaConf dotlist on top of the ``TrainConfig`` schema, so unknown keys
and ill-typed values are rejected, and trailing ``key=value`` command-line
arguments override the file.
"""
import enum
import math
from dataclasses import dataclass, fields
from typing import List, Optional, Sequence

from omegaconf import OmegaConf
from omegaconf.errors import OmegaConfBaseException

from .errors import ConfigError
from .losses import CompareAs

BETA_GRID = (0.001, 0.003, 0.01, 0.03, 0.1, 0.3, 1.0, 3.0)


class LossKind(enum.Enum):
    una_pair_shaped = "una_pair_shaped"
    una_pair_unshaped = "una_pair_unshaped"
    dpo = "dpo"
    una_binary_mse = "una_binary_mse"
    una_binary_bce = "una_binary_bce"
    una_score = "una_score"
    una_online_reward = "una_online_reward"
    una_online_score = "una_online_score"
    pg_baseline = "pg_baseline"
    rm_bt = "rm_bt"


ONLINE_KINDS = (LossKind.una_online_reward, LossKind.una_online_score, LossKind.pg_baseline)


class PolicyKind(enum.Enum):
    tabular = "tabular"
    parametric = "parametric"


class PGEstimator(enum.Enum):
    sampled = "sampled"
    exact = "exact"


class Convert(enum.Enum):
    none = "none"
    binarize = "binarize"
    scalarize = "scalarize"


@dataclass
class TrainConfig:
    beta: float = 0.03
    step_size: float = 0.05
    steps: int = 1000
    batch_size: int = 32
    seed: int = 0
    loss_kind: LossKind = LossKind.una_pair_shaped
    compare_as: CompareAs = CompareAs.score_mse
    grad_norm_cap: Optional[float] = 10.0
    eval_every: int = 50
    pg_estimator: PGEstimator = PGEstimator.sampled
    variance_seeds: int = 0
    offset_ema: Optional[float] = None
    record_wallclock: bool = False
    progress: bool = False
    # policy construction for command-line runs; pi_0 starts as a copy of the reference
    policy_kind: PolicyKind = PolicyKind.tabular
    vocab_size: int = 4
    max_len: int = 1
    n_prompts: int = 0
    hidden: int = 0
    bias: bool = False
    ref_seed: Optional[int] = None
    ref_scale: float = 0.5
    # data
    min_raw: float = 1.0
    max_raw: float = 5.0
    convert: Convert = Convert.none
    reward_path: Optional[str] = None

    def validate(self) -> "TrainConfig":
        if not (math.isfinite(self.beta) and self.beta > 0):
            raise ConfigError(f"beta must be positive and finite, got {self.beta}")
        if not (math.isfinite(self.step_size) and self.step_size >= 0):
            raise ConfigError(f"step_size must be >= 0, got {self.step_size}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.grad_norm_cap is not None and not self.grad_norm_cap > 0:
            raise ConfigError(f"grad_norm_cap must be positive or null, got {self.grad_norm_cap}")
        if self.variance_seeds == 1 or self.variance_seeds < 0:
            raise ConfigError(f"variance_seeds must be 0 or >= 2, got {self.variance_seeds}")
        if self.offset_ema is not None and not 0 <= self.offset_ema < 1:
            raise ConfigError(f"offset_ema must lie in [0, 1), got {self.offset_ema}")
        if not self.max_raw > self.min_raw:
            raise ConfigError(f"max_raw ({self.max_raw}) must exceed min_raw ({self.min_raw})")
        if self.vocab_size < 2 or self.max_len < 1 or self.n_prompts < 0 or self.hidden < 0:
            raise ConfigError("vocab_size >= 2, max_len >= 1, n_prompts >= 0 and hidden >= 0 are required")
        return self


def _format(value) -> str:
    if value is None:
        return "null"
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def to_dotlist(cfg: TrainConfig) -> List[str]:
    return [f"{f.name}={_format(getattr(cfg, f.name))}" for f in fields(cfg)]


def to_dict(cfg: TrainConfig) -> dict:
    out = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        out[f.name] = v.value if isinstance(v, enum.Enum) else v
    return out


def read_dotlist(path: str) -> List[str]:
    lines = []
    with open(path) as f:
        for n, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{n}: expected key=value, got {raw.strip()!r}")
            key, value = line.split("=", 1)
            lines.append(f"{key.strip()}={value.strip()}")
    return lines


def load_config(path: Optional[str] = None, overrides: Sequence[str] = ()) -> TrainConfig:
    try:
        conf = OmegaConf.structured(TrainConfig)
        if path is not None:
            conf = OmegaConf.merge(conf, OmegaConf.from_dotlist(read_dotlist(path)))
        if overrides:
            conf = OmegaConf.merge(conf, OmegaConf.from_cli(list(overrides)))
        cfg = OmegaConf.to_object(conf)
    except (OSError, UnicodeDecodeError) as e:
        raise ConfigError(f"cannot read config: {e}")
    except OmegaConfBaseException as e:
        raise ConfigError(str(e).splitlines()[0])
    return cfg.validate()
