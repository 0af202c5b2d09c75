"""Run configuration, loaded from JSON with unknown keys rejected."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .decoder import DecoderConfig
from .encoders import DEFAULT_POOL
from .errors import ConfigError
from .model import VARIANTS
from .routing import ROUTING_MODES
from .taskbench import TASKS


@dataclass
class RunConfig:
    # model dims
    d_base: int = 32
    d_w: int = 16
    num_experts: int = 3
    d_llm: int = 48
    stack_factor: int = 3
    d_adapter: int = 64
    decoder: dict = field(default_factory=dict)  # DecoderConfig overrides; d_llm comes from above
    # routing and loss
    routing_mode: str = "hard_st"
    lam: float = 0.1
    diversity_weight: float = 1.0
    prior_expert: str | None = "envelope_expert"
    prior_value: float = 1.0
    weak_only_expert: str = "spectral_expert"
    train_weak_encoders: bool = False
    # optimiser
    lr_router: float = 3e-3
    lr_lora: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    batch_size: int = 16
    steps: int = 2000
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    task_weights: dict = field(default_factory=lambda: {t: 1 for t in TASKS})
    variant: str = "full_wee"
    # data
    sample_rate_hz: int = 1000
    duration_s: float = 1.0
    frame_len: int = 50
    hop: int = 25
    encoder_seed: int = 1234
    n_train: int = 800
    n_dev: int = 200
    n_test: int = 200
    # decoder pretraining
    pretrain_seed: int = 0
    pretrain_steps: int = 5000
    decoder_checkpoint: str | None = None
    # evaluation and logging
    eval_k: int = 5
    max_new: int = 6
    eval_every: int = 0
    out_dir: str = "runs"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if self.routing_mode not in ROUTING_MODES:
            raise ConfigError(f"routing_mode must be one of {ROUTING_MODES}")
        if self.num_experts != len(DEFAULT_POOL):
            raise ConfigError(f"the stub pool has exactly {len(DEFAULT_POOL)} experts")
        for name in (self.prior_expert, self.weak_only_expert):
            if name is not None and name not in DEFAULT_POOL:
                raise ConfigError(f"unknown expert {name!r}; pool is {DEFAULT_POOL}")
        if set(self.task_weights) - set(TASKS):
            raise ConfigError(f"task_weights keys must be among {TASKS}")
        if any(w < 0 for w in self.task_weights.values()) or not any(self.task_weights.values()):
            raise ConfigError("task_weights must be nonnegative with a positive entry")
        if self.stack_factor < 1:
            raise ConfigError("stack_factor must be >= 1")
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigError("batch_size must be >= 1 and steps >= 0")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        unknown = set(self.decoder) - {f.name for f in dataclasses.fields(DecoderConfig)}
        if unknown:
            raise ConfigError(f"unknown decoder keys {sorted(unknown)}")
        self.decoder_config()

    def decoder_config(self) -> DecoderConfig:
        return DecoderConfig(**{**self.decoder, "d_llm": self.d_llm})

    def replace(self, **changes) -> RunConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)


def load_config(path) -> RunConfig:
    raw = json.loads(Path(path).read_text())
    return config_from_dict(raw)


def config_from_dict(raw: dict) -> RunConfig:
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return RunConfig(**raw)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
