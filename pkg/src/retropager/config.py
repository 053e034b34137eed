"""Configuration dataclasses and JSON config-file handling.

Defaults follow the reference training recipe: 128-token pages, a 16-page
attention budget (16 * 129 = 2064 KV entries, i.e. about 2K tokens), stage
learning rates 5e-6 / 1e-6, weight decay 1e-2, and 16-step gradient
accumulation at batch size 1.  Desk-scale runs override sizes explicitly.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .errors import InvalidConfig


@dataclass
class ModelConfig:
    vocab_size: int = 1024
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 4
    w: int = 128                  # tokens per page, before the appended bookmark
    max_positions: int = 8192
    seed: int = 0
    rope_base: float = 10000.0
    init_std: float = 0.02
    ffn_mult: int = 4
    norm_eps: float = 1e-6

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def bookmark_id(self) -> int:
        # last vocabulary id is reserved for the bookmark token
        return self.vocab_size - 1

    @property
    def d_ff(self) -> int:
        return self.d_model * self.ffn_mult

    def validate(self) -> None:
        if self.vocab_size < 2:
            raise InvalidConfig("vocab_size must be at least 2 (one id is reserved)")
        if self.w < 1:
            raise InvalidConfig(f"page size w must be >= 1, got {self.w}")
        if self.d_model < 1 or self.n_heads < 1 or self.n_layers < 1:
            raise InvalidConfig("d_model, n_heads and n_layers must be positive")
        if self.d_model % self.n_heads != 0:
            raise InvalidConfig(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.head_dim % 2 != 0:
            raise InvalidConfig(f"head_dim={self.head_dim} must be even for rotary positions")
        if self.max_positions < self.w + 1:
            raise InvalidConfig("max_positions too small for a single page")


@dataclass
class EngineConfig:
    k_pages: int = 16             # retrieved pages per layer, sink slots included
    sink_count: int = 1
    local_count: int = 1
    hot_budget_tokens: int = 8192  # hot-tier KV rows aggregated across layers
    max_new_tokens: int = 64
    mode: str = "retrieval"       # retrieval | full_attention | sliding_window
    window_pages: int = 16        # sliding_window mode only
    eos_id: int | None = None
    remap_positions: bool = False
    spill_dir: str | None = None
    debug_asserts: bool = True

    def validate(self) -> None:
        if self.mode not in ("retrieval", "full_attention", "sliding_window"):
            raise InvalidConfig(f"unknown engine mode {self.mode!r}")
        if self.sink_count < 1:
            raise InvalidConfig("sink_count must be >= 1")
        if self.local_count < 0:
            raise InvalidConfig("local_count must be >= 0")
        if self.mode == "retrieval":
            if self.k_pages < self.sink_count:
                raise InvalidConfig("k_pages must be >= sink_count")
            if self.k_pages < self.sink_count + self.local_count:
                raise InvalidConfig("k_pages must be >= sink_count + local_count")
        if self.mode == "sliding_window" and self.window_pages < 0:
            raise InvalidConfig("window_pages must be >= 0")
        if self.hot_budget_tokens < 1:
            raise InvalidConfig("hot_budget_tokens must be positive")
        if self.max_new_tokens < 0:
            raise InvalidConfig("max_new_tokens must be >= 0")


@dataclass
class TrainConfig:
    stage: int = 1
    learning_rate: float | None = None   # resolved per stage when left unset
    weight_decay: float = 1e-2
    grad_accum_steps: int = 16
    batch_size: int = 1
    max_steps: int = 100
    seed: int = 0
    layer_loss_weights: list[float] | None = None  # stage 1; None = uniform
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_sample_tokens: int | None = None

    def __post_init__(self) -> None:
        if self.stage not in (1, 2):
            raise InvalidConfig(f"stage must be 1 or 2, got {self.stage}")
        if self.learning_rate is None:
            self.learning_rate = 5e-6 if self.stage == 1 else 1e-6
        if self.learning_rate <= 0:
            raise InvalidConfig("learning_rate must be positive")
        if self.grad_accum_steps < 1 or self.batch_size < 1:
            raise InvalidConfig("grad_accum_steps and batch_size must be >= 1")
        if self.max_steps < 0:
            raise InvalidConfig("max_steps must be >= 0")
        if self.weight_decay < 0:
            raise InvalidConfig("weight_decay must be >= 0")


_SECTIONS = {"model": ModelConfig, "engine": EngineConfig, "train": TrainConfig}


def _build(cls, data: dict, overrides: dict | None = None):
    names = {f.name for f in dataclasses.fields(cls)}
    merged = dict(data)
    for key, val in (overrides or {}).items():
        if val is not None:
            merged[key] = val
    unknown = set(merged) - names
    if unknown:
        raise InvalidConfig(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    try:
        return cls(**merged)
    except TypeError as exc:
        raise InvalidConfig(str(exc)) from exc


def load_config_file(path: str) -> dict:
    """Read a JSON config document with optional model/engine/train sections."""
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidConfig(f"cannot read config file {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise InvalidConfig("config file must contain a JSON object")
    unknown = set(data) - set(_SECTIONS)
    if unknown:
        raise InvalidConfig(f"unknown config sections: {sorted(unknown)}")
    return data


def resolve_configs(file_data: dict | None = None,
                    model_overrides: dict | None = None,
                    engine_overrides: dict | None = None,
                    train_overrides: dict | None = None,
                    ) -> tuple[ModelConfig, EngineConfig, TrainConfig]:
    """Merge precedence: explicit overrides > config file > dataclass defaults."""
    file_data = file_data or {}
    model = _build(ModelConfig, file_data.get("model", {}), model_overrides)
    engine = _build(EngineConfig, file_data.get("engine", {}), engine_overrides)
    train = _build(TrainConfig, file_data.get("train", {}), train_overrides)
    model.validate()
    engine.validate()
    return model, engine, train


def config_snapshot(model: ModelConfig, engine: EngineConfig, train: TrainConfig) -> dict:
    return {
        "model": dataclasses.asdict(model),
        "engine": dataclasses.asdict(engine),
        "train": dataclasses.asdict(train),
    }
