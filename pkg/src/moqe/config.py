"""Typed run configuration for the pipeline; unknown keys are rejected."""

from __future__ import annotations

import json
from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, ValidationError

from .errors import ConfigError
from .quant import QuantSpec
from .training import TrainConfig


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataConfig(_Strict):
    kind: Literal["cv", "nlp"] = "cv"
    n_subsets: int = 4
    n_per_subset: int = 120  # images per subset (cv)
    image_size: int = 32
    docs_per_style: int = 16  # documents per style (nlp)
    doc_len: int = 260
    context: int = 64
    val_fraction: float = 0.25


class BaseModelConfig(_Strict):
    epochs: int = 4
    lr: float = 1e-3
    batch_size: int = 32
    widths: Optional[List[int]] = None  # cv trunk widths
    d_model: int = 64  # nlp
    n_heads: int = 4
    n_layers: int = 2


class ExpertConfig(_Strict):
    scheme: str
    bits: int = 8
    block_size: Optional[int] = None
    calib_samples: Optional[int] = None
    calib_subsets: Optional[List[int]] = None
    label: Optional[str] = None

    def to_spec(self):
        return QuantSpec(self.scheme, self.bits, self.block_size, self.calib_samples)


class RouterTrainConfig(_Strict):
    alpha0: float = 0.02
    epochs: int = 12
    base_lr: float = 5e-5
    warmup_steps: int = 0
    batch_size: int = 8
    grad_accum: int = 6
    weight_decay: Optional[float] = None  # default depends on the data kind
    max_grad_norm: float = 1.0
    warm_epochs: int = 2
    warm_fraction: float = 0.3
    early_stop_patience: int = 7
    decay_start_fraction: float = 0.8
    lr_mode: Optional[str] = None  # default depends on the data kind

    def to_train_config(self, kind):
        wd = self.weight_decay if self.weight_decay is not None else (0.01 if kind == "nlp" else 0.0)
        mode = self.lr_mode or ("cosine" if kind == "nlp" else "staged")
        return TrainConfig(
            alpha0=self.alpha0, epochs=self.epochs, base_lr=self.base_lr,
            warmup_steps=self.warmup_steps, batch_size=self.batch_size,
            grad_accum=self.grad_accum, weight_decay=wd, max_grad_norm=self.max_grad_norm,
            warm_epochs=self.warm_epochs, warm_fraction=self.warm_fraction,
            early_stop_patience=self.early_stop_patience,
            decay_start_fraction=self.decay_start_fraction, lr_mode=mode)


class BenchConfig(_Strict):
    repetitions: int = 5
    workload_size: int = 16
    fast_capacity_bytes: Optional[int] = None  # default: auto-sized to fit


class RunConfig(_Strict):
    seed: int = 0
    data: DataConfig = DataConfig()
    base: BaseModelConfig = BaseModelConfig()
    experts: List[ExpertConfig]
    train: RouterTrainConfig = RouterTrainConfig()
    bench: BenchConfig = BenchConfig()

    def model_post_init(self, _ctx):
        if len(self.experts) < 2:
            raise ValueError("at least 2 experts are required")


def load_run_config(path):
    try:
        with open(path) as f:
            raw = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    try:
        return RunConfig(**raw)
    except (ValidationError, ValueError) as e:
        raise ConfigError(f"invalid config {path}: {e}") from e


def dump_resolved(config, path):
    """Write the fully resolved (defaults filled) configuration."""
    with open(path, "w") as f:
        f.write(config.model_dump_json(indent=2))
