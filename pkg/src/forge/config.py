"""Experiment configuration: nested dataclasses loaded from a strict JSON file."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .numerics import ConfigError

TASK_IDS = ("boolq", "sst2", "mrpc", "rte", "winogrande", "gsm8k")


@dataclass
class BaseConfig:
    d_in: int = 32
    hidden: int = 32
    n_classes: int = 2
    activation: str = "silu"
    pretrain_steps: int = 1500
    pretrain_lr: float = 3e-3
    evolve_steps: int = 300
    evolve_lr: float = 2e-3
    batch: int = 256


@dataclass
class CorpusConfig:
    tasks: list[str] = field(default_factory=lambda: list(TASK_IDS))
    train_versions: list[str] = field(default_factory=lambda: ["t0", "t1", "t2"])
    heldout_versions: list[str] = field(default_factory=lambda: ["t3", "t4"])
    seeds_per_cell: int = 4
    rank: int = 8
    n_train: int = 2048
    n_test: int = 2048
    lora_steps: int = 400
    lora_lr: float = 5e-3
    lora_batch: int = 128


@dataclass
class TokenizerConfig:
    k: int = 64
    pos_dim: int = 16


@dataclass
class ModelConfig:
    ssm_hidden: int = 128
    proto_channels: int = 4
    cond_channels: int = 4
    channels: int = 64
    blocks: int = 3
    kernel: int = 3
    cond_model_dim: int = 64
    cond_text_dim: int = 64
    buckets: int = 2048
    ngram: int = 3
    time_dim: int = 32
    embed_dim: int = 128


@dataclass
class DiffusionConfig:
    steps: int = 200
    schedule: str = "linear"
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class TrainConfig:
    iterations: int = 20000
    lr: float = 1e-3
    batch_sequences: int = 8
    token_rows: int = 128
    clip: float = 1.0
    log_every: int = 500


@dataclass
class EvalConfig:
    n_seeds: int = 3
    aggregate: str = "mean"
    sample_seed: int = 1234


@dataclass
class RankSweepConfig:
    ranks: list[int] = field(default_factory=lambda: [2, 4, 8, 16, 32])
    tasks: list[str] = field(default_factory=lambda: ["boolq", "mrpc"])
    # budget for a rank whose batch fills train.token_rows; scaled up for longer adapters
    iterations: int = 4000


@dataclass
class ExperimentConfig:
    seed: int = 0
    base: BaseConfig = field(default_factory=BaseConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ranksweep: RankSweepConfig = field(default_factory=RankSweepConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        cfg = _build(cls, d, "config")
        validate(cfg)
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        return cls.from_dict(raw)

    def replace(self, **sections) -> "ExperimentConfig":
        return ExperimentConfig.from_dict(_merge(self.to_dict(), sections))


def _merge(a: dict, b: dict) -> dict:
    out = dict(a)
    for k, v in b.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def _build(cls, d, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in d:
            continue
        tp, v = hints[f.name], d[f.name]
        if dataclasses.is_dataclass(tp):
            kwargs[f.name] = _build(tp, v, f"{where}.{f.name}")
        else:
            kwargs[f.name] = _coerce(tp, v, f"{where}.{f.name}")
    return cls(**kwargs)


def _coerce(tp, v, where):
    origin = typing.get_origin(tp)
    if origin is list:
        (item,) = typing.get_args(tp)
        if not isinstance(v, list):
            raise ConfigError(f"{where}: expected a list")
        return [_coerce(item, x, f"{where}[{i}]") for i, x in enumerate(v)]
    if tp is bool:
        ok = isinstance(v, bool)
    elif tp is int:
        ok = isinstance(v, int) and not isinstance(v, bool)
    elif tp is float:
        ok = isinstance(v, (int, float)) and not isinstance(v, bool)
        v = float(v) if ok else v
    elif tp is str:
        ok = isinstance(v, str)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{where}: expected {tp.__name__}, got {type(v).__name__}")
    return v


def validate(cfg: ExperimentConfig) -> None:
    unknown = [t for t in cfg.corpus.tasks + cfg.ranksweep.tasks if t not in TASK_IDS]
    if unknown:
        raise ConfigError(f"unknown task ids {unknown}; known: {list(TASK_IDS)}")
    versions = cfg.corpus.train_versions + cfg.corpus.heldout_versions
    if len(set(versions)) != len(versions):
        raise ConfigError("base versions must be unique")
    if cfg.corpus.rank < 1 or cfg.corpus.seeds_per_cell < 1:
        raise ConfigError("corpus.rank and corpus.seeds_per_cell must be >= 1")
    if cfg.tokenizer.k < 1:
        raise ConfigError("tokenizer.k must be >= 1")
    if cfg.tokenizer.pos_dim % 2:
        raise ConfigError("tokenizer.pos_dim must be even")
    if cfg.model.kernel % 2 == 0:
        raise ConfigError("model.kernel must be odd")
    if cfg.diffusion.steps < 1:
        raise ConfigError("diffusion.steps must be >= 1")
    if cfg.diffusion.schedule != "linear":
        raise ConfigError(f"unsupported schedule {cfg.diffusion.schedule!r}")
    if cfg.eval.aggregate != "mean":
        raise ConfigError("eval.aggregate must be 'mean'")
    if cfg.base.activation not in ("silu", "tanh", "relu"):
        raise ConfigError(f"unsupported activation {cfg.base.activation!r}")
