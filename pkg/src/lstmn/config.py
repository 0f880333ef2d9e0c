"""Run configuration: defaults, file parsing, overrides, validation.

Config files are flat ``key = value`` text (blank lines and ``#``
comment lines ignored).  Precedence is CLI overrides > file > defaults.
Every field is validated before any training starts and unknown keys are
rejected, so a typo fails fast instead of silently training the wrong
model.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass


class ConfigError(ValueError):
    """Invalid, unknown, or inconsistent configuration."""


TASKS = ("lm", "sentiment", "nli")
MODELS = ("lstm", "lstmn", "lstmn-stack", "seq2seq-shallow", "seq2seq-deep")
SEQ2SEQ_MODELS = ("seq2seq-shallow", "seq2seq-deep")
EMBEDDING_POLICIES = ("auto", "none", "scale-first-epoch", "freeze-pretrained-first-epoch")

# Sentinels meaning "resolve from the task" during finalize().
_UNSET_INT = -1
_UNSET_FLOAT = -1.0


@dataclass
class RunConfig:
    task: str = "lm"
    model: str = "lstmn"

    # model dimensions
    hidden: int = 64
    embedding: int = 32
    attention: int = 0          # 0 -> same as hidden
    layers: int = 1
    capacity: int = 0           # memory span; 0 -> unbounded
    skip_connections: bool = False
    attention_bias: bool = True
    num_labels: int = _UNSET_INT
    tie_encoders: bool = False

    # optimizer block
    optimizer: str = "auto"
    lr: float = _UNSET_FLOAT
    lr_decay: float = 0.85
    improvement_threshold: float = 0.001
    grad_clip: float = _UNSET_FLOAT
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    dropout: float = _UNSET_FLOAT
    l2: float = _UNSET_FLOAT
    embedding_grad_policy: str = "auto"
    embedding_grad_scale: float = 0.35

    # data
    train_data: str = ""
    val_data: str = ""
    test_data: str = ""
    embeddings_path: str = ""
    vocab_size: int = 0         # 0 -> unlimited
    min_freq: int = 1

    # training loop
    epochs: int = 1
    batch_size: int = _UNSET_INT
    max_steps: int = 0          # 0 -> no step cap
    bucketing: bool = False
    seed: int = 0
    precision: str = "float64"
    log_every: int = 50
    split: str = "test"         # which split run_eval reports on


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}

_TASK_DEFAULTS = {
    # (optimizer, lr, batch, dropout, l2, grad_clip, labels)
    "lm": ("sgd", 0.65, 40, 0.0, 0.0, 5.0, 0),
    "sentiment": ("adam", 2e-3, 5, 0.5, 1e-4, 0.0, 5),
    "nli": ("adam", 1e-3, 16, 0.2, 0.0, 0.0, 3),
}


def _parse_value(name: str, raw: str):
    if name not in _FIELDS:
        raise ConfigError(f"unknown config key: {name}")
    ftype = _FIELDS[name].type
    raw = raw.strip()
    try:
        if ftype == "bool" or ftype is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if ftype == "int" or ftype is int:
            return int(raw)
        if ftype == "float" or ftype is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"config key {name}: cannot parse {raw!r} as {ftype}") from None


def parse_config_file(path: str) -> dict:
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, _, raw = line.partition("=")
            key = key.strip().replace("-", "_")
            values[key] = _parse_value(key, raw)
    return values


def build_config(file_path: str = "", overrides: dict | None = None) -> RunConfig:
    """Resolve defaults < file < overrides into a validated RunConfig."""
    values = {}
    if file_path:
        values.update(parse_config_file(file_path))
    for key, raw in (overrides or {}).items():
        key = key.replace("-", "_")
        values[key] = _parse_value(key, raw) if isinstance(raw, str) else raw
    cfg = RunConfig(**values)
    return finalize(cfg)


def finalize(cfg: RunConfig) -> RunConfig:
    """Fill per-task defaults and validate every field."""
    if cfg.task not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}, got {cfg.task!r}")
    if cfg.model not in MODELS:
        raise ConfigError(f"model must be one of {MODELS}, got {cfg.model!r}")

    opt, lr, batch, drop, l2, clip, labels = _TASK_DEFAULTS[cfg.task]
    cfg = dataclasses.replace(
        cfg,
        optimizer=opt if cfg.optimizer == "auto" else cfg.optimizer,
        lr=lr if cfg.lr == _UNSET_FLOAT else cfg.lr,
        batch_size=batch if cfg.batch_size == _UNSET_INT else cfg.batch_size,
        dropout=drop if cfg.dropout == _UNSET_FLOAT else cfg.dropout,
        l2=l2 if cfg.l2 == _UNSET_FLOAT else cfg.l2,
        num_labels=labels if cfg.num_labels == _UNSET_INT else cfg.num_labels,
        attention=cfg.hidden if cfg.attention == 0 else cfg.attention,
    )
    if cfg.grad_clip == _UNSET_FLOAT:
        cfg = dataclasses.replace(cfg, grad_clip=clip if cfg.optimizer == "sgd" else 0.0)

    def require(cond, msg):
        if not cond:
            raise ConfigError(msg)

    require(cfg.model != "lstmn" or cfg.layers == 1,
            "model lstmn is single-layer; use lstmn-stack with layers >= 2")
    require(cfg.model != "lstmn-stack" or cfg.layers >= 2,
            "model lstmn-stack needs layers >= 2")
    require(cfg.model not in SEQ2SEQ_MODELS or cfg.task in ("lm", "nli"),
            f"model {cfg.model} needs a source sequence; task {cfg.task} has none")
    require(cfg.hidden >= 1, f"hidden must be >= 1, got {cfg.hidden}")
    require(cfg.embedding >= 1, f"embedding must be >= 1, got {cfg.embedding}")
    require(cfg.attention >= 1, f"attention must be >= 1, got {cfg.attention}")
    require(cfg.layers >= 1, f"layers must be >= 1, got {cfg.layers}")
    require(cfg.capacity >= 0, f"capacity must be >= 0, got {cfg.capacity}")
    require(cfg.optimizer in ("sgd", "adam"),
            f"optimizer must be sgd or adam, got {cfg.optimizer!r}")
    require(cfg.lr > 0, f"lr must be > 0, got {cfg.lr}")
    require(0.0 < cfg.lr_decay < 1.0, f"lr_decay must be in (0, 1), got {cfg.lr_decay}")
    require(cfg.improvement_threshold >= 0,
            f"improvement_threshold must be >= 0, got {cfg.improvement_threshold}")
    require(cfg.grad_clip >= 0, f"grad_clip must be >= 0, got {cfg.grad_clip}")
    require(0.0 <= cfg.dropout < 1.0, f"dropout must be in [0, 1), got {cfg.dropout}")
    require(cfg.l2 >= 0, f"l2 must be >= 0, got {cfg.l2}")
    require(cfg.embedding_grad_policy in EMBEDDING_POLICIES,
            f"embedding_grad_policy must be one of {EMBEDDING_POLICIES}, "
            f"got {cfg.embedding_grad_policy!r}")
    require(cfg.task == "lm" or cfg.num_labels >= 2,
            f"num_labels must be >= 2 for task {cfg.task}, got {cfg.num_labels}")
    require(cfg.epochs >= 0, f"epochs must be >= 0, got {cfg.epochs}")
    require(cfg.batch_size >= 1, f"batch_size must be >= 1, got {cfg.batch_size}")
    require(cfg.max_steps >= 0, f"max_steps must be >= 0, got {cfg.max_steps}")
    require(cfg.vocab_size >= 0, f"vocab_size must be >= 0, got {cfg.vocab_size}")
    require(cfg.min_freq >= 1, f"min_freq must be >= 1, got {cfg.min_freq}")
    require(cfg.precision in ("float64", "float32"),
            f"precision must be float64 or float32, got {cfg.precision!r}")
    require(cfg.split in ("train", "val", "test"),
            f"split must be train/val/test, got {cfg.split!r}")
    return cfg


def data_kind(cfg: RunConfig) -> str:
    """Which loader format the task/model combination consumes."""
    if cfg.task == "sentiment":
        return "labeled-sentences"
    if cfg.task == "nli":
        return "sentence-pairs"
    if cfg.model in SEQ2SEQ_MODELS:
        return "sentence-pairs"   # conditional LM: source TAB target (any label)
    return "lm-text"


def format_config(cfg: RunConfig) -> str:
    """Serialize the effective config; reparsing reproduces the run."""
    lines = []
    for f in dataclasses.fields(RunConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"
