"""Experiment configuration and its flat ``key = value`` text format."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, fields

OBJECTIVES = ("mle", "mle-ent", "iql-offline", "iql-online", "gail")

# attribute name -> config key, where they differ
_KEY_ALIASES = {"lam": "lambda"}
_ATTR_FOR_KEY = {v: k for k, v in _KEY_ALIASES.items()}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    run_id: str = "run"
    task: str = "copy"
    objective: str = "mle"
    # TD / mixing
    lam: float = 0.1
    gamma: float = 1.0
    alpha: float = 0.0
    # GAIL
    kl_weight_final: float = 1e-3
    anneal_steps: int = 10_000
    mle_weight: float = 0.0
    # schedule and optimizer
    batch_size: int = 32
    total_steps: int = 2000
    warmup_mle_steps: int = 0
    learning_rate: float = 1e-4
    lr_warmup_steps: int = 2000
    weight_decay: float = 0.0
    eval_every: int = 500
    early_stopping_patience: int = 0
    staleness_bound: int = 0
    seed: int = 0
    # model
    arch: str = "causal-attention"
    embed_dim: int = 32
    hidden_dim: int = 64
    n_layers: int = 2
    max_context: int = 128
    # data
    train_size: int = 2000
    val_size: int = 200
    subset_fraction: float = 1.0
    num_symbols: int = 8
    min_len: int = 3
    max_len: int = 6
    modulus: int = 10
    n_terms: int = 2
    reference_weights: tuple[float, ...] = (0.4, 0.3, 0.2, 0.1)
    refs_per_prompt: int = 4
    max_completion: int = 64
    # evaluation
    eval_mode: str = "sample"
    eval_temperature: float = 1.0
    eval_samples: int = 4
    eval_prompts: int = 50
    rollout_temperature: float = 1.0

    def __post_init__(self):
        self.reference_weights = tuple(float(w) for w in self.reference_weights)
        self.validate()

    def validate(self) -> None:
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.arch != "causal-attention":
            raise ConfigError(f"unsupported arch {self.arch!r}")
        if not 0 <= self.warmup_mle_steps <= self.total_steps:
            raise ConfigError("warmup_mle_steps must lie in [0, total_steps]")
        for name in ("learning_rate", "batch_size", "total_steps", "eval_every"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.lam < 0:
            raise ConfigError("lambda must be non-negative")
        if not 0 <= self.gamma <= 1:
            raise ConfigError("gamma must lie in [0, 1]")
        if not 0 <= self.alpha < 1:
            raise ConfigError("alpha must lie in [0, 1)")
        if self.objective == "iql-online" and self.alpha == 0:
            raise ConfigError("iql-online needs alpha > 0 (alpha = 0 is iql-offline)")
        if not 0 < self.subset_fraction <= 1:
            raise ConfigError("subset_fraction must lie in (0, 1]")
        if self.eval_mode not in ("sample", "greedy", "beam"):
            raise ConfigError(f"unknown eval_mode {self.eval_mode!r}")

    # ------------------------------------------------------------------
    def to_dict(self) -> dict:
        return {_KEY_ALIASES.get(f.name, f.name): _plain(getattr(self, f.name)) for f in fields(self)}

    def content_hash(self) -> str:
        """SHA-256 over the canonical (sorted-key) JSON form, ignoring ``run_id``."""
        d = self.to_dict()
        d.pop("run_id", None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def with_overrides(self, pairs: dict[str, str]) -> "ExperimentConfig":
        changes = {}
        for key, raw in pairs.items():
            attr = _attr(key)
            changes[attr] = _coerce(attr, raw)
        return dataclasses.replace(self, **changes)


def _plain(v):
    return list(v) if isinstance(v, tuple) else v


def valid_keys() -> list[str]:
    return sorted(_KEY_ALIASES.get(f.name, f.name) for f in fields(ExperimentConfig))


def _attr(key: str) -> str:
    key = key.strip()
    attr = _ATTR_FOR_KEY.get(key, key)
    if attr not in {f.name for f in fields(ExperimentConfig)} or key in _KEY_ALIASES:
        raise ConfigError(f"unknown config key {key!r}; valid keys: {', '.join(valid_keys())}")
    return attr


_HINTS = typing.get_type_hints(ExperimentConfig)


def _coerce(attr: str, raw: str):
    hint = _HINTS[attr]
    raw = raw.strip()
    try:
        if hint is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if hint is str:
            return raw
        if typing.get_origin(hint) is tuple:
            return tuple(float(x) for x in raw.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {_KEY_ALIASES.get(attr, attr)}") from None
    raise ConfigError(f"unsupported field type for {attr}")  # pragma: no cover


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(repr(float(x)) for x in v)
    return str(v)


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value
    return (base or ExperimentConfig()).with_overrides(pairs)


def dump_config(cfg: ExperimentConfig) -> str:
    lines = [f"{_KEY_ALIASES.get(f.name, f.name)} = {_format(getattr(cfg, f.name))}"
             for f in fields(cfg)]
    return "\n".join(lines) + "\n"


def load_config(path: str) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def task_params(cfg: ExperimentConfig) -> dict:
    params = dict(num_symbols=cfg.num_symbols, min_len=cfg.min_len, max_len=cfg.max_len,
                  modulus=cfg.modulus, n_terms=cfg.n_terms, max_completion=cfg.max_completion)
    if cfg.task == "multi-reference":
        params.update(reference_weights=cfg.reference_weights, refs_per_prompt=cfg.refs_per_prompt,
                      n_references=len(cfg.reference_weights))
    return params


__all__ = ["ExperimentConfig", "ConfigError", "OBJECTIVES", "parse_config", "dump_config",
           "load_config", "valid_keys", "task_params"]
