"""Run configuration: flat ``key = value`` files plus command-line overrides.

Every key is validated against the schema below; unknown keys are
rejected so typos fail loudly.  The resolved configuration can be echoed
back out byte-stably, which run directories use to record exactly what
produced them.  The environment variable ``DEEPCOM_SEED`` wins over both
the file and ``--set`` overrides.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields

from .corpus import FilterConfig
from .params import ModelDims


class ConfigError(ValueError):
    """Unknown keys, malformed lines, or values of the wrong type."""


@dataclass
class RunConfig:
    d1: int = 256
    d2: int = 128
    mlp_hidden: int = 512
    vocab_size: int = 30000
    lr_pretrain: float = 0.15
    lr_sgd: float = 0.01
    adagrad_acc0: float = 0.1
    beam: int = 5
    mc_samples: int = 1
    max_step: int = 2000
    pretrain_steps: int = 2000
    seed: int = 0
    clip_norm: float = 5.0
    len_title: int = 30
    len_body: int = 600
    len_comment: int = 50
    match_threshold: float = 0.4
    match_steps: int = 200
    match_negatives: int = 1
    max_ngram: int = 6
    batch_size: int = 8
    checkpoint_interval: int = 500
    min_body: int = 30
    min_comment: int = 10
    max_comment: int = 100
    max_comments: int = 30
    min_comments: int = 1
    length_normalize: bool = False
    include_comments_in_vocab: bool = True
    workers: int = 1

    def model_dims(self, vocab_len: int) -> ModelDims:
        return ModelDims(
            d1=self.d1,
            d2=self.d2,
            hidden=self.mlp_hidden,
            vocab=vocab_len,
            len_title=self.len_title,
            len_body=self.len_body,
            len_comment=self.len_comment,
        )

    def filter_config(self) -> FilterConfig:
        return FilterConfig(
            min_body=self.min_body,
            min_comment=self.min_comment,
            max_comment=self.max_comment,
            max_comments=self.max_comments,
            min_comments=self.min_comments,
        )


# config-file key -> dataclass field; most coincide, "J" is the one alias
_KEY_TO_FIELD = {f.name: f.name for f in fields(RunConfig)}
_KEY_TO_FIELD["J"] = "mc_samples"
del _KEY_TO_FIELD["mc_samples"]
_FIELD_TO_KEY = {v: k for k, v in _KEY_TO_FIELD.items()}
_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(key: str, field_name: str, raw: str):
    kind = _FIELD_TYPES[field_name]
    raw = raw.strip()
    try:
        if kind == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {raw!r}") from e
    return raw


def parse_assignments(lines, source: str) -> dict:
    """Parse ``key = value`` assignments; returns field-name keyed values."""
    values = {}
    bad_keys = []
    for i, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{i}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _KEY_TO_FIELD:
            bad_keys.append(key)
            continue
        field_name = _KEY_TO_FIELD[key]
        values[field_name] = _parse_value(key, field_name, raw)
    if bad_keys:
        raise ConfigError(f"{source}: unknown config keys: {', '.join(sorted(bad_keys))}")
    return values


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    """Build a RunConfig from an optional file, ``key=value`` overrides,
    and the DEEPCOM_SEED environment variable (strongest)."""
    values = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                values.update(parse_assignments(fh, str(path)))
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
    if overrides:
        values.update(parse_assignments(overrides, "--set"))
    env_seed = os.environ.get("DEEPCOM_SEED")
    if env_seed is not None:
        try:
            values["seed"] = int(env_seed)
        except ValueError as e:
            raise ConfigError(f"DEEPCOM_SEED must be an integer, got {env_seed!r}") from e
    return RunConfig(**values)


def echo_config(cfg: RunConfig) -> str:
    """Stable textual form of the effective configuration."""
    lines = []
    for f in sorted(fields(RunConfig), key=lambda f: _FIELD_TO_KEY[f.name]):
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{_FIELD_TO_KEY[f.name]} = {value}")
    return "\n".join(lines) + "\n"
