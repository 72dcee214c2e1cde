"""Run configuration: a flat ``key=value`` file plus command-line overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping

from .model import ModelConfig


@dataclass
class RunConfig(ModelConfig):
    # vocab_size 0 means "take it from the corpus vocabulary"
    vocab_size: int = 0
    mask_ratio_image: float = 0.75
    mask_ratio_report: float = 0.5
    lambda_il: float = 5.0
    lambda_gl: float = 3.0
    warmup_epochs: int = 5
    lr: float = 2e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 16
    epochs: int = 1
    # if positive, overrides epochs * batches_per_epoch
    steps: int = 0
    seed: int = -1
    corpus: str = ""
    checkpoint: str = ""
    metrics: str = ""
    checkpoint_every: int = 0
    log_wall_ms: bool = False

    def validate(self) -> None:
        if self.vocab_size:
            super().validate()
        else:
            dataclasses.replace(self.model_config(), vocab_size=1).validate()
        for name in ("mask_ratio_image", "mask_ratio_report"):
            r = getattr(self, name)
            if not 0.0 < r < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.warmup_epochs < 1:
            raise ValueError("warmup_epochs must be at least 1")

    def require_seed(self) -> None:
        if self.seed < 0:
            raise ValueError("a non-negative seed is mandatory (--seed)")

    def model_config(self, vocab_size: int | None = None) -> ModelConfig:
        names = {f.name for f in fields(ModelConfig)}
        kw = {k: v for k, v in dataclasses.asdict(self).items() if k in names}
        if vocab_size is not None:
            kw["vocab_size"] = vocab_size
        elif not kw["vocab_size"]:
            kw["vocab_size"] = 1
        return ModelConfig(**kw)


def _parse_value(kind: Any, raw: str):
    kind = kind if isinstance(kind, type) else {"int": int, "float": float, "bool": bool, "str": str}[str(kind)]
    if kind is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return kind(raw)


def field_types() -> dict[str, type]:
    return {f.name: type(f.default) for f in fields(RunConfig)}


def parse_overrides(pairs: Mapping[str, str], base: RunConfig | None = None) -> RunConfig:
    types = field_types()
    values = dataclasses.asdict(base) if base is not None else {}
    for k, raw in pairs.items():
        key = k.replace("-", "_")
        if key not in types:
            raise KeyError(f"unknown config key {k!r}")
        try:
            values[key] = _parse_value(types[key], str(raw))
        except ValueError as exc:
            raise ValueError(f"config key {k!r}: {exc}") from exc
    return RunConfig(**values)


def read_config_file(path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def write_config_file(cfg: RunConfig, path) -> None:
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in dataclasses.asdict(cfg).items()), encoding="utf-8")


def load_config(path=None, overrides: Mapping[str, str] | None = None) -> RunConfig:
    pairs = read_config_file(path) if path else {}
    pairs.update(overrides or {})
    return parse_overrides(pairs)
