"""Run configuration: a flat ``key = value`` text file with environment overrides.

Lines starting with ``#`` are comments. Any key can be overridden by an
environment variable named ``IMTPP_<KEY>`` (upper case), e.g. ``IMTPP_LR=0.005``.
Lists are comma separated.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

ENV_PREFIX = "IMTPP_"


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    # optimization
    lr: float = 1e-2
    l2: float = 1e-3
    clip: float = 5.0
    batch: int = 64
    epochs: int = 30
    bptt: int = 50
    seed: int = 0
    patience: int = 10
    # model
    cap: int = 5
    mu_bar: float = 1.0
    mu_sweep: list = field(default_factory=lambda: [0.1, 0.5, 1.0, 2.0, 5.0])
    time_head: str = "lognormal"
    # evaluation
    predict: str = "mean"
    forecast_cap: int = 5
    forecast_n: int = 10
    matching: str = "order"
    train_fraction: float = 0.8
    val_fraction: float = 0.1
    # budgeted imputation
    nbar: int = 8
    finetune_epochs: int = 10
    # simulation
    n_sequences: int = 4000
    horizon: float = 155.0
    base_rates: list = field(default_factory=lambda: [0.1, 0.2])
    kernels: str = "benchmark"
    deletion: float = 0.0
    deletion_jitter: float = 0.05

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.lr < 0 or self.l2 < 0:
            raise ConfigError("lr and l2 must be nonnegative")
        if self.batch < 1 or self.epochs < 0 or self.bptt < 1:
            raise ConfigError("batch and bptt must be positive, epochs nonnegative")
        if self.cap < 0 or self.forecast_cap < 0 or self.nbar < 0:
            raise ConfigError("cap, forecast_cap and nbar must be nonnegative")
        if self.time_head not in ("lognormal", "intensity"):
            raise ConfigError(f"time_head must be lognormal or intensity, not {self.time_head!r}")
        if self.predict not in ("mean", "median"):
            raise ConfigError(f"predict must be mean or median, not {self.predict!r}")
        if self.matching not in ("order", "hungarian"):
            raise ConfigError(f"matching must be order or hungarian, not {self.matching!r}")
        if not 0 < self.train_fraction <= 1 or not 0 <= self.val_fraction < 1:
            raise ConfigError("fractions out of range")
        if self.kernels not in ("benchmark", "zero"):
            raise ConfigError(f"kernels must be benchmark or zero, not {self.kernels!r}")
        if not 0 <= self.deletion < 1:
            raise ConfigError("deletion must lie in [0, 1)")

    def replace(self, **kw) -> "Config":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {','.join(str(x) for x in v) if isinstance(v, list) else v}")
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f for f in fields(Config)}


def _coerce(key: str, raw: str):
    f = _FIELDS[key]
    kind = f.type if isinstance(f.type, str) else f.type.__name__
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "list":
            return [float(x) for x in raw.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from exc
    return raw


def parse(text: str, source: str = "<config>") -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key = value")
        key, raw = (p.strip() for p in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        out[key] = _coerce(key, raw)
    return out


def load(path=None, env: dict | None = None, **overrides) -> Config:
    """File values, then ``IMTPP_*`` environment variables, then keyword overrides."""
    values = {}
    if path is not None:
        values.update(parse(Path(path).read_text(encoding="utf-8"), str(path)))
    env = os.environ if env is None else env
    for key in _FIELDS:
        name = ENV_PREFIX + key.upper()
        if name in env:
            values[key] = _coerce(key, env[name])
    values.update({k: v for k, v in overrides.items() if v is not None})
    return Config(**values)
