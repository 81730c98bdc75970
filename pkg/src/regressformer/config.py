"""Sectioned run configuration stored as TOML."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import tomli
import tomli_w

from .encodings import EncodingConfig
from .model import ModelConfig
from .objectives import TrainerConfig

SEED_ENV = "REGRESSFORMER_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    train: str | None = None
    valid: str | None = None
    test: str | None = None
    format: str | None = None
    property: str | None = None
    synth_kind: str | None = None
    synth_n: int = 1000
    synth_len: int = 20
    synth_alphabet: int = 10
    synth_seed: int = 0
    split: list[float] = field(default_factory=lambda: [0.9, 0.05, 0.05])
    split_seed: int = 0
    decimals: int = 3
    ranges: dict[str, list[float]] = field(default_factory=dict)
    jitter_sigma: float = 0.0
    jitter_threshold: float = 0.05

    def __post_init__(self):
        if self.decimals < 1:
            raise ConfigError("data.decimals must be >= 1")
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9:
            raise ConfigError("data.split must be three ratios summing to 1")


@dataclass
class EvalConfig:
    n_primers: int = 10
    n_seeds: int = 100
    mask_fraction: float = 0.4
    max_span: int = 7
    segment: int = 0
    top_k: int = 3
    boost: float = 0.2
    novelty_filter: str = "segment"  # or "sequence"
    with_property: bool = True
    k: int = 25
    distance: str = "levenshtein"
    pool_size: int = 80
    delta: float = 0.4
    primer: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.novelty_filter not in ("segment", "sequence"):
            raise ConfigError("eval.novelty_filter must be 'segment' or 'sequence'")


@dataclass
class DecodeConfig:
    beam: int = 5
    mask_fraction: float = 0.4
    max_span: int = 7
    seed: int = 0


@dataclass
class RunConfig:
    run_id: str = "run"
    out_dir: str = "runs"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)

    def to_dict(self) -> dict:
        return _strip_none(dataclasses.asdict(self))

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


def _strip_none(obj):
    if isinstance(obj, dict):
        return {k: _strip_none(v) for k, v in obj.items() if v is not None}
    return obj


def _build(cls, values: dict[str, Any], where: str):
    if not isinstance(values, dict):
        raise ConfigError(f"[{where}] must be a table")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")
    kwargs = dict(values)
    if cls is ModelConfig and "encoding" in kwargs:
        enc = kwargs["encoding"]
        enc_known = {f.name for f in dataclasses.fields(EncodingConfig)}
        bad = sorted(set(enc) - enc_known)
        if bad:
            raise ConfigError(f"unknown key(s) in [model.encoding]: {', '.join(bad)}")
        kwargs["encoding"] = EncodingConfig(**{"d_e": kwargs.get("d_e", 64), **enc})
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}] {exc}") from exc


SECTIONS = {"data": DataConfig, "model": ModelConfig, "trainer": TrainerConfig, "eval": EvalConfig, "decode": DecodeConfig}


def from_dict(values: dict[str, Any]) -> RunConfig:
    top = {"run_id", "out_dir", *SECTIONS}
    unknown = sorted(set(values) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    sections = {name: _build(cls, values.get(name, {}), name) for name, cls in SECTIONS.items()}
    trainer_vals = values.get("trainer", {})
    if "seed" not in trainer_vals and os.environ.get(SEED_ENV):
        sections["trainer"].seed = int(os.environ[SEED_ENV])
    return RunConfig(
        run_id=str(values.get("run_id", "run")),
        out_dir=str(values.get("out_dir", "runs")),
        **sections,
    )


def load(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        values = tomli.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return from_dict(values)


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``section.key=value`` overrides (values parsed as TOML literals)."""
    values = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = tomli.loads(f"v = {raw}")["v"]
        except tomli.TOMLDecodeError:
            value = raw
        node = values
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return from_dict(values)
