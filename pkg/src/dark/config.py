"""Flat ``key = value`` run configuration with optional ``[section]`` headers.

Keys are unique across sections, so headers only group lines for humans::

    [model]
    n_feat = 32
    [schedule]
    base_lr = 2e-4
    [stages]
    stages = [(0, 8, 128), (46000, 4, 192)]

Values are Python literals (numbers, booleans, quoted strings, tuples/lists).
"""

from __future__ import annotations

import ast
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from dark.losses import LossSpec
from dark.model import ModelConfig
from dark.train import Schedule, StagePlan, TrainOptions

__all__ = ["RunConfig", "ConfigError", "load_config", "parse_config"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: Schedule = field(default_factory=Schedule)
    plan: StagePlan = field(default_factory=StagePlan)
    loss: LossSpec = field(default_factory=LossSpec)
    train: TrainOptions = field(default_factory=TrainOptions)


# key -> (group, field name, expected type)
_KEYS: dict[str, tuple[str, str, type]] = {}
for _group, _cls in (("model", ModelConfig), ("schedule", Schedule), ("train", TrainOptions)):
    for _f in dataclasses.fields(_cls):
        _KEYS[_f.name] = (_group, _f.name, {"int": int, "float": float, "bool": bool}[_f.type])
_KEYS["stages"] = ("plan", "stages", tuple)
_KEYS["loss_kind"] = ("loss", "kind", str)
_KEYS["loss_weight"] = ("loss", "loss_weight", float)
_KEYS["reduction"] = ("loss", "reduction", str)
_KEYS["charbonnier_eps"] = ("loss", "charbonnier_eps", float)
_KEYS["psnr_to_luminance"] = ("loss", "psnr_to_luminance", bool)

_SECTIONS = {"model", "schedule", "stages", "plan", "loss", "train", "data"}


def _coerce(key: str, raw: str, expected: type, lineno: int):
    try:
        value = ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        # bare words are accepted as strings, e.g. loss_kind = charbonnier
        if expected is str and raw.replace("_", "").isalnum():
            return raw
        raise ConfigError(f"line {lineno}: cannot parse value for {key!r}: {raw!r}") from None
    if expected is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    ok = isinstance(value, expected) and not (expected in (int, float) and isinstance(value, bool))
    if expected is tuple:
        ok = isinstance(value, (list, tuple)) and all(
            isinstance(s, (list, tuple)) and len(s) == 3 and all(type(v) is int for v in s) for s in value
        )
        value = tuple(tuple(s) for s in value) if ok else value
        if not ok:
            raise ConfigError(f"line {lineno}: {key!r} expects a list of (start, batch, patch) int triples")
    if not ok:
        raise ConfigError(
            f"line {lineno}: {key!r} expects {expected.__name__}, got {type(value).__name__} {raw!r}"
        )
    return value


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    overrides: dict[str, dict[str, object]] = {g: {} for g in ("model", "schedule", "plan", "loss", "train")}
    seen: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if stripped.startswith("["):
            if not stripped.endswith("]"):
                raise ConfigError(f"{source}: line {lineno}: malformed section header {stripped!r}")
            name = stripped[1:-1].strip()
            if name not in _SECTIONS:
                raise ConfigError(f"{source}: line {lineno}: unknown section [{name}]")
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}: line {lineno}: expected 'key = value', got {stripped!r}")
        key, raw = (s.strip() for s in stripped.split("=", 1))
        if key not in _KEYS:
            raise ConfigError(f"{source}: line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{source}: line {lineno}: duplicate key {key!r} (first on line {seen[key]})")
        seen[key] = lineno
        group, fname, typ = _KEYS[key]
        try:
            overrides[group][fname] = _coerce(key, raw, typ, lineno)
        except ConfigError as exc:
            raise ConfigError(f"{source}: {exc}") from None

    try:
        cfg = RunConfig(
            model=ModelConfig(**overrides["model"]),
            schedule=Schedule(**overrides["schedule"]),
            plan=StagePlan(**overrides["plan"]),
            loss=LossSpec(**overrides["loss"]),
            train=TrainOptions(**overrides["train"]),
        )
        cfg.model.validate()
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return cfg


def load_config(path=None) -> RunConfig:
    """Read a config file; ``None`` gives all defaults."""
    if path is None:
        return RunConfig()
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
    return parse_config(text, str(p))
