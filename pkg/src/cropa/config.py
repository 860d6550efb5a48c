"""Hyperparameter records and the flat ``key = value`` config format.

Every key maps onto exactly one dataclass field; the parser never absorbs an
unknown key.  Numeric values may be written as fractions (``16/255``).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from fractions import Fraction
from typing import Any, Mapping

SCHEDULE_MODES = ("appendix_window", "algorithm1_modulo")
SIGN_MODES = ("align", "literal_eq12")
TEXT_STEP_MODES = ("ascent", "descent")
AUGMENT_MODES = ("none", "scmix", "cutmix")
EVAL_MODES = ("targeted", "untargeted")
METHODS = ("single_p", "multi_p", "cropa", "cropa_init", "cropa_duap", "cross_image")


class ConfigError(ValueError):
    """A config value is malformed, unknown, or violates an invariant."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _require(ok: bool, key: str, message: str) -> None:
    if not ok:
        raise ConfigError(key, message)


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 16 / 255
    alpha1: float = 1 / 255
    alpha2: float = 0.01
    iterations: int = 1701
    text_update_interval: int = 10
    text_update_window: int = 300
    text_delta_low: float = -0.23
    text_delta_high: float = 0.27
    prompt_count: int = 10
    lam: float = 5.0
    seed: int = 42
    schedule_mode: str = "appendix_window"
    checkpoints: tuple[int, ...] = (900, 1100, 1300, 1500, 1700)
    init_iters: int = 150
    init_budget: float = 0.05
    duap_sign_mode: str = "align"
    duap_text_step: str = "ascent"

    def __post_init__(self):
        object.__setattr__(self, "checkpoints", tuple(sorted(set(int(c) for c in self.checkpoints))))
        _require(0 < self.epsilon <= 1, "epsilon", "must lie in (0, 1]")
        _require(0 < self.alpha1 <= self.epsilon, "alpha1", "must lie in (0, epsilon]")
        _require(self.alpha2 > 0, "alpha2", "must be positive")
        # K = 0 is accepted programmatically as the no-op run; config files require K >= 1
        _require(self.iterations >= 0, "iterations", "must be non-negative")
        _require(self.text_update_interval >= 1, "text_update_interval", "must be >= 1")
        _require(self.text_update_window >= 0, "text_update_window", "must be >= 0")
        _require(self.text_delta_low < 0 < self.text_delta_high, "text_delta_low", "range must straddle zero")
        _require(self.prompt_count >= 1, "prompt_count", "must be >= 1")
        _require(self.lam >= 0, "lam", "must be non-negative")
        _require(self.schedule_mode in SCHEDULE_MODES, "schedule_mode", f"expected one of {SCHEDULE_MODES}")
        _require(all(c >= 1 for c in self.checkpoints), "checkpoints", "iterations must be >= 1")
        _require(self.init_iters >= 0, "init_iters", "must be non-negative")
        _require(self.init_budget > 0, "init_budget", "must be positive")
        _require(self.duap_sign_mode in SIGN_MODES, "duap_sign_mode", f"expected one of {SIGN_MODES}")
        _require(self.duap_text_step in TEXT_STEP_MODES, "duap_text_step", f"expected one of {TEXT_STEP_MODES}")

    @property
    def text_delta_range(self) -> tuple[float, float]:
        return (self.text_delta_low, self.text_delta_high)

    def digest(self) -> bytes:
        return config_digest(dataclasses.asdict(self))


@dataclass(frozen=True)
class AugmentConfig:
    mode: str = "none"
    eta: float = 0.5
    beta1: float = 0.7
    beta2: float = 0.3
    crop_min_fraction: float = 0.5
    cutmix_min_side: int = 8
    cutmix_max_side: int = 24

    def __post_init__(self):
        _require(self.mode in AUGMENT_MODES, "augment", f"expected one of {AUGMENT_MODES}")
        _require(0 <= self.eta <= 1, "eta", "must lie in [0, 1]")
        _require(0 <= self.beta1 < 1, "beta1", "must lie in [0, 1)")
        _require(0 <= self.beta2 < 1, "beta2", "must lie in [0, 1)")
        _require(self.beta1 > self.beta2, "beta1", "must exceed beta2")
        _require(self.beta1 + self.beta2 <= 1 + 1e-12, "beta2", "beta1 + beta2 must not exceed 1")
        _require(0 < self.crop_min_fraction <= 1, "crop_min_fraction", "must lie in (0, 1]")
        _require(1 <= self.cutmix_min_side <= self.cutmix_max_side, "cutmix_min_side", "need 1 <= min <= max")


@dataclass(frozen=True)
class ProtocolConfig:
    """How prompts are split and scored; turned into an EvalProtocol by the loader."""

    eval_mode: str = "targeted"
    train_prompts: int = 8
    heldout_per_task: int = 8
    eval_repeats: int = 3
    prompts_file: str = ""

    def __post_init__(self):
        _require(self.eval_mode in EVAL_MODES, "eval_mode", f"expected one of {EVAL_MODES}")
        _require(self.train_prompts >= 1, "train_prompts", "must be >= 1")
        _require(self.heldout_per_task >= 1, "heldout_per_task", "must be >= 1")
        _require(self.eval_repeats >= 1, "eval_repeats", "must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    attack: AttackConfig = field(default_factory=AttackConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    method: str = "cropa"
    target_text: str = "unknown"
    target_image: str = ""
    model_seed: int = 42
    transfer_seed: int = 77
    images: str = "synth:4"
    image_seed: int = 1000
    test_images: str = "synth:8"
    test_image_seed: int = 5000

    def __post_init__(self):
        _require(self.method in METHODS, "method", f"expected one of {METHODS}")

    def to_flat(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for section, obj in _SECTIONS.items():
            source = self if obj is None else getattr(self, obj)
            for f in fields(source):
                if f.name in _SECTIONS.values() and obj is None:
                    continue
                out[_field_to_key(section, f.name)] = _jsonable(getattr(source, f.name))
        return out

    def digest(self) -> bytes:
        return config_digest(self.to_flat())


# section name -> attribute of RunConfig (None for the top level)
_SECTIONS = {"run": None, "attack": "attack", "augment": "augment", "protocol": "protocol"}
_CLASSES = {"run": RunConfig, "attack": AttackConfig, "augment": AugmentConfig, "protocol": ProtocolConfig}
_RENAMED = {("augment", "mode"): "augment"}


def _field_to_key(section: str, name: str) -> str:
    return _RENAMED.get((section, name), name)


def _jsonable(v):
    return list(v) if isinstance(v, tuple) else v


def config_digest(flat: Mapping[str, Any]) -> bytes:
    text = json.dumps({k: _jsonable(v) for k, v in flat.items()}, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).digest()


def _key_table() -> dict[str, tuple[str, dataclasses.Field]]:
    table = {}
    for section, cls in _CLASSES.items():
        for f in fields(cls):
            if section == "run" and f.name in ("attack", "augment", "protocol"):
                continue
            table[_field_to_key(section, f.name)] = (section, f)
    return table


KEYS = _key_table()


def _parse_number(key: str, text: str) -> Fraction:
    try:
        return Fraction(text.strip())
    except (ValueError, ZeroDivisionError):
        raise ConfigError(key, f"expected a number, got {text!r}") from None


def parse_value(key: str, raw: Any):
    """Convert ``raw`` (string or already-typed value) to the type of ``key``."""
    if key not in KEYS:
        raise ConfigError(key, "unknown key")
    _, f = KEYS[key]
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    if not isinstance(raw, str):
        if kind.startswith("tuple"):
            return tuple(int(x) for x in raw)
        if kind == "int" and (isinstance(raw, bool) or int(raw) != raw):
            raise ConfigError(key, f"expected an integer, got {raw!r}")
        return {"int": int, "float": float, "str": str}.get(kind, lambda x: x)(raw)
    text = raw.strip()
    if kind == "str":
        return text
    if kind == "int":
        n = _parse_number(key, text)
        if n.denominator != 1:
            raise ConfigError(key, f"expected an integer, got {text!r}")
        return int(n)
    if kind == "float":
        return float(_parse_number(key, text))
    if kind.startswith("tuple"):
        parts = [p for p in text.replace(" ", "").split(",") if p]
        vals = [_parse_number(key, p) for p in parts]
        if any(v.denominator != 1 for v in vals):
            raise ConfigError(key, f"expected integers, got {text!r}")
        return tuple(int(v) for v in vals)
    raise ConfigError(key, f"unsupported field type {kind}")


def parse_lines(text: str, origin: str = "<config>") -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{n}", f"expected key = value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(key, f"duplicate key at {origin}:{n}")
        out[key] = value
    return out


def build_config(values: Mapping[str, Any], strict_iterations: bool = True) -> RunConfig:
    """Assemble and validate a :class:`RunConfig` from flat values (missing keys take defaults)."""
    buckets: dict[str, dict[str, Any]] = {s: {} for s in _CLASSES}
    for key, raw in values.items():
        section, f = KEYS.get(key, (None, None))
        if section is None:
            raise ConfigError(key, "unknown key")
        buckets[section][f.name] = parse_value(key, raw)
    if strict_iterations and buckets["attack"].get("iterations", 1) < 1:
        raise ConfigError("iterations", "must be >= 1")
    return RunConfig(
        attack=AttackConfig(**buckets["attack"]),
        augment=AugmentConfig(**buckets["augment"]),
        protocol=ProtocolConfig(**buckets["protocol"]),
        **buckets["run"],
    )


def split_override(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise ConfigError(text, "override must look like key=value")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()
