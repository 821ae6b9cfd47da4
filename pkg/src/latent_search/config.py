"""``key=value`` engine configuration files.

Blank lines and ``#`` comments are ignored.  Recognised keys::

    w1 w2 w3 w4 k l
    lssr.iterations lssr.weight lssr.neighbors lssr.distance_sigma
    lssr.angle_sigma lssr.max_pairs lssr.pool_factor
    threads gallery manifest seed

Absent keys take their defaults; unknown or repeated keys are errors.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .engine import StageConfig
from .io import atomic_write_text
from .matcher import LssrParams


class ConfigError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None, path=None):
        self.line = line
        where = f"{path or '<config>'}:{line}: " if line is not None else ""
        super().__init__(where + message)


def _opt_int(text: str) -> Optional[int]:
    return None if text.lower() in ("", "none") else int(text)


def _opt_str(text: str) -> Optional[str]:
    return None if text == "" else text


_STAGE_KEYS = {"w1": float, "w2": float, "w3": float, "w4": float, "k": int, "l": int}
_LSSR_KEYS = {
    "iterations": int,
    "weight": float,
    "neighbors": int,
    "distance_sigma": float,
    "angle_sigma": float,
    "max_pairs": _opt_int,
    "pool_factor": int,
}
_TOP_KEYS = {"threads": _opt_int, "gallery": _opt_str, "manifest": _opt_str, "seed": int}


@dataclass(frozen=True)
class EngineConfig:
    stage: StageConfig = field(default_factory=StageConfig)
    lssr: LssrParams = field(default_factory=LssrParams)
    threads: Optional[int] = None
    gallery: Optional[str] = None
    manifest: Optional[str] = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.threads is not None and self.threads < 1:
            raise ConfigError("threads must be >= 1")

    def with_overrides(self, **kw) -> "EngineConfig":
        """Copy with stage keys (``k``, ``l``, weights) and top-level keys replaced; ``None`` means keep."""
        stage_kw = {k: v for k, v in kw.items() if k in _STAGE_KEYS and v is not None}
        top_kw = {k: v for k, v in kw.items() if k in _TOP_KEYS and v is not None}
        unknown = set(kw) - set(_STAGE_KEYS) - set(_TOP_KEYS)
        if unknown:
            raise ConfigError(f"unknown override(s): {', '.join(sorted(unknown))}")
        try:
            stage = dataclasses.replace(self.stage, **stage_kw)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        return dataclasses.replace(self, stage=stage, **top_kw)

    def dump(self) -> str:
        lines = [f"{k}={getattr(self.stage, k)!r}" for k in _STAGE_KEYS]
        lines += [f"lssr.{k}={_show(getattr(self.lssr, k))}" for k in _LSSR_KEYS]
        for k, conv in _TOP_KEYS.items():
            v = getattr(self, k)
            # unset paths are written empty so that a path literally named "none" survives a round trip
            lines.append(f"{k}={'' if conv is _opt_str and v is None else _show(v)}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        atomic_write_text(Path(path), self.dump())


def _show(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_config(text: str, path=None) -> EngineConfig:
    stage, lssr, top = {}, {}, {}
    seen = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected key=value, got {raw.strip()!r}", lineno, path)
        key, value = (s.strip() for s in line.split("=", 1))
        if key in seen:
            raise ConfigError(f"key {key!r} repeated (first on line {seen[key]})", lineno, path)
        seen[key] = lineno
        if key in _STAGE_KEYS:
            table, conv, name = stage, _STAGE_KEYS[key], key
        elif key.startswith("lssr.") and key[5:] in _LSSR_KEYS:
            table, conv, name = lssr, _LSSR_KEYS[key[5:]], key[5:]
        elif key in _TOP_KEYS:
            table, conv, name = top, _TOP_KEYS[key], key
        else:
            raise ConfigError(f"unknown key {key!r}", lineno, path)
        try:
            table[name] = conv(value)
        except ValueError:
            raise ConfigError(f"bad value {value!r} for {key}", lineno, path) from None
    try:
        return EngineConfig(stage=StageConfig(**stage), lssr=LssrParams(**lssr), **top)
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(f"invalid configuration: {e}", path=path) from None


def load_config(path) -> EngineConfig:
    p = Path(path)
    return parse_config(p.read_text(encoding="utf-8"), path=p)
