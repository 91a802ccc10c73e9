"""Run configuration: ``key = value`` text files plus command-line overrides.

Example::

    # tiny x2 run
    variant = carn
    channels = 32
    scales = 2
    dataset = data/train
    total_steps = 2000

Keys mirror ``NetworkSpec`` and ``TrainConfig`` fields plus a few I/O keys.
Unknown keys are rejected; overrides win over file values.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .arch import NetworkSpec
from .train import TrainConfig


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_tuple(text: str) -> tuple:
    return tuple(int(p) for p in text.replace(",", " ").split())


def _float_tuple(text: str) -> tuple:
    return tuple(float(p) for p in text.replace(",", " ").split())


SPEC_KEYS = {
    "variant": str,
    "blocks": int,
    "units_per_block": int,
    "channels": int,
    "group_size": int,
    "recursive": _bool,
    "efficient": _bool,
    "scales": _int_tuple,
    "local_cascading": _bool,
    "global_cascading": _bool,
}

TRAIN_KEYS = {
    "patch_size_lr": int,
    "batch_size": int,
    "lr0": float,
    "halve_every": int,
    "total_steps": int,
    "betas": _float_tuple,
    "epsilon": float,
    "seed": int,
    "augment": _bool,
    "checkpoint_every": int,
}

IO_KEYS = {
    "dataset": str,
    "checkpoint": str,
    "log": str,
}

SCHEMA = {**SPEC_KEYS, **TRAIN_KEYS, **IO_KEYS}


def parse_lines(text: str, source: str = "<config>") -> dict:
    """Raw ``{key: value string}`` from ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _convert(raw: dict, source: str) -> dict:
    values = {}
    for key, text in raw.items():
        if key not in SCHEMA:
            raise ConfigError(f"{source}: unknown key {key!r}")
        try:
            values[key] = SCHEMA[key](text)
        except ValueError as e:
            raise ConfigError(f"{source}: bad value for {key!r}: {e}") from None
    return values


@dataclass(frozen=True)
class RunConfig:
    """Validated settings for one run.  ``values`` holds only keys that were given."""

    values: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path=None, overrides=()) -> "RunConfig":
        """Read ``path`` (optional) then apply ``key=value`` override strings."""
        values = {}
        if path is not None:
            try:
                text = Path(path).read_text(encoding="utf-8")
            except OSError as e:
                raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
            values.update(_convert(parse_lines(text, str(path)), str(path)))
        raw_overrides = {}
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override must be key=value, got {item!r}")
            key, value = item.split("=", 1)
            raw_overrides[key.strip()] = value.strip()
        values.update(_convert(raw_overrides, "--set"))
        cfg = cls(values)
        cfg.network_spec()
        cfg.train_config()
        return cfg

    def get(self, key: str, default=None):
        return self.values.get(key, default)

    def network_spec(self) -> NetworkSpec:
        given = {k: v for k, v in self.values.items() if k in SPEC_KEYS and k != "variant"}
        try:
            return NetworkSpec.preset(self.values.get("variant", "carn"), **given)
        except (ValueError, TypeError) as e:
            raise ConfigError(f"invalid network settings: {e}") from None

    def train_config(self) -> TrainConfig:
        given = {k: v for k, v in self.values.items() if k in TRAIN_KEYS}
        if "scales" in self.values:
            given["scales"] = self.values["scales"]
        try:
            return TrainConfig(**given)
        except (ValueError, TypeError) as e:
            raise ConfigError(f"invalid training settings: {e}") from None

    def to_text(self) -> str:
        """Round-trippable ``key = value`` text in schema order."""
        lines = []
        for key in SCHEMA:
            if key in self.values:
                v = self.values[key]
                if isinstance(v, tuple):
                    v = ",".join(str(p) for p in v)
                elif isinstance(v, bool):
                    v = "true" if v else "false"
                lines.append(f"{key} = {v}")
        return "\n".join(lines) + "\n"

