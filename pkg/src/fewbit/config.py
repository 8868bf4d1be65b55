"""Plain-text key-value run configuration with dotted sections.

Accepted syntax, one entry per line::

    # comment
    seed = 7
    system.N = 32
    [train]
    epochs = 300        # same as train.epochs

Keys inside a ``[section]`` block are prefixed with the section name
unless they already contain a dot.  Every error names the file and line.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .core import SystemConfig
from .training import TrainConfig

SCHEMA = {
    "seed": int,
    "system.N": int,
    "system.K": int,
    "system.Tt": int,
    "system.bits": int,
    "system.snr_db": float,
    "system.constellation": str,
    "train.epochs": int,
    "train.batch": int,
    "train.lr0": float,
    "train.decay": float,
    "train.c1": float,
    "train.c2": float,
    "train.trainable_pilot": bool,
    "net.kind": str,
    "net.layers": int,
    "sweep.snrs": "floats",
    "sweep.trials": int,
    "sweep.methods": "strs",
    "sweep.csi": str,
    "sweep.chunk": int,
    "run.command": str,
    "run.config": str,
    "run.output_dir": str,
    "run.checkpoints": "strs",
}

TRAIN_KEYS = (
    "seed", "system.N", "system.K", "system.Tt", "system.bits", "system.snr_db", "system.constellation",
    "train.epochs", "train.batch", "train.lr0", "train.decay", "train.c1", "train.c2", "train.trainable_pilot",
    "net.kind", "net.layers",
)
SWEEP_KEYS = ("seed", "system.N", "system.K", "system.Tt", "system.bits", "system.constellation")

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)
    lines: dict = field(default_factory=dict)  # key -> source line, for messages
    source: str = "<config>"

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        return self.values.get(key, default)

    def set(self, key, value) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"{self.source}: unknown key {key!r}")
        self.values[key] = value

    def require(self, keys) -> None:
        missing = [k for k in keys if k not in self.values]
        if missing:
            raise ConfigError(f"{self.source}: missing required key {', '.join(missing)}")

    def where(self, key) -> str:
        line = self.lines.get(key)
        return f"{self.source}:{line}" if line else self.source

    def system(self, snr_db: float | None = None) -> SystemConfig:
        v = self.values
        snr = v.get("system.snr_db", 0.0) if snr_db is None else snr_db
        try:
            return SystemConfig(N=v["system.N"], K=v["system.K"], Tt=v["system.Tt"], bits=v["system.bits"],
                                snr_db=snr, constellation=v["system.constellation"], seed=v["seed"])
        except ValueError as e:
            raise ConfigError(f"{self.where('system.N')}: {e}") from None

    def train(self) -> TrainConfig:
        v = self.values
        try:
            return TrainConfig(lr0=v["train.lr0"], decay=v["train.decay"], batch=v["train.batch"],
                               epochs=v["train.epochs"], c1=v["train.c1"], c2=v["train.c2"],
                               trainable_pilot=v["train.trainable_pilot"])
        except ValueError as e:
            raise ConfigError(f"{self.where('train.epochs')}: {e}") from None


def _convert(kind, raw: str):
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    if kind is bool:
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if kind == "floats":
        return [float(s) for s in raw.replace(",", " ").split()]
    if kind == "strs":
        return [s for s in raw.replace(",", " ").split()]
    return raw


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    cfg = RunConfig(source=source)
    section = ""
    for n, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if body.startswith("["):
            if not body.endswith("]") or not body[1:-1].strip():
                raise ConfigError(f"{source}:{n}: malformed section header {body!r}")
            section = body[1:-1].strip()
            continue
        key, sep, raw = body.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {body!r}")
        if section and "." not in key:
            key = f"{section}.{key}"
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        if key in cfg.values:
            raise ConfigError(f"{source}:{n}: duplicate key {key!r} (first set on line {cfg.lines[key]})")
        try:
            cfg.values[key] = _convert(SCHEMA[key], raw)
        except ValueError as e:
            raise ConfigError(f"{source}:{n}: bad value for {key}: {e}") from None
        cfg.lines[key] = n
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"{path}: cannot read config: {e.strerror}") from None
    return parse_config(text, str(path))


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ", ".join(_format(v) for v in value)
    return str(value)


def format_config(values: dict) -> str:
    """Dotted-key text that :func:`parse_config` reads back to the same values."""
    return "".join(f"{k} = {_format(values[k])}\n" for k in sorted(values))


def write_manifest(path, cfg: RunConfig, command: str, output_dir, checkpoints=()) -> None:
    """Resolved config plus run details; valid input to :func:`parse_config`."""
    values = {k: v for k, v in cfg.values.items() if not k.startswith("run.")}
    values["run.command"] = command
    values["run.config"] = cfg.source
    values["run.output_dir"] = str(output_dir)
    if checkpoints:
        values["run.checkpoints"] = [str(c) for c in checkpoints]
    Path(path).write_text("# fewbit run manifest\n" + format_config(values), encoding="utf-8", newline="\n")
