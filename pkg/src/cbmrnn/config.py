"""Run configuration: a flat, sectioned key-value file.

Every field has a default, every run can print its full configuration, and
``load(dump(cfg)) == cfg`` holds exactly (floats are written with ``repr``).
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields

from .cell import MERGE_KINDS, StackConfig, TdSchedule
from .model import FLATTEN, MEAN
from .scheme import CoherenceConfig

TASKS = ("moving-shapes", "catdog")


class ConfigError(ValueError):
    """Malformed configuration; the message names the line and field."""


def _meta(section: str, doc: str = ""):
    return {"section": section, "doc": doc}


@dataclass
class RunConfig:
    # run
    task: str = field(default="catdog", metadata=_meta("run", "moving-shapes | catdog"))
    seed: int = field(default=0, metadata=_meta("run"))
    epochs: int = field(default=30, metadata=_meta("run"))
    batch_size: int = field(default=16, metadata=_meta("run", "sequences sharing one clip layout"))
    train_size: int = field(default=256, metadata=_meta("run"))
    test_size: int = field(default=128, metadata=_meta("run"))
    eval_every: int = field(default=1, metadata=_meta("run", "0 evaluates only after the last epoch"))
    # data
    seq_len: int = field(default=60, metadata=_meta("data"))
    height: int = field(default=5, metadata=_meta("data"))
    width: int = field(default=56, metadata=_meta("data"))
    max_gap: int = field(default=50, metadata=_meta("data", "catdog only"))
    speed: int = field(default=1, metadata=_meta("data", "moving-shapes only"))
    noise: float = field(default=0.1, metadata=_meta("data"))
    # model
    num_layers: int = field(default=3, metadata=_meta("model"))
    channels: int = field(default=3, metadata=_meta("model"))
    merge_kind: str = field(default="production", metadata=_meta("model", "production | addition"))
    use_shortcuts: bool = field(default=False, metadata=_meta("model"))
    constant_bridge: bool = field(default=False, metadata=_meta("model"))
    pool: str = field(default=FLATTEN, metadata=_meta("model", "flatten | mean"))
    target_scale: float = field(default=10.0, metadata=_meta("model", "regression targets are divided by this"))
    # coherence
    lam: float = field(default=0.8, metadata=_meta("coherence"))
    overlap_rate: float = field(default=0.25, metadata=_meta("coherence"))
    clip_len_min: int = field(default=8, metadata=_meta("coherence"))
    clip_len_max: int = field(default=10, metadata=_meta("coherence"))
    # td
    td_schedule: str = field(default="0:1.0,2:0.8,4:0.5",
                             metadata=_meta("td", "epoch:rate pairs, rates non-increasing"))
    # optim
    lr: float = field(default=1e-4, metadata=_meta("optim"))
    weight_decay: float = field(default=1e-5, metadata=_meta("optim"))
    lr_factor: float = field(default=0.5, metadata=_meta("optim"))
    lr_patience: int = field(default=3, metadata=_meta("optim"))
    # gradcheck
    gc_instances: int = field(default=100, metadata=_meta("gradcheck", "random instances per primitive"))
    gc_td_rate: float = field(default=0.0, metadata=_meta("gradcheck"))
    gc_gate_seed: int = field(default=0, metadata=_meta("gradcheck"))

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"task: expected one of {TASKS}, got {self.task!r}")
        if self.merge_kind not in MERGE_KINDS:
            raise ConfigError(f"merge_kind: expected one of {MERGE_KINDS}, got {self.merge_kind!r}")
        if self.pool not in (FLATTEN, MEAN):
            raise ConfigError(f"pool: expected flatten or mean, got {self.pool!r}")
        for name in ("epochs", "batch_size", "train_size", "test_size", "seq_len", "height",
                     "width", "num_layers", "channels", "gc_instances", "lr_patience"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be >= 1, got {getattr(self, name)}")
        if self.eval_every < 0:
            raise ConfigError("eval_every: must be >= 0")
        if self.lr <= 0 or self.weight_decay < 0 or self.target_scale <= 0:
            raise ConfigError("lr and target_scale must be positive, weight_decay non-negative")
        if self.noise < 0:
            raise ConfigError("noise: must be >= 0")
        if not 0 <= self.gc_td_rate <= 1:
            raise ConfigError("gc_td_rate: must be in [0, 1]")
        if self.task == "catdog" and not 0 <= self.max_gap < self.seq_len:
            raise ConfigError("max_gap: must satisfy 0 <= max_gap < seq_len")
        if self.task == "moving-shapes" and self.speed == 0:
            raise ConfigError("speed: must be non-zero")
        if self.task == "moving-shapes" and self.height != self.width:
            raise ConfigError("height, width: moving-shapes frames are square")
        try:
            self.stack_config()
            self.coherence_config()
            self.td()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def stack_config(self) -> StackConfig:
        return StackConfig(
            num_layers=self.num_layers, channels=self.channels, in_channels=1,
            merge_kind=self.merge_kind, use_shortcuts=self.use_shortcuts,
            constant_bridge=self.constant_bridge,
        )

    def coherence_config(self) -> CoherenceConfig:
        return CoherenceConfig(self.lam, self.overlap_rate, self.clip_len_min, self.clip_len_max)

    def td(self) -> TdSchedule:
        return TdSchedule(parse_schedule(self.td_schedule))

    def image_shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def parse_schedule(text: str) -> list[tuple[int, float]]:
    out = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        epoch, sep, rate = item.partition(":")
        if not sep:
            raise ValueError(f"TD schedule item {item!r} is not epoch:rate")
        out.append((int(epoch), float(rate)))
    return out


def format_schedule(schedule: TdSchedule) -> str:
    return ",".join(f"{e}:{r!r}" for e, r in schedule.milestones)


_FIELDS = {f.name: f for f in fields(RunConfig)}
SECTIONS = list(dict.fromkeys(f.metadata["section"] for f in fields(RunConfig)))


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(name: str, text: str):
    kind = _FIELDS[name].type
    text = text.strip()
    if kind == "bool":
        low = text.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    return text


def dump(cfg: RunConfig) -> str:
    lines = []
    for section in SECTIONS:
        if lines:
            lines.append("")
        lines.append(f"[{section}]")
        for f in fields(RunConfig):
            if f.metadata["section"] != section:
                continue
            if f.metadata["doc"]:
                lines.append(f"# {f.metadata['doc']}")
            lines.append(f"{f.name} = {_format(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def _line_of(text: str, section: str, key: str) -> int | None:
    current = None
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
        elif current == section and line.split("=", 1)[0].strip() == key:
            return n
    return None


def loads(text: str, base: RunConfig | None = None, source: str = "<config>") -> RunConfig:
    """Parse a config file body; unspecified keys keep ``base`` (or default) values."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=None)
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    values = dataclasses.asdict(base) if base is not None else {}
    for section in parser.sections():
        if section not in SECTIONS:
            line = next((n for n, raw in enumerate(text.splitlines(), start=1)
                         if raw.strip() == f"[{section}]"), None)
            raise ConfigError(f"{source}:{line}: unknown section [{section}] (known: {', '.join(SECTIONS)})")
        for key, raw in parser.items(section):
            line = _line_of(text, section, key)
            where = f"{source}:{line}" if line else source
            if key not in _FIELDS:
                raise ConfigError(f"{where}: unknown key {key!r} in [{section}]")
            if _FIELDS[key].metadata["section"] != section:
                raise ConfigError(
                    f"{where}: key {key!r} belongs in [{_FIELDS[key].metadata['section']}], not [{section}]"
                )
            try:
                values[key] = _coerce(key, raw)
            except ValueError as exc:
                raise ConfigError(f"{where}: field {key!r}: {exc}") from None
    try:
        return RunConfig(**values)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load(path, base: RunConfig | None = None) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read(), base, source=str(path))


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``key=value`` (or ``section.key=value``) pairs on top of ``cfg``."""
    values = dataclasses.asdict(cfg)
    for item in overrides:
        key, sep, raw = item.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"--set {item!r}: expected key=value")
        if "." in key:
            section, _, key = key.partition(".")
            if key in _FIELDS and _FIELDS[key].metadata["section"] != section:
                raise ConfigError(f"--set {item!r}: {key!r} is not in section [{section}]")
        if key not in _FIELDS:
            raise ConfigError(f"--set {item!r}: unknown key {key!r}")
        try:
            values[key] = _coerce(key, raw)
        except ValueError as exc:
            raise ConfigError(f"--set {item!r}: {exc}") from None
    return RunConfig(**values)
