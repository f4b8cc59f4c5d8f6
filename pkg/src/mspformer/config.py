# config.py

"""INI run configuration: [model], [train], [snow] and [io] sections."""

import configparser
import dataclasses
import io
import logging
from dataclasses import dataclass, field

from .errors import ConfigError
from .model import ModelConfig
from .optimizer import OptimState, Schedule
from .snowsynth import SnowParams

logger = logging.getLogger(__name__)

IMAGE_FORMATS = ("ppm", "png")


@dataclass
class TrainConfig:
    epochs: int = 100
    batch: int = 2
    crop: int = 64
    seed: int = 0
    lr0: float = 0.0007
    hold_epochs: int = 250
    total_epochs: int = 600
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 5e-4
    checkpoint_every: int = 1
    clip_grad: float = 0.0
    max_steps: int = 0
    charbonnier_eps: float = 1e-3

    def validate(self):
        if self.epochs < 0 or self.epochs > self.total_epochs:
            raise ConfigError(f"train.epochs must lie in [0, total_epochs], got {self.epochs}")
        if self.batch < 1:
            raise ConfigError("train.batch must be >= 1")
        if self.crop < 32 or self.crop % 32:
            raise ConfigError(f"train.crop must be a positive multiple of 32, got {self.crop}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("train.beta1 and train.beta2 must lie in [0, 1)")
        if not self.eps > 0 or not self.charbonnier_eps > 0:
            raise ConfigError("train.eps and train.charbonnier_eps must be positive")
        if self.weight_decay < 0 or self.clip_grad < 0:
            raise ConfigError("train.weight_decay and train.clip_grad must be >= 0")
        if self.checkpoint_every < 1 or self.max_steps < 0:
            raise ConfigError("train.checkpoint_every must be >= 1 and train.max_steps >= 0")
        self.schedule()
        return self

    def schedule(self):
        return Schedule(self.lr0, self.hold_epochs, self.total_epochs)

    def optim_state(self):
        return OptimState(self.lr0, self.beta1, self.beta2, self.eps, self.weight_decay)


@dataclass
class IOConfig:
    image_format: str = "ppm"
    plot: bool = False
    threads: int = 0

    def validate(self):
        if self.image_format not in IMAGE_FORMATS:
            raise ConfigError(f"io.image_format must be one of {', '.join(IMAGE_FORMATS)}")
        if self.threads < 0:
            raise ConfigError("io.threads must be >= 0")
        return self


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    snow: SnowParams = field(default_factory=SnowParams)
    io: IOConfig = field(default_factory=IOConfig)

    def validate(self):
        for section in SECTIONS:
            getattr(self, section).validate()
        return self

    def to_ini(self):
        return to_ini(self)

    def set(self, dotted, text):
        """Overrides one value addressed as ``section.key``."""
        section, _, key = dotted.partition(".")
        if section not in SECTIONS or not key:
            raise ConfigError(f"expected section.key, got '{dotted}'")
        record = getattr(self, section)
        if key not in _field_names(record):
            raise ConfigError(f"unknown key '{key}' in section [{section}]")
        setattr(record, key, parse_value(text, getattr(record, key), f"{section}.{key}"))
        record.validate()


SECTIONS = ("model", "train", "snow", "io")


def _field_names(record):
    return [f.name for f in dataclasses.fields(record)]


# --- Values ---

def format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ", ".join(format_value(v) for v in value)
    return str(value)


def parse_value(text, template, where=""):
    """Parses ``text`` into the type of ``template`` (the field's default value)."""
    text = text.strip()
    try:
        if isinstance(template, bool):
            lowered = text.lower()
            if lowered not in ("true", "false"):
                raise ValueError(text)
            return lowered == "true"
        if isinstance(template, int):
            return int(text)
        if isinstance(template, float):
            return float(text)
        if isinstance(template, list):
            item = template[0] if template else 0
            return [parse_value(part, item, where) for part in text.split(",") if part.strip()]
        if isinstance(template, tuple):
            parts = [float(part) for part in text.split(",")]
            if len(parts) != len(template):
                raise ValueError(text)
            return tuple(parts)
        return text
    except ValueError:
        raise ConfigError(f"invalid value for {where}: '{text}'") from None


# --- INI ---

def from_ini(text):
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from None

    cfg = RunConfig()
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        record = getattr(cfg, section)
        names = _field_names(record)
        for key, text_value in parser.items(section):
            if key not in names:
                raise ConfigError(f"unknown key '{key}' in section [{section}]")
            setattr(record, key, parse_value(text_value, getattr(record, key), f"{section}.{key}"))
    return cfg.validate()


def load_config(path=None):
    """Reads an INI file; no path gives the defaults."""
    if path is None:
        return RunConfig().validate()
    with open(path, encoding="utf-8") as f:
        cfg = from_ini(f.read())
    logger.info("config=%s", path)
    return cfg


def to_ini(cfg: RunConfig):
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section in SECTIONS:
        record = getattr(cfg, section)
        parser[section] = {f.name: format_value(getattr(record, f.name)) for f in dataclasses.fields(record)}
    buffer = io.StringIO()
    parser.write(buffer)
    return buffer.getvalue()
