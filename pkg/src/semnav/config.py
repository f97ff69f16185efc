"""Run configuration: every knob of a gen/train/eval/ablate run in one serializable object."""
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .agent import ModelConfig
from .errors import ConfigurationError

POLICIES = ("greedy", "sample", "random", "oracle")


@dataclass
class DataConfig:
    train_worlds: int = 50
    unseen_worlds: int = 10
    min_nodes: int = 12
    max_nodes: int = 20
    avg_degree: float = 3.0
    train_tasks_per_world: int = 20
    val_seen_tasks_per_world: int = 2
    val_unseen_tasks_per_world: int = 10
    min_hops: int = 2
    max_hops: int = 4

    def validate(self):
        if self.train_worlds < 1 or self.unseen_worlds < 0:
            raise ConfigurationError("need at least one training world")
        if not 2 <= self.min_nodes <= self.max_nodes:
            raise ConfigurationError(f"node range [{self.min_nodes}, {self.max_nodes}] is invalid")
        if min(self.train_tasks_per_world, self.val_seen_tasks_per_world,
               self.val_unseen_tasks_per_world) < 0:
            raise ConfigurationError("task counts must be non-negative")


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 4
    lr: float = 1e-3
    clip: float = 5.0
    checkpoint_every: int = 500

    def validate(self):
        if self.steps < 0 or self.batch_size < 1 or self.checkpoint_every < 1:
            raise ConfigurationError("steps >= 0, batch_size >= 1 and checkpoint_every >= 1 required")
        if self.lr <= 0 or self.clip <= 0:
            raise ConfigurationError("lr and clip must be positive")


@dataclass
class EvalConfig:
    threshold: float = 1.0
    policy: str = "greedy"
    workers: int = 1
    limit: int = 0  # 0 evaluates the whole split

    def validate(self):
        if self.policy not in POLICIES:
            raise ConfigurationError(f"policy must be one of {POLICIES}, got {self.policy!r}")
        if self.threshold < 0 or self.workers < 1 or self.limit < 0:
            raise ConfigurationError("threshold >= 0, workers >= 1 and limit >= 0 required")


SECTIONS = {"model": ModelConfig, "data": DataConfig, "train": TrainConfig, "eval": EvalConfig}


@dataclass
class RunConfig:
    seed: int = 0
    lexicon: str = None  # path; None selects the bundled lexicon
    out: str = "runs/default"
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self):
        ModelConfig.__post_init__(self.model)
        for name in ("data", "train", "eval"):
            getattr(self, name).validate()
        return self

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, obj):
        unknown = set(obj) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        kw = {k: v for k, v in obj.items() if k not in SECTIONS}
        for name, kind in SECTIONS.items():
            section = obj.get(name, {})
            bad = set(section) - {f.name for f in fields(kind)}
            if bad:
                raise ConfigurationError(f"unknown keys in [{name}]: {sorted(bad)}")
            kw[name] = kind(**section)
        return cls(**kw).validate()

    def replace(self, **overrides):
        """Copy with dotted-key overrides such as ``{"train.lr": 0.01}``."""
        obj = self.to_json()
        for key, value in overrides.items():
            set_dotted(obj, key, value)
        return RunConfig.from_json(obj)


def set_dotted(obj, key, value):
    *path, last = key.split(".")
    node = obj
    for part in path:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigurationError(f"unknown config key {key!r}")
        node = node[part]
    if last not in node:
        raise ConfigurationError(f"unknown config key {key!r}")
    node[last] = coerce(value, node[last]) if isinstance(value, str) else value


def coerce(text, current):
    """Parse a command-line string to the type of the value it replaces."""
    if isinstance(current, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"expected a boolean, got {text!r}")
    try:
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
    except ValueError:
        raise ConfigurationError(f"cannot parse {text!r} as {type(current).__name__}") from None
    if current is None and text.lower() in ("none", "null"):
        return None
    return text


def load_config(path):
    try:
        obj = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from None
    return RunConfig.from_json(obj)
