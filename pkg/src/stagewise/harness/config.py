"""Experiment configuration: nested blocks loaded from YAML, unknown keys rejected."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from ..errors import ConfigError
from ..markov import TaskSpec, build_task
from ..training import TrainConfig


@dataclass
class TaskBlock:
    d: int = 20
    w: int = 6
    T: int = 20
    h: int = 3
    m: float = 1.7
    b0: float = 10.0
    layout: str = "minimal"
    intervals: list | None = None

    def intervals_for(self):
        if self.intervals is not None:
            return [list(g) for g in self.intervals]
        if self.layout == "minimal":
            if self.w != 2 * self.h:
                raise ConfigError("the minimal layout uses two lags per group (w = 2h)")
            return [[2 * k, 2 * k + 1] for k in range(self.h)]
        if self.layout == "equal":
            return None
        raise ConfigError(f"unknown interval layout {self.layout!r}")


@dataclass
class ModelBlock:
    init_scale: float = 1.0
    context_limit: int | None = None


@dataclass
class DataBlock:
    train: int = 9000
    test: int = 512
    online: bool = False


@dataclass
class ProbeBlock:
    stride: int = 10
    batch: int = 512
    threshold: float = 0.1
    restricted_contexts: list = field(default_factory=list)
    restricted_predictors: list | None = None


@dataclass
class AblationBlock:
    mode: str = "sweep"
    init_scale: list = field(default_factory=list)
    m: list = field(default_factory=list)
    train: list = field(default_factory=list)
    optimizer: list = field(default_factory=list)
    online: list = field(default_factory=list)

    AXES = ("init_scale", "m", "train", "optimizer", "online")


@dataclass
class FlowBlock:
    d: int = 50
    T: int = 40
    h: int = 3
    m: float = 1.7
    b0: float = 1.0
    noise: float = 1e-6
    t_end: float = 3000.0
    dt: float = 0.05
    log_every: int = 20
    stage_fraction: float = 0.1


@dataclass
class VerifyBlock:
    checks: list = field(default_factory=lambda: ["competitive_fixed_point", "bounded_deviation", "boundedcoop",
                                                  "cooperative_convergence", "higher_order", "early_alignment"])
    d: int = 10
    T: int = 10
    h: int = 3
    m: float = 1.7
    b0: float = 1.0
    eps: float = 1e-4
    breakaway_eps: float = 1e-2
    seeds: list = field(default_factory=lambda: [0])
    tolerances: dict = field(default_factory=dict)


@dataclass
class ExperimentConfig:
    seed: int = 0
    task: TaskBlock = field(default_factory=TaskBlock)
    model: ModelBlock = field(default_factory=ModelBlock)
    optim: TrainConfig = field(default_factory=lambda: TrainConfig(batch_size=512))
    data: DataBlock = field(default_factory=DataBlock)
    probes: ProbeBlock = field(default_factory=ProbeBlock)
    ablation: AblationBlock = field(default_factory=AblationBlock)
    flow: FlowBlock = field(default_factory=FlowBlock)
    verify: VerifyBlock = field(default_factory=VerifyBlock)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        t = self.task
        length = t.T + t.w
        if self.probes.stride < 1 or self.probes.batch < 1:
            raise ConfigError("probe stride and probe batch must be at least 1")
        if not 0 < self.probes.threshold < 1:
            raise ConfigError("stage threshold must lie in (0, 1)")
        for c in self.probes.restricted_contexts:
            if not 1 <= int(c) <= length:
                raise ConfigError(f"context limit {c} outside [1, {length}]")
        if self.model.context_limit is not None and not 1 <= self.model.context_limit <= length:
            raise ConfigError(f"context limit {self.model.context_limit} outside [1, {length}]")
        for i in self.probes.restricted_predictors or []:
            if not 1 <= int(i) <= t.h:
                raise ConfigError(f"restricted predictor index {i} outside [1, {t.h}]")
        if self.data.train < 1 or self.data.test < 1:
            raise ConfigError("train and test counts must be positive")
        if self.ablation.mode not in ("sweep", "product"):
            raise ConfigError(f"unknown ablation mode {self.ablation.mode!r}")
        t.intervals_for()

    def predictor_indices(self) -> list[int]:
        return [int(i) for i in (self.probes.restricted_predictors or range(1, self.task.h + 1))]

    def build_task(self) -> TaskSpec:
        t = self.task
        return build_task(t.d, t.w, t.T, t.h, t.m, t.b0, self.seed, intervals=t.intervals_for())

    def train_config(self) -> TrainConfig:
        return dataclasses.replace(self.optim, init_scale=self.model.init_scale, online=self.data.online,
                                   eval_every=self.probes.stride)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["optim"] = self.optim.to_dict()
        return out

    def replace(self, **changes) -> "ExperimentConfig":
        """Copy with dotted-path overrides, e.g. ``replace(**{"task.m": 1.0})``."""
        data = self.to_dict()
        for path, value in changes.items():
            node = data
            keys = path.split(".")
            for key in keys[:-1]:
                node = node[key]
            if keys[-1] not in node:
                raise ConfigError(f"unknown configuration key {path!r}")
            node[keys[-1]] = value
        return config_from_dict(data)


_BLOCKS = {"task": TaskBlock, "model": ModelBlock, "optim": TrainConfig, "data": DataBlock,
           "probes": ProbeBlock, "ablation": AblationBlock, "flow": FlowBlock, "verify": VerifyBlock}


def _build_block(cls, values, name: str):
    if values is None:
        values = {}
    if not isinstance(values, dict):
        raise ConfigError(f"block {name!r} must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {unknown}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"bad values in {name!r}: {exc}") from exc


def config_from_dict(data: dict | None) -> ExperimentConfig:
    data = dict(data or {})
    unknown = sorted(set(data) - set(_BLOCKS) - {"seed"})
    if unknown:
        raise ConfigError(f"unknown top-level keys: {unknown}")
    blocks = {name: _build_block(cls, data.get(name), name) for name, cls in _BLOCKS.items() if name in data}
    if "optim" not in data:
        blocks["optim"] = TrainConfig(batch_size=512)
    return ExperimentConfig(seed=int(data.get("seed", 0)), **blocks)


def load_config(path) -> ExperimentConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError("the configuration document must be a mapping")
    return config_from_dict(data)
