"""Run configuration: dataclasses for every section plus YAML load/save.

A config file is a single YAML mapping with optional sections ``scenario``,
``energy``, ``policy``, ``train``, ``bench`` and ``baselines``.  Every field
has a default, so an empty file yields the desk-scale training setting.
Errors name the offending field and, when the YAML source is available, the
line it came from.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    """Invalid configuration value or file."""

    def __init__(self, message: str, field_path: str | None = None, line: int | None = None):
        self.field_path = field_path
        self.line = line
        where = ""
        if field_path:
            where += f"{field_path}: "
        if line is not None:
            where = f"line {line}: " + where
        super().__init__(where + message)


@dataclass(frozen=True)
class ObstacleSpec:
    x: float
    y: float
    radius: float


@dataclass(frozen=True)
class ScenarioConfig:
    arena_side: float = 15.0
    n_robots: int = 10
    n_obstacles: int = 10
    # sample the obstacle count uniformly from 0..n_obstacles per episode
    random_obstacle_count: bool = False
    obstacles: tuple[ObstacleSpec, ...] | None = None
    obstacle_radius_min: float = 0.2
    obstacle_radius_max: float = 0.5
    d_r: float = 1.0
    d_in: float = 1.3
    d_or: float = 1.0
    d_o_max: float = 2.0
    n_sectors: int = 32
    dt: float = 0.1
    t_c: float = 5.0
    v_c_max: float = 0.4
    v_max: float = 1.0
    a_max: float = 0.5
    robot_radius: float = 0.1
    episode_steps: int = 500
    seed: int = 0

    def validate(self) -> None:
        if not self.d_r <= self.d_in < math.sqrt(2.0) * self.d_r:
            raise ConfigError(
                f"need d_r <= d_in < sqrt(2)*d_r, got d_r={self.d_r}, d_in={self.d_in}",
                "scenario.d_in",
            )
        if self.dt <= 0:
            raise ConfigError("must be > 0", "scenario.dt")
        if self.n_sectors < 4:
            raise ConfigError("must be >= 4", "scenario.n_sectors")
        if self.n_robots < 1:
            raise ConfigError("must be >= 1", "scenario.n_robots")
        if self.n_obstacles < 0:
            raise ConfigError("must be >= 0", "scenario.n_obstacles")
        if self.arena_side <= 0:
            raise ConfigError("must be > 0", "scenario.arena_side")
        if not 0 < self.obstacle_radius_min <= self.obstacle_radius_max:
            raise ConfigError("need 0 < obstacle_radius_min <= obstacle_radius_max",
                              "scenario.obstacle_radius_min")
        for name in ("d_or", "d_o_max", "v_max", "a_max", "robot_radius"):
            if getattr(self, name) <= 0:
                raise ConfigError("must be > 0", f"scenario.{name}")
        if self.v_c_max < 0 or self.t_c < 0:
            raise ConfigError("must be >= 0", "scenario.v_c_max" if self.v_c_max < 0 else "scenario.t_c")
        if self.episode_steps < 1:
            raise ConfigError("must be >= 1", "scenario.episode_steps")
        if self.obstacles is not None:
            for k, ob in enumerate(self.obstacles):
                if ob.radius <= 0:
                    raise ConfigError("must be > 0", f"scenario.obstacles[{k}].radius")


@dataclass(frozen=True)
class EnergyParams:
    """Coefficients of the flocking energy terms."""

    c_p1: float = 0.03
    c_p2: float = 1.5
    c_v: float = 0.001
    c_k: float = 0.02
    c_c: float = 0.00001
    c_t1: float = 0.005
    c_t2: float = 3.0
    c_o1: float = 0.03
    c_o2: float = 2.0
    c_b: float = 0.01
    d_r: float = 1.0
    d_or: float = 1.0
    # extra exponent for robots without neighbours; None means c_p1, 0 disables
    isolation_penalty: float | None = None

    @property
    def isolation(self) -> float:
        return self.c_p1 if self.isolation_penalty is None else self.isolation_penalty

    def validate(self) -> None:
        for name in ("c_p1", "c_p2", "c_v", "c_k", "c_c", "c_t1", "c_o1", "c_o2", "c_b"):
            if getattr(self, name) <= 0:
                raise ConfigError("must be > 0", f"energy.{name}")
        if self.d_r <= 0 or self.d_or <= 0:
            raise ConfigError("must be > 0", "energy.d_r" if self.d_r <= 0 else "energy.d_or")


@dataclass(frozen=True)
class PolicyConfig:
    embed_dim: int = 64
    value_dim: int = 64
    self_dim: int = 64
    head_hidden: tuple[int, ...] = (128, 128)
    shared_parameters: bool = True
    init_seed: int = 0
    # final-layer init scale; small values start near the uniform policy
    head_init_scale: float = 0.01

    def validate(self) -> None:
        for name in ("embed_dim", "value_dim", "self_dim"):
            if getattr(self, name) < 1:
                raise ConfigError("must be >= 1", f"policy.{name}")
        if not self.head_hidden or any(h < 1 for h in self.head_hidden):
            raise ConfigError("must be a non-empty list of positive sizes", "policy.head_hidden")


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    learning_rate: float = 0.0005
    entropy_coef: float = 0.001
    clip_eps: float = 0.2
    episodes_per_batch: int = 5
    minibatch_size: int = 256
    epochs_per_batch: int = 10
    total_episodes: int = 2000
    eval_interval: int = 100
    eval_episodes: int = 2
    seed: int = 0
    optimizer: str = "adam"
    normalize_advantages: bool = True
    # the step limit truncates episodes rather than ending them, so by default
    # the return is bootstrapped from the critic there; "zero" cuts it off
    bootstrap: str = "value"
    # critic output multiplier; None means 1 / (1 - gamma)
    value_scale: float | None = None
    max_grad_norm: float | None = None

    def validate(self) -> None:
        if not 0 <= self.gamma < 1:
            raise ConfigError("must lie in [0, 1)", "train.gamma")
        if not 0 <= self.gae_lambda <= 1:
            raise ConfigError("must lie in [0, 1]", "train.gae_lambda")
        if self.clip_eps <= 0:
            raise ConfigError("must be > 0", "train.clip_eps")
        if self.learning_rate <= 0:
            raise ConfigError("must be > 0", "train.learning_rate")
        for name in ("episodes_per_batch", "minibatch_size", "epochs_per_batch", "eval_interval"):
            if getattr(self, name) < 1:
                raise ConfigError("must be >= 1", f"train.{name}")
        if self.total_episodes < 0:
            raise ConfigError("must be >= 0", "train.total_episodes")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError("must be 'adam' or 'sgd'", "train.optimizer")
        if self.bootstrap not in ("zero", "value"):
            raise ConfigError("must be 'zero' or 'value'", "train.bootstrap")

    @property
    def critic_scale(self) -> float:
        return 1.0 / (1.0 - self.gamma) if self.value_scale is None else self.value_scale


@dataclass(frozen=True)
class OlfatiSaberParams:
    d: float = 1.0  # lattice scale
    r: float = 1.3  # interaction range
    eps_sigma: float = 0.1
    h_alpha: float = 0.2
    h_beta: float = 0.9
    a: float = 5.0
    b: float = 5.0
    c1_alpha: float = 1.0
    c2_alpha: float = 2.0
    c1_beta: float = 3.0
    c2_beta: float = 2.0 * math.sqrt(3.0)
    c1_gamma: float = 0.1
    c2_gamma: float = 0.6
    # obstacle (beta-agent) lattice distance as a fraction of d
    beta_ratio: float = 0.6

    def validate(self) -> None:
        for name in ("c1_alpha", "c2_alpha", "c1_beta", "c2_beta", "c1_gamma", "c2_gamma",
                     "d", "r", "eps_sigma", "a", "b"):
            if getattr(self, name) <= 0:
                raise ConfigError("must be > 0", f"baselines.olfati_saber.{name}")
        for name in ("h_alpha", "h_beta"):
            if not 0 < getattr(self, name) < 1:
                raise ConfigError("must lie in (0, 1)", f"baselines.olfati_saber.{name}")
        if self.a > self.b:
            raise ConfigError("need a <= b so the pair force vanishes at the lattice distance",
                              "baselines.olfati_saber.a")


@dataclass(frozen=True)
class TrackingGains:
    k_p: float = 0.25
    k_v: float = 1.0


@dataclass(frozen=True)
class BaselineConfig:
    olfati_saber: OlfatiSaberParams = field(default_factory=OlfatiSaberParams)
    tracking: TrackingGains = field(default_factory=TrackingGains)


@dataclass(frozen=True)
class BenchConfig:
    n_robots: tuple[int, ...] = (10, 30, 50)
    n_obstacles: tuple[int, ...] = (10, 30, 50)
    seeds: tuple[int, ...] = tuple(range(10))
    controllers: tuple[str, ...] = ("olfati-saber",)
    checkpoint: str | None = None

    def validate(self) -> None:
        if not self.seeds:
            raise ConfigError("must list at least one seed", "bench.seeds")
        if any(n < 1 for n in self.n_robots):
            raise ConfigError("robot counts must be >= 1", "bench.n_robots")
        if any(n < 0 for n in self.n_obstacles):
            raise ConfigError("obstacle counts must be >= 0", "bench.n_obstacles")


@dataclass(frozen=True)
class RunConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    energy: EnergyParams = field(default_factory=EnergyParams)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    baselines: BaselineConfig = field(default_factory=BaselineConfig)

    def validate(self) -> None:
        self.scenario.validate()
        self.energy.validate()
        self.policy.validate()
        self.train.validate()
        self.bench.validate()
        self.baselines.olfati_saber.validate()
        if self.energy.d_r != self.scenario.d_r:
            raise ConfigError(f"must equal scenario.d_r ({self.scenario.d_r})", "energy.d_r")
        if self.energy.d_or != self.scenario.d_or:
            raise ConfigError(f"must equal scenario.d_or ({self.scenario.d_or})", "energy.d_or")


# ---------------------------------------------------------------------------
# dict <-> dataclass conversion
# ---------------------------------------------------------------------------

def to_dict(obj: Any) -> Any:
    """Plain-data view of a config dataclass (tuples become lists)."""
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_dict(v) for v in obj]
    return obj


def _coerce(value: Any, annotation: str, path: str, lines: dict[str, int]) -> Any:
    line = lines.get(path)
    ann = annotation.replace(" ", "")
    optional = ann.endswith("|None")
    if optional:
        if value is None:
            return None
        ann = ann[: -len("|None")]
    if ann == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", path, line)
        value = float(value)
        if not math.isfinite(value):
            raise ConfigError("must be finite", path, line)
        return value
    if ann == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", path, line)
        return value
    if ann == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {value!r}", path, line)
        return value
    if ann == "str":
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", path, line)
        return value
    if ann.startswith("tuple["):
        inner = ann[len("tuple["):-1].split(",")[0]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"expected a list, got {value!r}", path, line)
        if inner == "ObstacleSpec":
            return tuple(_build(ObstacleSpec, v, f"{path}[{k}]", lines) for k, v in enumerate(value))
        return tuple(_coerce(v, inner, f"{path}[{k}]", lines) for k, v in enumerate(value))
    cls = _SECTION_TYPES.get(ann)
    if cls is not None:
        return _build(cls, value, path, lines)
    raise ConfigError(f"unsupported field type {annotation}", path, line)


def _build(cls: type, data: Any, path: str, lines: dict[str, int]) -> Any:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping, got {data!r}", path or None, lines.get(path))
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in fields:
            sub = f"{path}.{key}" if path else str(key)
            raise ConfigError("unknown field", sub, lines.get(sub))
    kwargs = {}
    for name, f in fields.items():
        sub = f"{path}.{name}" if path else name
        if name in data:
            kwargs[name] = _coerce(data[name], str(f.type), sub, lines)
        elif f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
            raise ConfigError("missing required field", sub, lines.get(path))
    return cls(**kwargs)


_SECTION_TYPES: dict[str, type] = {
    "ScenarioConfig": ScenarioConfig,
    "EnergyParams": EnergyParams,
    "PolicyConfig": PolicyConfig,
    "TrainConfig": TrainConfig,
    "BenchConfig": BenchConfig,
    "BaselineConfig": BaselineConfig,
    "OlfatiSaberParams": OlfatiSaberParams,
    "TrackingGains": TrackingGains,
}


def _key_lines(node: yaml.Node, prefix: str, out: dict[str, int]) -> None:
    if isinstance(node, yaml.MappingNode):
        for key_node, value_node in node.value:
            path = f"{prefix}.{key_node.value}" if prefix else str(key_node.value)
            out[path] = key_node.start_mark.line + 1
            _key_lines(value_node, path, out)
    elif isinstance(node, yaml.SequenceNode):
        for k, item in enumerate(node.value):
            path = f"{prefix}[{k}]"
            out[path] = item.start_mark.line + 1
            _key_lines(item, path, out)


def from_dict(data: dict | None, lines: dict[str, int] | None = None) -> RunConfig:
    """Build and validate a RunConfig from parsed YAML data.

    ``energy.d_r`` and ``energy.d_or`` default to the scenario values when
    only the scenario sets them.
    """
    data = dict(data or {})
    lines = lines or {}
    scen = data.get("scenario") or {}
    if isinstance(scen, dict):
        energy = dict(data.get("energy") or {})
        for key in ("d_r", "d_or"):
            if key in scen and key not in energy:
                energy[key] = scen[key]
        if energy:
            data["energy"] = energy
    cfg = _build(RunConfig, data, "", lines)
    try:
        cfg.validate()
    except ConfigError as err:
        if err.line is None and err.field_path in lines:
            raise ConfigError(str(err).split(": ", 1)[-1], err.field_path, lines[err.field_path]) from None
        raise
    return cfg


def loads(text: str) -> RunConfig:
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as err:
        mark = getattr(err, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        raise ConfigError(f"YAML parse error: {getattr(err, 'problem', err)}", None, line) from None
    lines: dict[str, int] = {}
    if node is not None:
        _key_lines(node, "", lines)
    if data is not None and not isinstance(data, dict):
        raise ConfigError("top level must be a mapping", None, 1)
    return from_dict(data, lines)


def load(path: str | Path | None) -> RunConfig:
    if path is None:
        return from_dict({})
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config file {path}: {err.strerror}") from None
    return loads(text)


def dumps(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def save(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(dumps(cfg))


def replace(cfg: Any, **changes: Any) -> Any:
    return dataclasses.replace(cfg, **changes)
