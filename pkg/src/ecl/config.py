"""Experiment configuration: dataclass sections stored as an INI file."""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import typing
from dataclasses import dataclass, field

from .discovery import DiscoveryConfig
from .empowerment import EmpowermentConfig
from .planner import CemConfig

ABLATIONS = ("none", "no-shaping", "simultaneous", "no-step2")
BACKENDS = ("constraint", "score")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentSection:
    env: str = "chemical"
    topology: str = "chain"
    seeds: tuple = (0,)
    backend: str = "constraint"
    ablation: str = "none"

    def __post_init__(self):
        if self.env not in ("chemical", "physical"):
            raise ConfigError(f"env must be chemical or physical, got {self.env!r}")
        if self.backend not in BACKENDS:
            raise ConfigError(f"backend must be one of {BACKENDS}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}")


@dataclass
class NetworkSection:
    feature_dim: int = 64
    dynamics_hidden: tuple = (64, 32)
    reward_hidden: tuple = (64, 64)


@dataclass
class TrainingSection:
    batch_size: int = 64
    learning_rate: float = 1e-4
    max_sample_time: int = 128
    prediction_steps: int = 1
    dynamics_steps: int = 50_000
    reward_steps: int = 5_000
    reward_learning_rate: float = 3e-4
    reward_batch_size: int = 32
    dropout_full: float = 0.4
    dropout_leave_one_out: float = 0.4
    dropout_bernoulli: float = 0.2


@dataclass
class CollectSection:
    transitions: int = 20_000
    warmup_fraction: float = 0.25
    epsilon_start: float = 1.0
    epsilon_end: float = 0.2
    n_buckets: int = 64
    quick_model_steps: int = 5_000
    quick_discovery_rounds: int = 20


@dataclass
class PlannerSection:
    num_candidates: int = 64
    num_iterations: int = 5
    num_elites: int = 32
    action_noise: float = 0.03
    horizon: int = 10
    discount: float = 1.0
    lam: float = 1.0

    def cem(self):
        return CemConfig(self.num_candidates, self.num_iterations, self.num_elites, self.action_noise,
                         self.horizon, self.discount)


@dataclass
class TaskSection:
    episodes: int = 300
    reward_update_every: int = 10
    reward_update_steps: int = 200
    simultaneous_initial_fraction: float = 0.2
    simultaneous_every: int = 25
    simultaneous_steps: int = 4_000


@dataclass
class EvalSection:
    n_transitions: int = 5_000
    horizon: int = 5


SECTIONS = {
    "experiment": ExperimentSection,
    "network": NetworkSection,
    "training": TrainingSection,
    "collect": CollectSection,
    "discovery": DiscoveryConfig,
    "empowerment": EmpowermentConfig,
    "planner": PlannerSection,
    "task": TaskSection,
    "eval": EvalSection,
}


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    collect: CollectSection = field(default_factory=CollectSection)
    discovery: DiscoveryConfig = field(default_factory=DiscoveryConfig)
    empowerment: EmpowermentConfig = field(default_factory=EmpowermentConfig)
    planner: PlannerSection = field(default_factory=PlannerSection)
    task: TaskSection = field(default_factory=TaskSection)
    eval: EvalSection = field(default_factory=EvalSection)

    @classmethod
    def for_env(cls, env="chemical", topology="chain", **sections):
        """Defaults for one environment; ``sections`` maps section name to a dict of overrides."""
        physical = env == "physical"
        base = {
            "experiment": {"env": env, "topology": topology},
            "network": ({"feature_dim": 128, "dynamics_hidden": (128, 128), "reward_hidden": (128, 128)}
                        if physical else {}),
            "discovery": {"cmi_threshold": 0.01, "score_coefficient": 0.02} if physical else {},
            "planner": {"num_candidates": 128, "num_iterations": 10} if physical else {},
        }
        for name, over in sections.items():
            base.setdefault(name, {}).update(over)
        return cls(**{name: SECTIONS[name](**base.get(name, {})) for name in SECTIONS})

    def replace(self, **sections):
        """Copy with per-section overrides, e.g. ``replace(planner={"lam": 0.0})``."""
        kw = {}
        for name in SECTIONS:
            cur = getattr(self, name)
            kw[name] = dataclasses.replace(cur, **sections.get(name, {}))
        return ExperimentConfig(**kw)

    # -- file format ---------------------------------------------------------------

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for name in SECTIONS:
            sec = getattr(self, name)
            cp[name] = {f.name: _fmt(getattr(sec, f.name)) for f in dataclasses.fields(sec)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str) -> "ExperimentConfig":
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from exc
        unknown = set(cp.sections()) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
        kw = {}
        for name, klass in SECTIONS.items():
            hints = typing.get_type_hints(klass)
            names = {f.name for f in dataclasses.fields(klass)}
            values = {}
            if cp.has_section(name):
                for key, raw in cp[name].items():
                    if key not in names:
                        raise ConfigError(f"unknown key {key!r} in section [{name}]")
                    values[key] = _parse(raw, hints[key], f"[{name}] {key}")
            try:
                kw[name] = klass(**values)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"[{name}]: {exc}") from exc
        return cls(**kw)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_ini())

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_ini(fh.read())

    def hash(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()


def _fmt(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(raw: str, hint, where):
    raw = raw.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    try:
        if origin is typing.Union or (origin is not None and type(None) in args):
            if raw.lower() == "none":
                return None
            inner = [a for a in args if a is not type(None)][0]
            return _parse(raw, inner, where)
        if hint is bool:
            if raw.lower() not in ("true", "false"):
                raise ValueError(raw)
            return raw.lower() == "true"
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if hint is tuple or origin is tuple:
            return tuple(int(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r}") from exc
