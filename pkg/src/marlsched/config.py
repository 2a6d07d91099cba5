"""Experiment configuration, validated with pydantic and read from JSON."""
import hashlib
import json
from importlib import resources
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator

from .agents import AgentConfig
from .interference import DEFAULT_COEFFICIENTS, InterferenceCoefficients, fit, read_samples
from .sim import SimConfig
from .workload import CountsFile, JobOptions, Poisson, Uniform

POLICIES = ("marl", "single", "tetris", "lb", "lif", "random")
PolicyName = Literal["marl", "single", "tetris", "lb", "lif", "random"]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TopologySection(_Strict):
    family: Literal["fat_tree", "vl2", "bcube"] = "fat_tree"
    params: dict = Field(default_factory=lambda: {"k": 4, "pods": 2, "servers_per_edge": 4})
    arch: Optional[dict] = None
    tier_bw: Optional[list[float]] = None

    def as_build_spec(self):
        spec = {"family": self.family, **self.params}
        if self.arch is not None:
            spec["arch"] = self.arch
        if self.tier_bw is not None:
            spec["tier_bw"] = self.tier_bw
        return spec


class WorkloadSection(_Strict):
    pattern: Literal["uniform", "poisson", "counts"] = "uniform"
    rate: float = 4.0
    counts_path: Optional[str] = None
    counts_scale: float = 1.0
    horizon: int = 20
    train_fraction: float = 0.9
    workers_range: tuple[int, int] = (1, 4)
    ps_range: tuple[int, int] = (1, 4)
    epochs_range: tuple[int, int] = (20, 60)
    worker_demand: tuple[float, float] = (6.0, 1.0)
    ps_demand: tuple[float, float] = (4.0, 0.0)
    profiles_path: Optional[str] = None

    @field_validator("train_fraction")
    @classmethod
    def _fraction(cls, v):
        if not 0.0 < v < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")
        return v

    def arrival_pattern(self):
        if self.pattern == "uniform":
            return Uniform(self.rate)
        if self.pattern == "poisson":
            return Poisson(self.rate)
        if self.counts_path is None:
            raise ValueError("pattern 'counts' needs counts_path")
        return CountsFile(self.counts_path, self.counts_scale)

    def job_options(self, n_types):
        return JobOptions(n_types, tuple(self.workers_range), tuple(self.ps_range),
                          tuple(self.epochs_range), tuple(self.worker_demand),
                          tuple(self.ps_demand))


class TrainingSection(_Strict):
    epochs: int = 100
    eval_every: int = 1
    max_intervals: int = 2000
    n_slots_single: Optional[int] = None
    patience: Optional[int] = None  # stop after this many evaluations without a new best


class ExperimentConfig(_Strict):
    seed: int = 0
    policy: PolicyName = "marl"
    topology: TopologySection = Field(default_factory=TopologySection)
    workload: WorkloadSection = Field(default_factory=WorkloadSection)
    interference: Optional[list[float]] = None
    interference_samples: Optional[str] = None  # CSV of slowdown samples to fit instead
    sim: dict = Field(default_factory=dict)
    agent: dict = Field(default_factory=dict)
    training: TrainingSection = Field(default_factory=TrainingSection)
    check_conservation: bool = True
    out: Optional[str] = None

    @field_validator("interference")
    @classmethod
    def _coeffs(cls, v):
        if v is not None and len(v) != 7:
            raise ValueError("interference needs 7 coefficients")
        return v

    @field_validator("sim")
    @classmethod
    def _sim(cls, v):
        try:
            SimConfig(**v)
        except TypeError as exc:
            raise ValueError(str(exc)) from None
        return v

    @field_validator("agent")
    @classmethod
    def _agent(cls, v):
        try:
            AgentConfig(**v)
        except TypeError as exc:
            raise ValueError(str(exc)) from None
        return v

    def coefficients(self):
        if self.interference is not None:
            return InterferenceCoefficients.from_array(self.interference)
        if self.interference_samples is not None:
            return fit(read_samples(self.interference_samples), seed=self.seed)[0]
        return DEFAULT_COEFFICIENTS

    def sim_config(self):
        return SimConfig(**self.sim)

    def agent_config(self):
        return AgentConfig(**self.agent)

    def canonical_json(self):
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def config_hash(self):
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:12]


def desk_config(**overrides):
    """The bundled 2-scheduler x 8-server desk scenario."""
    data = json.loads(resources.files("marlsched").joinpath("data/desk.json").read_text())
    data.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.model_validate(data)


def load_config(path=None, **overrides):
    data = {}
    if path is not None:
        with open(path) as fh:
            data = json.load(fh)
    data.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.model_validate(data)
