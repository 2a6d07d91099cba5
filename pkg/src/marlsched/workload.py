"""Model profiles, job specs and arrival traces."""
import csv
import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources

import numpy as np

# Resource order used by every L-vector in the package.
RESOURCES = ("cpu_cores", "gpus")
L = len(RESOURCES)

DEFAULT_WORKER_DEMAND = (6.0, 1.0)
DEFAULT_PS_DEMAND = (4.0, 0.0)


class WorkloadError(ValueError):
    pass


@dataclass(frozen=True)
class ModelProfile:
    model_type_id: int
    name: str
    standalone_epoch_time: float
    iterations_per_epoch: int
    gradient_size: float  # Gbits per full gradient
    cpu_util: float  # virtual cores when running alone
    pcie_util: float  # Gbps when running alone

    def __post_init__(self):
        for f in ("standalone_epoch_time", "iterations_per_epoch", "gradient_size",
                  "cpu_util", "pcie_util"):
            if not getattr(self, f) > 0:
                raise WorkloadError(f"profile {self.name}: {f} must be positive")


def load_profiles(source=None):
    """Profiles from a JSON file path, a parsed list of dicts, or the bundled default."""
    if source is None:
        text = resources.files("marlsched").joinpath("data/profiles.json").read_text()
        rows = json.loads(text)["profiles"]
    elif isinstance(source, (list, tuple)):
        rows = source
    else:
        with open(source) as fh:
            data = json.load(fh)
        rows = data["profiles"] if isinstance(data, dict) else data
    profiles = tuple(ModelProfile(**{k: v for k, v in r.items() if not k.startswith("_")})
                     if isinstance(r, dict) else r for r in rows)
    ids = [p.model_type_id for p in profiles]
    if sorted(ids) != list(range(len(ids))):
        raise WorkloadError("model_type_id values must be unique and cover 0..Y-1")
    return tuple(sorted(profiles, key=lambda p: p.model_type_id))


@dataclass(frozen=True)
class JobSpec:
    job_id: int
    model_type_id: int
    num_workers: int
    num_ps: int
    worker_demand: tuple
    ps_demand: tuple
    max_epochs: int
    arrival_interval: int
    home_scheduler: int

    def __post_init__(self):
        if self.num_workers < 1:
            raise WorkloadError("a job needs at least one worker")
        if self.num_ps < 0:
            raise WorkloadError("negative PS count")
        if self.max_epochs < 1:
            raise WorkloadError("max_epochs must be >= 1")
        if any(d < 0 for d in self.worker_demand) or any(d < 0 for d in self.ps_demand):
            raise WorkloadError("resource demands must be non-negative")

    @property
    def n_tasks(self):
        return self.num_workers + self.num_ps


def encode_job_onehot(job, n_types):
    if not 0 <= job.model_type_id < n_types:
        raise WorkloadError(f"model type {job.model_type_id} out of range for Y={n_types}")
    v = np.zeros(n_types)
    v[job.model_type_id] = 1.0
    return v


def encode_job_demand(job, n_resources=L):
    """[num_workers, worker_demand..., num_ps, ps_demand...]."""
    if len(job.worker_demand) != n_resources or len(job.ps_demand) != n_resources:
        raise WorkloadError("demand vectors do not have L entries")
    return np.array([job.num_workers, *job.worker_demand, job.num_ps, *job.ps_demand],
                    dtype=np.float64)


@dataclass(frozen=True)
class Uniform:
    rate: float


@dataclass(frozen=True)
class Poisson:
    rate: float


@dataclass(frozen=True)
class CountsFile:
    path: str
    scale: float = 1.0


@dataclass(frozen=True)
class JobOptions:
    n_types: int = 8
    workers_range: tuple = (1, 4)
    ps_range: tuple = (1, 4)
    epochs_range: tuple = (20, 60)
    worker_demand: tuple = DEFAULT_WORKER_DEMAND
    ps_demand: tuple = DEFAULT_PS_DEMAND


@dataclass(frozen=True)
class JobTrace:
    jobs: tuple
    schedulers: int
    horizon: int
    split: str = "all"
    options: JobOptions = field(default_factory=JobOptions)

    def __len__(self):
        return len(self.jobs)

    def arrivals(self):
        """{interval: [jobs in scheduler order]}."""
        out = {}
        for j in self.jobs:
            out.setdefault(j.arrival_interval, []).append(j)
        return out

    def split_train_test(self, train_fraction=0.9):
        """Per scheduler, the earliest ``train_fraction`` of jobs train; the rest test.

        Each part is re-based so its first arrival is interval 0.
        """
        train, test = [], []
        for s in range(self.schedulers):
            mine = [j for j in self.jobs if j.home_scheduler == s]
            cut = int(round(train_fraction * len(mine)))
            train.extend(mine[:cut])
            test.extend(mine[cut:])
        return self._subset(train, "train"), self._subset(test, "test")

    def _subset(self, jobs, tag):
        jobs = sorted(jobs, key=lambda j: (j.arrival_interval, j.home_scheduler, j.job_id))
        base = jobs[0].arrival_interval if jobs else 0
        jobs = tuple(replace(j, arrival_interval=j.arrival_interval - base) for j in jobs)
        horizon = (jobs[-1].arrival_interval + 1) if jobs else 0
        return JobTrace(jobs, self.schedulers, horizon, tag, self.options)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["job_id", "scheduler", "interval", "type", "workers", "ps", "epochs"])
            for j in self.jobs:
                w.writerow([j.job_id, j.home_scheduler, j.arrival_interval, j.model_type_id,
                            j.num_workers, j.num_ps, j.max_epochs])


def read_counts_file(path, schedulers):
    try:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r and not r[0].lstrip().startswith("#")]
    except OSError as exc:
        raise WorkloadError(f"cannot read counts file {path}: {exc}") from exc
    counts = []
    for i, row in enumerate(rows):
        try:
            values = [float(x) for x in row]
        except ValueError:
            if i == 0:
                continue  # header row
            raise WorkloadError(f"{path}: non-numeric row {i}")
        if len(values) < schedulers:
            raise WorkloadError(f"{path}: row {i} has {len(values)} columns, need {schedulers}")
        counts.append(values[:schedulers])
    return np.array(counts, dtype=np.float64).reshape(-1, schedulers)


def _arrival_counts(pattern, horizon, schedulers, rng):
    if isinstance(pattern, CountsFile):
        raw = read_counts_file(pattern.path, schedulers)[:horizon] * pattern.scale
        base = np.floor(raw)
        return (base + (rng.random(raw.shape) < raw - base)).astype(np.int64)
    if pattern.rate < 0:
        raise WorkloadError("arrival rate must be non-negative")
    if isinstance(pattern, Poisson):
        return rng.poisson(pattern.rate, size=(horizon, schedulers))
    if isinstance(pattern, Uniform):
        base = math.floor(pattern.rate)
        extra = rng.random((horizon, schedulers)) < pattern.rate - base
        return (base + extra).astype(np.int64)
    raise WorkloadError(f"unknown arrival pattern {pattern!r}")


def generate_trace(pattern, horizon, schedulers, seed, options=None):
    """Pure function of its arguments: same inputs, same trace."""
    if horizon < 1 or schedulers < 1:
        raise WorkloadError("horizon and schedulers must be >= 1")
    options = options or JobOptions()
    rng = np.random.default_rng(seed)
    counts = _arrival_counts(pattern, horizon, schedulers, rng)
    total = int(counts.sum())
    types = rng.integers(0, options.n_types, size=total)
    workers = rng.integers(options.workers_range[0], options.workers_range[1] + 1, size=total)
    ps = rng.integers(options.ps_range[0], options.ps_range[1] + 1, size=total)
    epochs = rng.integers(options.epochs_range[0], options.epochs_range[1] + 1, size=total)
    jobs, k = [], 0
    for t in range(counts.shape[0]):
        for s in range(schedulers):
            for _ in range(counts[t, s]):
                jobs.append(JobSpec(k, int(types[k]), int(workers[k]), int(ps[k]),
                                    tuple(options.worker_demand), tuple(options.ps_demand),
                                    int(epochs[k]), t, s))
                k += 1
    return JobTrace(tuple(jobs), schedulers, int(counts.shape[0]), "all", options)
