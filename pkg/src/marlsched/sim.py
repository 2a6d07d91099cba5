"""Scheduling-interval simulator.

Progress is fluid inside an interval: each running job trains for
``interval_seconds / (iteration_time * iterations_per_epoch)`` epochs, capped
at what it has left.  Iteration time is the straggler's interfered
computation time plus the slowest worker-PS (or ring) transfer.
"""
import enum
from dataclasses import dataclass, field

import numpy as np

from .interference import CoLocationContext, total_slowdown
from .topology import LinkKind, NodeKind
from .workload import L


class TaskKind(enum.Enum):
    WORKER = "worker"
    PS = "ps"


class JobStatus(enum.Enum):
    QUEUED = "queued"
    RUNNING = "running"
    DONE = "done"


class SimError(RuntimeError):
    pass


class InsufficientResources(SimError):
    pass


class NoCompletions(SimError):
    pass


@dataclass
class SimConfig:
    interval_seconds: float = 1800.0
    ps_traffic_factor: float = 2.0  # push + pull per worker-PS pair
    ring_traffic_factor: float = 2.0


@dataclass
class JobRuntime:
    spec: object
    profile: object
    placement: list = field(default_factory=list)
    epochs_done: float = 0.0
    status: JobStatus = JobStatus.QUEUED
    completion_interval: int | None = None
    final_placement: list = field(default_factory=list)

    @property
    def job_id(self):
        return self.spec.job_id

    def placed(self, kind):
        return sum(1 for k, _ in self.placement if k is kind)

    @property
    def fully_placed(self):
        return len(self.placement) == self.spec.n_tasks

    def pending_tasks(self):
        """Unplaced tasks in decision order: PSs first, then workers."""
        return ([TaskKind.PS] * (self.spec.num_ps - self.placed(TaskKind.PS))
                + [TaskKind.WORKER] * (self.spec.num_workers - self.placed(TaskKind.WORKER)))

    def demand(self, kind):
        return np.asarray(self.spec.ps_demand if kind is TaskKind.PS else self.spec.worker_demand,
                          dtype=np.float64)

    def groups(self, kind):
        return [g for k, g in self.placement if k is kind]


def reward(job, epochs_trained):
    """Normalised training speed: epochs trained this interval over max_epochs."""
    return epochs_trained / job.spec.max_epochs


class SimState:
    def __init__(self, topo, profiles, coeffs, config=None):
        self.topo = topo
        self.profiles = profiles
        self.coeffs = coeffs
        self.config = config or SimConfig()
        self.clock = 0
        n = len(topo.nodes)
        self.gpu_cap = np.zeros(n)
        self.core_cap = np.zeros(n)
        self.n_core = np.zeros(n, dtype=np.int64)
        self.intra_bw = np.zeros(n)
        for s in topo.servers:
            for c, groups in zip(s.cpus, s.groups):
                self.core_cap[c] = s.arch.cores_per_cpu
                self.n_core[c] = s.arch.cores_per_cpu
                for g in groups:
                    self.gpu_cap[g] = s.arch.gpus_per_group
                    self.intra_bw[g] = s.arch.intra_server_bw
        self.gpu_free = self.gpu_cap.copy()
        self.core_free = self.core_cap.copy()
        self.group_cpu = topo.group_cpu
        self.placements = {g: {} for g in topo.gpu_groups}
        self.jobs = {}
        self.queues = [[] for _ in range(topo.n_schedulers)]
        self.running = []
        self.link_load = np.zeros(len(topo.links))
        self._net_links = np.array([l.kind is not LinkKind.PCIE for l in topo.links])
        self._flows = None
        self.versions = np.zeros(topo.n_schedulers, dtype=np.int64)
        self._node_partition = [nd.partition_id for nd in topo.nodes]

    # -- resources -------------------------------------------------------
    def _check_group(self, group):
        if not (0 <= group < len(self.topo.nodes)) or self.topo.nodes[group].kind is not NodeKind.GPU_GROUP:
            raise SimError(f"node {group} is not a GPU group")

    def free_vector(self, group):
        """(cpu cores free on the attached CPU, GPUs free in the group)."""
        return np.array([self.core_free[self.group_cpu[group]], self.gpu_free[group]])

    def capacity_vector(self, group):
        return np.array([self.core_cap[self.group_cpu[group]], self.gpu_cap[group]])

    def can_place(self, group, demand):
        self._check_group(group)
        return bool(self.core_free[self.group_cpu[group]] >= demand[0] - 1e-9
                    and self.gpu_free[group] >= demand[1] - 1e-9)

    def feasible_groups(self, groups, demand):
        groups = np.asarray(groups, dtype=np.int64)
        cpus = np.array([self.group_cpu[g] for g in groups], dtype=np.int64)
        return ((self.core_free[cpus] >= demand[0] - 1e-9)
                & (self.gpu_free[groups] >= demand[1] - 1e-9))

    def _touch(self, group):
        p = self._node_partition[group]
        if p is not None:
            self.versions[p] += 1
        self._flows = None

    # -- jobs ------------------------------------------------------------
    def submit(self, spec):
        if spec.job_id in self.jobs:
            raise SimError(f"job {spec.job_id} submitted twice")
        job = JobRuntime(spec, self.profiles[spec.model_type_id])
        self.jobs[spec.job_id] = job
        self.queues[spec.home_scheduler].append(spec.job_id)
        return job

    def apply_placement(self, job_id, kind, group):
        job = self.jobs[job_id]
        demand = job.demand(kind)
        if not self.can_place(group, demand):
            raise InsufficientResources(f"group {group} cannot host {kind.value} of job {job_id}")
        if job.placed(kind) >= (job.spec.num_ps if kind is TaskKind.PS else job.spec.num_workers):
            raise SimError(f"job {job_id} has no unplaced {kind.value}")
        self.core_free[self.group_cpu[group]] -= demand[0]
        self.gpu_free[group] -= demand[1]
        counts = self.placements[group].setdefault(job_id, [0, 0])
        counts[0 if kind is TaskKind.WORKER else 1] += 1
        job.placement.append((kind, group))
        if job.fully_placed:
            job.status = JobStatus.RUNNING
            self.running.append(job_id)
            home = self.queues[job.spec.home_scheduler]
            if job_id in home:
                home.remove(job_id)
        self._touch(group)

    def release(self, job_id):
        """Return every resource the job holds; used on completion or to undo a partial placement."""
        job = self.jobs[job_id]
        for kind, group in job.placement:
            demand = job.demand(kind)
            self.core_free[self.group_cpu[group]] += demand[0]
            self.gpu_free[group] += demand[1]
            counts = self.placements[group][job_id]
            counts[0 if kind is TaskKind.WORKER else 1] -= 1
            if counts == [0, 0]:
                del self.placements[group][job_id]
            self._touch(group)
        job.placement = []
        if job_id in self.running:
            self.running.remove(job_id)
            if job.status is JobStatus.RUNNING:
                job.status = JobStatus.QUEUED

    # -- interference ------------------------------------------------------
    def context(self, job_id, group, running_only=True, extra=None):
        """Co-location context of a worker of ``job_id`` sitting on ``group``.

        Other jobs' worker tasks under the same CPU go to ``same_group``; those
        under the server's other CPUs go to ``diff_group``.  ``extra`` is an
        optional hypothetical (job_id, group) worker to include.
        """
        job = self.jobs[job_id]
        cpu = self.group_cpu[group]
        server = self.topo.servers[self.topo.group_server[group]]
        same, diff = [], []
        for c, groups in zip(server.cpus, server.groups):
            for g in groups:
                entries = [(j, cnt[0]) for j, cnt in self.placements[g].items()]
                if extra is not None and extra[1] == g:
                    entries.append((extra[0], 1))
                for other, n_workers in entries:
                    if other == job_id or n_workers == 0:
                        continue
                    ojob = self.jobs[other]
                    if running_only and ojob.status is not JobStatus.RUNNING:
                        continue
                    prof = ojob.profile
                    for _ in range(n_workers):
                        if c == cpu:
                            same.append((prof.cpu_util, prof.pcie_util))
                        else:
                            diff.append(prof.cpu_util)
        return CoLocationContext(job.profile.cpu_util, job.profile.pcie_util, tuple(same),
                                 tuple(diff), int(self.n_core[cpu]))

    def slowdown(self, job_id, group, running_only=True, extra=None):
        return total_slowdown(self.context(job_id, group, running_only, extra), self.coeffs)

    # -- communication -------------------------------------------------------
    def _pairs(self, job):
        workers = sorted(job.groups(TaskKind.WORKER))
        ps = sorted(job.groups(TaskKind.PS))
        if ps:
            return [(w, p) for w in workers for p in ps]
        if len(workers) < 2:
            return []
        return [(workers[i], workers[(i + 1) % len(workers)]) for i in range(len(workers))]

    def _pair_path(self, a, b):
        if a == b:
            return ()
        return tuple(l for l in self.topo.path(a, b) if self._net_links[l])

    def _rebuild_flows(self):
        counts = np.zeros(len(self.topo.links), dtype=np.int64)
        flows = {}
        for jid in self.running:
            paths = [self._pair_path(a, b) for a, b in self._pairs(self.jobs[jid])]
            flows[jid] = paths
            for p in paths:
                if p:
                    np.add.at(counts, np.asarray(p, dtype=np.int64), 1)
        self._flows = (flows, counts)
        return self._flows

    def flows(self):
        return self._flows if self._flows is not None else self._rebuild_flows()

    def bottleneck_bw(self, path, intra_bw=None, counts=None):
        """min over links of capacity / active flows (this flow included)."""
        if len(path) == 0:
            return self.topo.servers[0].arch.intra_server_bw if intra_bw is None else intra_bw
        idx = np.asarray(path, dtype=np.int64)
        n = np.ones(len(idx)) if counts is None else np.maximum(counts[idx], 1)
        return float(np.min(self.topo.link_capacity[idx] / n))

    def _bytes_per_flow(self, job):
        g = job.profile.gradient_size
        if job.spec.num_ps > 0:
            return self.config.ps_traffic_factor * g / job.spec.num_ps
        return self.config.ring_traffic_factor * g

    def comm_time(self, job_id):
        job = self.jobs[job_id]
        flows, counts = self.flows()
        pairs = self._pairs(job)
        if not pairs:
            return 0.0
        paths = flows.get(job_id) or [self._pair_path(a, b) for a, b in pairs]
        worst = min(self.bottleneck_bw(p, self.intra_bw[a], counts) for p, (a, _) in zip(paths, pairs))
        return self._bytes_per_flow(job) / worst

    def compute_times(self, job_id):
        job = self.jobs[job_id]
        prof = job.profile
        ideal = prof.standalone_epoch_time / job.spec.num_workers / prof.iterations_per_epoch
        return [ideal * (1.0 + self.slowdown(job_id, g)) for g in job.groups(TaskKind.WORKER)]

    def iteration_time(self, job_id):
        job = self.jobs[job_id]
        if not job.fully_placed:
            raise SimError(f"job {job_id} is not fully placed")
        return max(self.compute_times(job_id)) + self.comm_time(job_id)

    # -- time ----------------------------------------------------------------
    def _update_link_load(self, times):
        flows, _ = self.flows()
        demand = np.zeros(len(self.topo.links))
        for jid, paths in flows.items():
            rate = self._bytes_per_flow(self.jobs[jid]) / times[jid]
            for p in paths:
                if p:
                    np.add.at(demand, np.asarray(p, dtype=np.int64), rate)
        self.link_load = np.clip(demand / self.topo.link_capacity, 0.0, 1.0)
        self.versions += 1

    def advance_interval(self):
        """Train every running job for one interval.

        Returns ``(completed job ids, {job_id: epochs trained})``.
        """
        self._rebuild_flows()
        times = {jid: self.iteration_time(jid) for jid in self.running}
        trained, completed = {}, []
        for jid in list(self.running):
            job = self.jobs[jid]
            remaining = job.spec.max_epochs - job.epochs_done
            rate = self.config.interval_seconds / (times[jid] * job.profile.iterations_per_epoch)
            epochs = min(remaining, rate)
            trained[jid] = epochs
            job.epochs_done += epochs
            if job.spec.max_epochs - job.epochs_done <= 1e-9:
                job.epochs_done = float(job.spec.max_epochs)
                completed.append(jid)
        for jid in completed:
            job = self.jobs[jid]
            job.final_placement = list(job.placement)
            self.release(jid)
            job.status = JobStatus.DONE
            job.completion_interval = self.clock
        self._rebuild_flows()
        self._update_link_load({jid: self.iteration_time(jid) for jid in self.running})
        self.clock += 1
        return completed, trained

    # -- bookkeeping -----------------------------------------------------------
    def check_conservation(self):
        gpu_used = np.zeros_like(self.gpu_cap)
        core_used = np.zeros_like(self.core_cap)
        for job in self.jobs.values():
            for kind, g in job.placement:
                d = job.demand(kind)
                gpu_used[g] += d[1]
                core_used[self.group_cpu[g]] += d[0]
        if not np.allclose(gpu_used + self.gpu_free, self.gpu_cap):
            raise SimError("GPU accounting does not add up")
        if not np.allclose(core_used + self.core_free, self.core_cap):
            raise SimError("CPU core accounting does not add up")
        if (self.gpu_free < -1e-9).any() or (self.core_free < -1e-9).any():
            raise SimError("negative free resources")

    def interval_record(self, completions):
        total = self.gpu_cap.sum()
        used = total - self.gpu_free.sum()
        net = self.link_load[self._net_links]
        return {"clock": self.clock, "running": len(self.running), "completions": len(completions),
                "mean_utilization": used / total if total else 0.0,
                "mean_link_load": float(net.mean()) if len(net) else 0.0}

    def pending_jobs(self):
        return [jid for q in self.queues for jid in q]

    def jct_stats(self):
        """(average JCT in intervals, [(job_id, jct)])."""
        done = [j for j in self.jobs.values() if j.status is JobStatus.DONE]
        if not done:
            raise NoCompletions("no job has completed")
        records = [(j.job_id, j.completion_interval - j.spec.arrival_interval + 1) for j in done]
        return float(np.mean([r[1] for r in records])), records


def resource_dim():
    return L
