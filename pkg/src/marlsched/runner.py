"""Training, evaluation and comparison runs plus their CSV outputs."""
import csv
import json
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import baselines
from .agents import AgentSystem
from .sim import JobStatus, SimState, TaskKind, reward
from .topology import build as build_topology
from .workload import generate_trace, load_profiles

log = logging.getLogger(__name__)


@dataclass
class World:
    cfg: object
    topo: object
    profiles: tuple
    trace: object
    train: object
    test: object
    coeffs: object

    def new_state(self):
        return SimState(self.topo, self.profiles, self.coeffs, self.cfg.sim_config())


def build_world(cfg):
    topo = build_topology(cfg.topology.as_build_spec())
    profiles = load_profiles(cfg.workload.profiles_path)
    wl = cfg.workload
    trace = generate_trace(wl.arrival_pattern(), wl.horizon, topo.n_schedulers, cfg.seed,
                           wl.job_options(len(profiles)))
    train, test = trace.split_train_test(wl.train_fraction)
    return World(cfg, topo, profiles, trace, train, test, cfg.coefficients())


def make_system(world, mode, seed=None):
    cfg = world.cfg
    acfg = cfg.agent_config()
    multi = mode == "multi"
    if not multi:
        n = cfg.training.n_slots_single or acfg.n_slots * world.topo.n_schedulers
        acfg.n_slots = n
    return AgentSystem(world.topo, acfg, len(world.profiles), multi,
                       cfg.seed if seed is None else seed)


@dataclass
class EpisodeResult:
    avg_jct: float
    jobs: list
    intervals: list
    censored: int
    wall_seconds: float = 0.0
    losses: list = field(default_factory=list)


def _baseline_place_job(policy, state, job_id, rng):
    for kind in state.jobs[job_id].pending_tasks():
        g = baselines.place(policy, state, job_id, kind, rng)
        if g is None:
            return False
        state.apply_placement(job_id, kind, g)
    return True


def _schedule(state, policy, system, greedy, rng, record):
    for jid in sorted(state.pending_jobs()):
        if policy in baselines.POLICIES:
            _baseline_place_job(policy, state, jid, rng)
        else:
            system.place_job(state, jid, greedy, rng, record)


def _partial_jobs(state):
    return sorted(jid for jid in state.pending_jobs() if state.jobs[jid].placement)


def _break_deadlock(state):
    """With nothing running, partial placements can block each other forever; keep only the oldest."""
    if state.running:
        return False
    partial = _partial_jobs(state)
    if len(partial) < 2:
        return False
    for jid in partial[1:]:
        state.release(jid)
    return True


def run_episode(world, trace, policy, system=None, greedy=True, rng=None, learn=False,
                max_intervals=None):
    """Simulate ``trace`` from an empty cluster until every job finishes or the cap is hit."""
    t0 = time.perf_counter()
    cfg = world.cfg
    max_intervals = max_intervals or cfg.training.max_intervals
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    state = world.new_state()
    if system is not None:
        system.reset()
    arrivals = trace.arrivals()
    intervals, losses = [], []
    n_jobs = len(trace.jobs)
    done = 0
    while state.clock < max_intervals:
        for spec in arrivals.get(state.clock, []):
            state.submit(spec)
        _schedule(state, policy, system, greedy, rng, learn)
        if _break_deadlock(state):
            _schedule(state, policy, system, greedy, rng, learn)
        completed, trained = state.advance_interval()
        if cfg.check_conservation:
            state.check_conservation()
        done += len(completed)
        intervals.append(state.interval_record(completed))
        if system is not None:
            rewards = {jid: reward(state.jobs[jid], e) for jid, e in trained.items()}
            out = system.end_interval(state, rewards, set(completed), learn)
            losses.extend(o for o in out if o is not None)
        if done == n_jobs and state.clock >= trace.horizon:
            break
    if system is not None:
        losses.extend(o for o in system.end_episode(learn) if o is not None)
    jobs, censored = _job_rows(state, max_intervals)
    avg = float(np.mean([j["jct"] for j in jobs])) if jobs else float("nan")
    return EpisodeResult(avg, jobs, intervals, censored, time.perf_counter() - t0, losses)


def _job_rows(state, max_intervals):
    rows, censored = [], 0
    for jid in sorted(state.jobs):
        job = state.jobs[jid]
        if job.status is JobStatus.DONE:
            completion = job.completion_interval
        else:
            censored += 1
            completion = max_intervals - 1
        held = job.final_placement if job.status is JobStatus.DONE else job.placement
        w = sorted(g for k, g in held if k is TaskKind.WORKER)
        p = sorted(g for k, g in held if k is TaskKind.PS)
        rows.append({"job_id": jid, "type": job.spec.model_type_id,
                     "arrival": job.spec.arrival_interval, "completion": completion,
                     "jct": completion - job.spec.arrival_interval + 1,
                     "done": int(job.status is JobStatus.DONE),
                     "workers": ";".join(map(str, w)), "ps": ";".join(map(str, p))})
    return rows, censored


# -- training ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    system: object
    convergence: list
    final_eval: object
    best_epoch: int
    wall_seconds: float


def run_training(world, mode="multi", epochs=None, eval_every=None, seed=None, progress=None,
                 patience=None):
    """Train on the training split, evaluating greedily on the test split as it goes.

    Row 0 of the convergence curve is the untrained policy.  The returned
    system holds the final-epoch parameters.
    """
    cfg = world.cfg
    epochs = cfg.training.epochs if epochs is None else epochs
    eval_every = eval_every or cfg.training.eval_every
    patience = cfg.training.patience if patience is None else patience
    seed = cfg.seed if seed is None else seed
    system = make_system(world, mode, seed)
    policy = "marl" if mode == "multi" else "single"
    t0 = time.perf_counter()
    final = run_episode(world, world.test, policy, system, greedy=True)
    nan = float("nan")
    rows = [{"mode": mode, "epoch": 0, "actor_loss": nan, "critic_loss": nan,
             "train_jct": nan, "eval_jct": final.avg_jct}]
    if progress:
        progress(rows[0])
    best, stale = final.avg_jct, 0
    for epoch in range(1, epochs + 1):
        rng = np.random.default_rng([seed, epoch])
        tr = run_episode(world, world.train, policy, system, greedy=False, rng=rng, learn=True)
        a = float(np.mean([l[0] for l in tr.losses])) if tr.losses else nan
        c = float(np.mean([l[1] for l in tr.losses])) if tr.losses else nan
        row = {"mode": mode, "epoch": epoch, "actor_loss": a, "critic_loss": c,
               "train_jct": tr.avg_jct, "eval_jct": nan}
        if epoch % eval_every == 0 or epoch == epochs:
            final = run_episode(world, world.test, policy, system, greedy=True)
            row["eval_jct"] = final.avg_jct
            if final.avg_jct < best:
                best, stale = final.avg_jct, 0
            else:
                stale += 1
        rows.append(row)
        if progress:
            progress(row)
        if patience and stale >= patience:
            log.info("no new best evaluation in %d rounds; stopping at epoch %d", patience, epoch)
            if np.isnan(row["eval_jct"]):
                final = run_episode(world, world.test, policy, system, greedy=True)
                row["eval_jct"] = final.avg_jct
            break
    evals = [(r["eval_jct"], r["epoch"]) for r in rows if not np.isnan(r["eval_jct"])]
    best_epoch = min(evals)[1]
    return TrainResult(system, rows, final, best_epoch, time.perf_counter() - t0)


def run_eval(world, policy, system=None, split="test"):
    trace = {"test": world.test, "train": world.train, "all": world.trace}[split]
    if policy in ("marl", "single") and system is None:
        raise ValueError(f"policy {policy!r} needs a trained agent system")
    return run_episode(world, trace, policy, system, greedy=True)


def run_compare(world, policies=("tetris", "lb", "lif"), system=None):
    """Evaluate every policy on the same test trace; learned policies share ``system``."""
    return {p: run_eval(world, p, system if p in ("marl", "single") else None) for p in policies}


def run_ablation(world, epochs=None, seed=None, progress=None):
    """Train the multi-agent and single-agent modes on the same workload."""
    return {mode: run_training(world, mode, epochs, seed=seed, progress=progress)
            for mode in ("multi", "single")}


# -- outputs ------------------------------------------------------------------------------

def _write_csv(path, rows, header, config_hash):
    new = not os.path.exists(path)
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["config_hash"] + list(header))
        if new:
            w.writeheader()
        for r in rows:
            w.writerow({"config_hash": config_hash, **{k: r[k] for k in header}})


JOB_HEADER = ["job_id", "type", "arrival", "completion", "jct", "done", "workers", "ps"]
INTERVAL_HEADER = ["clock", "running", "completions", "mean_utilization", "mean_link_load"]
JCT_HEADER = ["policy", "seed", "avg_jct", "n_jobs", "censored"]
CONV_HEADER = ["mode", "epoch", "actor_loss", "critic_loss", "train_jct", "eval_jct"]


def write_outputs(out_dir, cfg, policy, result, convergence=None):
    os.makedirs(out_dir, exist_ok=True)
    h = cfg.config_hash()
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(cfg.model_dump(mode="json"), fh, indent=2, sort_keys=True)
    _write_csv(os.path.join(out_dir, "jobs.csv"), [dict(r, policy=policy) for r in result.jobs],
               JOB_HEADER, h)
    _write_csv(os.path.join(out_dir, "intervals.csv"), result.intervals, INTERVAL_HEADER, h)
    _write_csv(os.path.join(out_dir, "jct.csv"),
               [{"policy": policy, "seed": cfg.seed, "avg_jct": result.avg_jct,
                 "n_jobs": len(result.jobs), "censored": result.censored}], JCT_HEADER, h)
    if convergence:
        _write_csv(os.path.join(out_dir, "convergence.csv"), convergence, CONV_HEADER, h)


GNUPLOT = """set datafile separator ','
set xlabel 'epoch'
set ylabel 'average JCT (intervals)'
plot '{path}' using 3:7 every ::1 with lines title 'eval JCT'
"""


def write_gnuplot(out_dir):
    path = os.path.join(out_dir, "convergence.gp")
    with open(path, "w") as fh:
        fh.write(GNUPLOT.format(path="convergence.csv"))
    return path
