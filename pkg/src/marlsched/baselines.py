"""Heuristic placement policies searching the whole cluster.

Each function returns a GPU-group node id, or ``None`` when no group can
host the task (the caller defers it).  Ties go to the lowest node id.
"""
import numpy as np

from .interference import total_slowdown
from .sim import TaskKind


def _feasible(state, demand):
    groups = np.asarray(state.topo.gpu_groups, dtype=np.int64)
    return groups[state.feasible_groups(groups, demand)]


def tetris_score(state, group, demand):
    """Alignment of the demand with the normalised free vector."""
    cap = state.capacity_vector(group)
    free = state.free_vector(group)
    ratio = np.divide(free, cap, out=np.zeros_like(free), where=cap > 0)
    return float(np.dot(demand, ratio))


def tetris_place(state, demand):
    best, best_score = None, -np.inf
    for g in _feasible(state, demand):
        s = tetris_score(state, g, demand)
        if s > best_score + 1e-12:
            best, best_score = int(g), s
    return best


def server_load(state, server_id):
    """Mean over resource types of used / capacity across the whole server."""
    server = state.topo.servers[server_id]
    groups = [g for gs in server.groups for g in gs]
    gpu_cap = state.gpu_cap[groups].sum()
    core_cap = state.core_cap[list(server.cpus)].sum()
    gpu_used = gpu_cap - state.gpu_free[groups].sum()
    core_used = core_cap - state.core_free[list(server.cpus)].sum()
    loads = [u / c for u, c in ((core_used, core_cap), (gpu_used, gpu_cap)) if c > 0]
    return float(np.mean(loads)) if loads else 0.0


def lb_place(state, demand):
    best, best_load = None, np.inf
    loads = {}
    for g in _feasible(state, demand):
        sid = state.topo.group_server[int(g)]
        if sid not in loads:
            loads[sid] = server_load(state, sid)
        if loads[sid] < best_load - 1e-12:
            best, best_load = int(g), loads[sid]
    return best


def _server_slowdown(state, server_id, extra=None):
    """Summed slowdown of every placed worker on a server, optionally with a hypothetical worker."""
    server = state.topo.servers[server_id]
    total = 0.0
    for gs in server.groups:
        for g in gs:
            for jid, (n_workers, _) in state.placements[g].items():
                if n_workers:
                    total += n_workers * total_slowdown(
                        state.context(jid, g, running_only=False, extra=extra), state.coeffs)
            if extra is not None and extra[1] == g:
                total += total_slowdown(state.context(extra[0], g, running_only=False),
                                        state.coeffs)
    return total


def interference_delta(state, job_id, kind, group):
    """Increase in summed slowdown on the group's server if the task lands there."""
    if kind is TaskKind.PS:
        return 0.0  # a PS adds no worker context
    sid = state.topo.group_server[group]
    return _server_slowdown(state, sid, (job_id, group)) - _server_slowdown(state, sid)


def lif_place(state, job_id, kind):
    demand = state.jobs[job_id].demand(kind)
    best, best_delta = None, np.inf
    for g in _feasible(state, demand):
        d = interference_delta(state, job_id, kind, int(g))
        if d < best_delta - 1e-12:
            best, best_delta = int(g), d
    return best


def random_place(state, demand, rng):
    """Uniform over feasible groups; a seeded reference point, not a heuristic."""
    feasible = _feasible(state, demand)
    return int(rng.choice(feasible)) if len(feasible) else None


POLICIES = ("tetris", "lb", "lif", "random")


def place(policy, state, job_id, kind, rng=None):
    demand = state.jobs[job_id].demand(kind)
    if policy == "random":
        if rng is None:
            raise ValueError("the random policy needs an rng")
        return random_place(state, demand, rng)
    if policy == "tetris":
        return tetris_place(state, demand)
    if policy == "lb":
        return lb_place(state, demand)
    if policy == "lif":
        return lif_place(state, job_id, kind)
    raise ValueError(f"unknown baseline policy {policy!r}")
