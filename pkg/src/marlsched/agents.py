"""Graph actor-critic scheduling agents.

Each agent encodes its partition with an inner ECC stack, flattens the GPU
group embeddings together with its job table and the current task into an
observation, and encodes that into ``z0``.  In multi-agent mode every agent's
``z0`` is then mixed over the inter-scheduler graph; the agent state is the
concatenation of its own layer outputs.  Actor and critic heads share the
encoders.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from .neural import tensor as T
from .neural.checkpoint import CheckpointError, load_arrays, save_arrays
from .neural.layers import Dense, EccLayer, GraphIndex, glorot
from .neural.optim import Adam
from .neural.tensor import NoFeasibleAction, masked_log_softmax, masked_softmax, no_grad
from .sim import TaskKind
from .workload import L, encode_job_demand, encode_job_onehot

log = logging.getLogger(__name__)

ACTOR_INIT_SCALE = 0.01


@dataclass
class AgentConfig:
    n_slots: int = 50
    inner_width: int = 32
    inner_layers: int = 4
    encoder_width: int = 64
    inter_width: int = 64
    inter_layers: int = 2
    hidden: int = 128
    gamma: float = 0.9
    lr: float = 1e-5
    value_coef: float = 1.0
    entropy_coef: float = 0.0
    filter_mode: str = "matrix"
    share_weights: bool = False


def task_vector(job, kind, n_types):
    """[is_ps, one-hot type, num_workers, worker demand, num_ps, ps demand]."""
    flag = 1.0 if kind is TaskKind.PS else 0.0
    return np.concatenate([[flag], encode_job_onehot(job, n_types), encode_job_demand(job, L)])


def task_vector_dim(n_types):
    return (1 + n_types) + 2 * (1 + L)


class SlotAllocator:
    """Stable job -> slot map; the lowest free slot is handed out first."""

    def __init__(self, n_slots):
        self.n_slots = n_slots
        self.slot_of = {}
        self.version = 0

    def ensure(self, job_id):
        if job_id in self.slot_of:
            return self.slot_of[job_id]
        used = set(self.slot_of.values())
        for s in range(self.n_slots):
            if s not in used:
                self.slot_of[job_id] = s
                self.version += 1
                return s
        return None

    def has_room(self, job_id):
        return job_id in self.slot_of or len(self.slot_of) < self.n_slots

    def release(self, job_id):
        if self.slot_of.pop(job_id, None) is not None:
            self.version += 1


# -- loss ------------------------------------------------------------------------

def actor_critic_losses(logits, values, masks, actions, rewards, next_values, dones, gamma,
                        entropy_coef=0.0):
    """Advantage actor-critic losses averaged over a batch.

    ``next_values`` is a plain array: the bootstrap carries no gradient.
    Returns ``(actor_loss, critic_loss, delta)`` with the losses as Tensors.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    boot = gamma * np.asarray(next_values, dtype=np.float64) * (1.0 - np.asarray(dones, np.float64))
    target = rewards + boot
    delta = T.sub(target, T.reshape(values, (-1,)))
    logp = masked_log_softmax(logits, masks)
    chosen = T.pick(logp, actions)
    actor = T.mul(T.mean(T.mul(chosen, delta.value)), -1.0)
    if entropy_coef:
        probs = masked_softmax(logits, masks)
        ent = T.mul(T.mean(T.tsum(T.mul(probs, logp), axis=-1)), entropy_coef)
        actor = T.add(actor, ent)
    critic = T.mean(T.square(delta))
    return actor, critic, delta.value


def select_action(logits, mask, greedy, rng):
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise NoFeasibleAction("every action is masked")
    if greedy:
        return int(np.argmax(np.where(mask, logits, -np.inf)))
    probs = masked_softmax(logits, mask).value
    return int(rng.choice(len(probs), p=probs))


# -- networks ---------------------------------------------------------------------

class PolicyNet:
    """Parameters and forward passes of one agent (possibly shared)."""

    def __init__(self, cfg, feat_dim, obs_dim, n_actions, multi, rng):
        self.cfg = cfg
        self.multi = multi
        widths = [feat_dim] + [cfg.inner_width] * cfg.inner_layers
        self.inner = [EccLayer(a, b, rng=rng, filter_mode=cfg.filter_mode)
                      for a, b in zip(widths[:-1], widths[1:])]
        self.encoder = Dense(obs_dim, cfg.encoder_width, "relu", rng)
        iw = [cfg.encoder_width] + [cfg.inter_width] * cfg.inter_layers
        self.inter = [EccLayer(a, b, rng=rng, filter_mode=cfg.filter_mode)
                      for a, b in zip(iw[:-1], iw[1:])] if multi else []
        self.state_dim = cfg.encoder_width + (cfg.inter_width * cfg.inter_layers if multi else 0)
        # shrunken output weights: a fresh policy is near-uniform but has no tie-break bias
        self.actor = [Dense(self.state_dim, cfg.hidden, "relu", rng),
                      Dense(cfg.hidden, n_actions, "identity", rng,
                            weight=ACTOR_INIT_SCALE * glorot(rng, n_actions, cfg.hidden))]
        self.critic = [Dense(self.state_dim, cfg.hidden, "relu", rng),
                       Dense(cfg.hidden, 1, "identity", rng)]
        self.opt = Adam(self.params(), lr=cfg.lr)

    def layers(self):
        return self.inner + [self.encoder] + self.inter + self.actor + self.critic

    def params(self):
        return [p for layer in self.layers() for p in layer.params()]

    def z0(self, feat, edges, table, task, gindex, group_rows):
        h = feat
        for layer in self.inner:
            h = layer(h, gindex, edges)
        H = T.take(h, group_rows, axis=-2)
        lead = H.shape[:-2]
        H = T.reshape(H, lead + (H.shape[-2] * H.shape[-1],))
        return self.encoder(T.concat([table, H, task], axis=-1))

    def state(self, z0, inter_feat, inter_edges, own, inter_index):
        """(z0, z1[own], ..., zK[own]) with ``own``'s row of the inter features replaced by ``z0``."""
        if not self.multi:
            return z0
        lead = z0.shape[:-1]
        row = T.reshape(z0, lead + (1, z0.shape[-1]))
        h = T.concat([inter_feat[..., :own, :], row, inter_feat[..., own + 1:, :]], axis=-2)
        parts = [z0]
        for layer in self.inter:
            h = layer(h, inter_index, inter_edges)
            parts.append(T.reshape(T.take(h, [own], axis=-2), lead + (h.shape[-1],)))
        return T.concat(parts, axis=-1)

    def heads(self, s):
        a = s
        for layer in self.actor:
            a = layer(a)
        v = s
        for layer in self.critic:
            v = layer(v)
        return a, v


@dataclass
class Sample:
    feat: np.ndarray
    edges: np.ndarray
    table: np.ndarray
    task: np.ndarray
    inter_feat: np.ndarray
    inter_edges: np.ndarray
    mask: np.ndarray
    action: int
    job_id: int
    agent_id: int
    reward: float = 0.0
    done: bool = False


@dataclass
class TrainStats:
    actor_loss: list = field(default_factory=list)
    critic_loss: list = field(default_factory=list)
    skipped: int = 0


class SchedulerAgent:
    def __init__(self, agent_id, topo, cfg, n_types, multi=True, rng=None, net=None):
        self.agent_id = agent_id
        self.topo = topo
        self.cfg = cfg
        self.n_types = n_types
        self.multi = multi
        self.graph = topo.inner_graph(agent_id) if multi else topo.full_graph()
        self.gindex = GraphIndex(len(self.graph.node_ids), self.graph.edges)
        local = {n: i for i, n in enumerate(self.graph.node_ids)}
        gpu = set(topo.gpu_groups)
        self.group_ids = np.array([n for n in self.graph.node_ids if n in gpu], dtype=np.int64)
        self.group_rows = np.array([local[g] for g in self.group_ids], dtype=np.int64)
        self.M = len(self.group_ids)
        if self.M == 0:
            raise ValueError(f"scheduler {agent_id} manages no GPU groups")
        self.S = topo.n_schedulers if multi else 0
        self.n_actions = self.M + self.S
        self.slots = SlotAllocator(cfg.n_slots)
        self.feat_dim = L + 2 * cfg.n_slots + 2
        self.table_dim = cfg.n_slots * (n_types + 2 * (1 + L))
        self.obs_dim = self.table_dim + self.M * cfg.inner_width + task_vector_dim(n_types)
        rng = rng if rng is not None else np.random.default_rng(agent_id)
        self.net = net or PolicyNet(cfg, self.feat_dim, self.obs_dim, self.n_actions, multi, rng)
        self.pending = []
        self.carry = None
        self.stats = TrainStats()
        self._edge_cache = (None, None)

    # -- observation ------------------------------------------------------------
    def node_features(self, state, current=None):
        """h0 rows: free L-vector (as a fraction of capacity), per-slot (workers, ps)
        counts, and the current job's own counts."""
        n = len(self.graph.node_ids)
        feat = np.zeros((n, self.feat_dim))
        N = self.cfg.n_slots
        for row, g in zip(self.group_rows, self.group_ids):
            feat[row, :L] = state.free_vector(g) / state.capacity_vector(g)
            for jid, (w, p) in state.placements[g].items():
                slot = self.slots.slot_of.get(jid)
                if slot is not None:
                    feat[row, L + 2 * slot] = w
                    feat[row, L + 2 * slot + 1] = p
                if jid == current:
                    feat[row, L + 2 * N] = w
                    feat[row, L + 2 * N + 1] = p
        return feat

    def edge_features(self, state):
        key = (id(state), state.clock)
        if self._edge_cache[0] != key:
            ev = self.graph.edge_vectors(state.link_load, self.topo.link_capacity)
            self._edge_cache = (key, self.gindex.directed(ev))
        return self._edge_cache[1]

    def job_table(self, state):
        """Flattened x (N x Y one-hot types) then r (N x 2(1+L) demands)."""
        N, Y = self.cfg.n_slots, self.n_types
        x = np.zeros((N, Y))
        r = np.zeros((N, 2 * (1 + L)))
        for jid, slot in self.slots.slot_of.items():
            spec = state.jobs[jid].spec
            x[slot] = encode_job_onehot(spec, Y)
            r[slot] = encode_job_demand(spec, L)
        return np.concatenate([x.ravel(), r.ravel()])

    def observe(self, state, job_id=None, kind=None):
        feat = self.node_features(state, job_id)
        task = (task_vector(state.jobs[job_id].spec, kind, self.n_types) if job_id is not None
                else np.zeros(task_vector_dim(self.n_types)))
        return feat, self.edge_features(state), self.job_table(state), task

    def z0(self, feat, edges, table, task):
        return self.net.z0(feat, edges, table, task, self.gindex, self.group_rows)

    # -- masks ------------------------------------------------------------------
    def feasible(self, state, demand):
        return state.feasible_groups(self.group_ids, demand)

    def mask(self, state, job_id, kind, forwarded, system):
        demand = state.jobs[job_id].demand(kind)
        m = np.zeros(self.n_actions, dtype=bool)
        m[:self.M] = self.feasible(state, demand)
        if self.multi and not forwarded:
            for u, other in enumerate(system.agents):
                if u != self.agent_id and other.slots.has_room(job_id):
                    m[self.M + u] = bool(other.feasible(state, demand).any())
        return m

    # -- training -----------------------------------------------------------------
    def _batch_states(self, samples):
        feat = np.stack([s.feat for s in samples])
        edges = np.stack([s.edges for s in samples])
        table = np.stack([s.table for s in samples])
        task = np.stack([s.task for s in samples])
        z0 = self.z0(feat, edges, table, task)
        if not self.multi:
            return z0
        inter_feat = np.stack([s.inter_feat for s in samples])
        inter_edges = np.stack([s.inter_edges for s in samples])
        return self.net.state(z0, inter_feat, inter_edges, self.agent_id, self.system_inter_index)

    def train_on(self, samples, next_sample):
        """One Adam step on ``samples``; ``next_sample`` supplies the last s' (None: terminal)."""
        if not samples:
            raise ValueError("empty batch")
        seq = list(samples) + ([next_sample] if next_sample is not None else [])
        states = self._batch_states(seq)
        logits, values = self.net.heads(states)
        B = len(samples)
        v_all = values.value.reshape(-1)
        next_v = np.zeros(B)
        next_v[:len(seq) - 1] = v_all[1:]
        dones = np.array([s.done for s in samples], dtype=np.float64)
        if next_sample is None:
            dones[-1] = 1.0
        lg = T.take(logits, np.arange(B), axis=0)
        vs = T.take(values, np.arange(B), axis=0)
        masks = np.stack([s.mask for s in samples])
        actions = np.array([s.action for s in samples])
        rewards = np.array([s.reward for s in samples])
        actor, critic, _ = actor_critic_losses(lg, vs, masks, actions, rewards, next_v, dones,
                                               self.cfg.gamma, self.cfg.entropy_coef)
        total = T.add(actor, T.mul(critic, self.cfg.value_coef))
        if not np.isfinite(total.value):
            self.stats.skipped += 1
            log.warning("agent %d: non-finite loss, batch skipped", self.agent_id)
            return None
        self.net.opt.zero_grad()
        total.backward()
        if not self.net.opt.step():
            self.stats.skipped += 1
            return None
        a, c = float(actor.value), float(critic.value)
        self.stats.actor_loss.append(a)
        self.stats.critic_loss.append(c)
        return a, c

    def end_interval(self, rewards, completed, learn=True):
        """Attach rewards to this interval's samples and train on those whose s' is known."""
        for s in self.pending:
            s.reward = rewards.get(s.job_id, 0.0)
            s.done = s.job_id in completed
        chain = ([self.carry] if self.carry is not None else []) + self.pending
        self.pending = []
        if not chain:
            return None
        self.carry = chain[-1]
        batch = chain[:-1]
        if learn and batch:
            return self.train_on(batch, self.carry)
        return None

    def end_episode(self, learn=True):
        out = None
        if learn and self.carry is not None:
            out = self.train_on([self.carry], None)
        self.carry = None
        self.pending = []
        return out


class AgentSystem:
    """All agents of one run plus the inter-scheduler plumbing."""

    def __init__(self, topo, cfg, n_types, multi=True, seed=0):
        self.topo = topo
        self.cfg = cfg
        self.multi = multi
        self.n_types = n_types
        rng = np.random.default_rng(seed)
        if multi:
            self.agents = []
            for v in range(topo.n_schedulers):
                shared = self.agents[0].net if (cfg.share_weights and self.agents) else None
                agent = SchedulerAgent(v, topo, cfg, n_types, True, rng, net=shared)
                if shared is not None and agent.n_actions != self.agents[0].n_actions:
                    raise ValueError("weight sharing needs partitions of equal size")
                self.agents.append(agent)
            self.inter = topo.inter_graph()
            self.inter_index = GraphIndex(len(self.inter.node_ids), self.inter.edges)
            for a in self.agents:
                a.system_inter_index = self.inter_index
        else:
            single_cfg = cfg
            self.agents = [SchedulerAgent(0, topo, single_cfg, n_types, False, rng)]
            self.inter = None
        self._z0_cache = {}
        self._inter_edge_cache = (None, None)

    def reset(self):
        """Fresh per-episode bookkeeping; parameters and optimiser state are kept."""
        for a in self.agents:
            a.slots = SlotAllocator(a.cfg.n_slots)
            a.pending, a.carry = [], None
            a._edge_cache = (None, None)
        self._z0_cache = {}
        self._inter_edge_cache = (None, None)

    @property
    def nets(self):
        seen, out = set(), []
        for a in self.agents:
            if id(a.net) not in seen:
                seen.add(id(a.net))
                out.append(a.net)
        return out

    def agent_for(self, job):
        return self.agents[job.spec.home_scheduler] if self.multi else self.agents[0]

    # -- inter graph ----------------------------------------------------------------
    def inter_edges(self, state):
        key = (id(state), state.clock)
        if self._inter_edge_cache[0] != key:
            ev = self.inter.edge_vectors(state.link_load, self.topo.link_capacity)
            self._inter_edge_cache = (key, self.inter_index.directed(ev))
        return self._inter_edge_cache[1]

    def idle_z0(self, state, v):
        """z0 an agent publishes when it has no task in hand (cached per partition state)."""
        agent = self.agents[v]
        key = (id(state), state.clock, int(state.versions[v]), agent.slots.version,
               agent.net.opt.t)
        hit = self._z0_cache.get(v)
        if hit is not None and hit[0] == key:
            return hit[1]
        with no_grad():
            z = agent.z0(*agent.observe(state)).value
        self._z0_cache[v] = (key, z)
        return z

    def inter_inputs(self, state, v):
        n = len(self.inter.node_ids)
        feat = np.zeros((n, self.cfg.encoder_width))
        for u in range(len(self.agents)):
            if u != v:
                feat[u] = self.idle_z0(state, u)
        return feat, self.inter_edges(state)

    # -- acting -----------------------------------------------------------------------
    def decide(self, state, v, job_id, kind, forwarded, greedy, rng, record):
        """Run one inference at agent ``v``; returns the action index or None if masked out."""
        agent = self.agents[v]
        if agent.slots.ensure(job_id) is None:
            return None
        mask = agent.mask(state, job_id, kind, forwarded, self)
        if not mask.any():
            return None
        feat, edges, table, task = agent.observe(state, job_id, kind)
        if self.multi:
            inter_feat, inter_edges = self.inter_inputs(state, v)
        else:
            inter_feat = inter_edges = None
        with no_grad():
            z0 = agent.z0(feat, edges, table, task)
            s = agent.net.state(z0, inter_feat, inter_edges, v, getattr(self, "inter_index", None))
            logits, _ = agent.net.heads(s)
        a = select_action(logits.value, mask, greedy, rng)
        if record:
            agent.pending.append(Sample(feat, edges, table, task, inter_feat, inter_edges, mask, a,
                                        job_id, v))
        return a

    def place_task(self, state, v, job_id, kind, greedy, rng, record, forwarded=False):
        a = self.decide(state, v, job_id, kind, forwarded, greedy, rng, record)
        if a is None:
            return False
        agent = self.agents[v]
        if a < agent.M:
            state.apply_placement(job_id, kind, int(agent.group_ids[a]))
            return True
        return self.place_task(state, a - agent.M, job_id, kind, greedy, rng, record, True)

    def place_job(self, state, job_id, greedy, rng, record):
        """Place the job's pending tasks in order; stop at the first deferral."""
        job = state.jobs[job_id]
        v = job.spec.home_scheduler if self.multi else 0
        for kind in job.pending_tasks():
            if not self.place_task(state, v, job_id, kind, greedy, rng, record):
                return False
        return True

    def release_slots(self, state):
        """Free slots of finished jobs and of jobs no longer present at an agent."""
        for agent in self.agents:
            groups = set(int(g) for g in agent.group_ids)
            for jid in list(agent.slots.slot_of):
                job = state.jobs[jid]
                home = agent.agent_id == job.spec.home_scheduler or not self.multi
                if job.status.value == "done":
                    agent.slots.release(jid)
                elif not any(g in groups for _, g in job.placement) and not (
                        home and not job.fully_placed):
                    agent.slots.release(jid)

    def end_interval(self, state, rewards, completed, learn=True):
        self.release_slots(state)
        return [a.end_interval(rewards, completed, learn) for a in self.agents]

    def end_episode(self, learn=True):
        return [a.end_episode(learn) for a in self.agents]

    # -- persistence --------------------------------------------------------------------
    def save(self, path):
        arrays = []
        for i, net in enumerate(self.nets):
            arrays += [(f"net{i}.p{j}", p.value) for j, p in enumerate(net.params())]
        save_arrays(path, arrays)

    def load(self, path):
        arrays = dict(load_arrays(path))
        for i, net in enumerate(self.nets):
            for j, p in enumerate(net.params()):
                key = f"net{i}.p{j}"
                if key not in arrays or arrays[key].shape != p.value.shape:
                    raise CheckpointError(f"checkpoint does not match parameter {key}")
                p.value = arrays[key].copy()
