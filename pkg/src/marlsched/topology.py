"""Datacenter topologies with per-server CPU / GPU-group structure.

Servers are expanded into CPU nodes and GPU-group nodes (one PCIe switch
each).  Network uplinks leave a server from its first CPU.  Every
non-core node belongs to exactly one scheduler partition; core-tier
switches are shared.
"""
import enum
from collections import deque
from dataclasses import dataclass, field

import numpy as np


class NodeKind(enum.Enum):
    GPU_GROUP = "gpu_group"
    CPU = "cpu"
    SWITCH = "switch"


class Tier(enum.IntEnum):
    PCIE = 0
    EDGE = 1
    AGGREGATION = 2
    CORE = 3


class LinkKind(enum.Enum):
    PCIE = "pcie"
    SOCKET = "socket"
    NETWORK = "network"


EDGE_VECTOR_DIM = 2 + len(Tier)


class TopologyError(ValueError):
    pass


class UnknownScheduler(KeyError):
    pass


@dataclass(frozen=True)
class ServerArch:
    cpus: int = 2
    cores_per_cpu: int = 8
    gpu_groups_per_cpu: int = 1
    gpus_per_group: int = 2
    pcie_bw: float = 128.0
    intra_server_bw: float = 300.0

    def __post_init__(self):
        for name in ("cpus", "cores_per_cpu", "gpu_groups_per_cpu", "gpus_per_group"):
            if getattr(self, name) < 1:
                raise TopologyError(f"ServerArch.{name} must be >= 1")
        if self.pcie_bw <= 0 or self.intra_server_bw <= 0:
            raise TopologyError("ServerArch bandwidths must be positive")


DEFAULT_ARCH = ServerArch()
DGX_ARCH = ServerArch(cpus=2, cores_per_cpu=16, gpus_per_group=4)
SMALL_ARCH = ServerArch(cpus=1, cores_per_cpu=8, gpus_per_group=2)
ARCH_PRESETS = {"default": DEFAULT_ARCH, "dgx": DGX_ARCH, "small": SMALL_ARCH}
# 20% small / 40% default / 40% DGX-like servers within every partition.
PAPER_MIX = (("small", 0.2), ("default", 0.4), ("dgx", 0.4))


def mixed_arch(servers_per_partition, mix=PAPER_MIX, presets=None):
    """Arch lookup assigning contiguous server ranges of each partition by fraction."""
    presets = presets or ARCH_PRESETS
    bounds, acc = [], 0.0
    for name, frac in mix:
        acc += frac
        bounds.append((round(acc * servers_per_partition), presets[name]))

    def arch_for(global_index, local_index):
        for bound, arch in bounds:
            if local_index < bound:
                return arch
        return bounds[-1][1]

    return arch_for


def _arch_lookup(arch):
    if isinstance(arch, ServerArch):
        return lambda g, l: arch
    if callable(arch):
        return arch
    seq = list(arch)
    return lambda g, l: seq[g]


@dataclass(frozen=True)
class Node:
    id: int
    kind: NodeKind
    tier: Tier
    server_id: int | None
    partition_id: int | None


@dataclass(frozen=True)
class Link:
    id: int
    u: int
    v: int
    capacity: float
    tier: Tier
    kind: LinkKind = LinkKind.NETWORK


@dataclass(frozen=True)
class Server:
    id: int
    arch: ServerArch
    partition_id: int
    cpus: tuple
    groups: tuple  # groups[c] = GPU-group node ids under CPU c


@dataclass
class Partition:
    scheduler_id: int
    nodes: frozenset
    gpu_groups: tuple
    servers: tuple


@dataclass
class Graph:
    """A node list plus undirected edges carrying EdgeVectors.

    ``edges`` holds (local u, local w) index pairs into ``node_ids``;
    ``edge_links[i]`` lists the physical links behind edge ``i`` (several
    for aggregated core links).
    """
    node_ids: list
    edges: list
    edge_links: list
    capacity: np.ndarray
    tiers: np.ndarray
    max_capacity: float
    labels: list = field(default_factory=list)

    def index_of(self, node_id):
        return self.node_ids.index(node_id)

    def edge_vectors(self, link_load=None, link_capacity=None):
        """(E, 6) array: [capacity / max, load, one-hot tier]."""
        n = len(self.edges)
        out = np.zeros((n, EDGE_VECTOR_DIM))
        if n == 0:
            return out
        out[:, 0] = self.capacity / self.max_capacity
        if link_load is not None:
            for i, links in enumerate(self.edge_links):
                if len(links) == 1:
                    out[i, 1] = link_load[links[0]]
                else:
                    caps = link_capacity[links]
                    out[i, 1] = float(np.dot(link_load[links], caps) / caps.sum())
        np.clip(out[:, 1], 0.0, 1.0, out=out[:, 1])
        out[np.arange(n), 2 + self.tiers] = 1.0
        return out


class ClusterTopology:
    def __init__(self, family, nodes, links, partitions, servers, params=None):
        self.family = family
        self.params = dict(params or {})
        self.nodes = nodes
        self.links = links
        self.partitions = partitions
        self.servers = servers
        self.adjacency = [[] for _ in nodes]
        for link in links:
            self.adjacency[link.u].append((link.v, link.id))
            self.adjacency[link.v].append((link.u, link.id))
        for adj in self.adjacency:
            adj.sort()
        self.link_capacity = np.array([l.capacity for l in links], dtype=np.float64)
        self.gpu_groups = tuple(n.id for n in nodes if n.kind is NodeKind.GPU_GROUP)
        self.cpu_nodes = tuple(n.id for n in nodes if n.kind is NodeKind.CPU)
        self.core_switches = tuple(
            n.id for n in nodes if n.kind is NodeKind.SWITCH and n.partition_id is None
        )
        self.group_cpu, self.group_server, self.cpu_server = {}, {}, {}
        for s in servers:
            for c, groups in zip(s.cpus, s.groups):
                self.cpu_server[c] = s.id
                for g in groups:
                    self.group_cpu[g] = c
                    self.group_server[g] = s.id
        self._dist_cache = {}
        self._path_cache = {}
        self._inter = None
        self.max_capacity = float(self.link_capacity.max()) if links else 1.0
        inter_caps = [sum(self.links[l].capacity for l in ls) for ls in self._inter_edge_links().values()]
        if inter_caps:
            self.max_capacity = max(self.max_capacity, max(inter_caps))
        self._check_connected()

    # -- structure -------------------------------------------------------
    @property
    def n_schedulers(self):
        return len(self.partitions)

    def partition(self, scheduler_id):
        if not 0 <= scheduler_id < len(self.partitions):
            raise UnknownScheduler(scheduler_id)
        return self.partitions[scheduler_id]

    def server_arch(self, server_id):
        return self.servers[server_id].arch

    def _check_connected(self):
        if not self.nodes:
            raise TopologyError("empty topology")
        seen = np.zeros(len(self.nodes), dtype=bool)
        seen[0] = True
        queue = deque([0])
        while queue:
            u = queue.popleft()
            for w, _ in self.adjacency[u]:
                if not seen[w]:
                    seen[w] = True
                    queue.append(w)
        if not seen.all():
            raise TopologyError("topology graph is not connected")

    # -- routing -------------------------------------------------------------
    def _distances(self, dst):
        dist = self._dist_cache.get(dst)
        if dist is None:
            dist = np.full(len(self.nodes), -1, dtype=np.int64)
            dist[dst] = 0
            queue = deque([dst])
            while queue:
                u = queue.popleft()
                for w, _ in self.adjacency[u]:
                    if dist[w] < 0:
                        dist[w] = dist[u] + 1
                        queue.append(w)
            self._dist_cache[dst] = dist
        return dist

    def path(self, src, dst):
        """Link ids of the hop-count shortest path; ties go to the lowest next node id."""
        key = (src, dst)
        cached = self._path_cache.get(key)
        if cached is not None:
            return cached
        dist = self._distances(dst)
        if dist[src] < 0:
            raise TopologyError(f"no path {src} -> {dst}")
        links, cur = [], src
        while cur != dst:
            for w, lid in self.adjacency[cur]:
                if dist[w] == dist[cur] - 1:
                    links.append(lid)
                    cur = w
                    break
        out = tuple(links)
        self._path_cache[key] = out
        return out

    # -- graphs ----------------------------------------------------------------
    def _graph(self, node_ids, link_filter):
        node_ids = sorted(node_ids)
        local = {n: i for i, n in enumerate(node_ids)}
        edges, edge_links, caps, tiers = [], [], [], []
        for link in self.links:
            if link.u in local and link.v in local and link_filter(link):
                edges.append((local[link.u], local[link.v]))
                edge_links.append([link.id])
                caps.append(link.capacity)
                tiers.append(int(link.tier))
        return Graph(node_ids, edges, edge_links, np.array(caps, dtype=np.float64),
                     np.array(tiers, dtype=np.int64), self.max_capacity,
                     labels=[self.nodes[n].kind.value for n in node_ids])

    def inner_graph(self, scheduler_id):
        part = self.partition(scheduler_id)
        return self._graph(part.nodes, lambda link: True)

    def full_graph(self):
        return self._graph(range(len(self.nodes)), lambda link: True)

    def _inter_edge_links(self):
        agg = {}
        for link in self.links:
            pu, pv = self.nodes[link.u].partition_id, self.nodes[link.v].partition_id
            if pu is None and pv is None:
                key = ("switch", min(link.u, link.v), "switch", max(link.u, link.v))
            elif pu is None:
                key = ("sched", pv, "switch", link.u)
            elif pv is None:
                key = ("sched", pu, "switch", link.v)
            elif pu != pv:
                a, b = sorted((pu, pv))
                key = ("sched", a, "sched", b)
            else:
                continue
            agg.setdefault(key, []).append(link.id)
        return agg

    def inter_graph(self):
        """Scheduler nodes (0..S-1) then connected core switches, with aggregated edges."""
        if self._inter is not None:
            return self._inter
        agg = self._inter_edge_links()
        switches = sorted({k[3] for k in agg if k[2] == "switch"} |
                          {k[1] for k in agg if k[0] == "switch"})
        labels = [("sched", p) for p in range(self.n_schedulers)] + [("switch", s) for s in switches]
        local = {lab: i for i, lab in enumerate(labels)}
        edges, edge_links, caps, tiers = [], [], [], []
        for key in sorted(agg, key=lambda k: (local[(k[0], k[1])], local[(k[2], k[3])])):
            lids = agg[key]
            edges.append((local[(key[0], key[1])], local[(key[2], key[3])]))
            edge_links.append(lids)
            caps.append(sum(self.links[l].capacity for l in lids))
            tiers.append(max(int(self.links[l].tier) for l in lids))
        node_ids = [None] * self.n_schedulers + switches
        self._inter = Graph(node_ids, edges, edge_links, np.array(caps, dtype=np.float64),
                            np.array(tiers, dtype=np.int64), self.max_capacity, labels=labels)
        return self._inter

    def summary(self):
        kinds = {k: 0 for k in NodeKind}
        for n in self.nodes:
            kinds[n.kind] += 1
        return {
            "family": self.family,
            "servers": len(self.servers),
            "partitions": self.n_schedulers,
            "gpu_groups": kinds[NodeKind.GPU_GROUP],
            "cpus": kinds[NodeKind.CPU],
            "switches": kinds[NodeKind.SWITCH],
            "core_switches": len(self.core_switches),
            "links": len(self.links),
        }


class _Builder:
    def __init__(self, arch):
        self.nodes, self.links, self.servers = [], [], []
        self.arch_for = _arch_lookup(arch)
        self.local_count = {}

    def node(self, kind, tier, partition, server=None):
        nid = len(self.nodes)
        self.nodes.append(Node(nid, kind, tier, server, partition))
        return nid

    def link(self, u, v, capacity, tier, kind=LinkKind.NETWORK):
        if u == v:
            raise TopologyError("self loop")
        if capacity <= 0:
            raise TopologyError("link capacity must be positive")
        self.links.append(Link(len(self.links), u, v, float(capacity), Tier(tier), kind))

    def switch(self, tier, partition):
        return self.node(NodeKind.SWITCH, tier, partition)

    def server(self, partition):
        sid = len(self.servers)
        local = self.local_count.get(partition, 0)
        self.local_count[partition] = local + 1
        arch = self.arch_for(sid, local)
        cpus, groups = [], []
        for _ in range(arch.cpus):
            c = self.node(NodeKind.CPU, Tier.PCIE, partition, sid)
            cpus.append(c)
            gs = []
            for _ in range(arch.gpu_groups_per_cpu):
                g = self.node(NodeKind.GPU_GROUP, Tier.PCIE, partition, sid)
                self.link(g, c, arch.pcie_bw, Tier.PCIE, LinkKind.PCIE)
                gs.append(g)
            groups.append(tuple(gs))
        for i in range(len(cpus)):
            for j in range(i + 1, len(cpus)):
                self.link(cpus[i], cpus[j], arch.intra_server_bw, Tier.PCIE, LinkKind.SOCKET)
        self.servers.append(Server(sid, arch, partition, tuple(cpus), tuple(groups)))
        return cpus[0]

    def finish(self, family, n_partitions, params):
        parts = []
        for p in range(n_partitions):
            members = frozenset(n.id for n in self.nodes if n.partition_id == p)
            groups = tuple(sorted(n.id for n in self.nodes
                                  if n.partition_id == p and n.kind is NodeKind.GPU_GROUP))
            servers = tuple(s.id for s in self.servers if s.partition_id == p)
            parts.append(Partition(p, members, groups, servers))
        return ClusterTopology(family, self.nodes, self.links, parts, self.servers, params)


def _check_tier_bw(tier_bw):
    if len(tier_bw) != 3 or any(b <= 0 for b in tier_bw):
        raise TopologyError("tier_bw must be three positive bandwidths (edge, agg, core)")


def build_fat_tree(k, arch=DEFAULT_ARCH, tier_bw=(10.0, 20.0, 40.0), pods=None,
                   servers_per_edge=None):
    """k-ary fat-tree with each pod's aggregation layer fused into one node.

    ``pods`` and ``servers_per_edge`` shrink the tree for desk-scale runs
    while keeping the k-derived edge/core counts.
    """
    if k < 2 or k % 2:
        raise TopologyError(f"fat-tree k must be even and >= 2, got {k}")
    _check_tier_bw(tier_bw)
    half = k // 2
    pods = k if pods is None else pods
    servers_per_edge = half if servers_per_edge is None else servers_per_edge
    if pods < 1 or servers_per_edge < 1:
        raise TopologyError("pods and servers_per_edge must be >= 1")
    b = _Builder(arch)
    aggs = []
    for p in range(pods):
        edges = []
        for _ in range(half):
            e = b.switch(Tier.EDGE, p)
            edges.append(e)
            for _ in range(servers_per_edge):
                up = b.server(p)
                b.link(up, e, tier_bw[0], Tier.EDGE)
        agg = b.switch(Tier.AGGREGATION, p)
        aggs.append(agg)
        for e in edges:
            # edge switch reaches all k/2 aggregation switches of its pod
            b.link(e, agg, half * tier_bw[1], Tier.AGGREGATION)
    for _ in range(half * half):
        c = b.switch(Tier.CORE, None)
        for agg in aggs:
            b.link(agg, c, tier_bw[2], Tier.CORE)
    params = {"k": k, "pods": pods, "servers_per_edge": servers_per_edge, "tier_bw": list(tier_bw)}
    return b.finish("fat_tree", pods, params)


def build_vl2(k_agg, servers_per_tor, arch=DEFAULT_ARCH, tier_bw=(1.0, 10.0, 10.0)):
    """VL2: k_agg/2 intermediate switches, k_agg^2/4 ToRs, one partition per aggregation switch."""
    if k_agg < 2 or k_agg % 2:
        raise TopologyError(f"VL2 k_agg must be even and >= 2, got {k_agg}")
    if servers_per_tor < 1:
        raise TopologyError("servers_per_tor must be >= 1")
    _check_tier_bw(tier_bw)
    n_tor = k_agg * k_agg // 4
    b = _Builder(arch)
    aggs = []
    for p in range(k_agg):
        agg = b.switch(Tier.AGGREGATION, p)
        aggs.append(agg)
        for t in range(n_tor):
            if t * k_agg // n_tor != p:
                continue
            tor = b.switch(Tier.EDGE, p)
            b.link(tor, agg, tier_bw[1], Tier.AGGREGATION)
            for _ in range(servers_per_tor):
                up = b.server(p)
                b.link(up, tor, tier_bw[0], Tier.EDGE)
    for _ in range(k_agg // 2):
        c = b.switch(Tier.CORE, None)
        for agg in aggs:
            b.link(agg, c, tier_bw[2], Tier.CORE)
    params = {"k_agg": k_agg, "servers_per_tor": servers_per_tor, "tier_bw": list(tier_bw)}
    return b.finish("vl2", k_agg, params)


def bcube_level_tier(level, group_level):
    if level > group_level:
        return Tier.CORE
    return Tier.EDGE if level == 0 else Tier.AGGREGATION


def build_bcube(n, levels, arch=DEFAULT_ARCH, tier_bw=(10.0, 20.0, 40.0), group_level=1,
                groups_per_partition=2):
    """BCube_levels over n-port switches.

    Each scheduler gets ``groups_per_partition`` consecutive BCube_{group_level}
    cells; switches above ``group_level`` are shared (core tier).
    """
    if n < 2 or levels < 0:
        raise TopologyError("BCube needs n >= 2 and levels >= 0")
    if group_level < 0 or groups_per_partition < 1:
        raise TopologyError("invalid BCube partition grouping")
    _check_tier_bw(tier_bw)
    n_servers = n ** (levels + 1)
    cell = n ** (min(group_level, levels) + 1)
    n_cells = n_servers // cell
    n_parts = -(-n_cells // groups_per_partition)
    b = _Builder(arch)
    server_part = [(s // cell) // groups_per_partition for s in range(n_servers)]
    switch_ids = {}
    uplinks = [None] * n_servers
    for p in range(n_parts):
        for s in range(n_servers):
            if server_part[s] != p:
                continue
            # switches owned by this partition are created just ahead of their first server
            for level in range(min(group_level, levels) + 1):
                key = (level, _bcube_switch_index(s, level, n))
                if key not in switch_ids:
                    switch_ids[key] = b.switch(bcube_level_tier(level, group_level), p)
            uplinks[s] = b.server(p)
    for level in range(group_level + 1, levels + 1):
        for j in range(n ** levels):
            switch_ids[(level, j)] = b.switch(Tier.CORE, None)
    for s in range(n_servers):
        for level in range(levels + 1):
            tier = bcube_level_tier(level, group_level)
            sw = switch_ids[(level, _bcube_switch_index(s, level, n))]
            b.link(uplinks[s], sw, tier_bw[min(int(tier), 3) - 1], tier)
    params = {"n": n, "levels": levels, "group_level": group_level,
              "groups_per_partition": groups_per_partition, "tier_bw": list(tier_bw)}
    return b.finish("bcube", n_parts, params)


def _bcube_switch_index(server, level, n):
    low = server % n ** level
    high = server // n ** (level + 1)
    return high * n ** level + low


def expected_servers(family, **p):
    """Closed-form server counts per family."""
    if family == "fat_tree":
        k = p["k"]
        return k * (k // 2) ** 2
    if family == "vl2":
        return p["k_agg"] ** 2 // 4 * p["servers_per_tor"]
    if family == "bcube":
        return p["n"] ** (p["levels"] + 1)
    raise TopologyError(f"unknown family {family!r}")


def build(spec):
    """Build from a plain dict (the ``topology`` section of an experiment config)."""
    spec = dict(spec)
    family = spec.pop("family")
    arch = spec.pop("arch", None)
    arch_mix = spec.pop("arch_mix", None)
    arch_obj = ServerArch(**arch) if isinstance(arch, dict) else (arch or DEFAULT_ARCH)
    if arch_mix:
        per_part = spec.pop("servers_per_partition", None)
        if per_part is None:
            raise TopologyError("arch_mix needs servers_per_partition")
        arch_obj = mixed_arch(per_part, [(m[0], m[1]) for m in arch_mix])
    if "tier_bw" in spec:
        spec["tier_bw"] = tuple(spec["tier_bw"])
    builders = {"fat_tree": build_fat_tree, "vl2": build_vl2, "bcube": build_bcube}
    if family not in builders:
        raise TopologyError(f"unknown topology family {family!r}")
    return builders[family](arch=arch_obj, **spec)
