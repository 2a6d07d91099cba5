"""Dense and edge-conditioned graph convolution layers."""
import numpy as np
import scipy.sparse as sp

from . import tensor as T
from .tensor import Tensor

ACTIVATIONS = ("relu", "identity")
DENSE_LIMIT = 250_000


def param(value):
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True)


def _activate(x, activation):
    if activation == "relu":
        return T.relu(x)
    if activation == "identity":
        return x
    raise ValueError(f"unknown activation {activation!r}")


def glorot(rng, n_out, n_in):
    limit = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, size=(n_out, n_in))


class Dense:
    """y = act(W x + b)."""

    def __init__(self, n_in, n_out, activation="relu", rng=None, weight=None, bias=None):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_in, self.n_out = n_in, n_out
        self.activation = activation
        self.weight = param(glorot(rng, n_out, n_in) if weight is None else weight)
        self.bias = param(np.zeros(n_out) if bias is None else bias)
        if self.weight.shape != (n_out, n_in) or self.bias.shape != (n_out,):
            raise ValueError("weight/bias shape does not match layer dimensions")

    def params(self):
        return [self.weight, self.bias]

    def __call__(self, x):
        return dense_forward(self, x)


def dense_forward(layer, x):
    x = T.as_tensor(x)
    if x.shape[-1] != layer.n_in:
        raise ValueError(f"expected input width {layer.n_in}, got {x.shape[-1]}")
    return _activate(T.linear(x, layer.weight, layer.bias), layer.activation)


class GraphIndex:
    """Directed message edges of an undirected graph plus the mean-aggregation matrix.

    ``src[e] -> dst[e]`` carries node ``src``'s features to ``dst``.  Row ``u`` of
    ``mean_matrix`` averages the messages arriving at ``u``; isolated nodes get
    an all-zero row so their aggregate is the bias alone.
    """

    def __init__(self, n_nodes, pairs):
        pairs = list(pairs)
        src = [u for u, w in pairs] + [w for u, w in pairs]
        dst = [w for u, w in pairs] + [u for u, w in pairs]
        self.n_nodes = n_nodes
        self.n_undirected = len(pairs)
        self.src = np.asarray(src, dtype=np.int64)
        self.dst = np.asarray(dst, dtype=np.int64)
        deg = np.bincount(self.dst, minlength=n_nodes).astype(np.float64)
        weights = 1.0 / deg[self.dst] if len(self.dst) else np.zeros(0)
        self.mean_matrix = sp.csr_matrix(
            (weights, (self.dst, np.arange(len(self.dst)))), shape=(n_nodes, len(self.dst))
        )
        # small graphs aggregate faster through a dense matmul
        self.aggregator = (self.mean_matrix.toarray()
                           if n_nodes * len(self.dst) <= DENSE_LIMIT else self.mean_matrix)

    def directed(self, undirected_values):
        """Duplicate per-undirected-edge rows for both message directions."""
        v = np.asarray(undirected_values)
        return np.concatenate([v, v], axis=-2)


class EccLayer:
    """Edge-conditioned convolution with a linear filter generator.

    The filter for an edge with vector ``e`` is ``sum_j e_aug[j] * phi_j`` where
    ``e_aug = [1, e]`` and ``phi_j`` is the ``j``-th (d_in x d_in) block of
    ``phi`` (stored as (d_in, (1+edge_dim)*d_in)).  In ``scalar`` mode the
    generator emits a single weight per edge instead of a matrix.
    """

    def __init__(self, d_in, d_out, edge_dim=6, activation="relu", rng=None, filter_mode="matrix"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d_in, self.d_out, self.edge_dim = d_in, d_out, edge_dim
        self.filter_mode = filter_mode
        k = edge_dim + 1
        if filter_mode == "matrix":
            scale = 1.0 / np.sqrt(d_in * k)
            self.phi = param(rng.normal(0.0, scale, size=(d_in, k * d_in)))
        elif filter_mode == "scalar":
            self.phi = param(rng.normal(0.0, 1.0 / np.sqrt(k), size=(1, k)))
        else:
            raise ValueError(f"unknown filter mode {filter_mode!r}")
        self.bias = param(np.zeros(d_in))
        self.update = Dense(2 * d_in, d_out, activation, rng)

    def params(self):
        return [self.phi, self.bias] + self.update.params()

    def theta(self, edge_vector):
        """Aggregation weight matrix generated for one edge vector."""
        e_aug = np.concatenate([[1.0], np.asarray(edge_vector, dtype=np.float64)])
        if self.filter_mode == "scalar":
            return float(self.phi.value[0] @ e_aug) * np.eye(self.d_in)
        blocks = self.phi.value.reshape(self.d_in, self.edge_dim + 1, self.d_in)
        return np.einsum("j,ijk->ik", e_aug, blocks)

    def __call__(self, h, graph, edge_vectors):
        return ecc_update(self, h, ecc_aggregate(self, h, graph, edge_vectors))


def ecc_aggregate(layer, h, graph, edge_vectors):
    """Mean of ``Theta(E(u,w)) h_w`` over neighbours ``w`` of each node, plus bias.

    ``h`` has shape (..., n, d_in); ``edge_vectors`` has shape (..., E_dir, edge_dim)
    with one row per directed message edge of ``graph``.
    """
    h = T.as_tensor(h)
    ev = np.asarray(edge_vectors, dtype=np.float64)
    if h.shape[-1] != layer.d_in:
        raise ValueError(f"expected node width {layer.d_in}, got {h.shape[-1]}")
    if ev.shape[-1] != layer.edge_dim or ev.shape[-2] != len(graph.src):
        raise ValueError("edge vectors do not match the graph")
    if len(graph.src) == 0:
        return T.add(T.mul(h, 0.0), layer.bias)
    ones = np.ones(ev.shape[:-1] + (1,))
    e_aug = np.concatenate([ones, ev], axis=-1)
    hs = T.take(h, graph.src, axis=-2)
    if layer.filter_mode == "scalar":
        w = T.linear(e_aug, layer.phi)
        msg = T.mul(hs, w)
    else:
        k = layer.edge_dim + 1
        lead = hs.shape[:-1]
        outer = T.mul(e_aug.reshape(lead + (k, 1)), T.reshape(hs, lead + (1, layer.d_in)))
        msg = T.linear(T.reshape(outer, lead + (k * layer.d_in,)), layer.phi)
    return T.add(T.spmm(graph.aggregator, msg), layer.bias)


def ecc_update(layer, h_prev, aggregated):
    """act(W [h_prev, aggregated])."""
    return layer.update(T.concat([T.as_tensor(h_prev), T.as_tensor(aggregated)], axis=-1))
