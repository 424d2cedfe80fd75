"""Heterogeneous user-movie-review graph and the graph attention encoder.

Node types: user (N0), movie (N1), review (N2). Directed edge types:
E1 movie->review, E2 user->review, E3 review->user (one of each per
review, so |E1| = |E2| = |E3| = #reviews). Message passing aggregates
in-neighbors: a review receives from its movie and its user; a user
receives from all of their reviews.

Global node ids are laid out as [users | movies | reviews].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffcore import tensor as T
from .errors import ConfigError, ShapeError

EDGE_TYPES = ("movie_review", "user_review", "review_user")
NODE_USER, NODE_MOVIE, NODE_REVIEW = 0, 1, 2


class HeteroGraph:
    """Immutable typed graph with per-edge-type CSR in-neighbor access."""

    def __init__(self, n_users, n_movies, n_reviews, edges):
        self.n_users = n_users
        self.n_movies = n_movies
        self.n_reviews = n_reviews
        self.n_nodes = n_users + n_movies + n_reviews
        # edges: {etype: (src_global, dst_global)} int64 arrays
        self.edges = {
            et: (np.asarray(s, dtype=np.int64), np.asarray(d, dtype=np.int64))
            for et, (s, d) in edges.items()
        }
        self._in_csr = {et: self._build_csr(*self.edges[et]) for et in self.edges}

    def _build_csr(self, src, dst):
        order = np.argsort(dst, kind="stable")
        sorted_src = src[order]
        counts = np.bincount(dst, minlength=self.n_nodes)
        indptr = np.concatenate([[0], np.cumsum(counts)])
        return indptr, sorted_src

    def in_neighbors(self, node, etype):
        indptr, indices = self._in_csr[etype]
        return indices[indptr[node] : indptr[node + 1]]

    def edge_counts(self):
        return {et: len(self.edges[et][0]) for et in EDGE_TYPES}

    def node_type(self, node):
        if node < self.n_users:
            return NODE_USER
        if node < self.n_users + self.n_movies:
            return NODE_MOVIE
        return NODE_REVIEW

    def review_global(self, review_local):
        return self.n_users + self.n_movies + np.asarray(review_local, dtype=np.int64)

    def stats(self):
        """Node/edge counts and in-degree histograms (JSON-ready)."""
        out = {
            "nodes": {"user": self.n_users, "movie": self.n_movies, "review": self.n_reviews},
            "edges": self.edge_counts(),
            "in_degree_histograms": {},
        }
        for et in EDGE_TYPES:
            _, dst = self.edges[et]
            degrees = np.bincount(dst, minlength=self.n_nodes)
            degrees = degrees[degrees > 0]
            hist = np.bincount(degrees) if degrees.size else np.zeros(1, dtype=int)
            out["in_degree_histograms"][et] = hist.tolist()
        return out


def build_graph(dataset):
    """One node per entity; (m->r), (u->r), (r->u) edges per review."""
    n_u, n_m, n_r = dataset.counts()
    users = np.array([dataset.user_index[r.user_id] for r in dataset.reviews], dtype=np.int64)
    movies = np.array([dataset.movie_index[r.movie_id] for r in dataset.reviews], dtype=np.int64)
    reviews = np.arange(n_r, dtype=np.int64)
    g_user = users
    g_movie = n_u + movies
    g_review = n_u + n_m + reviews
    edges = {
        "movie_review": (g_movie, g_review),
        "user_review": (g_user, g_review),
        "review_user": (g_review, g_user),
    }
    return HeteroGraph(n_u, n_m, n_r, edges)


def drop_edges(graph, rate, rng):
    """Remove each edge independently with probability ``rate``."""
    if not 0.0 <= rate <= 1.0:
        raise ConfigError(f"edge drop rate must be in [0, 1], got {rate}")
    edges = {}
    for et in EDGE_TYPES:
        src, dst = graph.edges[et]
        if rate == 0.0:
            keep = np.ones(len(src), dtype=bool)
        elif rate == 1.0:
            keep = np.zeros(len(src), dtype=bool)
        else:
            keep = rng.random(len(src)) >= rate
        edges[et] = (src[keep], dst[keep])
    return HeteroGraph(graph.n_users, graph.n_movies, graph.n_reviews, edges)


@dataclass
class Subgraph:
    """Sampled in-neighborhood closure of a set of seed reviews."""

    nodes: np.ndarray  # global ids, seeds first
    seed_positions: np.ndarray  # local indices of the seed reviews
    edge_src: np.ndarray  # local indices
    edge_dst: np.ndarray
    edge_type: np.ndarray  # index into EDGE_TYPES
    node_types: np.ndarray = field(default=None)

    @property
    def n_nodes(self):
        return len(self.nodes)


def sample_subgraph(graph, seed_reviews, hops=2, cap=200, rng=None):
    """Breadth-first in-neighbor sampling from seed reviews.

    At every node reached in fewer than ``hops`` steps, up to ``cap``
    in-neighbors are drawn uniformly without replacement per edge type.
    Deterministic for a given rng state.
    """
    if hops < 1 or cap < 1:
        raise ConfigError(f"sample_subgraph: hops and cap must be >= 1, got {hops}, {cap}")
    rng = rng or np.random.default_rng(0)
    seed_reviews = np.asarray(seed_reviews, dtype=np.int64)
    if seed_reviews.size and (seed_reviews.min() < 0 or seed_reviews.max() >= graph.n_reviews):
        raise KeyError(f"unknown seed review id in {seed_reviews}")
    seeds = graph.review_global(seed_reviews)

    local = {}
    nodes = []
    for g in seeds.tolist():
        if g not in local:
            local[g] = len(nodes)
            nodes.append(g)
    src_l, dst_l, et_l = [], [], []
    frontier = list(dict.fromkeys(seeds.tolist()))
    for _ in range(hops):
        nxt = []
        for node in frontier:
            for ti, et in enumerate(EDGE_TYPES):
                nbrs = graph.in_neighbors(node, et)
                if len(nbrs) > cap:
                    nbrs = rng.choice(nbrs, size=cap, replace=False)
                for nb in nbrs.tolist():
                    if nb not in local:
                        local[nb] = len(nodes)
                        nodes.append(nb)
                        nxt.append(nb)
                    src_l.append(local[nb])
                    dst_l.append(local[node])
                    et_l.append(ti)
        frontier = nxt
    nodes = np.array(nodes, dtype=np.int64)
    return Subgraph(
        nodes=nodes,
        seed_positions=np.array([local[g] for g in seeds.tolist()], dtype=np.int64),
        edge_src=np.array(src_l, dtype=np.int64),
        edge_dst=np.array(dst_l, dtype=np.int64),
        edge_type=np.array(et_l, dtype=np.int64),
        node_types=np.array([graph.node_type(g) for g in nodes.tolist()], dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# GAT encoder
# ---------------------------------------------------------------------------


class GatLayer:
    """Single-head graph attention layer.

    Attention logit for edge j->i (and the self term j=i):
        e_ij = LeakyReLU(a_s . (Theta_s^T g_i) + a_t . (Theta_t^T g_j))
    normalized by softmax over N(i) u {i}; the self value uses Theta_s,
    neighbor values use Theta_t.
    """

    def __init__(self, registry, name, d_in, d_out, slope=0.2):
        self.d_in, self.d_out, self.slope = d_in, d_out, slope
        self.theta_s = registry.param(f"{name}.theta_s", (d_in, d_out))
        self.theta_t = registry.param(f"{name}.theta_t", (d_in, d_out))
        self.a_s = registry.param(f"{name}.a_s", (d_out, 1))
        self.a_t = registry.param(f"{name}.a_t", (d_out, 1))

    def __call__(self, x, edge_src, edge_dst, n_nodes, capture=None, edge_type=None):
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"gat_layer: input dim {x.shape[-1]} != {self.d_in}")
        h_s = T.matmul(x, self.theta_s)  # (n, d_out)
        h_t = T.matmul(x, self.theta_t)
        score_s = T.reshape(T.matmul(h_s, self.a_s), (n_nodes,))
        score_t = T.reshape(T.matmul(h_t, self.a_t), (n_nodes,))

        # augment the edge list with one self edge per node
        self_idx = np.arange(n_nodes, dtype=np.int64)
        src = np.concatenate([edge_src, self_idx])
        dst = np.concatenate([edge_dst, self_idx])

        logits = T.leaky_relu(
            T.add(T.gather_rows(score_s, dst), T.gather_rows(score_t, src)), slope=self.slope
        )
        alpha = T.segment_softmax(logits, dst, n_nodes)

        values = T.concat([T.gather_rows(h_t, edge_src), h_s], axis=0)
        weighted = T.mul(values, T.reshape(alpha, (len(src), 1)))
        out = T.scatter_rows(weighted, dst, n_nodes)

        if capture is not None:
            capture.append(
                {
                    "alpha": alpha.data[: len(edge_src)].copy(),
                    "alpha_self": alpha.data[len(edge_src) :].copy(),
                    "edge_type": None if edge_type is None else edge_type.copy(),
                    "edge_dst": edge_dst.copy(),
                }
            )
        return out


class GraphEncoder:
    """Input projection + L GAT layers with ReLU between consecutive layers."""

    def __init__(self, registry, name, d_in, dims, slope=0.2, dropout=0.0):
        if len(dims) < 1:
            raise ConfigError("graph encoder needs at least one layer")
        self.d_in = d_in
        self.dropout = dropout
        self.w_in = registry.param(f"{name}.w_in", (d_in, dims[0]))
        self.b_in = registry.param(f"{name}.b_in", (dims[0],), init="zeros")
        self.layers = []
        for li in range(len(dims) - 1):
            self.layers.append(GatLayer(registry, f"{name}.gat{li}", dims[li], dims[li + 1], slope))

    def __call__(self, feats, subgraph, training=False, rng=None, capture=None):
        """feats: (n_nodes, d_in) ndarray of [text, meta] rows; returns all-node embeddings."""
        if feats.shape[-1] != self.d_in:
            raise ShapeError(f"graph encoder: feature dim {feats.shape[-1]} != {self.d_in}")
        x = T.relu(T.linear(T.Tensor(feats), self.w_in, self.b_in))
        n = subgraph.n_nodes
        for li, layer in enumerate(self.layers):
            if li > 0:
                x = T.relu(x)
                x = T.dropout(x, self.dropout, training, rng)
            x = layer(
                x,
                subgraph.edge_src,
                subgraph.edge_dst,
                n,
                capture=capture,
                edge_type=subgraph.edge_type,
            )
        return x


def init_node_features(subgraph, text_rows, meta_rows):
    """Per-node [text, meta] concatenation in subgraph-local order."""
    if len(text_rows) != subgraph.n_nodes or len(meta_rows) != subgraph.n_nodes:
        raise ShapeError("init_node_features: row count mismatch with subgraph")
    return np.concatenate([text_rows, meta_rows], axis=1)


def gat_edge_attention_summary(captures, n_layers):
    """Average attention per layer received by review-type destination nodes.

    ``captures`` holds per-forward lists of per-layer dicts recorded by
    GatLayer; node types of destinations must be supplied alongside.
    Returns {layer: {"self": a, "user": b, "movie": c}} averages.
    """
    sums = [{"self": 0.0, "user": 0.0, "movie": 0.0} for _ in range(n_layers)]
    counts = [{"self": 0, "user": 0, "movie": 0} for _ in range(n_layers)]
    for cap, dst_types in captures:
        for li, layer_cap in enumerate(cap):
            review_dst = dst_types[layer_cap["edge_dst"]] == NODE_REVIEW
            et = layer_cap["edge_type"]
            for key, code in (("movie", 0), ("user", 1)):
                sel = review_dst & (et == code)
                if sel.any():
                    sums[li][key] += float(layer_cap["alpha"][sel].sum())
                    counts[li][key] += int(sel.sum())
            self_rev = dst_types == NODE_REVIEW
            if self_rev.any():
                sums[li]["self"] += float(layer_cap["alpha_self"][self_rev].sum())
                counts[li]["self"] += int(self_rev.sum())
    out = {}
    for li in range(n_layers):
        out[f"layer_{li + 1}"] = {
            k: (sums[li][k] / counts[li][k] if counts[li][k] else None) for k in sums[li]
        }
    return out
