"""Windowed speaker/context interaction graphs and the weighted hypergraph."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc

BACKWARD, PRESENT, FORWARD = 0, 1, 2
CONTEXT_NAMES = ("backward", "present", "forward")


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class TypedEdge:
    src: int
    dst: int
    speaker_relation: int
    context_relation: int


def speaker_relation_id(s_src, s_dst, num_speakers):
    return int(s_src) * num_speakers + int(s_dst)


def context_relation_id(src, dst):
    return BACKWARD if dst < src else PRESENT if dst == src else FORWARD


def window(i, n, w):
    """0-based inclusive neighbor range of node i."""
    return max(i - w, 0), min(i + w, n - 1)


@dataclass
class InteractionGraph:
    """Directed typed edges i -> j for every j in i's window (self included).

    `neighbors(i, r)` under relation r is {j : edge (i, j) has relation r}.
    Dense per-relation adjacency matrices are cached for aggregation.
    """

    n: int
    w: int
    num_speakers: int
    edges: list
    speaker_adj: np.ndarray = field(repr=False)  # (N*N, n, n)
    context_adj: np.ndarray = field(repr=False)  # (3, n, n)

    @property
    def num_speaker_relations(self):
        return self.num_speakers ** 2

    def adjacency(self, kind):
        return self.speaker_adj if kind == "speaker" else self.context_adj

    def neighbor_counts(self, kind):
        """(R, n) array of |N_i^r|."""
        return self.adjacency(kind).sum(axis=2)

    def neighbors(self, i, r, kind="context"):
        return np.flatnonzero(self.adjacency(kind)[r, i]).tolist()

    def mean_aggregators(self, kind):
        """(R, n, n) with row i of relation r equal to 1/|N_i^r| over N_i^r (zero rows stay zero)."""
        adj = self.adjacency(kind)
        cnt = adj.sum(axis=2, keepdims=True)
        return np.divide(adj, cnt, out=np.zeros_like(adj), where=cnt > 0)

    def export(self, path):
        lines = ["# src dst speaker_relation context_relation"]
        lines += [f"{e.src} {e.dst} {e.speaker_relation} {CONTEXT_NAMES[e.context_relation]}" for e in self.edges]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def build_interaction_graph(speakers, w, num_speakers=None) -> InteractionGraph:
    speakers = np.asarray(speakers, dtype=np.int64)
    n = len(speakers)
    if n == 0:
        raise GraphError("cannot build a graph for an empty conversation")
    if w < 1:
        raise GraphError(f"window must be positive, got {w}")
    if w > 4:
        warnings.warn(f"window {w} is outside the usual grid 1..4", stacklevel=2)
    num_speakers = int(speakers.max()) + 1 if num_speakers is None else num_speakers
    if speakers.max() >= num_speakers:
        raise GraphError(f"speaker id {speakers.max()} exceeds roster size {num_speakers}")
    edges = []
    sp = np.zeros((num_speakers ** 2, n, n))
    co = np.zeros((3, n, n))
    for i in range(n):
        lo, hi = window(i, n, w)
        for j in range(lo, hi + 1):
            a = speaker_relation_id(speakers[i], speakers[j], num_speakers)
            b = context_relation_id(i, j)
            edges.append(TypedEdge(i, j, a, b))
            sp[a, i, j] = 1.0
            co[b, i, j] = 1.0
    return InteractionGraph(n, w, num_speakers, edges, sp, co)


# ------------------------------------------------------------- hypergraph


@dataclass
class WeightedHypergraph:
    """Binary incidence plus roles used to look up shared weights.

    Each incidence (node v in hyperedge e) carries `inc_role`, an index into
    a node-weight parameter vector; each hyperedge carries `edge_role`, an
    index into an edge-weight vector. Roles are how the trainable weights
    are shared across conversations of different lengths.
    """

    n: int
    hyperedges: list  # list of tuples of node indices
    kinds: list  # "context" | "speaker" per hyperedge
    H: np.ndarray = field(repr=False)
    inc_rows: np.ndarray = field(repr=False)
    inc_cols: np.ndarray = field(repr=False)
    inc_role: np.ndarray = field(repr=False)
    edge_role: np.ndarray = field(repr=False)

    @property
    def num_edges(self):
        return len(self.hyperedges)

    def export(self, path):
        lines = ["# edge kind nodes"]
        lines += [f"{k} {kind} {' '.join(map(str, e))}" for k, (e, kind) in enumerate(zip(self.hyperedges, self.kinds))]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def num_node_roles(w, num_speakers):
    return (2 * w + 1) + num_speakers


def num_edge_roles(num_speakers):
    return 1 + num_speakers


def _from_edges(n, edges, kinds, inc_role_fn, edge_role):
    H = np.zeros((n, len(edges)))
    rows, cols, roles = [], [], []
    for e, members in enumerate(edges):
        for v in members:
            H[v, e] = 1.0
            rows.append(v)
            cols.append(e)
            roles.append(inc_role_fn(e, v))
    return WeightedHypergraph(n, edges, kinds, H, np.array(rows, dtype=np.int64), np.array(cols, dtype=np.int64),
                              np.array(roles, dtype=np.int64), np.asarray(edge_role, dtype=np.int64))


def build_hypergraph(speakers, w, num_speakers=None) -> WeightedHypergraph:
    """Context hyperedge per window center (duplicates removed) plus one speaker hyperedge per speaker.

    Node role in a context hyperedge is its offset from the center (0..2w);
    in a speaker hyperedge it is 2w+1+speaker. Edge role is 0 for context
    hyperedges and 1+speaker for speaker hyperedges.
    """
    speakers = np.asarray(speakers, dtype=np.int64)
    n = len(speakers)
    if n == 0:
        raise GraphError("cannot build a hypergraph for an empty conversation")
    num_speakers = int(speakers.max()) + 1 if num_speakers is None else num_speakers
    edges, kinds, centers, edge_role = [], [], [], []
    seen = set()
    for i in range(n):
        lo, hi = window(i, n, w)
        members = tuple(range(lo, hi + 1))
        if members in seen:
            continue
        seen.add(members)
        edges.append(members)
        kinds.append("context")
        centers.append(i)
        edge_role.append(0)
    for s in sorted(set(speakers.tolist())):
        edges.append(tuple(np.flatnonzero(speakers == s).tolist()))
        kinds.append("speaker")
        centers.append(s)
        edge_role.append(1 + s)

    def role(e, v):
        if kinds[e] == "context":
            return v - centers[e] + w
        return 2 * w + 1 + centers[e]

    return _from_edges(n, edges, kinds, role, edge_role)


def custom_hypergraph(n, edges) -> WeightedHypergraph:
    """Hypergraph over explicit node sets where every incidence and edge has its own role."""
    counter = iter(range(sum(len(e) for e in edges)))
    return _from_edges(n, [tuple(e) for e in edges], ["custom"] * len(edges),
                       lambda e, v: next(counter), np.arange(len(edges)))


class HypergraphWeights:
    """Trainable node weights (gamma) and edge weights (lambda), stored as logs."""

    def __init__(self, prefix, num_node_roles, num_edge_roles, gamma_init=1.0, lam_init=1.0):
        if gamma_init <= 0 or lam_init <= 0:
            raise GraphError("hypergraph weights must be positive")
        self.log_gamma = dc.Parameter(f"{prefix}.log_gamma", np.full(num_node_roles, np.log(gamma_init)))
        self.log_lam = dc.Parameter(f"{prefix}.log_lambda", np.full(num_edge_roles, np.log(lam_init)))

    def parameters(self):
        return [self.log_gamma, self.log_lam]

    @classmethod
    def explicit(cls, hg: WeightedHypergraph, gamma, lam, prefix="hg"):
        """Weights for a `custom_hypergraph`: gamma per incidence (in incidence order), lambda per edge."""
        obj = cls(prefix, len(hg.inc_role), hg.num_edges)
        obj.log_gamma.assign(np.log(np.broadcast_to(np.asarray(gamma, float), obj.log_gamma.shape)))
        obj.log_lam.assign(np.log(np.broadcast_to(np.asarray(lam, float), obj.log_lam.shape)))
        return obj


def weighted_incidence(hg: WeightedHypergraph, weights: HypergraphWeights):
    """(H_hat, lambda) as tensors; H_hat is zero exactly where H is."""
    gamma = dc.exp(dc.index(weights.log_gamma, hg.inc_role))
    H_hat = dc.scatter(gamma, hg.inc_rows, hg.inc_cols, hg.H.shape)
    lam = dc.exp(dc.index(weights.log_lam, hg.edge_role))
    return H_hat, lam


def degree_matrices(hg: WeightedHypergraph, weights: HypergraphWeights, incidence=None):
    """Diagonals of D (node degrees, sum_e H_ve lambda_e) and B (edge degrees, sum_v H_hat_ve).

    `incidence` may pass a precomputed `weighted_incidence` result.
    """
    H_hat, lam = incidence if incidence is not None else weighted_incidence(hg, weights)
    D = dc.matmul(dc.Tensor(hg.H), lam.reshape(-1, 1)).reshape(-1)
    B = H_hat.sum(axis=0)
    if (D.data <= 0).any() or (B.data <= 0).any():
        raise GraphError("degenerate hypergraph: zero node or edge degree")
    return D, B
