"""SDR-GNN forward pipeline.

encoder (speaker-aware BiGRU) -> relational graph convolution per stream
(speaker relations, context relations) -> weighted hypergraph convolution ->
frequency-aware self-gating -> concatenation -> modality reconstruction
refined by multi-head self-attention, and emotion classification from the
fused latent.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .data import MODALITIES, Conversation
from .graph import (HypergraphWeights, WeightedHypergraph, build_hypergraph, build_interaction_graph,
                    degree_matrices, num_edge_roles, num_node_roles, weighted_incidence)

# head count used by the full-scale reference configuration; too large for desk-scale extents
REFERENCE_HEADS = 256


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    dims: tuple = (8, 8, 8)
    num_classes: int = 4
    num_speakers: int = 2
    hidden: int = 16
    window: int = 2
    hyper_layers: int = 2
    heads: int = 4
    attn_dim: int | None = None  # defaults to `hidden`
    dropout: float = 0.5
    leaky_slope: float = 0.01
    use_speaker: bool = True
    use_context: bool = True
    use_freq_gate: bool = True
    use_self_opt: bool = True
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)

    @property
    def feature_dim(self):
        return sum(self.dims)

    @property
    def attention_dim(self):
        return self.hidden if self.attn_dim is None else self.attn_dim

    @property
    def latent_dim(self):
        return self.hidden * (int(self.use_speaker) + int(self.use_context))

    def validate(self):
        if not (self.use_speaker or self.use_context):
            raise ConfigError("at least one of the speaker and context streams must be enabled")
        if self.hidden < 1 or self.window < 1 or self.hyper_layers < 0:
            raise ConfigError("hidden and window must be positive and hyper_layers non-negative")
        if self.heads < 1 or self.attention_dim % self.heads:
            raise ConfigError(f"{self.heads} heads do not divide attention extent {self.attention_dim}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ConfigError(f"dims must be three positive extents, got {self.dims}")
        return self

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, obj):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in obj.items() if k in known})


@dataclass
class ForwardOutput:
    latent: dc.Tensor  # (n, d_h)
    recon_linear: dict  # modality -> (n, d_m), before attention
    recon: dict  # modality -> (n, d_m), after attention (identity when disabled)
    probs: dc.Tensor  # (n, c)


@dataclass
class ConvBatch:
    """A conversation with its graphs, ready for the forward pass."""

    conv: Conversation
    inputs: np.ndarray  # (n, sum d_m) zero-imputed features
    speaker_onehot: np.ndarray
    speaker_agg: np.ndarray
    context_agg: np.ndarray
    speaker_adj: np.ndarray
    context_adj: np.ndarray
    hypergraph: WeightedHypergraph

    @property
    def n(self):
        return len(self.conv)


def prepare(conv: Conversation, cfg: ModelConfig) -> ConvBatch:
    g = build_interaction_graph(conv.speakers, cfg.window, cfg.num_speakers)
    onehot = np.eye(cfg.num_speakers)[conv.speakers]
    return ConvBatch(conv, conv.stacked(imputed=True), onehot,
                     g.mean_aggregators("speaker"), g.mean_aggregators("context"),
                     g.speaker_adj, g.context_adj,
                     build_hypergraph(conv.speakers, cfg.window, cfg.num_speakers))


# ------------------------------------------------------------------ layers


class Linear:
    def __init__(self, name, d_in, d_out, rng, bias=True):
        self.W = dc.Parameter(f"{name}.W", dc.uniform_init(rng, (d_in, d_out)))
        self.b = dc.Parameter(f"{name}.b", dc.uniform_init(rng, (d_out,), fan_in=d_in)) if bias else None

    def parameters(self):
        return [self.W] + ([self.b] if self.b is not None else [])

    def __call__(self, x):
        y = dc.matmul(x, self.W)
        return y + self.b if self.b is not None else y


class GRU:
    """Single-direction GRU; gates ordered (reset, update, candidate)."""

    def __init__(self, name, d_in, d_hidden, rng):
        self.d_hidden = d_hidden
        self.W_x = dc.Parameter(f"{name}.W_x", dc.uniform_init(rng, (d_in, 3 * d_hidden), fan_in=d_hidden))
        self.W_h = dc.Parameter(f"{name}.W_h", dc.uniform_init(rng, (d_hidden, 3 * d_hidden)))
        self.b_x = dc.Parameter(f"{name}.b_x", dc.uniform_init(rng, (3 * d_hidden,), fan_in=d_hidden))
        self.b_h = dc.Parameter(f"{name}.b_h", dc.uniform_init(rng, (3 * d_hidden,), fan_in=d_hidden))

    def parameters(self):
        return [self.W_x, self.W_h, self.b_x, self.b_h]

    def cell(self, x_gates, h):
        """One step given the input projection x W_x + b_x (1, 3H) and state h (1, H)."""
        H = self.d_hidden
        h_gates = dc.matmul(h, self.W_h) + self.b_h
        r = dc.sigmoid(x_gates[:, :H] + h_gates[:, :H])
        z = dc.sigmoid(x_gates[:, H:2 * H] + h_gates[:, H:2 * H])
        cand = dc.tanh(x_gates[:, 2 * H:] + r * h_gates[:, 2 * H:])
        return (1.0 - z) * cand + z * h

    def step(self, x, h):
        return self.cell(dc.matmul(x, self.W_x) + self.b_x, h)

    def __call__(self, X, reverse=False):
        n = X.shape[0]
        gates = dc.matmul(X, self.W_x) + self.b_x
        h = dc.Tensor(np.zeros((1, self.d_hidden)))
        out = [None] * n
        for t in (range(n - 1, -1, -1) if reverse else range(n)):
            h = self.cell(gates[t:t + 1], h)
            out[t] = h
        return dc.concat(out, axis=0)


def rgcn(h, aggregators, weights):
    """ReLU(sum_r A_r h W_r) with A_r the per-relation mean aggregators."""
    total = None
    for A, W in zip(aggregators, weights):
        if not A.any():
            continue
        term = dc.matmul(dc.Tensor(A), dc.matmul(h, W))
        total = term if total is None else total + term
    if total is None:
        return dc.Tensor(np.zeros((h.shape[0], weights[0].shape[1])))
    return dc.relu(total)


def hypergraph_conv(V, hg: WeightedHypergraph, weights: HypergraphWeights, layers, slope=0.01):
    """`layers` rounds of V <- LeakyReLU(D^-1 H W_e B^-1 H_hat^T V)."""
    if layers == 0:
        return V
    H_hat, lam = weighted_incidence(hg, weights)
    D, B = degree_matrices(hg, weights, (H_hat, lam))
    H = dc.Tensor(hg.H)
    edge_scale = (lam / B).reshape(-1, 1)
    node_scale = dc.div(1.0, D).reshape(-1, 1)
    for _ in range(layers):
        edge_msg = edge_scale * dc.matmul(dc.transpose(H_hat), V)
        V = dc.leaky_relu(node_scale * dc.matmul(H, edge_msg), slope)
    return V


def freq_gate(v, adjacency, gate_weights, residual=None):
    """residual_i + sum_r sum_{j in N_i^r} tanh(w_r . [v_i, v_j] / sqrt(|N_i^r| |N_j^r|)) v_j.

    `residual` defaults to `v`. |N_j^r| is clamped to 1 when j has no
    neighbor of relation r itself (e.g. the last node under the forward
    relation).
    """
    d = v.shape[1]
    out = v if residual is None else residual
    for adj, w in zip(adjacency, gate_weights):
        if not adj.any():
            continue
        cnt = np.maximum(adj.sum(axis=1), 1.0)
        norm = np.sqrt(np.outer(cnt, cnt))
        s_i = dc.matmul(v, w[:d])  # (n, 1)
        s_j = dc.matmul(v, w[d:])  # (n, 1)
        scores = s_i + dc.transpose(s_j)
        gates = dc.tanh(scores / norm) * adj
        out = out + dc.matmul(gates, v)
    return out


def fuse(l_sp, l_co):
    if l_sp is None:
        return l_co
    if l_co is None:
        return l_sp
    if l_sp.shape[0] != l_co.shape[0]:
        raise dc.DimensionError(f"stream row counts differ: {l_sp.shape[0]} vs {l_co.shape[0]}")
    return dc.concat([l_sp, l_co], axis=1)


def multi_head_attention(F, W_q, W_k, W_v, W_o, heads):
    d = W_q.shape[1]
    if d % heads:
        raise dc.DimensionError(f"{heads} heads do not divide attention extent {d}")
    dh = d // heads
    Q, K, V = dc.matmul(F, W_q), dc.matmul(F, W_k), dc.matmul(F, W_v)
    outs = []
    for k in range(heads):
        cols = slice(k * dh, (k + 1) * dh)
        att = dc.softmax(dc.matmul(Q[:, cols], dc.transpose(K[:, cols])) * (1.0 / math.sqrt(dh)), axis=1)
        outs.append(dc.matmul(att, V[:, cols]))
    return dc.matmul(dc.concat(outs, axis=1), W_o)


def classify(latent, W_c, b_c):
    return dc.softmax(dc.matmul(latent, W_c) + b_c, axis=1)


# ------------------------------------------------------------------- model


class SDRGNN:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg.validate()
        rng = np.random.default_rng([cfg.seed, 1])
        D, h, S = cfg.feature_dim, cfg.hidden, cfg.num_speakers
        gru_h = (D + 1) // 2
        self.speaker_proj = Linear("enc.speaker_proj", D + S, D, rng)
        self.gru_fwd = GRU("enc.gru_fwd", D, gru_h, rng)
        self.gru_bwd = GRU("enc.gru_bwd", D, gru_h, rng)
        self.enc_out = Linear("enc.out", 2 * gru_h, D, rng)
        self.streams = {}
        if cfg.use_speaker:
            self.streams["sp"] = self._stream("sp", S * S, D, h, rng)
        if cfg.use_context:
            self.streams["co"] = self._stream("co", 3, D, h, rng)
        d_h = cfg.latent_dim
        self.recon = {m: Linear(f"recon.{m}", d_h, d, rng) for m, d in zip(MODALITIES, cfg.dims)}
        if cfg.use_self_opt:
            a = cfg.attention_dim
            self.attn = {k: dc.Parameter(f"attn.W_{k}", dc.uniform_init(rng, (D, a))) for k in "qkv"}
            self.attn["o"] = dc.Parameter("attn.W_o", dc.uniform_init(rng, (a, D)))
        else:
            self.attn = {}
        self.classifier = Linear("cls", d_h, cfg.num_classes, rng)

    def _stream(self, name, R, D, h, rng):
        st = {
            "rgcn": [dc.Parameter(f"{name}.rgcn.W{r}", dc.uniform_init(rng, (D, h))) for r in range(R)],
            "hyper": HypergraphWeights(f"{name}.hyper", num_node_roles(self.cfg.window, self.cfg.num_speakers),
                                       num_edge_roles(self.cfg.num_speakers)),
            "gate": [],
        }
        if self.cfg.use_freq_gate:
            st["gate"] = [dc.Parameter(f"{name}.gate.w{r}", dc.uniform_init(rng, (2 * h, 1))) for r in range(R)]
        return st

    def parameters(self):
        ps = self.speaker_proj.parameters() + self.gru_fwd.parameters() + self.gru_bwd.parameters()
        ps += self.enc_out.parameters()
        for st in self.streams.values():
            ps += st["rgcn"] + st["hyper"].parameters() + st["gate"]
        for m in MODALITIES:
            ps += self.recon[m].parameters()
        ps += [self.attn[k] for k in sorted(self.attn)]
        ps += self.classifier.parameters()
        return ps

    def named_parameters(self):
        return {p.name: p for p in self.parameters()}

    def reconstruction_parameters(self):
        ps = [p for m in MODALITIES for p in self.recon[m].parameters()]
        return ps + [self.attn[k] for k in sorted(self.attn)]

    # --------------------------------------------------------------- stages

    def encode(self, batch: ConvBatch):
        x = dc.Tensor(np.concatenate([batch.inputs, batch.speaker_onehot], axis=1))
        x = self.speaker_proj(x)
        states = dc.concat([self.gru_fwd(x), self.gru_bwd(x, reverse=True)], axis=1)
        return self.enc_out(states)

    def stream(self, name, h, batch: ConvBatch):
        st = self.streams[name]
        agg, adj = ((batch.speaker_agg, batch.speaker_adj) if name == "sp"
                    else (batch.context_agg, batch.context_adj))
        v = rgcn(h, agg, st["rgcn"])
        pooled = hypergraph_conv(v, batch.hypergraph, st["hyper"], self.cfg.hyper_layers, self.cfg.leaky_slope)
        if not self.cfg.use_freq_gate:
            return pooled
        # gated hypergraph messages on top of the un-pooled node state; the
        # pooled state alone over-smooths once hyper_layers >= 2
        return freq_gate(pooled, adj, st["gate"], residual=v)

    def reconstruct(self, latent):
        return {m: self.recon[m](latent) for m in MODALITIES}

    def refine(self, recon):
        if not self.cfg.use_self_opt:
            return recon
        F = dc.concat([recon[m] for m in MODALITIES], axis=1)
        out = multi_head_attention(F, self.attn["q"], self.attn["k"], self.attn["v"], self.attn["o"], self.cfg.heads)
        return dict(zip(MODALITIES, dc.split(out, list(self.cfg.dims), axis=1)))

    def forward(self, batch: ConvBatch, training=False, rng=None) -> ForwardOutput:
        p = self.cfg.dropout
        h = dc.dropout(self.encode(batch), p, training, rng)
        l_sp = self.stream("sp", h, batch) if "sp" in self.streams else None
        l_co = self.stream("co", h, batch) if "co" in self.streams else None
        latent = dc.dropout(fuse(l_sp, l_co), p, training, rng)
        recon = self.reconstruct(latent)
        return ForwardOutput(latent, recon, self.refine(recon),
                             classify(latent, self.classifier.W, self.classifier.b))

    __call__ = forward

    # ----------------------------------------------------------- checkpoint

    def state(self):
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state(self, state):
        params = self.named_parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ConfigError(f"checkpoint parameters do not match config: missing {sorted(missing)}, "
                              f"unexpected {sorted(extra)}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ConfigError(f"parameter {name}: checkpoint shape {state[name].shape}, config expects {p.shape}")
            p.assign(state[name])


def save_checkpoint(model: SDRGNN, path, extra=None):
    """npz container: one float64 array per parameter plus a JSON header under `__meta__`."""
    meta = {"config": model.cfg.to_json(), **(extra or {})}
    arrays = model.state()
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    with np.load(path) as npz:
        meta = json.loads(npz["__meta__"].tobytes().decode("utf-8"))
        state = {k: npz[k] for k in npz.files if k != "__meta__"}
    model = SDRGNN(ModelConfig.from_json(meta["config"]))
    model.load_state(state)
    return model, meta
