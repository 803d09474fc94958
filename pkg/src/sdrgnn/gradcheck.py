"""Finite-difference verification of every layer's analytic gradients."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .data import MODALITIES, Conversation, apply_missing, Dataset
from .graph import HypergraphWeights, build_hypergraph, build_interaction_graph
from .model import (GRU, ModelConfig, SDRGNN, classify, freq_gate, hypergraph_conv, multi_head_attention,
                    prepare, rgcn)
from .training import batch_loss, loss_ce

# Elementwise relative error uses max(|analytic|, |numeric|, FLOOR) as the
# denominator so that gradients that are zero up to roundoff do not blow up.
FLOOR = 1e-6


def numeric_grad(f, param: dc.Parameter, eps=1e-5):
    base = param.data.copy()
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    for k in range(flat.size):
        for sign in (1.0, -1.0):
            pert = flat.copy()
            pert[k] += sign * eps
            param.assign(pert.reshape(base.shape))
            grad.reshape(-1)[k] += sign * f().item()
    param.assign(base)
    return grad / (2 * eps)


def relative_error(analytic, numeric, floor=FLOOR):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max()) if analytic.size else 0.0


def check(f, params, eps=1e-5):
    """Max relative error per parameter between backward() and central differences."""
    for p in params:
        p.zero_grad()
    dc.backward(f())
    analytic = {p.name: p.grad.copy() for p in params}
    for p in params:
        p.zero_grad()
    return {p.name: relative_error(analytic[p.name], numeric_grad(f, p, eps)) for p in params}


@dataclass
class GroupResult:
    group: str
    errors: dict

    @property
    def worst(self):
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]


def _probe(rng, shape):
    return rng.standard_normal(shape)


def _conversation(rng, n=5, dims=(3, 3, 3), classes=3):
    speakers = np.array([0, 1, 1, 0, 1, 0, 0, 1][:n] if n <= 8 else rng.integers(0, 2, n))
    feats = {m: rng.standard_normal((n, d)) for m, d in zip(MODALITIES, dims)}
    return Conversation("gc", speakers, rng.integers(0, classes, n), feats, np.ones((n, 3)))


def group_encoder(rng):
    gru = GRU("gru", 3, 2, rng)
    x = dc.Parameter("gru.input", rng.standard_normal((4, 3)))
    R = _probe(rng, (4, 2))
    return lambda: dc.tsum(gru(x, reverse=False) * R) + dc.tsum(gru(x, reverse=True) * R[::-1]), \
        gru.parameters() + [x]


def group_rgcn(rng):
    g = build_interaction_graph([0, 1, 1, 0, 1], 2)
    h = dc.Parameter("rgcn.h", rng.standard_normal((5, 3)))
    Ws = [dc.Parameter(f"rgcn.W{r}", rng.standard_normal((3, 4))) for r in range(4)]
    agg = g.mean_aggregators("speaker")
    R = _probe(rng, (5, 4))
    return lambda: dc.tsum(rgcn(h, agg, Ws) * R), Ws + [h]


def group_hypergraph(rng):
    hg = build_hypergraph([0, 1, 1, 0, 1], 1, 2)
    w = HypergraphWeights("hyper", 3 + 2, 3)
    w.log_gamma.assign(rng.normal(0, 0.5, w.log_gamma.shape))
    w.log_lam.assign(rng.normal(0, 0.5, w.log_lam.shape))
    V = dc.Parameter("hyper.V", rng.standard_normal((5, 3)))
    R = _probe(rng, (5, 3))
    return lambda: dc.tsum(hypergraph_conv(V, hg, w, 2) * R), w.parameters() + [V]


def group_freq_gate(rng):
    g = build_interaction_graph([0, 1, 1, 0, 1], 2)
    v = dc.Parameter("gate.v", rng.standard_normal((5, 3)))
    ws = [dc.Parameter(f"gate.w{r}", rng.standard_normal((6, 1))) for r in range(3)]
    R = _probe(rng, (5, 3))
    return lambda: dc.tsum(freq_gate(v, g.context_adj, ws) * R), ws + [v]


def group_reconstruction(rng):
    L = dc.Parameter("recon.latent", rng.standard_normal((5, 4)))
    W = dc.Parameter("recon.W", rng.standard_normal((4, 3)))
    b = dc.Parameter("recon.b", rng.standard_normal(3))
    T = rng.standard_normal((5, 3))

    def f():
        diff = dc.matmul(L, W) + b - T
        return dc.tsum(diff * diff)

    return f, [W, b, L]


def group_attention(rng):
    F = dc.Parameter("attn.F", rng.standard_normal((5, 9)))
    Ws = [dc.Parameter(f"attn.W_{k}", rng.standard_normal((9, 4)) * 0.5) for k in "qkv"]
    Wo = dc.Parameter("attn.W_o", rng.standard_normal((4, 9)))
    R = _probe(rng, (5, 9))
    return lambda: dc.tsum(multi_head_attention(F, *Ws, Wo, 2) * R), Ws + [Wo, F]


def group_classifier(rng):
    L = dc.Parameter("cls.latent", rng.standard_normal((5, 4)))
    W = dc.Parameter("cls.W", rng.standard_normal((4, 3)))
    b = dc.Parameter("cls.b", rng.standard_normal(3))
    y = rng.integers(0, 3, 5)
    return lambda: loss_ce(classify(L, W, b), y), [W, b, L]


def group_model(rng, seed=0):
    cfg = ModelConfig(dims=(3, 3, 3), num_classes=3, num_speakers=2, hidden=4, window=2, hyper_layers=2,
                      heads=2, dropout=0.5, seed=seed)
    model = SDRGNN(cfg)
    for p in model.parameters():
        if "hyper" in p.name:
            p.assign(rng.normal(0, 0.3, p.shape))
    conv = _conversation(rng)
    ds, _ = apply_missing(Dataset([conv], 3, (3, 3, 3)), 0.4, seed)
    batch = prepare(ds.conversations[0], cfg)
    return lambda: batch_loss(model, batch, 0.5, "all_slots")[0], model.parameters()


GROUPS = {
    "encoder": group_encoder,
    "rgcn": group_rgcn,
    "hypergraph": group_hypergraph,
    "freq_gate": group_freq_gate,
    "reconstruction": group_reconstruction,
    "attention": group_attention,
    "classifier": group_classifier,
    "model": group_model,
}


def run_suite(seed=0, eps=1e-5, groups=None):
    rng = np.random.default_rng(seed)
    results = []
    for name in groups or GROUPS:
        f, params = GROUPS[name](rng)
        results.append(GroupResult(name, check(f, params, eps)))
    return results


def report(results, tolerance=1e-4, out=print):
    ok = True
    for r in results:
        pname, err = r.worst
        status = "ok" if err < tolerance else "FAIL"
        ok &= err < tolerance
        out(f"{r.group:<15}{err:.3e}  {status}  (worst: {pname})")
    return ok


if __name__ == "__main__":
    t0 = time.perf_counter()
    report(run_suite())
    print(f"{time.perf_counter() - t0:.1f}s")
