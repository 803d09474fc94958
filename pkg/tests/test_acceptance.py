"""Acceptance criteria. Each test prints one PASS/FAIL line (also repeated in the
pytest terminal summary). Run alone with `pytest tests/test_acceptance.py -v`
or `python3 tests/test_acceptance.py`."""

import functools
import math
import time

import numpy as np
import pytest

from sdrgnn import diffcore as dc
from sdrgnn import experiment as ex
from sdrgnn import gradcheck
from sdrgnn.data import (MAX_MISSING_RATE, MODALITIES, ProtocolError, SynthConfig, apply_missing, effective_rate,
                         missing_rate, synth_splits)
from sdrgnn.graph import HypergraphWeights, build_interaction_graph, custom_hypergraph
from sdrgnn.metrics import accuracy, confusion_matrix, waf1, weighted_f1
from sdrgnn.model import ModelConfig, SDRGNN, freq_gate, hypergraph_conv, prepare, rgcn
from sdrgnn.training import TrainConfig, batch_loss, loss_ce, train

from conftest import make_dataset

RESULTS = {}

# Desk-scale experiment settings for criteria 6-8. Signal 2.0 keeps the task
# hard enough that missing modalities and ablations have room to matter.
EXP_SIGNAL = 2.0
EXP_EPOCHS = 60
EXP_PATIENCE = 15


def record(num, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {num:>2}: {detail}"
    RESULTS[num] = line
    print(line)
    assert ok, line


@functools.lru_cache(maxsize=None)
def experiment(seed, rate, flags=()):
    spec = ex.RunSpec(missing_rate=rate, seed=seed,
                      synth=dict(num_conversations=8, utterances=10, classes=4, dims=(8, 8, 8),
                                 signal=EXP_SIGNAL, seed=seed),
                      model=ex.ablate(dict(hidden=16, window=2, hyper_layers=2, heads=4), flags),
                      train=dict(epochs=EXP_EPOCHS, patience=EXP_PATIENCE))
    res = ex.run(spec)
    return res.report.waf1, res.report.mse["pooled"], res.zero_fill_mse["pooled"]


def test_criterion_01_gradient_suite():
    t0 = time.perf_counter()
    results = gradcheck.run_suite(seed=0, eps=1e-5)
    secs = time.perf_counter() - t0
    worst = max(results, key=lambda r: r.worst[1])
    ok = all(r.worst[1] < 1e-4 for r in results) and secs < 30
    record(1, ok, f"{len(results)} groups, max rel err {worst.worst[1]:.2e} ({worst.group}), {secs:.1f}s (< 1e-4, < 30s)")


def test_criterion_02_masking_protocol():
    rng = np.random.default_rng(2024)
    rates = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7]
    worst_gap, violations = 0.0, 0
    for k in range(1000):
        rate = rates[k % len(rates)]
        ds = make_dataset(rng, convs=int(rng.integers(1, 4)), n=int(rng.integers(1, 12)))
        out, plan = apply_missing(ds, rate, int(rng.integers(2**31)))
        violations += sum(int((c.mask.sum(1) < 1).sum()) for c in out.conversations)
        gap = abs(missing_rate(out) - effective_rate(rate)) * out.num_utterances * 3
        worst_gap = max(worst_gap, gap)
    errors = 0
    for bad in (0.67, 0.68, 0.75, 0.8, 1.0):
        try:
            apply_missing(make_dataset(rng), bad, 0)
        except ProtocolError:
            errors += 1
    ok = violations == 0 and worst_gap <= 1 + 1e-9 and errors == 5
    record(2, ok, f"1000 plans, survivors violated {violations}, worst gap {worst_gap:.3f} slots (<= 1), "
                  f"{errors}/5 over-cap requests rejected; 0.7 realized as {MAX_MISSING_RATE:.4f}")


def test_criterion_03_degenerate_oracles():
    rng = np.random.default_rng(3)
    V = rng.standard_normal((4, 3))
    hg = custom_hypergraph(4, [(i,) for i in range(4)])
    hyp = hypergraph_conv(dc.Tensor(V), hg, HypergraphWeights.explicit(hg, 1.0, 1.0), 1).data
    ok_h = np.array_equal(hyp, np.where(V > 0, V, 0.01 * V))
    g = build_interaction_graph([0, 1, 0, 1, 1], 2)
    v = rng.standard_normal((5, 3))
    ok_g = np.array_equal(freq_gate(dc.Tensor(v), g.context_adj, [dc.Tensor(np.zeros((6, 1)))] * 3).data, v) and \
        np.array_equal(freq_gate(dc.Tensor(v), g.speaker_adj, [dc.Tensor(np.zeros((6, 1)))] * 4).data, v)
    h = rng.standard_normal((3, 3))
    W = rng.standard_normal((3, 2))
    A = np.zeros((1, 3, 3))
    A[0, 0, 2] = A[0, 1, 0] = A[0, 2, 1] = 1.0
    ok_r = np.array_equal(rgcn(dc.Tensor(h), A, [dc.Tensor(W)]).data, np.maximum(h[[2, 0, 1]] @ W, 0))
    record(3, ok_h and ok_g and ok_r,
           f"identity hypergraph == LeakyReLU: {ok_h}; zero gates == identity: {ok_g}; "
           f"single-neighbor R-GCN == ReLU(W h_j): {ok_r} (bitwise)")


def _brute(y, p, c):
    n = len(y)
    acc = sum(1 for t, q in zip(y, p) if t == q) / n
    total = 0.0
    for j in range(c):
        tp = sum(1 for t, q in zip(y, p) if t == j and q == j)
        fp = sum(1 for t, q in zip(y, p) if t != j and q == j)
        fn = sum(1 for t, q in zip(y, p) if t == j and q != j)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        total += (2 * prec * rec / (prec + rec) if prec + rec else 0.0) * sum(1 for t in y if t == j)
    return total / n, acc


def test_criterion_04_metric_oracles():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(1000):
        c = int(rng.integers(2, 7))
        n = int(rng.integers(1, 60))
        y, p = rng.integers(0, c, n).tolist(), rng.integers(0, c, n).tolist()
        cm = confusion_matrix(y, p, c)
        bw, ba = _brute(y, p, c)
        worst = max(worst, abs(waf1(cm) - bw), abs(accuracy(cm) - ba))
    hand = weighted_f1([0.8, 0.4], [3, 1])
    ok = worst == 0.0 and abs(hand - 0.7) < 1e-15
    record(4, ok, f"1000 label sets, max |confusion - brute force| {worst:.1e} (exact); "
                  f"hand case WAF1 {hand:.12f}")


@pytest.mark.slow
def test_criterion_05_toy_overfit():
    cfg = SynthConfig(num_conversations=8, utterances=10, classes=4, dims=(8, 8, 8), signal=5.0, seed=0)
    tr, _, _ = synth_splits(cfg)
    model = SDRGNN(ModelConfig(dims=(8, 8, 8), num_classes=4, num_speakers=2, hidden=16, window=2,
                               hyper_layers=2, heads=4, seed=0))
    t0 = time.perf_counter()
    _, rec = train(model, tr, tr, TrainConfig(epochs=300, patience=300, stop_train_acc=0.99))
    secs = time.perf_counter() - t0
    best = max(r.train_acc for r in rec.epochs)
    ok = best >= 0.99 and len(rec.epochs) <= 300 and secs < 60
    record(5, ok, f"train accuracy {best:.3f} after {len(rec.epochs)} epochs in {secs:.1f}s (>= 0.99, <= 300, < 60s)")


@pytest.mark.slow
def test_criterion_06_degradation_trend():
    full = [experiment(s, 0.0)[0] for s in range(5)]
    most = [experiment(s, 0.7)[0] for s in range(5)]
    wins = sum(a >= b for a, b in zip(full, most))
    ok = np.mean(most) <= np.mean(full) + 0.02 and wins >= 4
    record(6, ok, f"mean test WAF1 M=0.0 {np.mean(full):.3f} vs M=0.7 {np.mean(most):.3f}; "
                  f"M=0.0 >= M=0.7 in {wins}/5 seeds (need mean gap >= -0.02, >= 4/5)")


@pytest.mark.slow
def test_criterion_07_reconstruction_beats_zero_fill():
    pairs = [experiment(s, 0.3)[1:] for s in range(3)]
    ok = all(m < z for m, z in pairs)
    text = ", ".join(f"{m:.3f}<{z:.3f}" for m, z in pairs)
    record(7, ok, f"masked-slot MSE model vs zero-fill at M=0.3 over 3 seeds: {text}")


@pytest.mark.slow
def test_criterion_08_ablation_direction():
    means = {}
    for flags in [(), ("fre",), ("co",), ("sp",), ("op",)]:
        means[flags] = float(np.mean([experiment(s, 0.4, flags)[0] for s in range(5)]))
    full = means[()]
    ok = full >= means[("fre",)] and full >= means[("co",)]
    note = "; ".join(f"{ex.ABLATIONS[f[0]][0]} {means[f]:.3f}" for f in [("fre",), ("co",), ("sp",), ("op",)])
    record(8, ok, f"M=0.4 mean WAF1 over 5 seeds: full {full:.3f}; {note} "
                  f"(hard: full >= w/o Fre, w/o Co; w/o Sp and w/o Op reported only)")


def test_criterion_09_determinism_and_replay(tmp_path):
    spec = ex.RunSpec(missing_rate=0.3, seed=7,
                      synth=dict(num_conversations=3, utterances=6, classes=3, dims=(4, 4, 4), signal=2.0, seed=7),
                      model=dict(hidden=8, heads=2), train=dict(epochs=5))
    a = ex.run(spec, tmp_path / "a")
    b = ex.run(ex.load_spec(tmp_path / "a"), tmp_path / "b", plans=ex.load_plans(tmp_path / "a"))
    same_files = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
                     for f in ["report.csv", "report_confusion.csv", "mask_train.json", "mask_test.json",
                               "zero_fill_mse.json", "checkpoint.npz"])
    same_record = a.record.values() == b.record.values()
    record(9, same_files and same_record,
           f"replay from config + mask sidecars: artifacts identical {same_files}, per-epoch record identical {same_record}")


def test_criterion_10_loss_sanity():
    cfg = SynthConfig(num_conversations=8, utterances=10, classes=4, dims=(8, 8, 8), signal=5.0, seed=0)
    tr, _, _ = synth_splits(cfg)
    tr, _ = apply_missing(tr, 0.3, 0)
    mcfg = ModelConfig(dims=(8, 8, 8), num_classes=4, hidden=16, heads=4, seed=0)
    model = SDRGNN(mcfg)
    batches = [prepare(c, mcfg) for c in tr.conversations]
    ce = np.mean([loss_ce(model(b).probs, b.conv.labels).item() for b in batches])
    ce_ok = abs(ce - math.log(4)) <= 0.2 * math.log(4)

    def grads(e):
        for p in model.parameters():
            p.zero_grad()
        for b in batches[:3]:
            dc.backward(batch_loss(model, b, e, "all_slots")[0])
        return {p.name: np.abs(p.grad).max() for p in model.parameters()}

    g0 = grads(0.0)
    rec_zero = all(g0[p.name] == 0 for p in model.reconstruction_parameters())
    g1 = grads(1.0)
    cls_zero = g1["cls.W"] == 0 and g1["cls.b"] == 0
    record(10, ce_ok and rec_zero and cls_zero,
           f"untrained CE {ce:.4f} vs ln 4 = {math.log(4):.4f} (+-20%); e=0 reconstruction grads zero: {rec_zero}; "
           f"e=1 classifier grads zero: {cls_zero}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
