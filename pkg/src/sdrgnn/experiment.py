"""One reproducible run: load or synthesize splits, mask, train, evaluate, write artifacts."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import (MODALITIES, Dataset, MaskPlan, SynthConfig, apply_missing, drop_incomplete, load_dataset,
                   replay_mask, save_dataset, synth_splits)
from .metrics import MetricsReport
from .model import ModelConfig, SDRGNN, save_checkpoint
from .training import RunRecord, TrainConfig, evaluate, train

SPLITS = ("train", "val", "test")

ABLATIONS = {
    "sp": ("w/o Sp", "use_speaker"),
    "co": ("w/o Co", "use_context"),
    "fre": ("w/o Fre", "use_freq_gate"),
    "op": ("w/o Op", "use_self_opt"),
}


def ablate(model_kw: dict, flags) -> dict:
    out = dict(model_kw)
    for f in flags:
        out[ABLATIONS[f][1]] = False
    return out


def row_label(flags):
    return "SDR-GNN" if not flags else "SDR-GNN " + " ".join(ABLATIONS[f][0] for f in flags)


@dataclass
class RunSpec:
    missing_rate: float = 0.0
    seed: int = 0
    data: str | None = None
    synth: dict | None = None  # SynthConfig fields; used when `data` is None
    model: dict = field(default_factory=dict)  # ModelConfig overrides
    train: dict = field(default_factory=dict)  # TrainConfig overrides
    lower_bound: bool = False

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, obj):
        return cls(**obj)


@dataclass
class RunResult:
    spec: RunSpec
    report: MetricsReport
    record: RunRecord
    model: SDRGNN
    plans: dict
    zero_fill_mse: dict


def load_splits(spec: RunSpec):
    if spec.data is not None:
        root = Path(spec.data)
        manifest = root / "manifest.json"
        c = json.loads(manifest.read_text())["classes"] if manifest.exists() else None
        splits = [load_dataset(root / f"{s}.jsonl", c, s) for s in SPLITS]
        if c is None:
            c = max(ds.num_classes for ds in splits)
            splits = [replace(ds, num_classes=c) for ds in splits]
        return tuple(splits)
    cfg = SynthConfig(**{**(spec.synth or {}), "dims": tuple((spec.synth or {}).get("dims", SynthConfig.dims))})
    return synth_splits(cfg)


def mask_seed(seed, k):
    return seed * 10 + k


def mask_splits(splits, rate, seed, plans=None):
    out, used = [], {}
    for k, (name, ds) in enumerate(zip(SPLITS, splits)):
        if plans is not None:
            masked, plan = replay_mask(ds, plans[name]), plans[name]
        else:
            masked, plan = apply_missing(ds, rate, mask_seed(seed, k))
        out.append(masked)
        used[name] = plan
    return tuple(out), used


def model_config(spec: RunSpec, ds: Dataset) -> ModelConfig:
    kw = {"dims": ds.dims, "num_classes": ds.num_classes, "num_speakers": ds.num_speakers, "seed": spec.seed}
    kw.update(spec.model)
    return ModelConfig(**kw)


def run(spec: RunSpec, out_dir=None, plans=None, log=None) -> RunResult:
    splits = load_splits(spec)
    splits, plans = mask_splits(splits, spec.missing_rate, spec.seed, plans)
    if spec.lower_bound:
        splits = tuple(drop_incomplete(ds) for ds in splits)
    tr, va, te = splits
    num_speakers = max(ds.num_speakers for ds in splits)
    cfg = replace(model_config(spec, tr), num_speakers=max(num_speakers, spec.model.get("num_speakers", 0)))
    model = SDRGNN(cfg)
    tcfg = TrainConfig(**{"seed": spec.seed, **spec.train})
    _, record = train(model, tr, va, tcfg, log=log)
    report, ev = evaluate(model, te, tcfg)
    result = RunResult(spec, report, record, model, plans, ev.zero_fill_mse)
    if out_dir is not None:
        write_run(result, out_dir)
    return result


def write_run(result: RunResult, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    resolved = {"spec": result.spec.to_json(), "model_config": result.model.cfg.to_json(),
                "train_config": asdict(TrainConfig(**{"seed": result.spec.seed, **result.spec.train}))}
    (out / "config.json").write_text(json.dumps(resolved, indent=1) + "\n", encoding="utf-8")
    (out / "seed.txt").write_text(f"{result.spec.seed}\n", encoding="utf-8")
    for name, plan in result.plans.items():
        plan.save(out / f"mask_{name}.json")
    result.record.save(out / "metrics.csv")
    result.report.save(out)
    zero = result.zero_fill_mse
    (out / "zero_fill_mse.json").write_text(json.dumps(zero) + "\n", encoding="utf-8")
    save_checkpoint(result.model, out / "checkpoint.npz",
                    extra={"best_epoch": result.record.best_epoch, "classes": result.report.confusion.shape[0]})


def load_plans(run_dir):
    run_dir = Path(run_dir)
    return {name: MaskPlan.load(run_dir / f"mask_{name}.json") for name in SPLITS}


def load_spec(run_dir):
    obj = json.loads((Path(run_dir) / "config.json").read_text(encoding="utf-8"))
    return RunSpec.from_json(obj["spec"])


def write_synth(cfg: SynthConfig, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, ds in zip(SPLITS, synth_splits(cfg)):
        save_dataset(ds, out / f"{name}.jsonl")
    manifest = {**asdict(cfg), "dims": list(cfg.dims), "modalities": list(MODALITIES),
                "splits": {s: f"{s}.jsonl" for s in SPLITS}}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    return out


def aggregate(values):
    arr = np.asarray([v for v in values if v is not None and not np.isnan(v)], dtype=np.float64)
    if arr.size == 0:
        return float("nan"), float("nan")
    return float(arr.mean()), float(arr.std())
