"""Conversation data model, JSONL storage, synthetic corpora and modality masking."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

MODALITIES = ("a", "v", "t")
NUM_MODS = len(MODALITIES)
MAX_MISSING_RATE = (NUM_MODS - 1) / NUM_MODS
# The conventional missing-rate grid ends at 0.7, a rounded label for the
# (Mods-1)/Mods cap; that exact value is realized as the cap.
CAP_LABEL = 0.7


def effective_rate(rate):
    """Rate actually realized for a requested rate; raises ProtocolError above the cap."""
    if abs(rate - CAP_LABEL) < 1e-9:
        return MAX_MISSING_RATE
    if not 0.0 <= rate <= MAX_MISSING_RATE + 1e-12:
        raise ProtocolError(f"missing rate {rate} outside [0, {MAX_MISSING_RATE:.4f}]: each utterance must keep "
                            f"one of {NUM_MODS} modalities, so the cap is (Mods-1)/Mods ({CAP_LABEL} denotes the cap)")
    return rate


class DataError(ValueError):
    pass


class ProtocolError(DataError):
    pass


@dataclass
class Conversation:
    """One dialogue. Features hold ground truth for every slot; `mask` hides slots.

    features: modality -> (n, d_m) array
    mask:     (n, 3) int array, column order a, v, t
    """

    id: str
    speakers: np.ndarray
    labels: np.ndarray
    features: dict
    mask: np.ndarray

    def __post_init__(self):
        self.speakers = np.asarray(self.speakers, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=np.int64).reshape(-1, NUM_MODS)
        self.features = {m: np.asarray(self.features[m], dtype=np.float64) for m in MODALITIES}

    def __len__(self):
        return len(self.labels)

    @property
    def roster(self):
        return sorted(set(self.speakers.tolist()))

    def imputed(self):
        """Encoder input: available slots pass through, masked slots become zeros."""
        return {m: self.features[m] * self.mask[:, k:k + 1] for k, m in enumerate(MODALITIES)}

    def stacked(self, imputed=True):
        feats = self.imputed() if imputed else self.features
        return np.concatenate([feats[m] for m in MODALITIES], axis=1)


def impute_input(conv: Conversation):
    return conv.imputed()


@dataclass
class Dataset:
    conversations: list
    num_classes: int
    dims: tuple
    split: str = "train"

    def __len__(self):
        return len(self.conversations)

    @property
    def num_utterances(self):
        return sum(len(c) for c in self.conversations)

    @property
    def num_speakers(self):
        return 1 + max(int(c.speakers.max()) for c in self.conversations)

    def validate(self):
        if not self.conversations:
            raise DataError(f"{self.split}: dataset has no conversations")
        for conv in self.conversations:
            n = len(conv)
            if n == 0:
                raise DataError(f"conversation {conv.id}: no utterances")
            if conv.speakers.shape != (n,) or conv.mask.shape != (n, NUM_MODS):
                raise DataError(f"conversation {conv.id}: speaker/mask length does not match {n} utterances")
            for k, m in enumerate(MODALITIES):
                if conv.features[m].shape != (n, self.dims[k]):
                    raise DataError(f"conversation {conv.id}: modality {m} has shape "
                                    f"{conv.features[m].shape}, expected {(n, self.dims[k])}")
            for i in range(n):
                if not conv.mask[i].any():
                    raise DataError(f"conversation {conv.id} utterance {i}: all modalities masked")
                if not 0 <= conv.labels[i] < self.num_classes:
                    raise DataError(f"conversation {conv.id} utterance {i}: label {conv.labels[i]} "
                                    f"outside [0, {self.num_classes})")
            if not set(np.unique(conv.mask)) <= {0, 1}:
                raise DataError(f"conversation {conv.id}: mask entries must be 0 or 1")
            if (conv.speakers < 0).any():
                raise DataError(f"conversation {conv.id}: negative speaker id")
        return self


def missing_rate(ds: Dataset) -> float:
    total = ds.num_utterances * NUM_MODS
    if total == 0:
        raise DataError("missing rate of an empty dataset is undefined")
    available = sum(int(c.mask.sum()) for c in ds.conversations)
    return 1.0 - available / total


# ------------------------------------------------------------------ file io


def conversation_to_record(conv: Conversation) -> dict:
    return {
        "id": conv.id,
        "utterances": [
            {
                "speaker": int(conv.speakers[i]),
                "label": int(conv.labels[i]),
                "mask": [int(x) for x in conv.mask[i]],
                **{m: conv.features[m][i].tolist() for m in MODALITIES},
            }
            for i in range(len(conv))
        ],
    }


def save_dataset(ds: Dataset, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for conv in ds.conversations:
            fh.write(json.dumps(conversation_to_record(conv), separators=(",", ":")) + "\n")


def load_dataset(path, num_classes=None, split=None) -> Dataset:
    """Read a JSONL conversation file (see README for the record layout).

    If `num_classes` is omitted it is inferred as max label + 1.
    """
    path = Path(path)
    convs = []
    dims = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                utts = rec["utterances"]
                feats = {m: [u[m] for u in utts] for m in MODALITIES}
                conv = Conversation(
                    id=str(rec.get("id", f"conv{lineno}")),
                    speakers=[u["speaker"] for u in utts],
                    labels=[u["label"] for u in utts],
                    features={m: np.array(feats[m], dtype=np.float64).reshape(len(utts), -1) for m in MODALITIES},
                    mask=[u["mask"] for u in utts],
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: cannot parse conversation record ({exc})") from exc
            if dims is None and len(conv):
                dims = tuple(conv.features[m].shape[1] for m in MODALITIES)
            convs.append(conv)
    if not convs:
        raise DataError(f"{path}: no conversations")
    if num_classes is None:
        num_classes = 1 + max(int(c.labels.max()) for c in convs if len(c))
    ds = Dataset(convs, num_classes, dims or (0, 0, 0), split or path.stem)
    return ds.validate()


# ---------------------------------------------------------------- synthetic


@dataclass
class SynthConfig:
    num_conversations: int = 8
    utterances: int = 10
    speakers: int = 2
    classes: int = 4
    dims: tuple = (8, 8, 8)
    signal: float = 5.0
    persistence: float = 0.7
    seed: int = 0

    def validate(self):
        if self.speakers < 2:
            raise ValueError(f"need at least 2 speakers, got {self.speakers}")
        if self.classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.classes}")
        if self.signal < 0:
            raise ValueError(f"signal strength must be non-negative, got {self.signal}")
        if self.num_conversations < 1 or self.utterances < 1:
            raise ValueError("need at least one conversation with at least one utterance")
        if len(self.dims) != NUM_MODS or min(self.dims) < 1:
            raise ValueError(f"dims must be three positive extents, got {self.dims}")
        return self


def class_prototypes(classes, dims, seed):
    """Unit-norm prototype per (class, modality); depends only on the seed."""
    rng = np.random.default_rng([seed, 7919])
    protos = {}
    for m, d in zip(MODALITIES, dims):
        p = rng.standard_normal((classes, d))
        protos[m] = p / np.linalg.norm(p, axis=1, keepdims=True)
    return protos


def synth_generate(cfg: SynthConfig, split="train", protos=None, offset=0) -> Dataset:
    """Conversations whose features are signal * prototype[label] + N(0, 1) noise.

    `offset` decorrelates splits drawn with the same seed; prototypes are
    shared across splits so that a model trained on one split transfers.
    """
    cfg.validate()
    protos = class_prototypes(cfg.classes, cfg.dims, cfg.seed) if protos is None else protos
    rng = np.random.default_rng([cfg.seed, offset])
    convs = []
    for c in range(cfg.num_conversations):
        n = cfg.utterances
        speakers = np.empty(n, dtype=np.int64)
        cur, i = int(rng.integers(cfg.speakers)), 0
        while i < n:
            turn = int(rng.integers(1, 4))
            speakers[i:i + turn] = cur
            i += turn
            cur = (cur + int(rng.integers(1, cfg.speakers))) % cfg.speakers
        labels = np.empty(n, dtype=np.int64)
        labels[0] = rng.integers(cfg.classes)
        for i in range(1, n):
            labels[i] = labels[i - 1] if rng.random() < cfg.persistence else rng.integers(cfg.classes)
        feats = {m: cfg.signal * protos[m][labels] + rng.standard_normal((n, d))
                 for m, d in zip(MODALITIES, cfg.dims)}
        convs.append(Conversation(f"{split}{offset}-{c}", speakers, labels, feats, np.ones((n, NUM_MODS))))
    return Dataset(convs, cfg.classes, tuple(cfg.dims), split).validate()


def synth_splits(cfg: SynthConfig, val_fraction=0.5, test_fraction=1.0):
    """(train, val, test) drawn from one prototype set."""
    protos = class_prototypes(cfg.classes, cfg.dims, cfg.seed)
    out = []
    for k, (name, frac) in enumerate([("train", 1.0), ("val", val_fraction), ("test", test_fraction)]):
        sub = replace(cfg, num_conversations=max(1, round(cfg.num_conversations * frac)))
        out.append(synth_generate(sub, name, protos, offset=k))
    return tuple(out)


def nearest_prototype_accuracy(ds: Dataset, protos, signal):
    """Oracle classifier: assign each utterance to the closest scaled prototype."""
    correct = total = 0
    for conv in ds.conversations:
        dist = sum(((conv.features[m][:, None, :] - signal * protos[m][None]) ** 2).sum(-1)
                   for m in MODALITIES)
        correct += int((dist.argmin(1) == conv.labels).sum())
        total += len(conv)
    return correct / total


# ------------------------------------------------------------------ masking


@dataclass
class MaskPlan:
    rate: float
    seed: int
    dropped: list = field(default_factory=list)  # (conversation id, utterance index, modality)

    def to_json(self):
        return {"seed": self.seed, "missing_rate": self.rate,
                "dropped": [[c, int(i), m] for c, i, m in self.dropped]}

    @classmethod
    def from_json(cls, obj):
        return cls(float(obj["missing_rate"]), int(obj["seed"]),
                   [(str(c), int(i), str(m)) for c, i, m in obj["dropped"]])

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path):
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def apply_missing(ds: Dataset, rate: float, seed: int):
    """Hide exactly round(rate * n * 3) slots, keeping >= 1 modality per utterance.

    A request of 0.7 is realized at the 2/3 cap (see `effective_rate`).

    Slots are visited in a seeded random order and dropped while their
    utterance still has two or more visible modalities. The input is not
    modified; returns (masked dataset, MaskPlan).
    """
    realized = effective_rate(rate)
    slots = [(ci, i, k) for ci, conv in enumerate(ds.conversations)
             for i in range(len(conv)) for k in range(NUM_MODS)]
    target = int(round(realized * len(slots)))
    masks = [conv.mask.copy() for conv in ds.conversations]
    need = target - sum(int((m == 0).sum()) for m in masks)
    if need < 0:
        raise ProtocolError(f"dataset already has {target - need} missing slots, more than requested {target}")
    rng = np.random.default_rng(seed)
    dropped = []
    for s in rng.permutation(len(slots)):
        if len(dropped) == need:
            break
        ci, i, k = slots[s]
        if masks[ci][i, k] and masks[ci][i].sum() >= 2:
            masks[ci][i, k] = 0
            dropped.append((ds.conversations[ci].id, i, MODALITIES[k]))
    if len(dropped) != need:
        raise ProtocolError(f"could only drop {len(dropped)} of {need} slots under the one-survivor constraint")
    convs = [replace(conv, mask=m) for conv, m in zip(ds.conversations, masks)]
    return replace(ds, conversations=convs), MaskPlan(rate, seed, dropped)


def replay_mask(ds: Dataset, plan: MaskPlan) -> Dataset:
    by_id = {conv.id: k for k, conv in enumerate(ds.conversations)}
    masks = [conv.mask.copy() for conv in ds.conversations]
    for cid, i, m in plan.dropped:
        if cid not in by_id:
            raise DataError(f"mask plan refers to unknown conversation {cid!r}")
        masks[by_id[cid]][i, MODALITIES.index(m)] = 0
    convs = [replace(conv, mask=m) for conv, m in zip(ds.conversations, masks)]
    return replace(ds, conversations=convs).validate()


def drop_incomplete(ds: Dataset) -> Dataset:
    """Lower-bound mode: keep only utterances with every modality observed."""
    convs = []
    for conv in ds.conversations:
        keep = conv.mask.all(axis=1)
        if keep.any():
            convs.append(Conversation(conv.id, conv.speakers[keep], conv.labels[keep],
                                      {m: conv.features[m][keep] for m in MODALITIES}, conv.mask[keep]))
    if not convs:
        raise DataError(f"{ds.split}: no complete utterances left in lower-bound mode")
    return replace(ds, conversations=convs)


def binarize_sentiment(scores):
    """Sentiment scores -> (keep mask, labels): <0 negative (0), >0 positive (1); exact zeros dropped."""
    scores = np.asarray(scores, dtype=np.float64)
    return scores != 0, (scores > 0).astype(np.int64)
