"""Synthetic classification tasks, batching and evaluation metrics.

Three generators mirror the class structure of the benchmarks the method is
usually evaluated on:

``SENT2``
    binary sentiment: the label is the majority of planted positive vs.
    negative marker tokens (never tied).
``NLI2``
    binary entailment: ``[CLS] premise [SEP] hypothesis``; entailed when the
    hypothesis tokens form a sub-multiset of the premise tokens.
``TOPIC18``
    18-way topic: each topic owns signature tokens and the topic with the
    strictly largest signature count is the label.

Sequences are integer id arrays starting with ``CLS_ID``; ``PAD_ID`` (0)
pads batches.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .encoder import CLS_ID, PAD_ID, SEP_ID
from .errors import ConfigError, ContractError, InputError
from .numcore.rng import Rng

KIND_CLASSES = {"SENT2": 2, "NLI2": 2, "TOPIC18": 18}
FIRST_CONTENT_ID = 3
SENT_MARKERS = 5
TOPIC_SIGNATURE = 3


@dataclass
class TaskSpec:
    kind: str = "SENT2"
    n_train: int = 2000
    n_dev: int = 400
    n_test: int = 400
    vocab_size: int = 100
    max_seq_len: int = 16
    noise_rate: float = 0.0
    seed: int = 0
    imbalance: float = 0.0  # TOPIC18 class prior ~ (k + 1) ** -imbalance

    def __post_init__(self):
        if self.kind not in KIND_CLASSES:
            raise ConfigError(f"unknown task kind {self.kind!r}")
        if min(self.n_train, self.n_dev, self.n_test) < 1:
            raise ConfigError("split sizes must be >= 1")
        if not 0 <= self.noise_rate <= 1:
            raise ConfigError("noise_rate must be in [0, 1]")
        if self.max_seq_len < 8:
            raise ConfigError("max_seq_len must be >= 8 for the synthetic generators")
        needed = FIRST_CONTENT_ID + {
            "SENT2": 2 * SENT_MARKERS + 4,
            "NLI2": 12,
            "TOPIC18": 18 * TOPIC_SIGNATURE + 4,
        }[self.kind]
        if self.vocab_size < needed:
            raise ConfigError(f"vocab_size {self.vocab_size} too small for {self.kind} (needs {needed})")

    @property
    def num_classes(self) -> int:
        return KIND_CLASSES[self.kind]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Dataset:
    """Token sequences with labels; ``clean_labels`` keeps pre-noise labels."""

    kind: str
    num_classes: int
    sequences: list
    labels: np.ndarray
    clean_labels: Optional[np.ndarray] = None
    max_seq_len: int = 16

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.clean_labels is None:
            self.clean_labels = self.labels.copy()
        if len(self.sequences) != len(self.labels):
            raise ContractError("sequences and labels differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.kind, self.num_classes, [self.sequences[i] for i in idx],
                       self.labels[idx], self.clean_labels[idx], self.max_seq_len)

    def with_labels(self, labels) -> "Dataset":
        return Dataset(self.kind, self.num_classes, self.sequences, np.asarray(labels),
                       self.clean_labels, self.max_seq_len)

    def padded(self, width: Optional[int] = None) -> tuple[np.ndarray, np.ndarray]:
        width = width or self.max_seq_len
        ids = np.full((len(self), width), PAD_ID, dtype=np.int64)
        for r, seq in enumerate(self.sequences):
            seq = seq[:width]
            ids[r, : len(seq)] = seq
        return ids, ids != PAD_ID

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for seq, lab in zip(self.sequences, self.labels):
            h.update(np.asarray(seq, dtype=np.int64).tobytes())
            h.update(int(lab).to_bytes(2, "little"))
        return h.hexdigest()[:16]


@dataclass
class Splits:
    train: Dataset
    dev: Dataset
    test: Dataset
    spec: TaskSpec

    def fingerprint(self) -> str:
        return "-".join(d.fingerprint()[:8] for d in (self.train, self.dev, self.test))


# ---------------------------------------------------------------- generators


def _place(rng: Rng, planted: list, n_fill: int, fillers: Sequence[int]) -> list:
    tokens = list(planted) + [fillers[i] for i in rng.integers(len(fillers), (n_fill,))]
    return [tokens[i] for i in rng.permutation(len(tokens))]


def _gen_sent2(rng: Rng, spec: TaskSpec) -> tuple[list, int]:
    pos = list(range(FIRST_CONTENT_ID, FIRST_CONTENT_ID + SENT_MARKERS))
    neg = list(range(FIRST_CONTENT_ID + SENT_MARKERS, FIRST_CONTENT_ID + 2 * SENT_MARKERS))
    fillers = list(range(FIRST_CONTENT_ID + 2 * SENT_MARKERS, spec.vocab_size))
    label = int(rng.integers(2))
    win = rng.randint(1, 4)
    lose = rng.randint(0, win - 1)
    n_pos, n_neg = (win, lose) if label == 1 else (lose, win)
    planted = [pos[i] for i in rng.integers(len(pos), (n_pos,))] + \
              [neg[i] for i in rng.integers(len(neg), (n_neg,))]
    content = rng.randint(max(6, len(planted)), spec.max_seq_len - 1)
    return [CLS_ID] + _place(rng, planted, content - len(planted), fillers), label


def _gen_nli2(rng: Rng, spec: TaskSpec) -> tuple[list, int]:
    words = list(range(FIRST_CONTENT_ID, spec.vocab_size))
    budget = spec.max_seq_len - 3
    hyp_len = rng.randint(2, 3)
    prem_len = rng.randint(4, min(7, budget - hyp_len))
    premise = [words[i] for i in rng.integers(len(words), (prem_len,))]
    label = int(rng.integers(2))
    picks = rng.permutation(prem_len)[:hyp_len]
    hyp = [premise[i] for i in picks]
    if label == 0:
        absent = [w for w in words if w not in premise]
        hyp[int(rng.integers(hyp_len))] = absent[int(rng.integers(len(absent)))]
    return [CLS_ID] + premise + [SEP_ID] + hyp, label


def _topic_prior(spec: TaskSpec) -> np.ndarray:
    w = (np.arange(18) + 1.0) ** -spec.imbalance
    return np.cumsum(w / w.sum())


def _gen_topic18(rng: Rng, spec: TaskSpec, prior: np.ndarray) -> tuple[list, int]:
    sig = [list(range(FIRST_CONTENT_ID + TOPIC_SIGNATURE * c, FIRST_CONTENT_ID + TOPIC_SIGNATURE * (c + 1)))
           for c in range(18)]
    fillers = list(range(FIRST_CONTENT_ID + 18 * TOPIC_SIGNATURE, spec.vocab_size))
    label = int(min(np.searchsorted(prior, rng.random(), side="right"), 17))
    win = rng.randint(2, 4)
    others = [c for c in rng.permutation(18) if c != label][: rng.randint(0, 2)]
    planted = [sig[label][i] for i in rng.integers(TOPIC_SIGNATURE, (win,))]
    for c in others:
        k = rng.randint(1, win - 1)
        planted += [sig[c][i] for i in rng.integers(TOPIC_SIGNATURE, (k,))]
    content = rng.randint(max(6, len(planted)), spec.max_seq_len - 1)
    return [CLS_ID] + _place(rng, planted, content - len(planted), fillers), label


def recover_label(kind: str, seq: Sequence[int]) -> Optional[int]:
    """Recompute the label from tokens alone; None when ambiguous."""
    seq = list(seq)
    if seq and seq[0] == CLS_ID:
        seq = seq[1:]
    if kind == "SENT2":
        pos = sum(FIRST_CONTENT_ID <= t < FIRST_CONTENT_ID + SENT_MARKERS for t in seq)
        neg = sum(FIRST_CONTENT_ID + SENT_MARKERS <= t < FIRST_CONTENT_ID + 2 * SENT_MARKERS for t in seq)
        return None if pos == neg else int(pos > neg)
    if kind == "NLI2":
        if SEP_ID not in seq:
            return None
        cut = seq.index(SEP_ID)
        prem, hyp = Counter(seq[:cut]), Counter(seq[cut + 1:])
        return int(all(prem[t] >= n for t, n in hyp.items()))
    if kind == "TOPIC18":
        counts = np.zeros(18, dtype=int)
        for t in seq:
            c = (t - FIRST_CONTENT_ID) // TOPIC_SIGNATURE
            if FIRST_CONTENT_ID <= t and c < 18:
                counts[c] += 1
        top = counts.max()
        return None if top == 0 or (counts == top).sum() > 1 else int(counts.argmax())
    raise ConfigError(f"unknown task kind {kind!r}")


def flip_labels(labels: np.ndarray, rate: float, num_classes: int, rng: Rng) -> np.ndarray:
    """Replace each label, with probability ``rate``, by a different class drawn uniformly."""
    labels = np.asarray(labels, dtype=np.int64)
    flip = rng.uniform((len(labels),)) < rate
    shift = 1 + rng.integers(num_classes - 1, (len(labels),))
    return np.where(flip, (labels + shift) % num_classes, labels)


def gen_synthetic(spec: TaskSpec) -> Splits:
    """Generate disjoint train/dev/test splits; depends only on ``spec``."""
    rng = Rng(spec.seed)
    prior = _topic_prior(spec)
    seen: set = set()
    splits = []
    for n in (spec.n_train, spec.n_dev, spec.n_test):
        seqs, labels = [], []
        attempts = 0
        while len(seqs) < n:
            attempts += 1
            if attempts > 50 * n + 1000:
                raise ConfigError(f"could not generate {n} distinct {spec.kind} examples")
            if spec.kind == "SENT2":
                seq, lab = _gen_sent2(rng, spec)
            elif spec.kind == "NLI2":
                seq, lab = _gen_nli2(rng, spec)
            else:
                seq, lab = _gen_topic18(rng, spec, prior)
            key = tuple(seq)
            if key in seen:
                continue
            seen.add(key)
            seqs.append(np.asarray(seq, dtype=np.int64))
            labels.append(lab)
        splits.append(Dataset(spec.kind, spec.num_classes, seqs, np.asarray(labels), None, spec.max_seq_len))
    train, dev, test = splits
    if spec.noise_rate > 0:
        train = Dataset(train.kind, train.num_classes, train.sequences,
                        flip_labels(train.labels, spec.noise_rate, spec.num_classes, rng),
                        train.clean_labels, spec.max_seq_len)
    return Splits(train, dev, test, spec)


# ---------------------------------------------------------------- batching


@dataclass
class Batch:
    ids: np.ndarray      # (B, L) int, PAD_ID padded
    mask: np.ndarray     # (B, L) bool, true on real tokens
    onehot: np.ndarray   # (B, C)
    labels: np.ndarray   # (B,)
    index: np.ndarray    # (B,) row indices into the source dataset

    def __len__(self) -> int:
        return len(self.labels)

    def onehot_as(self, dtype) -> np.ndarray:
        return self.onehot.astype(dtype)


def make_batch(dataset: Dataset, index, labels: Optional[np.ndarray] = None) -> Batch:
    index = np.asarray(index, dtype=np.int64)
    ids = np.full((len(index), dataset.max_seq_len), PAD_ID, dtype=np.int64)
    for r, i in enumerate(index):
        seq = dataset.sequences[i][: dataset.max_seq_len]
        ids[r, : len(seq)] = seq
    labs = (dataset.labels if labels is None else np.asarray(labels))[index]
    onehot = np.eye(dataset.num_classes, dtype=np.float64)[labs]
    return Batch(ids, ids != PAD_ID, onehot, labs, index)


def make_batches(dataset: Dataset, batch_size: int, seed: Optional[int] = None) -> list[Batch]:
    """Split ``dataset`` into batches, shuffled when ``seed`` is given.

    The final partial batch is kept. Rows are padded to the dataset's
    ``max_seq_len``.
    """
    if len(dataset) == 0:
        raise ContractError("cannot batch an empty dataset")
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    order = Rng(seed).permutation(len(dataset)) if seed is not None else np.arange(len(dataset))
    return [make_batch(dataset, order[s:s + batch_size]) for s in range(0, len(dataset), batch_size)]


# ---------------------------------------------------------------- metrics


def accuracy(preds, golds) -> float:
    preds, golds = np.asarray(preds), np.asarray(golds)
    if preds.shape != golds.shape:
        raise ContractError(f"accuracy: {preds.shape} predictions vs {golds.shape} labels")
    if preds.size == 0:
        raise ContractError("accuracy of an empty prediction set")
    return float((preds == golds).mean())


def per_class_prf(preds, golds, num_classes: int,
                  absent_f1: float = 1.0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One-vs-rest precision, recall and F1 per class.

    Undefined precision/recall are 0. A class that appears in neither
    ``preds`` nor ``golds`` gets F1 = ``absent_f1`` (1 by default, so perfect
    predictions score 1 for any ``num_classes``; pass 0 for the stricter
    convention).
    """
    preds, golds = np.asarray(preds, dtype=np.int64), np.asarray(golds, dtype=np.int64)
    if preds.shape != golds.shape:
        raise ContractError(f"{preds.shape} predictions vs {golds.shape} labels")
    if preds.size and (max(preds.max(), golds.max()) >= num_classes or min(preds.min(), golds.min()) < 0):
        raise InputError("label index outside 0..num_classes-1")
    tp = np.bincount(golds[preds == golds], minlength=num_classes).astype(float)
    pred_n = np.bincount(preds, minlength=num_classes).astype(float)
    gold_n = np.bincount(golds, minlength=num_classes).astype(float)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(pred_n > 0, tp / pred_n, 0.0)
        recall = np.where(gold_n > 0, tp / gold_n, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / denom, 0.0)
    f1 = np.where((pred_n == 0) & (gold_n == 0), absent_f1, f1)
    return precision, recall, f1


def macro_f1(preds, golds, num_classes: int, absent_f1: float = 1.0) -> float:
    """Unweighted mean of per-class F1 over all ``num_classes`` classes (see :func:`per_class_prf`)."""
    return float(per_class_prf(preds, golds, num_classes, absent_f1)[2].mean())


@dataclass
class MetricsReport:
    accuracy: float
    macro_f1: float
    precision: list = field(default_factory=list)
    recall: list = field(default_factory=list)
    f1: list = field(default_factory=list)
    losses: dict = field(default_factory=dict)

    @classmethod
    def from_predictions(cls, preds, golds, num_classes: int, losses: Optional[dict] = None) -> "MetricsReport":
        p, r, f = per_class_prf(preds, golds, num_classes)
        return cls(accuracy(preds, golds), float(f.mean()), p.tolist(), r.tolist(), f.tolist(), dict(losses or {}))


# ---------------------------------------------------------------- files


def write_dataset(dataset: Dataset, path) -> None:
    """One record per line: space-separated token ids, a tab, the label."""
    with open(path, "w", encoding="utf-8") as fh:
        for seq, lab in zip(dataset.sequences, dataset.labels):
            fh.write(" ".join(str(int(t)) for t in seq) + "\t" + str(int(lab)) + "\n")


def read_dataset(path, kind: str, num_classes: int, max_seq_len: int) -> Dataset:
    seqs, labels = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                toks, lab = line.split("\t")
                seqs.append(np.asarray([int(t) for t in toks.split()], dtype=np.int64))
                labels.append(int(lab))
            except ValueError:
                raise InputError(f"{path}:{lineno}: malformed record") from None
    return Dataset(kind, num_classes, seqs, np.asarray(labels, dtype=np.int64), None, max_seq_len)


def save_splits(splits: Splits, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name in ("train", "dev", "test"):
        write_dataset(getattr(splits, name), d / f"{name}.txt")
    manifest = {
        "kind": splits.spec.kind,
        "num_classes": splits.spec.num_classes,
        "sizes": {n: len(getattr(splits, n)) for n in ("train", "dev", "test")},
        "seed": splits.spec.seed,
        "vocab_size": splits.spec.vocab_size,
        "max_seq_len": splits.spec.max_seq_len,
        "noise_rate": splits.spec.noise_rate,
        "imbalance": splits.spec.imbalance,
        "fingerprint": splits.fingerprint(),
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return d


def load_splits(directory) -> Splits:
    d = Path(directory)
    m = json.loads((d / "manifest.json").read_text())
    spec = TaskSpec(kind=m["kind"], n_train=m["sizes"]["train"], n_dev=m["sizes"]["dev"],
                    n_test=m["sizes"]["test"], vocab_size=m["vocab_size"], max_seq_len=m["max_seq_len"],
                    noise_rate=m.get("noise_rate", 0.0), seed=m["seed"], imbalance=m.get("imbalance", 0.0))
    parts = [read_dataset(d / f"{n}.txt", spec.kind, spec.num_classes, spec.max_seq_len)
             for n in ("train", "dev", "test")]
    return Splits(*parts, spec)
