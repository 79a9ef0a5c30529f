"""Segment-level emotion classifier, hybrid training sets and UAR evaluation."""

from __future__ import annotations

import copy
import csv
import io
import json
from collections import Counter
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
from torch import nn

from .dataset import DatasetManifest, random_crop
from .features import FeatureStore, MelSpectrogram, loop_pad, segment_mel

VGG19_LAYOUT = (64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M",
                512, 512, 512, 512, "M", 512, 512, 512, 512, "M")
SHALLOW_LAYOUT = (16, "M", 32, "M", 32, "M", 64, "M")

SYNTHETIC_SEP = "__aug"


class ClassifierError(ValueError):
    pass


@dataclass(frozen=True)
class ClassifierSpec:
    labels: tuple
    layout: tuple = VGG19_LAYOUT
    segment_frames: int = 128
    n_mels: int = 128
    hidden: int = 256

    @classmethod
    def preset(cls, name: str, labels, segment_frames: int = 128, n_mels: int = 128) -> "ClassifierSpec":
        layouts = {"vgg19": (VGG19_LAYOUT, 512), "shallow": (SHALLOW_LAYOUT, 64)}
        if name not in layouts:
            raise ClassifierError(f"unknown classifier preset {name!r}; choose from {sorted(layouts)}")
        layout, hidden = layouts[name]
        return cls(tuple(labels), layout, segment_frames, n_mels, hidden)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierSpec":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


class SegmentClassifier(nn.Module):
    """VGG-style conv stack over a single ``segment_frames x n_mels`` segment."""

    def __init__(self, spec: ClassifierSpec):
        super().__init__()
        if len(spec.labels) < 2:
            raise ClassifierError("classifier needs at least two classes")
        self.spec = spec
        layers, ch = [], 1
        for item in spec.layout:
            if item == "M":
                layers.append(nn.MaxPool2d(2, ceil_mode=True))
            else:
                layers += [nn.Conv2d(ch, int(item), 3, padding=1), nn.ReLU()]
                ch = int(item)
        self.features = nn.Sequential(*layers)
        n_pool = sum(1 for item in spec.layout if item == "M")
        bands = spec.n_mels
        for _ in range(n_pool):
            bands = -(-bands // 2)
        # average over time only: band position carries the class evidence
        self.head = nn.Sequential(nn.Flatten(), nn.Linear(ch * bands, spec.hidden), nn.ReLU(),
                                  nn.Linear(spec.hidden, len(spec.labels)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x.unsqueeze(1)).mean(dim=2))

    def probabilities(self, segments) -> np.ndarray:
        self.eval()
        with torch.no_grad():
            x = torch.as_tensor(np.asarray(segments, dtype=np.float32))
            return torch.softmax(self(x), dim=-1).numpy()


# --- hybrid original + augmented sets ---------------------------------------

def augment_spectrogram(values: np.ndarray, augmentor, rng: torch.Generator) -> np.ndarray:
    """Augment a spectrogram of any length chunk by chunk at the augmentor's input size."""
    frames = augmentor.cfg.frames
    n = values.shape[0]
    n_chunks = -(-n // frames)
    padded = loop_pad(values, n_chunks * frames) if n < n_chunks * frames else values
    chunks = padded.reshape(n_chunks, frames, values.shape[1]).astype(np.float32)
    with torch.no_grad():
        out, _, _ = augmentor(torch.from_numpy(chunks), rng)
    return out.numpy().reshape(-1, values.shape[1])[:n]


def _in_scope(scope, record) -> bool:
    if scope is None or scope == "all":
        return True
    if callable(scope):
        return bool(scope(record))
    return record.id in scope


def build_hybrid_dataset(train: DatasetManifest, store: FeatureStore, augmentor, multiplicity: int,
                         scope="all", seed: int = 0) -> tuple[DatasetManifest, FeatureStore]:
    """Originals plus ``multiplicity`` augmented copies of every in-scope original.

    ``scope`` is ``"all"``, a record predicate, or a collection of ids.
    Copies get fresh noise and intensity, inherit labels and are marked synthetic.
    """
    if multiplicity < 0:
        raise ClassifierError("multiplicity must be >= 0")
    if multiplicity > 0 and augmentor is None:
        raise ClassifierError("missing augmentor checkpoint: cannot build augmented copies")
    rng = torch.Generator().manual_seed(seed)
    out_store = FeatureStore(store.config)
    records = []
    for rec in train.records:
        out_store[rec.id] = store[rec.id]
        records.append(rec)
    for rec in train.records:
        if multiplicity == 0 or not _in_scope(scope, rec):
            continue
        src = store[rec.id]
        for k in range(multiplicity):
            uid = f"{rec.id}{SYNTHETIC_SEP}{k}"
            out_store[uid] = MelSpectrogram(augment_spectrogram(src.values, augmentor, rng),
                                            src.config, normalized=True)
            records.append(replace(rec, id=uid, synthetic=True))
    return DatasetManifest(tuple(records), train.source_name), out_store


def origin_id(uid: str) -> str:
    return uid.split(SYNTHETIC_SEP)[0]


# --- training ---------------------------------------------------------------

@dataclass(frozen=True)
class ClassifierTrainConfig:
    learning_rate: float = 1e-4
    max_epochs: int = 100
    batch_size: int = 32
    val_fraction: float = 0.1
    patience: int = 10
    eval_hop: int = 64


@dataclass
class TrainedClassifier:
    model: SegmentClassifier
    epoch_losses: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)
    best_epoch: int = 0

    @property
    def labels(self) -> tuple:
        return self.model.spec.labels


def _crops(manifest: DatasetManifest, store: FeatureStore, frames: int, rng) -> np.ndarray:
    return np.stack([random_crop(store[r.id].values, frames, rng) for r in manifest.records]).astype(np.float32)


def train_classifier(manifest: DatasetManifest, store: FeatureStore, spec: ClassifierSpec,
                     cfg: ClassifierTrainConfig = ClassifierTrainConfig(), seed: int = 0,
                     field_name: str = "emotion") -> TrainedClassifier:
    """Train on one random segment crop per item per epoch, early-stopping on a validation slice.

    The validation slice is drawn from original (non-synthetic) records; augmented
    copies of validation utterances are dropped from training.
    """
    present = set(manifest.labels(field_name))
    if len(present) < 2:
        raise ClassifierError(f"training data has a single class: {sorted(present)}")
    unknown = present - set(spec.labels)
    if unknown:
        raise ClassifierError(f"labels {sorted(unknown)} missing from classifier spec")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = SegmentClassifier(spec)
    index = {label: i for i, label in enumerate(spec.labels)}

    originals = [r.id for r in manifest.records if not r.synthetic]
    n_val = int(round(cfg.val_fraction * len(originals)))
    val_ids = set(rng.choice(originals, size=n_val, replace=False).tolist()) if n_val else set()
    train_m = manifest.subset(lambda r: origin_id(r.id) not in val_ids)
    val_m = manifest.subset(lambda r: r.id in val_ids)
    y_train = torch.tensor([index[l] for l in train_m.labels(field_name)])
    y_val = torch.tensor([index[l] for l in val_m.labels(field_name)]) if n_val else None
    val_x = torch.from_numpy(_crops(val_m, store, spec.segment_frames, rng)) if n_val else None

    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    loss_fn = nn.CrossEntropyLoss()
    result = TrainedClassifier(model)
    best_state, best_val, stale = copy.deepcopy(model.state_dict()), float("inf"), 0
    for epoch in range(cfg.max_epochs):
        model.train()
        x = torch.from_numpy(_crops(train_m, store, spec.segment_frames, rng))
        order = torch.from_numpy(rng.permutation(len(train_m)))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss = loss_fn(model(x[idx]), y_train[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        result.epoch_losses.append(total / len(order))
        if val_x is None:
            best_state, result.best_epoch = copy.deepcopy(model.state_dict()), epoch
            continue
        model.eval()
        with torch.no_grad():
            val_loss = loss_fn(model(val_x), y_val).item()
        result.val_losses.append(val_loss)
        if val_loss < best_val:
            best_val, best_state, result.best_epoch, stale = val_loss, copy.deepcopy(model.state_dict()), epoch, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    model.load_state_dict(best_state)
    model.eval()
    return result


# --- inference and scoring --------------------------------------------------

def vote(probs: np.ndarray, labels) -> tuple[str, list]:
    """Majority vote over segment argmaxes; ties go to the highest mean probability."""
    probs = np.asarray(probs)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ClassifierError("need at least one segment to vote")
    votes = probs.argmax(axis=1)
    counts = np.bincount(votes, minlength=probs.shape[1])
    tied = np.flatnonzero(counts == counts.max())
    mean = probs.mean(axis=0)
    winner = tied[np.argmax(mean[tied])]
    return labels[winner], [labels[v] for v in votes]


def predict_utterance(mel: MelSpectrogram, clf, hop: int = 64) -> tuple[str, list]:
    model = clf.model if isinstance(clf, TrainedClassifier) else clf
    if mel.n_frames == 0:
        raise ClassifierError("cannot classify an empty spectrogram")
    segments = segment_mel(mel, model.spec.segment_frames, hop)
    return vote(model.probabilities([s.values for s in segments]), model.spec.labels)


@dataclass
class EvaluationReport:
    labels: list
    confusion: list
    recall: dict
    uar: float
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "EvaluationReport":
        return cls(**d)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow([*(f"recall_{l}" for l in self.recall), "uar"])
        writer.writerow([*(f"{v:.6f}" for v in self.recall.values()), f"{self.uar:.6f}"])
        return buf.getvalue()


def compute_uar(pairs, classes=None, metadata: dict | None = None) -> EvaluationReport:
    """Confusion matrix (reference rows x predicted columns), per-class recall and UAR.

    ``classes`` lists the reference classes to score, in order (default: every
    reference label, sorted); each must occur at least once as a reference.
    Labels that only occur as predictions get extra columns.
    """
    pairs = list(pairs)
    if not pairs:
        raise ClassifierError("no (reference, predicted) pairs to score")
    ref_counts = Counter(r for r, _ in pairs)
    classes = sorted(ref_counts) if classes is None else list(classes)
    empty = [c for c in classes if ref_counts[c] == 0]
    if empty:
        raise ClassifierError(f"reference class(es) with zero instances: {empty}")
    unlisted = sorted(set(ref_counts) - set(classes))
    if unlisted:
        raise ClassifierError(f"reference labels {unlisted} not among the scored classes")
    labels = classes + sorted({p for _, p in pairs} - set(classes))
    pos = {l: i for i, l in enumerate(labels)}
    cm = np.zeros((len(labels), len(labels)), dtype=int)
    for ref, pred in pairs:
        cm[pos[ref], pos[pred]] += 1
    recall = {c: float(cm[pos[c], pos[c]] / ref_counts[c]) for c in classes}
    uar = float(np.mean(list(recall.values())))
    return EvaluationReport(labels, cm.tolist(), recall, uar, metadata or {})


def evaluate(manifest: DatasetManifest, store: FeatureStore, clf, hop: int = 64,
             field_name: str = "emotion", metadata: dict | None = None) -> EvaluationReport:
    model = clf.model if isinstance(clf, TrainedClassifier) else clf
    pairs = [(rec.label(field_name), predict_utterance(store[rec.id], model, hop)[0])
             for rec in manifest.records]
    refs = {r for r, _ in pairs}
    return compute_uar(pairs, [l for l in model.spec.labels if l in refs], metadata)
