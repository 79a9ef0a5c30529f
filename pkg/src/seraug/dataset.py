"""Utterance manifests and the sampling protocols built on them."""

from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .features import FeatureConfig, FeatureStore, MelSpectrogram, loop_pad

KNOWN_EMOTIONS = ("Neutral", "Angry", "Sad", "Happy")
VALENCES = ("Negative", "Positive")
DEFAULT_VALENCE_MAP = {
    "Angry": "Negative",
    "Sad": "Negative",
    "Happy": "Positive",
    "Neutral": "Positive",
}


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class UtteranceRecord:
    id: str
    audio_path: str
    emotion: str | None = None
    valence: str | None = None
    speaker: str = ""
    session: str = ""
    language: str = ""
    duration_s: float = 1.0
    synthetic: bool = False

    def __post_init__(self):
        if self.emotion is None and self.valence is None:
            raise ManifestError(f"record {self.id!r} has neither emotion nor valence")
        if self.valence is not None and self.valence not in VALENCES:
            raise ManifestError(f"record {self.id!r}: valence must be one of {VALENCES}, got {self.valence!r}")
        if self.emotion is not None and self.emotion not in KNOWN_EMOTIONS and self.valence is None:
            raise ManifestError(f"record {self.id!r}: unknown emotion {self.emotion!r} without a valence")
        if not self.duration_s > 0:
            raise ManifestError(f"record {self.id!r}: duration_s must be positive")

    def label(self, field_name: str = "emotion") -> str:
        value = getattr(self, field_name)
        if value is None:
            raise ManifestError(f"record {self.id!r} has no {field_name} label")
        return value

    def to_json(self) -> str:
        data = {k: v for k, v in asdict(self).items() if v is not None}
        if not self.synthetic:
            data.pop("synthetic")
        return json.dumps(data, sort_keys=True)


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[UtteranceRecord, ...]
    source_name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        seen = set()
        for rec in self.records:
            if rec.id in seen:
                raise ManifestError(f"duplicate id {rec.id!r}")
            seen.add(rec.id)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    def labels(self, field_name: str = "emotion") -> list[str]:
        return [r.label(field_name) for r in self.records]

    def class_counts(self, field_name: str = "emotion") -> Counter:
        return Counter(self.labels(field_name))

    def subset(self, keep) -> "DatasetManifest":
        """Keep records for which ``keep(record)`` is true, preserving order."""
        return DatasetManifest(tuple(r for r in self.records if keep(r)), self.source_name)

    def concat(self, other: "DatasetManifest", source_name: str | None = None) -> "DatasetManifest":
        return DatasetManifest(self.records + other.records, source_name or self.source_name)

    def save(self, path) -> None:
        Path(path).write_text("".join(r.to_json() + "\n" for r in self.records))


_RECORD_FIELDS = {f for f in UtteranceRecord.__dataclass_fields__}
_REQUIRED = ("id", "audio_path")


def load_manifest(path, source_name: str | None = None) -> DatasetManifest:
    """Read a JSON-lines manifest. Blank lines are skipped."""
    path = Path(path)
    records, seen = [], {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path} line {lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise ManifestError(f"{path} line {lineno}: expected a JSON object")
            for key in _REQUIRED:
                if key not in obj:
                    raise ManifestError(f"{path} line {lineno}: missing required field {key!r}")
            unknown = set(obj) - _RECORD_FIELDS
            if unknown:
                raise ManifestError(f"{path} line {lineno}: unknown field(s) {sorted(unknown)}")
            if obj["id"] in seen:
                raise ManifestError(
                    f"{path} line {lineno}: duplicate id {obj['id']!r} (first seen on line {seen[obj['id']]})"
                )
            seen[obj["id"]] = lineno
            try:
                records.append(UtteranceRecord(**obj))
            except (ManifestError, TypeError) as exc:
                raise ManifestError(f"{path} line {lineno}: {exc}") from None
    return DatasetManifest(tuple(records), source_name or path.stem)


def _by_class(m: DatasetManifest, field_name: str) -> dict[str, list[int]]:
    groups: dict[str, list[int]] = defaultdict(list)
    for i, rec in enumerate(m.records):
        groups[rec.label(field_name)].append(i)
    return dict(sorted(groups.items()))


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def simulate_imbalance(m: DatasetManifest, keep_fraction: float, protected_class: str,
                       seed=0, field_name: str = "emotion") -> DatasetManifest:
    """Downsample every class except ``protected_class`` to ``max(1, round(keep * n))`` records."""
    if not 0 < keep_fraction <= 1:
        raise ManifestError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    groups = _by_class(m, field_name)
    if protected_class not in groups:
        raise ManifestError(f"protected class {protected_class!r} is absent from the manifest")
    rng = np.random.default_rng(seed)
    keep = set()
    for label, idx in groups.items():
        if label == protected_class:
            keep.update(idx)
            continue
        n_keep = max(1, _round_half_up(keep_fraction * len(idx)))
        keep.update(int(i) for i in rng.choice(idx, size=n_keep, replace=False))
    return DatasetManifest(tuple(r for i, r in enumerate(m.records) if i in keep), m.source_name)


def make_session_folds(m: DatasetManifest) -> list[tuple[DatasetManifest, DatasetManifest]]:
    """Leave-one-session-out folds, ordered by session name."""
    sessions = sorted({r.session for r in m.records})
    if len(sessions) < 2:
        raise ManifestError(f"need at least 2 sessions for cross-validation, found {len(sessions)}")
    return [
        (m.subset(lambda r, s=s: r.session != s), m.subset(lambda r, s=s: r.session == s))
        for s in sessions
    ]


def map_to_valence(m: DatasetManifest, mapping: dict[str, str] | None = None) -> DatasetManifest:
    mapping = DEFAULT_VALENCE_MAP if mapping is None else mapping
    missing = sorted({r.emotion for r in m.records if r.emotion is not None and r.emotion not in mapping})
    if missing:
        raise ManifestError(f"valence mapping has no entry for emotion(s): {missing}")
    bad = sorted({v for v in mapping.values() if v not in VALENCES})
    if bad:
        raise ManifestError(f"mapping targets must be {VALENCES}, got {bad}")
    return DatasetManifest(
        tuple(r if r.emotion is None else replace(r, valence=mapping[r.emotion]) for r in m.records),
        m.source_name,
    )


def _stratified_quota(counts: dict[str, int], fraction: float, caps: dict[str, int] | None = None) -> dict[str, int]:
    """Largest-remainder allocation of ``round(fraction * N)`` items across classes.

    ``caps`` bounds each class (records still available); leftover units go
    to the next classes in remainder order.
    """
    caps = counts if caps is None else caps
    total = min(_round_half_up(fraction * sum(counts.values())), sum(caps.values()))
    exact = {k: fraction * n for k, n in counts.items()}
    quota = {k: min(int(math.floor(v)), caps[k]) for k, v in exact.items()}
    order = sorted(counts, key=lambda k: -(exact[k] - math.floor(exact[k])))
    while sum(quota.values()) < total:
        for k in order:
            if sum(quota.values()) < total and quota[k] < caps[k]:
                quota[k] += 1
    return quota


def split_target_language(m: DatasetManifest, eval_fraction: float = 0.25,
                          train_fraction: float | None = None, seed=0,
                          field_name: str = "valence") -> tuple[DatasetManifest, DatasetManifest]:
    """Stratified ``(train, eval)`` split of a target-language manifest.

    ``train_fraction`` is relative to the whole manifest; by default every
    record not held out for evaluation is used for training.
    """
    if train_fraction is None:
        train_fraction = 1.0 - eval_fraction
    if not (0 < eval_fraction < 1 and 0 < train_fraction <= 1):
        raise ManifestError("fractions must lie in (0, 1)")
    if eval_fraction + train_fraction > 1 + 1e-12:
        raise ManifestError(f"eval_fraction + train_fraction = {eval_fraction + train_fraction} exceeds 1")
    rng = np.random.default_rng(seed)
    groups = _by_class(m, field_name)
    counts = {k: len(v) for k, v in groups.items()}
    eval_q = _stratified_quota(counts, eval_fraction)
    train_q = _stratified_quota(counts, train_fraction, {k: n - eval_q[k] for k, n in counts.items()})
    eval_idx, train_idx = set(), set()
    for label, idx in groups.items():
        perm = [idx[i] for i in rng.permutation(len(idx))]
        n_eval = eval_q[label]
        eval_idx.update(perm[:n_eval])
        train_idx.update(perm[n_eval:n_eval + train_q[label]])
    train_ids = {m.records[i].id for i in train_idx}
    eval_ids = {m.records[i].id for i in eval_idx}
    return m.subset(lambda r: r.id in train_ids), m.subset(lambda r: r.id in eval_ids)


@dataclass
class TripletBatch:
    """Aligned anchor/positive/negative crops, each stacked as ``(B, frames, bands)``."""

    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray
    labels: list[str]
    negative_labels: list[str]
    ids: list[tuple[str, str, str]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)


def random_crop(values: np.ndarray, frames: int, rng: np.random.Generator) -> np.ndarray:
    values = loop_pad(values, frames)
    start = int(rng.integers(0, values.shape[0] - frames + 1))
    return values[start:start + frames]


def sample_triplet_batch(m: DatasetManifest, batch_size: int, rng, store: FeatureStore,
                         frames: int | None = None, field_name: str = "emotion") -> TripletBatch:
    """Uniform anchor, positive from the anchor's class, negative from any other class.

    ``rng`` is a seed or a ``numpy.random.Generator``; with ``frames`` set,
    every item is a random (loop-padded) crop of that many frames.
    """
    rng = np.random.default_rng(rng)
    groups = _by_class(m, field_name)
    if len(groups) < 2:
        raise ManifestError("triplet sampling needs at least two classes")
    eligible = [i for idx in groups.values() if len(idx) >= 2 for i in idx]
    if not eligible:
        raise ManifestError("no class has the two records needed for an anchor/positive pair")
    labels = [r.label(field_name) for r in m.records]

    def fetch(i):
        values = store[m.records[i].id].values
        return random_crop(values, frames, rng) if frames else values

    anchors, positives, negatives, a_lab, n_lab, ids = [], [], [], [], [], []
    for _ in range(batch_size):
        a = eligible[int(rng.integers(len(eligible)))]
        same = [i for i in groups[labels[a]] if i != a]
        p = same[int(rng.integers(len(same)))]
        others = [i for i in range(len(m.records)) if labels[i] != labels[a]]
        n = others[int(rng.integers(len(others)))]
        anchors.append(fetch(a))
        positives.append(fetch(p))
        negatives.append(fetch(n))
        a_lab.append(labels[a])
        n_lab.append(labels[n])
        ids.append((m.records[a].id, m.records[p].id, m.records[n].id))
    return TripletBatch(np.stack(anchors), np.stack(positives), np.stack(negatives), a_lab, n_lab, ids)


def toy_class_names(n_classes: int) -> list[str]:
    return [KNOWN_EMOTIONS[k] if k < len(KNOWN_EMOTIONS) else f"Class{k}" for k in range(n_classes)]


def generate_toy_dataset(n_classes: int = 4, n_per_class: int = 25, frames: int = 64, seed=0,
                         n_mels: int = 128, n_sessions: int = 5, n_speakers: int = 10,
                         signal: float = 0.35, noise: float = 0.12, distractor: float = 0.0,
                         config: FeatureConfig | None = None) -> tuple[DatasetManifest, FeatureStore]:
    """Synthetic normalized spectrograms separable by band-group energy.

    Class ``k`` carries extra energy in the ``k``-th contiguous group of
    ``n_mels // n_classes`` bands, switched on in random bursts over time.
    With ``distractor > 0`` each utterance also gets bursts of up to that
    amplitude in one randomly chosen other group, which makes classes overlap.
    Sessions and speakers are assigned round-robin within each class.
    """
    if n_classes < 2:
        raise ManifestError("toy dataset needs at least two classes")
    cfg = config or FeatureConfig(n_mels=n_mels)
    if cfg.n_mels != n_mels:
        cfg = replace(cfg, n_mels=n_mels)
    rng = np.random.default_rng(seed)
    names = toy_class_names(n_classes)
    group = n_mels // n_classes
    bands = np.arange(n_mels)
    # smooth spectral tilt shared by every class
    tilt = 0.4 - 0.15 * bands / max(1, n_mels - 1)
    duration = frames * cfg.hop_length / cfg.sample_rate_hz
    records, store = [], FeatureStore(cfg)
    for k, name in enumerate(names):
        profile = np.zeros(n_mels)
        profile[k * group:(k + 1) * group] = 1.0
        for j in range(n_per_class):
            uid = f"toy_{name.lower()}_{j:03d}"
            activity = (rng.random(frames) < 0.7).astype(float)
            activity = np.convolve(activity, np.ones(3) / 3, mode="same")
            values = tilt[None, :] + signal * activity[:, None] * profile[None, :]
            if distractor > 0:
                other = (k + 1 + int(rng.integers(n_classes - 1))) % n_classes
                burst = (rng.random(frames) < 0.5) * distractor * rng.random()
                values[:, other * group:(other + 1) * group] += burst[:, None]
            values = values + noise * rng.standard_normal((frames, n_mels))
            values = np.clip(values, 0.0, 1.0).astype(np.float32)
            store[uid] = MelSpectrogram(values, cfg, normalized=True)
            records.append(UtteranceRecord(
                id=uid, audio_path=f"toy://{uid}", emotion=name,
                valence=DEFAULT_VALENCE_MAP.get(name, VALENCES[k % 2]),
                speaker=f"spk{j % n_speakers:02d}", session=f"Ses{j % n_sessions + 1:02d}",
                language="toy", duration_s=duration,
            ))
    return DatasetManifest(tuple(records), "toy"), store


def band_energy_oracle(values: np.ndarray, n_classes: int) -> int:
    """Class whose band group has the highest mean energy."""
    group = values.shape[1] // n_classes
    energies = [values[:, k * group:(k + 1) * group].mean() for k in range(n_classes)]
    return int(np.argmax(energies))
