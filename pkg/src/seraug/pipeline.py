"""Experiment stages: features -> train-aug -> augment -> train-ser -> eval -> report (+ tsne).

Each stage reads the artifacts of its predecessor from the output directory,
writes its own, records a completion marker and appends the produced files
(with content hashes) to ``artifacts.jsonl``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .classifier import (ClassifierSpec, EvaluationReport, SegmentClassifier, build_hybrid_dataset,
                         evaluate, train_classifier)
from .config import ExperimentConfig
from .dataset import (DatasetManifest, generate_toy_dataset, load_manifest, make_session_folds,
                      map_to_valence, simulate_imbalance, split_target_language)
from .features import FeatureStore, extract_file, normalize_mel
from .losses import LossWeights
from .models import represent
from .reporting import emit_report, emit_tsne
from .training import TrainState, checkpoint_load, checkpoint_save, train_augmentor

log = logging.getLogger(__name__)

STAGES = ("features", "train-aug", "augment", "train-ser", "eval", "tsne", "report")
REQUIRES = {
    "train-aug": "features",
    "augment": "train-aug",
    "train-ser": "augment",
    "eval": "train-ser",
    "tsne": "train-aug",
    "report": "eval",
}
PIPELINE_ORDER = ("features", "train-aug", "augment", "train-ser", "eval", "tsne", "report")


class MissingStageError(RuntimeError):
    pass


def ablation_variants(base: LossWeights) -> dict[str, LossWeights]:
    return {
        "L_Model": replace(base, w_v=0.0, w_b=0.0),
        "L_Model+L_VAR": replace(base, w_b=0.0),
        "L_Total": base,
    }


@dataclass
class ClassifierRun:
    group: str
    row: str
    variant: str | None  # augmentor variant feeding the hybrid set; None = originals only
    pair: str = ""


@dataclass
class Group:
    name: str
    train: DatasetManifest
    test: DatasetManifest
    scope_language: str | None = None


@dataclass
class Plan:
    protocol: str
    label_field: str
    groups: list
    variants: dict
    runs: list
    multiplicity: int
    manifest: DatasetManifest | None = None
    toy_store: FeatureStore | None = None
    extra: dict = field(default_factory=dict)

    def describe(self) -> str:
        lines = [f"protocol: {self.protocol}  (labels: {self.label_field})",
                 f"utterances: {len(self.manifest) if self.manifest else 0}",
                 f"augmentor variants: {', '.join(self.variants) or '-'}",
                 f"augmentation multiplicity: {self.multiplicity}",
                 "groups:"]
        for g in self.groups:
            lines.append(f"  {g.name}: train={len(g.train)} test={len(g.test)}"
                         + (f" scope={g.scope_language}" if g.scope_language else ""))
        lines.append("classifier runs:")
        for r in self.runs:
            lines.append(f"  {r.group}/{r.row}" + (f"  <- augmentor {r.variant}" if r.variant else ""))
        return "\n".join(lines)


def _safe(name: str) -> str:
    return name.replace("->", "_to_").replace(" ", "_")


def _language_of(m: DatasetManifest) -> str:
    langs = {r.language for r in m.records if r.language}
    return langs.pop() if len(langs) == 1 else m.source_name


def build_plan(cfg: ExperimentConfig) -> Plan:
    """Resolve folds/splits and runs from the config without touching the output directory."""
    proto, seed = cfg.protocol, cfg.experiment.seed
    weights = cfg.loss_weights()
    if proto == "cross_lingual":
        return _cross_lingual_plan(cfg, weights)
    toy_store = None
    if proto == "toy":
        t = cfg.toy
        manifest, toy_store = generate_toy_dataset(t.n_classes, t.n_per_class, t.frames, seed,
                                                   n_mels=cfg.features.n_mels, signal=t.signal,
                                                   noise=t.noise, distractor=t.distractor,
                                                   config=cfg.features)
    else:
        manifest = load_manifest(cfg.resolve(cfg.data.manifest))
    label_field = cfg.data.label_field
    folds = make_session_folds(manifest)
    chosen = cfg.data.folds or tuple(range(len(folds)))
    groups = []
    for i in chosen:
        train, test = folds[i]
        session = test.records[0].session
        reduced = simulate_imbalance(train, cfg.imbalance.keep_fraction, cfg.imbalance.protected_class,
                                     seed=seed + i, field_name=label_field)
        groups.append(Group(f"fold_{session}", reduced, test))
    if proto == "imbalanced":
        variants = {"AUG": weights}
        rows = [("NoAUG", None), ("AUG", "AUG")]
    else:
        variants = ablation_variants(weights)
        rows = [("NoAUG", None)] + [(v, v) for v in variants]
    runs = [ClassifierRun(g.name, row, var) for g in groups for row, var in rows]
    return Plan(proto, label_field, groups, variants, runs, cfg.augment.multiplicity, manifest, toy_store)


def _cross_lingual_plan(cfg: ExperimentConfig, weights: LossWeights) -> Plan:
    cl, seed = cfg.cross_lingual, cfg.experiment.seed
    mapping = cfg.valence or None
    source = map_to_valence(load_manifest(cfg.resolve(cl.source_manifest)), mapping)
    src_lang = _language_of(source)
    everything = source
    groups, runs = [], []
    for k, path in enumerate(cl.target_manifests):
        target = map_to_valence(load_manifest(cfg.resolve(path)), mapping)
        tgt_lang = _language_of(target)
        everything = everything.concat(target)
        pair = f"{src_lang}->{tgt_lang}"
        for cond, frac in (("LT", cl.low_fraction), ("FT", cl.full_fraction)):
            train_t, eval_t = split_target_language(target, cl.eval_fraction, frac, seed=seed + k)
            name = f"{pair}/{cond}"
            groups.append(Group(name, source.concat(train_t), eval_t, scope_language=tgt_lang))
            runs += [ClassifierRun(name, cond, None, pair), ClassifierRun(name, f"{cond}_AUG", "AUG", pair)]
    return Plan("cross_lingual", "valence", groups, {"AUG": weights}, runs,
                cfg.augment.multiplicity, everything)


# --- artifact bookkeeping ---------------------------------------------------

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Workspace:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.root = cfg.output_dir

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def marker(self, stage: str) -> Path:
        return self.path("stages", f"{stage}.json")

    def require(self, stage: str):
        needed = REQUIRES.get(stage)
        if needed and not self.marker(needed).exists():
            raise MissingStageError(f"stage {stage!r} needs the outputs of stage {needed!r}; run {needed!r} first")

    def finish(self, stage: str, files: list[Path], started: float):
        marker = self.marker(stage)
        marker.parent.mkdir(parents=True, exist_ok=True)
        marker.write_text(json.dumps({"stage": stage, "fingerprint": self.cfg.fingerprint,
                                      "seconds": round(time.time() - started, 3)}))
        with open(self.path("artifacts.jsonl"), "a") as fh:
            for f in [*files, marker]:
                fh.write(json.dumps({"stage": stage, "path": str(f.relative_to(self.root)),
                                     "sha256": _sha256(f), "fingerprint": self.cfg.fingerprint}) + "\n")


# --- stages -----------------------------------------------------------------

def _extract_one(args):
    path, fcfg = args
    return normalize_mel(extract_file(path, fcfg))


def stage_features(cfg: ExperimentConfig, plan: Plan, ws: Workspace) -> list[Path]:
    store = plan.toy_store
    if store is None:
        m = plan.manifest
        base = {r.id: cfg.resolve(r.audio_path) for r in m.records}
        jobs = [(base[r.id], cfg.features) for r in m.records]
        if cfg.experiment.workers > 1:
            with ProcessPoolExecutor(cfg.experiment.workers) as pool:
                mels = list(pool.map(_extract_one, jobs, chunksize=8))
        else:
            mels = [_extract_one(j) for j in jobs]
        store = FeatureStore(cfg.features, dict(zip(m.ids, mels)))
    files = store.save(ws.path("features"))
    plan.manifest.save(ws.path("manifest.jsonl"))
    files.append(ws.path("manifest.jsonl"))
    for g in plan.groups:
        d = ws.path("splits", _safe(g.name))
        d.mkdir(parents=True, exist_ok=True)
        g.train.save(d / "train.jsonl")
        g.test.save(d / "test.jsonl")
        files += [d / "train.jsonl", d / "test.jsonl"]
    return files


def _load_store(ws: Workspace) -> FeatureStore:
    return FeatureStore.load(ws.path("features"))


def _aug_ckpt(ws: Workspace, group: str, variant: str) -> Path:
    return ws.path("augmentors", _safe(group), _safe(variant), "checkpoint.pt")


def stage_train_aug(cfg: ExperimentConfig, plan: Plan, ws: Workspace) -> list[Path]:
    store = _load_store(ws)
    files = []
    for gi, g in enumerate(plan.groups):
        for vi, (variant, weights) in enumerate(plan.variants.items()):
            state = TrainState.create(cfg.model, cfg.train_config(weights), seed=cfg.experiment.seed + gi)
            ckpt = _aug_ckpt(ws, g.name, variant)
            ckpt.parent.mkdir(parents=True, exist_ok=True)
            log_path = ckpt.parent / "train_log.jsonl"
            log_path.unlink(missing_ok=True)
            log.info("training augmentor %s/%s for %d cycles", g.name, variant, cfg.train.total_iterations)
            train_augmentor(state, g.train, store, field_name=plan.label_field, log_path=log_path)
            files += [checkpoint_save(state, ckpt), log_path]
    return files


def stage_augment(cfg: ExperimentConfig, plan: Plan, ws: Workspace) -> list[Path]:
    store = _load_store(ws)
    files = []
    for gi, g in enumerate(plan.groups):
        for run in (r for r in plan.runs if r.group == g.name and r.variant):
            ckpt = _aug_ckpt(ws, g.name, run.variant)
            if not ckpt.exists():
                raise MissingStageError(f"missing augmentor checkpoint {ckpt}; rerun 'train-aug'")
            augmentor = checkpoint_load(ckpt).bundle.augmentor.eval()
            scope = "all" if g.scope_language is None else (lambda r, lang=g.scope_language: r.language == lang)
            hm, hs = build_hybrid_dataset(g.train, store, augmentor, plan.multiplicity, scope,
                                          seed=cfg.experiment.seed + gi)
            d = ws.path("hybrid", _safe(g.name), _safe(run.row))
            synth = FeatureStore(store.config, {r.id: hs[r.id] for r in hm.records if r.synthetic})
            files += synth.save(d / "features")
            hm.save(d / "manifest.jsonl")
            files.append(d / "manifest.jsonl")
    return files


def _training_set(ws: Workspace, g: Group, run: ClassifierRun, store: FeatureStore):
    if run.variant is None:
        return g.train, store
    d = ws.path("hybrid", _safe(g.name), _safe(run.row))
    hm = load_manifest(d / "manifest.jsonl")
    synth = FeatureStore.load(d / "features")
    merged = FeatureStore(store.config, {**dict(store.items()), **dict(synth.items())})
    return hm, merged


def _classifier_path(ws: Workspace, run: ClassifierRun) -> Path:
    return ws.path("classifiers", _safe(run.group), _safe(run.row), "classifier.pt")


def stage_train_ser(cfg: ExperimentConfig, plan: Plan, ws: Workspace) -> list[Path]:
    store = _load_store(ws)
    labels = sorted(set(plan.manifest.labels(plan.label_field)))
    spec = ClassifierSpec.preset(cfg.classifier.preset, labels, cfg.classifier.segment_frames, cfg.features.n_mels)
    groups = {g.name: g for g in plan.groups}
    files = []
    for ri, run in enumerate(plan.runs):
        train_m, train_s = _training_set(ws, groups[run.group], run, store)
        log.info("training classifier %s/%s on %d items", run.group, run.row, len(train_m))
        clf = train_classifier(train_m, train_s, spec, cfg.classifier.train_config(),
                               seed=cfg.experiment.seed, field_name=plan.label_field)
        path = _classifier_path(ws, run)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({"spec": spec.to_dict(), "state_dict": clf.model.state_dict(),
                    "epoch_losses": clf.epoch_losses, "val_losses": clf.val_losses,
                    "best_epoch": clf.best_epoch, "fingerprint": cfg.fingerprint}, path)
        files.append(path)
    return files


def load_classifier(path) -> SegmentClassifier:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    model = SegmentClassifier(ClassifierSpec.from_dict(payload["spec"]))
    model.load_state_dict(payload["state_dict"])
    return model.eval()


def stage_eval(cfg: ExperimentConfig, plan: Plan, ws: Workspace) -> list[Path]:
    store = _load_store(ws)
    groups = {g.name: g for g in plan.groups}
    files = []
    for run in plan.runs:
        path = _classifier_path(ws, run)
        if not path.exists():
            raise MissingStageError(f"missing classifier {path}; rerun 'train-ser'")
        model = load_classifier(path)
        meta = {"row": run.row, "group": run.group, "pair": run.pair, "protocol": plan.protocol,
                "fingerprint": cfg.fingerprint}
        report = evaluate(groups[run.group].test, store, model, cfg.classifier.eval_hop,
                          plan.label_field, meta)
        d = ws.path("reports", _safe(run.group))
        d.mkdir(parents=True, exist_ok=True)
        (d / f"{_safe(run.row)}.json").write_text(report.to_json())
        (d / f"{_safe(run.row)}.csv").write_text(report.to_csv())
        files += [d / f"{_safe(run.row)}.json", d / f"{_safe(run.row)}.csv"]
    return files


def tsne_inputs(state_or_bundle, train: DatasetManifest, store: FeatureStore, label_field: str,
                per_class: int = 30, n_aug: int = 3, seed: int = 0):
    """Representations of sampled originals and ``n_aug`` augmentations of each."""
    bundle = getattr(state_or_bundle, "bundle", state_or_bundle)
    frames = bundle.config.frames
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    by_class: dict[str, list] = {}
    for r in train.records:
        by_class.setdefault(r.label(label_field), []).append(r)
    xs, labels = [], []
    for label, recs in sorted(by_class.items()):
        pick = rng.choice(len(recs), size=min(per_class, len(recs)), replace=False)
        for i in sorted(pick):
            v = store[recs[i].id].values
            start = int(rng.integers(0, max(1, v.shape[0] - frames + 1)))
            from .features import loop_pad
            xs.append(loop_pad(v, frames)[start:start + frames])
            labels.append(label)
    x = torch.from_numpy(np.stack(xs).astype(np.float32))
    bundle.eval()
    with torch.no_grad():
        aug = torch.cat([bundle.augmentor(x, gen)[0] for _ in range(n_aug)])
    reps = np.concatenate([represent(x, bundle.representation), represent(aug, bundle.representation)])
    all_labels = labels + labels * n_aug
    origins = ["original"] * len(labels) + ["augmented"] * (len(labels) * n_aug)
    return reps, all_labels, origins


def stage_tsne(cfg: ExperimentConfig, plan: Plan, ws: Workspace) -> list[Path]:
    store = _load_store(ws)
    files = []
    for g in plan.groups:
        for variant in plan.variants:
            state = checkpoint_load(_aug_ckpt(ws, g.name, variant))
            reps, labels, origins = tsne_inputs(state, g.train, store, plan.label_field,
                                                cfg.tsne.per_class, cfg.tsne.n_aug, cfg.experiment.seed)
            d = ws.path("tsne", _safe(g.name))
            res = emit_tsne(reps, labels, origins, cfg.experiment.seed, cfg.tsne.perplexity,
                            out_dir=d, stem=_safe(variant), title=f"{g.name} / {variant}")
            (d / f"{_safe(variant)}_silhouette.json").write_text(json.dumps(res.silhouette, indent=2))
            files += [d / f"{_safe(variant)}.csv", d / f"{_safe(variant)}.png",
                      d / f"{_safe(variant)}_silhouette.json"]
    return files


def stage_report(cfg: ExperimentConfig, plan: Plan, ws: Workspace) -> list[Path]:
    reports = [EvaluationReport.from_dict(json.loads(p.read_text()))
               for p in sorted(ws.path("reports").rglob("*.json"))]
    layout = {"imbalanced": "imbalanced", "cross_lingual": "cross_lingual"}.get(plan.protocol, "ablation")
    d = ws.path("report")
    table = emit_report(reports, layout, out_dir=d)
    print(table.to_markdown())
    return [d / "results.csv", d / "results.md", d / "results.png"]


STAGE_FUNCS = {
    "features": stage_features,
    "train-aug": stage_train_aug,
    "augment": stage_augment,
    "train-ser": stage_train_ser,
    "eval": stage_eval,
    "tsne": stage_tsne,
    "report": stage_report,
}


def run_stage(cfg: ExperimentConfig, stage: str, plan: Plan | None = None) -> list[Path]:
    ws = Workspace(cfg)
    ws.require(stage)
    plan = plan or build_plan(cfg)
    ws.root.mkdir(parents=True, exist_ok=True)
    started = time.time()
    files = STAGE_FUNCS[stage](cfg, plan, ws)
    ws.finish(stage, files, started)
    return files


def run_all(cfg: ExperimentConfig) -> None:
    plan = build_plan(cfg)
    for stage in PIPELINE_ORDER:
        run_stage(cfg, stage, plan)
