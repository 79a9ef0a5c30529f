"""Four-phase alternating optimization of the augmentor and its helpers.

One cycle runs, in order:

1. representation learner on the plain triplet loss,
2. discriminator on originals vs. augmentor outputs (augmentor frozen),
3. augmentor on the view-variance loss (representation learner frozen),
4. augmentor on the adversarial, emotion-preservation and balancing terms
   (representation learner and discriminator frozen).
"""

from __future__ import annotations

import hashlib
import json
import time
from collections import deque
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .dataset import DatasetManifest, TripletBatch, sample_triplet_batch
from .features import FeatureStore
from .losses import (LossWeights, combine_losses, gan_losses_from_logits, triplet_loss,
                     var_loss)
from .models import MODULE_NAMES, EpsilonDist, ModelBundle, ModelConfig

CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class TrainingDiverged(TrainingError):
    """A loss went non-finite; ``snapshot`` holds the losses and iteration at failure."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


class CheckpointError(TrainingError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 1e-6
    betas: tuple = (0.9, 0.999)
    total_iterations: int = 30000
    batch_size: int = 16

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.total_iterations < 1:
            raise ValueError("total_iterations must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    optimizer: OptimizerConfig = OptimizerConfig()
    weights: LossWeights = LossWeights()
    epsilon: EpsilonDist = EpsilonDist()
    normalize_var: bool = True
    history_size: int = 100_000

    def to_dict(self) -> dict:
        d = asdict(self)
        d["optimizer"]["betas"] = list(self.optimizer.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        opt = dict(d.get("optimizer", {}))
        if "betas" in opt:
            opt["betas"] = tuple(opt["betas"])
        return cls(
            optimizer=OptimizerConfig(**opt),
            weights=LossWeights(**d.get("weights", {})),
            epsilon=EpsilonDist(**d.get("epsilon", {})),
            normalize_var=d.get("normalize_var", True),
            history_size=d.get("history_size", 100_000),
        )


def fingerprint(*parts: dict) -> str:
    blob = json.dumps(parts, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class TrainState:
    iteration: int
    bundle: ModelBundle
    optimizers: dict
    data_rng: np.random.Generator
    noise_rng: torch.Generator
    eps_rng: torch.Generator
    config: TrainConfig = TrainConfig()
    history: deque = field(default_factory=deque)

    @classmethod
    def create(cls, model_cfg: ModelConfig = ModelConfig(), config: TrainConfig = TrainConfig(),
               seed: int = 0) -> "TrainState":
        bundle = ModelBundle.build(model_cfg, seed)
        opt = config.optimizer
        optimizers = {
            name: torch.optim.Adam(bundle[name].parameters(), lr=opt.learning_rate, betas=opt.betas)
            for name in MODULE_NAMES
        }
        return cls(
            iteration=0,
            bundle=bundle,
            optimizers=optimizers,
            data_rng=np.random.default_rng(seed),
            noise_rng=torch.Generator().manual_seed(seed + 1),
            eps_rng=torch.Generator().manual_seed(seed + 2),
            config=config,
            history=deque(maxlen=config.history_size),
        )

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.bundle.config.to_dict(), self.config.to_dict())


def set_frozen(bundle: ModelBundle, module_name: str, frozen: bool = True) -> ModelBundle:
    """Frozen modules still run forward passes but never receive parameter updates."""
    module = bundle[module_name]
    for p in module.parameters():
        p.requires_grad_(not frozen)
    if frozen:
        bundle.frozen.add(module_name)
    else:
        bundle.frozen.discard(module_name)
    return bundle


@contextmanager
def _training_only(bundle: ModelBundle, name: str):
    """Disable gradients on every module except ``name`` for the duration of a phase."""
    saved = {n: [p.requires_grad for p in m.parameters()] for n, m in bundle.modules().items()}
    try:
        for n, m in bundle.modules().items():
            trainable = n == name and n not in bundle.frozen
            for p in m.parameters():
                p.requires_grad_(trainable)
        yield
    finally:
        for n, m in bundle.modules().items():
            for p, flag in zip(m.parameters(), saved[n]):
                p.requires_grad_(flag)


def _step(state: TrainState, name: str, loss: torch.Tensor, losses: dict):
    if not torch.isfinite(loss):
        raise TrainingDiverged(
            f"non-finite loss while updating {name} at iteration {state.iteration}",
            {"iteration": state.iteration, "module": name, "losses": dict(losses, failing=loss.item())},
        )
    if name in state.bundle.frozen:
        return  # forward pass only; nothing to update
    opt = state.optimizers[name]
    opt.zero_grad(set_to_none=True)
    loss.backward()
    opt.step()
    opt.zero_grad(set_to_none=True)


def _to_tensor(batch: TripletBatch):
    return (torch.from_numpy(np.ascontiguousarray(batch.anchors, dtype=np.float32)),
            torch.from_numpy(np.ascontiguousarray(batch.positives, dtype=np.float32)),
            torch.from_numpy(np.ascontiguousarray(batch.negatives, dtype=np.float32)))


def _augment(state: TrainState, x: torch.Tensor) -> torch.Tensor:
    x_hat, _, _ = state.bundle.augmentor(x, state.noise_rng, eps_rng=state.eps_rng,
                                         dist=state.config.epsilon)
    return x_hat


def phase_representation(state: TrainState, a, p, n, losses: dict):
    b, w = state.bundle, state.config.weights
    with _training_only(b, "representation"):
        loss = triplet_loss(b.representation(a), b.representation(p), b.representation(n), w.margin)
        losses["rep"] = loss.item()
        _step(state, "representation", w.w_r * loss, losses)


def phase_discriminator(state: TrainState, a, p, n, losses: dict):
    # fakes from the anchors, reals from an independent draw (the positives)
    b = state.bundle
    with _training_only(b, "discriminator"):
        with torch.no_grad():
            fake = _augment(state, a)
        d_loss, _ = gan_losses_from_logits(b.discriminator.logits(p), b.discriminator.logits(fake))
        losses["disc"] = d_loss.item()
        _step(state, "discriminator", d_loss, losses)


def phase_variance(state: TrainState, a, p, n, losses: dict):
    b, w = state.bundle, state.config.weights
    if w.w_v == 0:
        losses["var"] = 0.0
        return
    with _training_only(b, "augmentor"):
        view1, view2 = _augment(state, a), _augment(state, a)
        loss = var_loss(b.representation(view1), b.representation(view2), state.config.normalize_var)
        losses["var"] = loss.item()
        _step(state, "augmentor", w.w_v * loss, losses)


def phase_augmentor(state: TrainState, a, p, n, losses: dict):
    b, w = state.bundle, state.config.weights
    with _training_only(b, "augmentor"):
        p_hat, n_hat = _augment(state, p), _augment(state, n)
        fake_logits = b.discriminator.logits(torch.cat([p_hat, n_hat]))
        _, g_loss = gan_losses_from_logits(torch.zeros(1), fake_logits)
        r_a, r_n = b.representation(a), b.representation(n)
        r_p_hat, r_n_hat = b.representation(p_hat), b.representation(n_hat)
        emo = triplet_loss(r_a, r_p_hat, r_n, w.margin)
        bal = triplet_loss(r_a, r_p_hat, r_n_hat, w.margin)
        losses.update(gan_g=g_loss.item(), emo=emo.item(), bal=bal.item())
        _step(state, "augmentor", w.w_g * g_loss + w.w_e * emo + w.w_b * bal, losses)


PHASES = (
    ("representation", phase_representation),
    ("discriminator", phase_discriminator),
    ("variance", phase_variance),
    ("augmentor", phase_augmentor),
)
PHASE_MODULES = {
    "representation": "representation",
    "discriminator": "discriminator",
    "variance": "augmentor",
    "augmentor": "augmentor",
}


def run_phase_cycle(state: TrainState, batch: TripletBatch, on_phase=None) -> TrainState:
    """Run the four phases once on ``batch`` and advance the iteration counter.

    ``on_phase(phase_name, state)`` is called after each phase.
    """
    if len(batch) == 0:
        raise TrainingError("empty triplet batch")
    a, p, n = _to_tensor(batch)
    losses: dict = {}
    for name, fn in PHASES:
        fn(state, a, p, n, losses)
        if on_phase is not None:
            on_phase(name, state)
    model, total = combine_losses(
        {"gan_g": losses["gan_g"], "rep": losses["rep"], "emo": losses["emo"],
         "var": losses["var"], "bal": losses["bal"]},
        state.config.weights,
    )
    losses.update(model=model, total=total)
    state.iteration += 1
    state.history.append({"iteration": state.iteration, **losses})
    return state


def train_augmentor(state: TrainState, manifest: DatasetManifest, store: FeatureStore,
                    iterations: int | None = None, field_name: str = "emotion",
                    log_path=None, progress=None) -> TrainState:
    """Run ``iterations`` cycles (default: remaining budget) on random triplet batches."""
    opt = state.config.optimizer
    if iterations is None:
        iterations = max(0, opt.total_iterations - state.iteration)
    log = open(log_path, "a") if log_path else None
    try:
        for _ in range(iterations):
            t0 = time.perf_counter()
            batch = sample_triplet_batch(manifest, opt.batch_size, state.data_rng, store,
                                         frames=state.bundle.config.frames, field_name=field_name)
            run_phase_cycle(state, batch)
            if log is not None:
                entry = dict(state.history[-1], wall_time=time.perf_counter() - t0)
                log.write(json.dumps(entry) + "\n")
            if progress is not None:
                progress(state)
    finally:
        if log is not None:
            log.close()
    return state


# --- checkpoints ------------------------------------------------------------

def _rng_state(state: TrainState) -> dict:
    return {
        "data": state.data_rng.bit_generator.state,
        "noise": state.noise_rng.get_state(),
        "eps": state.eps_rng.get_state(),
    }


def checkpoint_save(state: TrainState, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "fingerprint": state.fingerprint,
        "model_config": state.bundle.config.to_dict(),
        "train_config": state.config.to_dict(),
        "iteration": state.iteration,
        "params": {n: m.state_dict() for n, m in state.bundle.modules().items() if n in MODULE_NAMES},
        "optimizers": {n: o.state_dict() for n, o in state.optimizers.items()},
        "frozen": sorted(state.bundle.frozen),
        "rng": _rng_state(state),
        "history": list(state.history),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def _read_payload(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from None
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"corrupt checkpoint {path}: missing header")
    if payload["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {payload['format_version']} is not supported "
            f"(this build reads version {CHECKPOINT_VERSION})"
        )
    return payload


def checkpoint_load(path) -> TrainState:
    payload = _read_payload(path)
    model_cfg = ModelConfig.from_dict(payload["model_config"])
    config = TrainConfig.from_dict(payload["train_config"])
    state = TrainState.create(model_cfg, config)
    for name, sd in payload["params"].items():
        state.bundle[name].load_state_dict(sd)
    for name, sd in payload["optimizers"].items():
        state.optimizers[name].load_state_dict(sd)
    for name in payload["frozen"]:
        set_frozen(state.bundle, name, True)
    state.iteration = payload["iteration"]
    state.data_rng.bit_generator.state = payload["rng"]["data"]
    state.noise_rng.set_state(payload["rng"]["noise"])
    state.eps_rng.set_state(payload["rng"]["eps"])
    state.history = deque(payload["history"], maxlen=config.history_size)
    return state


def load_augmentor(path):
    """Load just the augmentor (in eval mode) from a training checkpoint."""
    return checkpoint_load(path).bundle.augmentor.eval()
