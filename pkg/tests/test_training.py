import json

import numpy as np
import pytest
import torch

from seraug.dataset import generate_toy_dataset, sample_triplet_batch
from seraug.losses import LossWeights, var_loss
from seraug.models import ModelConfig
from seraug.training import (PHASE_MODULES, CheckpointError, OptimizerConfig, TrainConfig, TrainingDiverged,
                             TrainState, checkpoint_load, checkpoint_save, phase_variance, run_phase_cycle,
                             set_frozen, train_augmentor)

TINY = ModelConfig(frames=16, n_mels=32, latent_dim=16, aug_channels=(4, 4, 4), dec_channels=4,
                   disc_channels=(4, 4, 4, 4), rep_channels=(4, 4, 4, 4, 4), rnn_hidden=8)


def tiny_config(lr=1e-3, weights=LossWeights(), batch_size=4):
    return TrainConfig(optimizer=OptimizerConfig(learning_rate=lr, batch_size=batch_size, total_iterations=20),
                       weights=weights)


@pytest.fixture(scope="module")
def toy():
    return generate_toy_dataset(4, 8, frames=24, seed=0, n_mels=32)


def snapshot(state):
    return {name: [p.detach().clone() for p in m.parameters()] for name, m in state.bundle.modules().items()}


def changed_modules(before, after):
    return {name for name in before
            if any(not torch.equal(a, b) for a, b in zip(before[name], after[name]))}


def freeze_contract_violations(state, manifest, store, cycles: int, seed: int = 0) -> list:
    """Run ``cycles`` phase cycles and list every phase whose changed-module set is not its own module."""
    rng = np.random.default_rng(seed)
    problems = []
    for _ in range(cycles):
        batch = sample_triplet_batch(manifest, state.config.optimizer.batch_size, rng, store,
                                     frames=state.bundle.config.frames)
        prev = [snapshot(state)]

        def check(phase, st):
            now = snapshot(st)
            skipped = phase == "variance" and st.config.weights.w_v == 0
            expected = set() if skipped or PHASE_MODULES[phase] in st.bundle.frozen else {PHASE_MODULES[phase]}
            got = changed_modules(prev[0], now)
            if got != expected:
                problems.append((st.iteration, phase, sorted(got), sorted(expected)))
            prev[0] = now

        run_phase_cycle(state, batch, on_phase=check)
    return problems


def test_freeze_contract(toy):
    m, store = toy
    state = TrainState.create(TINY, tiny_config(), seed=0)
    assert freeze_contract_violations(state, m, store, 5) == []
    assert state.iteration == 5


def test_freeze_contract_without_variance(toy):
    m, store = toy
    state = TrainState.create(TINY, tiny_config(weights=LossWeights(w_v=0, w_b=0)), seed=1)
    assert freeze_contract_violations(state, m, store, 3) == []


def test_set_frozen(toy):
    m, store = toy
    state = TrainState.create(TINY, tiny_config(), seed=0)
    set_frozen(state.bundle, "augmentor", True)
    set_frozen(state.bundle, "augmentor", True)
    assert state.bundle.frozen == {"augmentor"}
    before = snapshot(state)
    train_augmentor(state, m, store, iterations=2)
    after = snapshot(state)
    assert changed_modules(before, after) == {"representation", "discriminator"}
    set_frozen(state.bundle, "augmentor", False)
    train_augmentor(state, m, store, iterations=1)
    assert "augmentor" in changed_modules(after, snapshot(state))
    with pytest.raises(KeyError):
        set_frozen(state.bundle, "vocoder")


def _losses(state):
    return [[h[k] for k in ("rep", "disc", "var", "gan_g", "emo", "bal", "total")] for h in state.history]


def test_determinism(toy):
    m, store = toy
    runs = []
    for _ in range(2):
        state = TrainState.create(TINY, tiny_config(), seed=3)
        train_augmentor(state, m, store, iterations=4)
        runs.append(_losses(state))
    assert runs[0] == runs[1]


def resume_gap(manifest, store, model_cfg, config, total=20, split=10, seed=0, tmp_dir=None) -> float:
    """Largest absolute loss difference between a straight run and a checkpoint-resumed run."""
    straight = TrainState.create(model_cfg, config, seed=seed)
    train_augmentor(straight, manifest, store, iterations=total)
    first = TrainState.create(model_cfg, config, seed=seed)
    train_augmentor(first, manifest, store, iterations=split)
    path = checkpoint_save(first, tmp_dir / "resume.pt")
    second = checkpoint_load(path)
    assert second.iteration == split
    train_augmentor(second, manifest, store, iterations=total - split)
    a, b = np.array(_losses(straight)), np.array(_losses(second))
    assert a.shape == b.shape
    return float(np.abs(a - b).max())


def test_resume_matches_straight_run(toy, tmp_path):
    m, store = toy
    assert resume_gap(m, store, TINY, tiny_config(), tmp_dir=tmp_path) <= 1e-7


def test_checkpoint_roundtrip(toy, tmp_path):
    m, store = toy
    state = TrainState.create(TINY, tiny_config(), seed=0)
    train_augmentor(state, m, store, iterations=2)
    set_frozen(state.bundle, "discriminator")
    back = checkpoint_load(checkpoint_save(state, tmp_path / "c.pt"))
    for name in ("augmentor", "discriminator", "representation"):
        for (k, v), (k2, v2) in zip(state.bundle[name].state_dict().items(),
                                    back.bundle[name].state_dict().items()):
            assert k == k2 and torch.equal(v, v2)
        o1, o2 = state.optimizers[name].state_dict()["state"], back.optimizers[name].state_dict()["state"]
        for idx in o1:
            assert torch.equal(o1[idx]["exp_avg"], o2[idx]["exp_avg"])
            assert torch.equal(o1[idx]["exp_avg_sq"], o2[idx]["exp_avg_sq"])
    assert back.bundle.frozen == {"discriminator"}
    assert back.fingerprint == state.fingerprint
    assert back.data_rng.bit_generator.state == state.data_rng.bit_generator.state
    assert torch.equal(back.noise_rng.get_state(), state.noise_rng.get_state())


def test_checkpoint_errors(toy, tmp_path):
    state = TrainState.create(TINY, tiny_config(), seed=0)
    path = checkpoint_save(state, tmp_path / "c.pt")
    raw = path.read_bytes()
    (tmp_path / "t.pt").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointError, match="corrupt"):
        checkpoint_load(tmp_path / "t.pt")
    with pytest.raises(CheckpointError, match="not found"):
        checkpoint_load(tmp_path / "missing.pt")
    payload = torch.load(path, weights_only=True)
    payload["format_version"] = 99
    torch.save(payload, tmp_path / "v.pt")
    with pytest.raises(CheckpointError, match="99.*1|1.*99"):
        checkpoint_load(tmp_path / "v.pt")


def test_log_file(toy, tmp_path):
    m, store = toy
    state = TrainState.create(TINY, tiny_config(), seed=0)
    train_augmentor(state, m, store, iterations=3, log_path=tmp_path / "log.jsonl")
    rows = [json.loads(line) for line in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert [r["iteration"] for r in rows] == [1, 2, 3]
    assert all("wall_time" in r and "total" in r for r in rows)


def test_divergence_snapshot(toy):
    m, store = toy
    state = TrainState.create(TINY, tiny_config(), seed=0)
    with torch.no_grad():
        state.bundle.representation.head.weight.fill_(float("nan"))
    batch = sample_triplet_batch(m, 2, 0, store, frames=16)
    with pytest.raises(TrainingDiverged) as info:
        run_phase_cycle(state, batch)
    assert info.value.snapshot["module"] == "representation"


def test_variance_step_does_not_increase_loss(toy):
    m, store = toy
    state = TrainState.create(TINY, tiny_config(lr=1e-7), seed=0)
    deltas = []
    for trial in range(10):
        batch = sample_triplet_batch(m, 4, trial, store, frames=16)
        a = torch.from_numpy(batch.anchors)
        noise_state, eps_state = state.noise_rng.get_state(), state.eps_rng.get_state()
        losses = {}
        phase_variance(state, a, None, None, losses)
        state.noise_rng.set_state(noise_state)
        state.eps_rng.set_state(eps_state)
        with torch.no_grad():
            b = state.bundle
            v1 = b.augmentor(a, state.noise_rng, eps_rng=state.eps_rng)[0]
            v2 = b.augmentor(a, state.noise_rng, eps_rng=state.eps_rng)[0]
            after = float(var_loss(b.representation(v1), b.representation(v2)))
        deltas.append(after - losses["var"])
    assert np.mean(deltas) <= 1e-6
