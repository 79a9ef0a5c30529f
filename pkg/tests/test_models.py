import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from seraug.models import (EPS_HIGH, EPS_LOW, Augmentor, EpsilonDist, ModelBundle, ModelConfig, ShapeError,
                           augment, discriminate, project_l1, represent, sample_epsilon)

SMALL = ModelConfig(frames=32, n_mels=128, aug_channels=(8, 16, 16), dec_channels=8,
                    disc_channels=(8, 16, 16, 16), rep_channels=(8, 16, 16, 16, 16), rnn_hidden=32)


@pytest.fixture(scope="module")
def small():
    return ModelBundle.build(SMALL, seed=0).eval()


# --- epsilon -----------------------------------------------------------------

def test_epsilon_statistics():
    g = torch.Generator().manual_seed(0)
    eps = sample_epsilon(g, (100_000,)).double()
    assert (EPS_LOW, EPS_HIGH) == (0.05, 0.3)
    assert float(eps.min()) >= 0.05 and float(eps.max()) <= 0.3
    assert abs(float(eps.mean()) - 0.175) < 0.005
    a = sample_epsilon(torch.Generator().manual_seed(5), (10,))
    b = sample_epsilon(torch.Generator().manual_seed(5), (10,))
    assert torch.equal(a, b)
    with pytest.raises(ValueError):
        EpsilonDist(0.3, 0.05)


# --- projection --------------------------------------------------------------

def test_projection_examples():
    delta = project_l1(torch.ones(1, 4, 5), 0.1)
    assert torch.allclose(delta, torch.full((1, 4, 5), 0.1))
    assert torch.equal(project_l1(torch.zeros(2, 3, 3), 0.2), torch.zeros(2, 3, 3))
    with pytest.raises(ValueError):
        project_l1(torch.tensor([[float("inf"), 1.0]]), 0.1)


def projection_errors(n_cases: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    errs = []
    for _ in range(n_cases):
        shape = tuple(rng.integers(1, 40, size=2))
        p = torch.from_numpy(rng.normal(size=(1, *shape)) * 10 ** rng.uniform(-3, 3))
        eps = rng.uniform(0.05, 0.3)
        delta = project_l1(p, eps)
        target = eps * p.numel()
        errs.append(abs(float(delta.abs().sum()) - target) / target)
    return errs


def test_projection_norm_identity():
    assert max(projection_errors(300)) < 1e-5


def test_projection_per_sample_eps():
    p = torch.randn(3, 8, 8, dtype=torch.float64)
    eps = torch.tensor([0.05, 0.1, 0.3], dtype=torch.float64)
    norms = project_l1(p, eps).abs().flatten(1).sum(1)
    assert torch.allclose(norms, eps * 64)


# --- augment -----------------------------------------------------------------

def budget_violations(bundle: ModelBundle, n_pairs: int, seed: int = 0, batch: int = 50) -> tuple[int, float]:
    """Check the l1 budget on ``n_pairs`` random (X, eps) pairs; returns (violations, worst slack)."""
    cfg = bundle.config
    g = torch.Generator().manual_seed(seed)
    numel = cfg.frames * cfg.n_mels
    bad, worst = 0, -np.inf
    with torch.no_grad():
        for start in range(0, n_pairs, batch):
            b = min(batch, n_pairs - start)
            x = torch.rand((b, cfg.frames, cfg.n_mels), generator=g)
            x = torch.where(torch.rand(x.shape, generator=g) < 0.1, x.round(), x)  # hit the clamp edges
            x_hat, _, eps = bundle.augmentor(x, g)
            dist = (x_hat.double() - x.double()).abs().flatten(1).sum(1)
            slack = dist - (eps.double() * numel + 1e-5 * numel)
            bad += int((slack > 0).sum())
            worst = max(worst, float(slack.max()))
    return bad, worst


def test_budget_invariant(small):
    bad, _ = budget_violations(small, 200)
    assert bad == 0


def test_augment_shapes_and_noise(small):
    x = np.random.default_rng(0).uniform(size=(32, 128)).astype(np.float32)
    g = torch.Generator().manual_seed(1)
    x_hat, delta = augment(x, small.augmentor, g)
    assert x_hat.shape == delta.shape == x.shape
    assert x_hat.min() >= 0 and x_hat.max() <= 1
    x_hat2, _ = augment(x, small.augmentor, g)
    assert np.any(x_hat != x_hat2)
    again, _ = augment(x, small.augmentor, torch.Generator().manual_seed(1))
    np.testing.assert_array_equal(again, x_hat)
    batch_hat, _ = augment(np.stack([x, x]), small.augmentor, g)
    assert batch_hat.shape == (2, 32, 128) and np.any(batch_hat[0] != batch_hat[1])
    with pytest.raises(ValueError, match="normalized"):
        augment(x * 3, small.augmentor, g)


@settings(max_examples=10, deadline=None)
@given(st.sampled_from([16, 32, 48]), st.sampled_from([16, 64, 128]))
def test_shape_preservation(frames, bands):
    cfg = ModelConfig(frames=frames, n_mels=bands, aug_channels=(4, 4, 4), dec_channels=4,
                      disc_channels=(4, 4, 4, 4), rep_channels=(4, 4, 4, 4, 4), rnn_hidden=8)
    aug = Augmentor(cfg)
    x = torch.rand(2, frames, bands)
    x_hat, delta, _ = aug(x, torch.Generator().manual_seed(0))
    assert x_hat.shape == delta.shape == x.shape


def test_full_size_defaults():
    torch.manual_seed(0)
    bundle = ModelBundle.build(ModelConfig(), seed=0).eval()
    x = torch.rand(2, 512, 128)
    with torch.no_grad():
        x_hat, _, _ = bundle.augmentor(x, torch.Generator().manual_seed(0))
        r = bundle.representation(x)
        s = bundle.discriminator(x)
    assert x_hat.shape == (2, 512, 128)
    assert r.shape == (2, 128)
    assert s.shape == (2,) and bool(((s > 0) & (s < 1)).all())
    assert bundle.augmentor.to_latent.out_features == 128


# --- discriminator / representation -------------------------------------------

def test_scores_and_representations(small):
    x = np.random.default_rng(0).uniform(size=(5, 32, 128)).astype(np.float32)
    s = discriminate(x, small.discriminator)
    assert s.shape == (5,) and np.all((s > 0) & (s < 1))
    np.testing.assert_array_equal(s, discriminate(x, small.discriminator))
    r = represent(x, small.representation)
    assert r.shape == (5, 128) and np.all(np.isfinite(r))
    np.testing.assert_array_equal(r, represent(x, small.representation))
    assert represent(x[0], small.representation).shape == (1, 128)
    with pytest.raises(ShapeError):
        represent(np.zeros((5, 30, 128), np.float32), small.representation)
    with pytest.raises(ShapeError):
        discriminate(np.zeros((5, 32, 64), np.float32), small.discriminator)


# --- parameters and gradients -------------------------------------------------

def test_parameter_sets_disjoint_and_complete(small):
    mods = small.modules()
    ids = {name: {id(p) for p in m.parameters()} for name, m in mods.items()}
    names = list(ids)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            assert not ids[a] & ids[b]
    for name, m in mods.items():
        declared = sum(p.numel() for layer in m.modules() for p in layer.parameters(recurse=False))
        assert declared == sum(p.numel() for p in m.parameters())
        assert len(list(m.parameters())) == len({id(p) for p in m.parameters()})


def test_gradient_reaches_augmentor():
    bundle = ModelBundle.build(SMALL, seed=1)
    x = torch.rand(2, 32, 128) * 0.5 + 0.25
    x_hat, _, _ = bundle.augmentor(x, torch.Generator().manual_seed(0))
    bundle.representation(x_hat).sum().backward()
    grads = [p.grad for p in bundle.augmentor.parameters()]
    assert any(g is not None and bool(g.abs().sum() > 0) for g in grads)


def test_config_roundtrip_and_validation():
    assert ModelConfig.from_dict(SMALL.to_dict()) == SMALL
    with pytest.raises(ShapeError):
        ModelConfig(frames=30)
    with pytest.raises(ShapeError):
        ModelConfig(rep_channels=(4, 4))
    with pytest.raises(KeyError, match="unknown module"):
        ModelBundle.build(SMALL)["generator"]
