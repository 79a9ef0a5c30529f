import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from seraug.losses import (LossError, LossWeights, combine_losses, gan_losses, gan_losses_from_logits,
                           l1_distance, triplet_loss, var_loss)

import oracles

ATOL = 1e-6


# --- hand-computed values -----------------------------------------------------

def test_l1_distance_values():
    assert float(l1_distance([1.0, 2.0], [1.0, 2.0])) == 0.0
    assert float(l1_distance([1.0, 2.0], [0.0, 0.0])) == pytest.approx(3.0, abs=ATOL)
    a, b = torch.randn(5, 7, dtype=torch.float64), torch.randn(5, 7, dtype=torch.float64)
    assert torch.equal(l1_distance(a, b), l1_distance(b, a))


def _triplet_from_distances(d_ap, d_an, margin=7.0):
    # 1-D embeddings placed so that the l1 distances are exactly d_ap and d_an
    return float(triplet_loss([0.0], [float(d_ap)], [float(d_an)], margin))


@pytest.mark.parametrize("d_ap,d_an,expected", [(5, 3, 9.0), (0, 10, 0.0), (2, 9, 0.0)])
def test_triplet_values(d_ap, d_an, expected):
    assert _triplet_from_distances(d_ap, d_an) == pytest.approx(expected, abs=ATOL)


def test_gan_values():
    d, g = gan_losses([0.5], [0.5])
    assert float(d) == pytest.approx(2 * math.log(2), abs=ATOL)
    assert float(g) == pytest.approx(math.log(2), abs=ATOL)
    d, _ = gan_losses([1 - 1e-12], [1e-12])
    assert float(d) < 1e-9


def test_gan_logit_form_agrees_with_probability_form():
    logits_r, logits_f = torch.randn(32, dtype=torch.float64), torch.randn(32, dtype=torch.float64)
    d1, g1 = gan_losses_from_logits(logits_r, logits_f)
    d2, g2 = gan_losses(torch.sigmoid(logits_r), torch.sigmoid(logits_f))
    assert float(d1) == pytest.approx(float(d2), abs=1e-10)
    assert float(g1) == pytest.approx(float(g2), abs=1e-10)


@pytest.mark.parametrize("bad", [[0.0], [1.0], [1.5], []])
def test_gan_rejects_out_of_range_scores(bad):
    with pytest.raises(LossError):
        gan_losses(bad, [0.5])


def test_var_values():
    r = torch.tensor([0.3, -1.2, 2.0], dtype=torch.float64)
    assert float(var_loss(r, r)) == pytest.approx(1.0, abs=ATOL)
    assert float(var_loss([1.0, 0.0], [0.0, 3.0])) == pytest.approx(0.0, abs=ATOL)
    assert float(var_loss(r, -r)) == pytest.approx(-1.0, abs=ATOL)
    assert float(var_loss([1.0, 2.0], [3.0, 4.0], normalize=False)) == pytest.approx(11.0, abs=ATOL)
    with pytest.raises(LossError):
        var_loss([0.0, 0.0], [1.0, 0.0])


def test_combine_values():
    comps = dict(gan_g=1.0, rep=2.0, emo=3.0, var=4.0, bal=5.0)
    model, total = combine_losses(comps, LossWeights())
    assert (model, total) == (pytest.approx(33.0, abs=ATOL), pytest.approx(77.0, abs=ATOL))
    zero = LossWeights(0, 0, 0, 0, 0)
    assert combine_losses(comps, zero) == (0.0, 0.0)
    m2, t2 = combine_losses({k: 2 * v for k, v in comps.items()}, LossWeights())
    assert (m2, t2) == (pytest.approx(2 * model), pytest.approx(2 * total))


def test_combine_rejects_bad_components():
    with pytest.raises(LossError, match="missing"):
        combine_losses(dict(gan_g=1.0), LossWeights())
    with pytest.raises(LossError, match="not finite"):
        combine_losses(dict(gan_g=1.0, rep=2.0, emo=float("nan"), var=0.0, bal=0.0), LossWeights())
    with pytest.raises(LossError):
        LossWeights(w_b=-1)


def test_dimension_mismatch():
    with pytest.raises(LossError, match="dimension"):
        triplet_loss(np.zeros((2, 3)), np.zeros((2, 3)), np.zeros((2, 4)))


# --- properties --------------------------------------------------------------

vec = arrays(np.float64, (4, 6), elements=st.floats(-50, 50, allow_nan=False))


@settings(max_examples=200, deadline=None)
@given(vec, vec, vec, st.floats(0, 20))
def test_triplet_nonnegative_and_zero_iff_margin_met(a, p, n, margin):
    per_row = [float(triplet_loss(a[i], p[i], n[i], margin)) for i in range(len(a))]
    for i, v in enumerate(per_row):
        assert v >= 0
        satisfied = oracles.l1(a[i], p[i]) - oracles.l1(a[i], n[i]) + margin <= 0
        assert (v == 0) == bool(satisfied)
    assert float(triplet_loss(a, p, n, margin)) == pytest.approx(oracles.triplet(a, p, n, margin), abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(vec.filter(lambda x: (np.linalg.norm(x, axis=1) > 1e-3).all()),
       vec.filter(lambda x: (np.linalg.norm(x, axis=1) > 1e-3).all()))
def test_var_bounded(r1, r2):
    v = float(var_loss(r1, r2))
    assert -1 - 1e-12 <= v <= 1 + 1e-12
    assert v == pytest.approx(oracles.cosine(r1, r2), abs=1e-9)


def test_gan_d_monotone_on_grid():
    grid = np.linspace(0.01, 0.99, 25)
    for fixed in (0.1, 0.5, 0.9):
        up_real = [float(gan_losses([s], [fixed])[0]) for s in grid]
        down_fake = [float(gan_losses([fixed], [s])[0]) for s in grid[::-1]]
        assert np.all(np.diff(up_real) < 0)
        assert np.all(np.diff(down_fake) < 0)


# --- gradients vs. central differences ----------------------------------------

N_GRAD_CASES = 100


def _autograd(fn, arrays):
    ts = [torch.tensor(a, dtype=torch.float64, requires_grad=True) for a in arrays]
    fn(*ts).backward()
    return [t.grad.numpy() for t in ts]


def _triplet_case(rng):
    while True:
        a, p, n = rng.normal(size=(3, 3, 4))
        margin = rng.uniform(0.5, 5)
        inner = oracles.l1(a, p) - oracles.l1(a, n) + margin
        diffs = np.concatenate([(a - p).ravel(), (a - n).ravel()])
        if np.abs(inner).min() > 1e-3 and np.abs(diffs).min() > 1e-3:
            return [a, p, n], margin


def gradient_errors(kind: str, n_cases: int = N_GRAD_CASES, seed: int = 0) -> list[float]:
    """Relative error between autograd and central differences for ``n_cases`` random inputs."""
    rng = np.random.default_rng(seed)
    errs = []
    for _ in range(n_cases):
        if kind == "l1":
            while True:
                a, b = rng.normal(size=(2, 3, 5))
                if np.abs(a - b).min() > 1e-3:
                    break
            args, f_t, f_np = [a, b], lambda x, y: l1_distance(x, y).sum(), lambda x, y: oracles.l1(x, y).sum()
        elif kind == "triplet":
            args, m = _triplet_case(rng)
            f_t = lambda x, y, z, m=m: triplet_loss(x, y, z, m)
            f_np = lambda x, y, z, m=m: oracles.triplet(x, y, z, m)
        elif kind == "gan_d":
            args = list(rng.uniform(0.05, 0.95, size=(2, 6)))
            f_t, f_np = lambda r, f: gan_losses(r, f)[0], oracles.gan_d
        elif kind == "gan_g":
            args = [rng.uniform(0.05, 0.95, size=6)]
            f_t, f_np = lambda f: gan_losses(torch.full_like(f, 0.5), f)[1], oracles.gan_g
        elif kind == "var":
            args = list(rng.normal(size=(2, 3, 5)))
            f_t, f_np = var_loss, oracles.cosine
        elif kind == "var_dot":
            args = list(rng.normal(size=(2, 3, 5)))
            f_t, f_np = lambda x, y: var_loss(x, y, normalize=False), oracles.dot
        elif kind == "combine":
            args = [rng.normal(size=5)]
            w = LossWeights()
            coef = np.array([w.w_g, w.w_r, w.w_e, w.w_v, w.w_b])

            def f_t(c):
                return combine_losses(dict(zip(("gan_g", "rep", "emo", "var", "bal"), c)), w)[1]

            def f_np(c):
                return float(coef @ c)
        else:
            raise ValueError(kind)
        errs.append(oracles.relative_error(_autograd(f_t, args), oracles.central_difference(f_np, args)))
    return errs


GRAD_KINDS = ("l1", "triplet", "gan_d", "gan_g", "var", "var_dot", "combine")


@pytest.mark.parametrize("kind", GRAD_KINDS)
def test_gradients_match_finite_differences(kind):
    errs = gradient_errors(kind)
    assert len(errs) == N_GRAD_CASES
    assert max(errs) < 1e-4
