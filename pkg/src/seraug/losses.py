"""Training objectives for the augmentor, discriminator and representation learner.

All functions accept a single vector ``(D,)`` or a batch ``(B, D)`` and
reduce over the batch with the arithmetic mean.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    w_g: float = 1.0
    w_r: float = 1.0
    w_e: float = 10.0
    w_v: float = 1.0
    w_b: float = 8.0
    margin: float = 7.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not math.isfinite(value) or value < 0:
                raise LossError(f"loss weight {name} must be finite and non-negative, got {value}")


def _t(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x, dtype=torch.float64)


def _check_dims(*tensors):
    dims = {t.shape[-1] for t in tensors}
    if len(dims) != 1:
        raise LossError(f"dimension mismatch: {[tuple(t.shape) for t in tensors]}")


def l1_distance(a, b) -> torch.Tensor:
    """Sum of absolute differences over the last axis (one value per row)."""
    a, b = _t(a), _t(b)
    _check_dims(a, b)
    return (a - b).abs().sum(dim=-1)


def triplet_loss(r_a, r_p, r_n, margin: float = 7.0) -> torch.Tensor:
    """``max(d(a, p) - d(a, n) + margin, 0)`` with l1 distance, batch-averaged.

    Serves the plain representation objective and both augmented variants:
    pass an augmented positive for emotion preservation, and augmented
    positive and negative for the balancing term.
    """
    r_a, r_p, r_n = _t(r_a), _t(r_p), _t(r_n)
    _check_dims(r_a, r_p, r_n)
    return F.relu(l1_distance(r_a, r_p) - l1_distance(r_a, r_n) + margin).mean()


def gan_losses(scores_real, scores_fake) -> tuple[torch.Tensor, torch.Tensor]:
    """Non-saturating GAN losses from discriminator probabilities.

    Returns ``(d_loss, g_loss)`` with
    ``d_loss = -mean log s_real - mean log(1 - s_fake)`` and
    ``g_loss = -mean log s_fake``.
    """
    s_real, s_fake = _t(scores_real), _t(scores_fake)
    for name, s in (("real", s_real), ("fake", s_fake)):
        if s.numel() == 0 or not bool(((s > 0) & (s < 1)).all()):
            raise LossError(f"{name} scores must lie strictly inside (0, 1)")
    d_loss = -torch.log(s_real).mean() - torch.log1p(-s_fake).mean()
    g_loss = -torch.log(s_fake).mean()
    return d_loss, g_loss


def gan_losses_from_logits(logits_real, logits_fake) -> tuple[torch.Tensor, torch.Tensor]:
    """Same as :func:`gan_losses` but on pre-sigmoid logits, stable at saturation."""
    logits_real, logits_fake = _t(logits_real), _t(logits_fake)
    d_loss = F.softplus(-logits_real).mean() + F.softplus(logits_fake).mean()
    g_loss = F.softplus(-logits_fake).mean()
    return d_loss, g_loss


def var_loss(r1, r2, normalize: bool = True) -> torch.Tensor:
    """Similarity between two augmented views; minimizing it spreads the views apart.

    With ``normalize`` (default) this is cosine similarity in ``[-1, 1]``,
    otherwise the raw dot product.
    """
    r1, r2 = _t(r1), _t(r2)
    _check_dims(r1, r2)
    if normalize:
        n1, n2 = r1.norm(dim=-1), r2.norm(dim=-1)
        if bool((n1 == 0).any() or (n2 == 0).any()):
            raise LossError("var_loss is undefined for zero vectors")
        return ((r1 * r2).sum(dim=-1) / (n1 * n2)).mean()
    return (r1 * r2).sum(dim=-1).mean()


COMPONENTS = ("gan_g", "rep", "emo", "var", "bal")


def combine_losses(components: dict, w: LossWeights):
    """Return ``(L_model, L_total)`` from the five component losses."""
    missing = [k for k in COMPONENTS if k not in components]
    if missing:
        raise LossError(f"missing loss components: {missing}")
    for k in COMPONENTS:
        value = components[k]
        finite = bool(torch.isfinite(value).all()) if isinstance(value, torch.Tensor) else math.isfinite(value)
        if not finite:
            raise LossError(f"loss component {k!r} is not finite")
    model = w.w_g * components["gan_g"] + w.w_r * components["rep"] + w.w_e * components["emo"]
    total = model + w.w_v * components["var"] + w.w_b * components["bal"]
    return model, total
