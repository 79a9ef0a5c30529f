"""Augmentor, discriminator and representation learner networks.

Every network takes spectrogram batches shaped ``(B, T, F)`` (frames x
mel bands), matching :class:`seraug.features.MelSpectrogram` layout.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

EPS_LOW, EPS_HIGH = 0.05, 0.3


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class EpsilonDist:
    low: float = EPS_LOW
    high: float = EPS_HIGH

    def __post_init__(self):
        if not 0 < self.low < self.high:
            raise ValueError("need 0 < low < high")


def sample_epsilon(rng: torch.Generator | None = None, size=(), dist: EpsilonDist = EpsilonDist()) -> torch.Tensor:
    """Augmentation intensity drawn uniformly from ``[dist.low, dist.high]``."""
    u = torch.rand(size, generator=rng, dtype=torch.float64)
    return (dist.low + (dist.high - dist.low) * u).float()


def project_l1(p: torch.Tensor, eps) -> torch.Tensor:
    """Rescale each sample of ``p`` so its l1 norm equals ``eps * numel``.

    ``p`` is ``(B, ...)``; ``eps`` is a scalar or one value per sample.
    All-zero samples map to zero.
    """
    if not bool(torch.isfinite(p).all()):
        raise ValueError("perturbation contains non-finite values")
    flat = p.reshape(p.shape[0], -1)
    numel = flat.shape[1]
    eps = torch.as_tensor(eps, dtype=p.dtype).reshape(-1, 1)
    norm = flat.abs().sum(dim=1, keepdim=True)
    safe = torch.where(norm > 0, norm, torch.ones_like(norm))
    scale = torch.where(norm > 0, eps * numel / safe, torch.zeros_like(norm))
    return (flat * scale).reshape(p.shape)


@dataclass(frozen=True)
class ModelConfig:
    """Layer widths shared by the three networks; ``frames`` x ``n_mels`` is the input size."""

    frames: int = 512
    n_mels: int = 128
    latent_dim: int = 128
    noise_dims: int = 1
    aug_channels: tuple = (16, 32, 64)
    dec_channels: int = 32
    disc_channels: tuple = (16, 32, 64, 64)
    rep_channels: tuple = (16, 32, 64, 64, 64)
    rnn_hidden: int = 128
    rep_dim: int = 128

    def __post_init__(self):
        if self.frames % 4 or self.n_mels % 4:
            raise ShapeError("frames and n_mels must be multiples of 4")
        if len(self.aug_channels) != 3 or len(self.disc_channels) != 4 or len(self.rep_channels) != 5:
            raise ShapeError("expected 3 augmentor, 4 discriminator and 5 representation conv stages")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def _conv_stack(in_ch: int, widths, act: type[nn.Module], strides=None) -> nn.Sequential:
    layers = []
    strides = strides or [2] * len(widths)
    for out_ch, s in zip(widths, strides):
        layers += [nn.Conv2d(in_ch, out_ch, 3, stride=s, padding=1), act()]
        in_ch = out_ch
    return nn.Sequential(*layers)


def _down(n: int, times: int) -> int:
    for _ in range(times):
        n = (n + 1) // 2
    return n


def check_input(x: torch.Tensor, cfg: ModelConfig) -> torch.Tensor:
    if x.dim() == 2:
        x = x.unsqueeze(0)
    if x.dim() != 3 or tuple(x.shape[1:]) != (cfg.frames, cfg.n_mels):
        raise ShapeError(f"expected input (B, {cfg.frames}, {cfg.n_mels}), got {tuple(x.shape)}")
    return x


class Augmentor(nn.Module):
    """Encoder/decoder emitting an l1-budgeted additive perturbation."""

    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        self.encoder = _conv_stack(1 + cfg.noise_dims, cfg.aug_channels, lambda: nn.LeakyReLU(0.2))
        h, w = _down(cfg.frames, 3), _down(cfg.n_mels, 3)
        self.to_latent = nn.Linear(cfg.aug_channels[-1] * h * w, cfg.latent_dim)
        self._grid = (cfg.dec_channels, cfg.frames // 4, cfg.n_mels // 4)
        self.from_latent = nn.Linear(cfg.latent_dim, int(np.prod(self._grid)))
        self.decoder = nn.Sequential(
            nn.ReLU(),
            nn.ConvTranspose2d(cfg.dec_channels, cfg.dec_channels, 4, stride=2, padding=1),
            nn.ReLU(),
            nn.ConvTranspose2d(cfg.dec_channels, 1, 4, stride=2, padding=1),
        )

    def perturbation(self, x: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
        """Raw decoder output ``P`` (same shape as ``x``) for the given noise planes."""
        h = torch.cat([x.unsqueeze(1), noise], dim=1)
        z = self.to_latent(self.encoder(h).flatten(1))
        grid = self.from_latent(z).view(-1, *self._grid)
        return self.decoder(grid).squeeze(1)

    def forward(self, x: torch.Tensor, rng: torch.Generator | None = None,
                eps: torch.Tensor | None = None, eps_rng: torch.Generator | None = None,
                dist: EpsilonDist = EpsilonDist()):
        """Return ``(x_hat, delta, eps)``.

        Noise planes come from ``rng``; one intensity per sample is drawn from
        ``eps_rng`` (falling back to ``rng``) unless ``eps`` is given.
        """
        x = check_input(x, self.cfg)
        noise = torch.randn((x.shape[0], self.cfg.noise_dims, *x.shape[1:]), generator=rng)
        if eps is None:
            eps = sample_epsilon(eps_rng if eps_rng is not None else rng, (x.shape[0],), dist)
        delta = project_l1(self.perturbation(x, noise), eps)
        return (x + delta).clamp(0.0, 1.0), delta, eps


class AttentionPool(nn.Module):
    """Additive single-head attention over time steps."""

    def __init__(self, dim: int):
        super().__init__()
        self.proj = nn.Linear(dim, dim)
        self.score = nn.Linear(dim, 1, bias=False)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        weights = torch.softmax(self.score(torch.tanh(self.proj(h))), dim=1)
        return (weights * h).sum(dim=1)


class _SequenceEncoder(nn.Module):
    """Conv stack over (time, bands), then an LSTM over time and attention pooling."""

    def __init__(self, cfg: ModelConfig, widths):
        super().__init__()
        self.cfg = cfg
        self.convs = _conv_stack(1, widths, lambda: nn.LeakyReLU(0.2))
        bands = _down(cfg.n_mels, len(widths))
        self.rnn = nn.LSTM(widths[-1] * bands, cfg.rnn_hidden, batch_first=True)
        self.pool = AttentionPool(cfg.rnn_hidden)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        x = check_input(x, self.cfg)
        h = self.convs(x.unsqueeze(1))  # (B, C, T', F')
        h = h.permute(0, 2, 1, 3).flatten(2)  # (B, T', C*F')
        out, _ = self.rnn(h)
        return self.pool(out)


class Discriminator(_SequenceEncoder):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__(cfg, cfg.disc_channels)
        self.head = nn.Linear(cfg.rnn_hidden, 1)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.encode(x)).squeeze(-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Probability that each input is an original (not augmented) spectrogram."""
        return torch.sigmoid(self.logits(x)).clamp(1e-7, 1 - 1e-7)


class RepresentationLearner(_SequenceEncoder):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__(cfg, cfg.rep_channels)
        self.head = nn.Linear(cfg.rnn_hidden, cfg.rep_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.encode(x))


MODULE_NAMES = ("augmentor", "discriminator", "representation")


@dataclass
class ModelBundle:
    """The GAN-side networks (plus an optional classifier), each freezable on its own."""

    augmentor: Augmentor
    discriminator: Discriminator
    representation: RepresentationLearner
    classifier: nn.Module | None = None
    frozen: set = field(default_factory=set)

    @classmethod
    def build(cls, cfg: ModelConfig = ModelConfig(), seed: int = 0) -> "ModelBundle":
        torch.manual_seed(seed)
        return cls(Augmentor(cfg), Discriminator(cfg), RepresentationLearner(cfg))

    @property
    def config(self) -> ModelConfig:
        return self.augmentor.cfg

    def modules(self) -> dict[str, nn.Module]:
        mods = {name: getattr(self, name) for name in MODULE_NAMES}
        if self.classifier is not None:
            mods["classifier"] = self.classifier
        return mods

    def __getitem__(self, name: str) -> nn.Module:
        mods = self.modules()
        if name not in mods:
            raise KeyError(f"unknown module {name!r}; have {sorted(mods)}")
        return mods[name]

    def eval(self) -> "ModelBundle":
        for m in self.modules().values():
            m.eval()
        return self


def augment(x, model: Augmentor, rng: torch.Generator | None = None, dist: EpsilonDist = EpsilonDist()):
    """Augment normalized spectrogram(s); returns ``(x_hat, delta)`` as numpy arrays."""
    arr = np.asarray(x, dtype=np.float32)
    if arr.min() < 0 or arr.max() > 1:
        raise ValueError("augment expects spectrograms normalized to [0, 1]")
    single = arr.ndim == 2
    with torch.no_grad():
        x_hat, delta, _ = model(torch.from_numpy(arr[None] if single else arr), rng, dist=dist)
    x_hat, delta = x_hat.numpy(), delta.numpy()
    return (x_hat[0], delta[0]) if single else (x_hat, delta)


def discriminate(x, model: Discriminator) -> np.ndarray:
    with torch.no_grad():
        return model(torch.as_tensor(np.asarray(x, dtype=np.float32))).numpy()


def represent(x, model: RepresentationLearner) -> np.ndarray:
    with torch.no_grad():
        return model(torch.as_tensor(np.asarray(x, dtype=np.float32))).numpy()
