"""Small KL-regularized convolutional autoencoder (the latent space), mask
down-sizing and frozen perceptual feature taps."""
import logging
import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError, TrainingDivergedError, UsageError, ValidationError
from .runtime import fast_cpu

log = logging.getLogger(__name__)


def _conv(cin, cout, stride=1, k=3):
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2)


class Autoencoder(nn.Module):
    def __init__(self, downsample=4, latent_channels=4, widths=(16, 32), regularized=True):
        super().__init__()
        n_down = int(round(math.log2(downsample)))
        if downsample < 2 or 2**n_down != downsample:
            raise ValidationError(f"downsample factor must be a power of two >= 2, got {downsample}")
        self.arch = dict(kind="autoencoder", downsample=downsample,
                         latent_channels=latent_channels, widths=list(widths),
                         regularized=regularized)
        self.d = downsample
        self.c = latent_channels
        self.regularized = regularized
        w = [widths[min(k, len(widths) - 1)] for k in range(n_down + 1)]

        self.stem = _conv(3, w[0])
        self.down = nn.ModuleList(
            nn.Sequential(_conv(w[k], w[k + 1], stride=2), nn.SiLU(), _conv(w[k + 1], w[k + 1]), nn.SiLU())
            for k in range(n_down))
        self.head = _conv(w[-1], 2 * latent_channels if regularized else latent_channels)

        self.dec_in = nn.Sequential(_conv(latent_channels, w[-1]), nn.SiLU(), _conv(w[-1], w[-1]), nn.SiLU())
        self.up = nn.ModuleList(
            nn.Sequential(_conv(w[k + 1], w[k]), nn.SiLU(), _conv(w[k], w[k]), nn.SiLU())
            for k in reversed(range(n_down)))
        self.dec_out = _conv(w[0], 3)

        self.register_buffer("latent_scale", torch.ones(()))
        self.register_buffer("trained", torch.zeros(()))

    # encoder ----------------------------------------------------------------
    def _check(self, x):
        H, W = x.shape[-2:]
        if H % self.d or W % self.d:
            raise ShapeError(f"image {H}x{W} not divisible by downsample factor {self.d}")

    def encode_dist(self, x):
        """Unscaled posterior ``(mean, logvar)``; ``logvar`` is None when unregularized."""
        self._check(x)
        h = F.silu(self.stem(x))
        for block in self.down:
            h = block(h)
        h = self.head(h)
        if self.regularized:
            mean, logvar = h.chunk(2, dim=1)
            return mean, logvar.clamp(-30.0, 20.0)
        return h, None

    def encode(self, x):
        """Deterministic encoding: the (scaled) posterior mean, ``(B, c, H/d, W/d)``."""
        mean, _ = self.encode_dist(x)
        return mean * self.latent_scale

    def taps(self, x):
        """Encoder features at strides 2, 4 and 8."""
        self._check(x)
        h = F.silu(self.stem(x))
        feats = []
        for block in self.down:
            h = block(h)
            feats.append(h)
        while len(feats) < 3:
            feats.append(F.avg_pool2d(feats[-1], 2))
        return feats[:3]

    # decoder ----------------------------------------------------------------
    def decode(self, z):
        if z.shape[1] != self.c:
            raise ShapeError(f"latent has {z.shape[1]} channels, decoder expects {self.c}")
        h = self.dec_in(z / self.latent_scale)
        for block in self.up:
            h = block(F.interpolate(h, scale_factor=2, mode="nearest"))
        return torch.sigmoid(self.dec_out(h))

    def forward(self, x):
        return self.decode(self.encode(x))


def build(arch):
    arch = dict(arch)
    arch.pop("kind", None)
    return Autoencoder(**arch)


def encode(image, ae):
    return ae.encode(image)


def decode(latent, ae):
    return ae.decode(latent)


def perceptual_features(image, ae):
    """Frozen feature taps used by the perceptual loss and the Frechet proxy."""
    if float(ae.trained) != 1.0:
        raise UsageError("perceptual features need a trained autoencoder")
    return ae.taps(image)


def freeze(module):
    module.eval()
    module.requires_grad_(False)
    return module


def downsize_mask(m, d):
    """Area-average over ``d x d`` blocks, then threshold at >= 0.5.

    Accepts numpy ``(H, W)`` or torch ``(..., H, W)``; returns the same kind.
    """
    is_np = isinstance(m, np.ndarray)
    t = torch.as_tensor(np.asarray(m, dtype=np.float64)) if is_np else m
    H, W = t.shape[-2:]
    if H % d or W % d:
        raise ShapeError(f"mask {H}x{W} not divisible by {d}")
    lead = t.shape[:-2]
    avg = t.reshape(*lead, H // d, d, W // d, d).mean(dim=(-3, -1))
    out = (avg >= 0.5).to(t.dtype)
    return out.numpy().astype(np.asarray(m).dtype) if is_np else out


def kl_divergence(mean, logvar):
    return 0.5 * (mean**2 + logvar.exp() - 1.0 - logvar).flatten(1).sum(1).mean()


@fast_cpu
def train_autoencoder(images, *, steps=3000, batch_size=32, lr=2e-3, kl_weight=1e-6,
                      downsample=4, latent_channels=4, widths=(16, 32), seed=0,
                      log_every=500, history=None):
    """Fit the autoencoder on ``images (N, H, W, 3)`` in ``[0, 1]``.

    Objective: mean L1 reconstruction + ``kl_weight`` * KL.  Returns the
    trained (frozen) model and the per-step history
    ``[(step, total, recon, kl), ...]``.
    """
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    ae = Autoencoder(downsample, latent_channels, widths)
    data = torch.as_tensor(np.asarray(images, dtype=np.float32)).permute(0, 3, 1, 2).contiguous()
    opt = torch.optim.Adam(ae.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: 1.0 if s < 0.6 * steps else max(0.0, (steps - s) / (0.4 * steps)))
    history = [] if history is None else history
    n = len(data)
    for step in range(steps):
        idx = torch.randint(0, n, (batch_size,), generator=gen)
        x = data[idx]
        mean, logvar = ae.encode_dist(x)
        z = mean + torch.randn(mean.shape, generator=gen) * (0.5 * logvar).exp()
        recon = (ae.decode(z) - x).abs().mean()
        kl = kl_divergence(mean, logvar)
        loss = recon + kl_weight * kl if kl_weight else recon
        if not torch.isfinite(loss):
            raise TrainingDivergedError(step, loss.item())
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        history.append((step, loss.item(), recon.item(), kl.item()))
        if log_every and step % log_every == 0:
            log.info("autoencoder step %d  loss %.4f  recon %.4f", step, loss.item(), recon.item())
    with torch.no_grad():
        sample = data[torch.randperm(n, generator=gen)[:256]]
        std = ae.encode_dist(sample)[0].std()
        ae.latent_scale.fill_(float(1.0 / std))
        ae.trained.fill_(1.0)
    return freeze(ae), history


@torch.no_grad()
def reconstruction_error(ae, images, batch_size=64):
    data = torch.as_tensor(np.asarray(images, dtype=np.float32)).permute(0, 3, 1, 2)
    errs = []
    for k in range(0, len(data), batch_size):
        x = data[k:k + batch_size]
        errs.append((ae.decode(ae.encode(x)) - x).abs().mean(dim=(1, 2, 3)))
    return float(torch.cat(errs).mean())
