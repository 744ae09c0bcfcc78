"""Deterministic first-order sampling with x0-predicting denoisers."""
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import io
from .diffusion.freeu import FreeUFactors, freeu_reweight  # noqa: F401  (re-export)
from .diffusion.unet import build_denoising_input
from .errors import DependencyError, ParameterRangeError, ShapeError

INIT_MODES = ("gaussian", "clothes_posterior")


@dataclass
class SamplerConfig:
    steps: int = 50
    init_mode: str = "clothes_posterior"
    guidance_scale: float = 1.0
    freeu: FreeUFactors | None = field(default_factory=FreeUFactors)
    seed: int = 0

    def validate(self, T):
        if self.init_mode not in INIT_MODES:
            raise ParameterRangeError(f"init_mode must be one of {INIT_MODES}, got {self.init_mode!r}")
        if not 1 <= self.steps <= T:
            raise ParameterRangeError(f"steps must lie in [1, T={T}], got {self.steps}")
        if self.guidance_scale < 0:
            raise ParameterRangeError("guidance_scale must be >= 0")


def timesteps(T, steps):
    """``steps + 1`` uniformly spaced integer time-steps from ``T`` down to 0."""
    if not 1 <= steps <= T:
        raise ParameterRangeError(f"steps must lie in [1, T={T}], got {steps}")
    ts = [int(round(T * (steps - i) / steps)) for i in range(steps + 1)]
    return ts


def init_posterior_noise(z_prior, alpha_bar_T, eps):
    if tuple(np.shape(z_prior)) != tuple(np.shape(eps)):
        raise ShapeError("posterior noise: eps must match the prior latent shape")
    return np.sqrt(alpha_bar_T) * z_prior + np.sqrt(1.0 - alpha_bar_T) * eps


def init_gaussian_noise(shape, seed):
    gen = torch.Generator().manual_seed(int(seed))
    return torch.randn(tuple(shape), generator=gen)


def ddim_step_x0(z_t, x0_hat, t, t_prev, schedule):
    if not t > t_prev >= 0:
        raise ParameterRangeError(f"need t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    ab_t = float(schedule.alpha_bar[t])
    ab_prev = float(schedule.alpha_bar[t_prev])
    if t_prev == 0 and ab_prev == 1.0:
        return x0_hat
    eps_hat = (z_t - np.sqrt(ab_t) * x0_hat) / np.sqrt(1.0 - ab_t)
    return np.sqrt(ab_prev) * x0_hat + np.sqrt(1.0 - ab_prev) * eps_hat


def cfg_combine(pred_cond, pred_uncond, scale):
    if pred_cond.shape != pred_uncond.shape:
        raise ShapeError("conditional and unconditional predictions differ in shape")
    if scale == 1:
        return pred_cond
    if scale == 0:
        return pred_uncond
    return pred_uncond + scale * (pred_cond - pred_uncond)


def initial_latent(init_mode, z_prior, schedule, seed):
    eps = init_gaussian_noise(z_prior.shape, seed)
    if init_mode == "gaussian":
        return eps
    return init_posterior_noise(z_prior, float(schedule.alpha_bar[schedule.T]), eps)


def run_trajectory(denoise, z_T, schedule, steps, trace=None):
    """Step ``z_T`` to ``z_0`` with ``denoise(z_t, t) -> x0``.  ``trace``
    (a list) collects the per-step x0 estimates."""
    ts = timesteps(schedule.T, steps)
    z = z_T
    for t, t_prev in zip(ts[:-1], ts[1:]):
        x0 = denoise(z, t)
        if trace is not None:
            trace.append((t, x0))
        z = ddim_step_x0(z, x0, t, t_prev, schedule)
    return z


@torch.no_grad()
def sample_latents(cond, unet, tokenizer, schedule, cfg: SamplerConfig):
    """Sample clean latents for a batch of conditioning tensors
    (keys ``C, local, m_r, z_prior`` as built by ``prepare_pairs``)."""
    if unet is None or tokenizer is None:
        raise DependencyError("sampling needs the diffusion checkpoint (run `train-diffusion`)")
    cfg.validate(schedule.T)
    tokens = tokenizer(cond["C"], False)
    null = tokenizer(cond["C"], True) if cfg.guidance_scale != 1 else None
    local, m_r = cond["local"], cond["m_r"]

    def denoise(z, t):
        x = build_denoising_input(z, local, m_r, "main", t)
        tt = torch.full((z.shape[0],), t, dtype=torch.long)
        pc = unet(x, tt, tokens, cfg.freeu)
        if null is None:
            return pc
        return cfg_combine(pc, unet(x, tt, null, cfg.freeu), cfg.guidance_scale)

    z_T = initial_latent(cfg.init_mode, cond["z_prior"], schedule, cfg.seed)
    trace = []
    z0 = run_trajectory(denoise, z_T, schedule, cfg.steps, trace)
    return z0, trace


@torch.no_grad()
def sample(cond, ae, unet, tokenizer, schedule, cfg: SamplerConfig, trace_dir=None, ids=None):
    """Try-on images ``D(z_0)`` for a batch of pairs; optionally writes the
    decoded x0 estimate of every step to ``trace_dir``."""
    if ae is None:
        raise DependencyError("sampling needs the autoencoder (run `train-autoencoder`)")
    z0, trace = sample_latents(cond, unet, tokenizer, schedule, cfg)
    out = ae.decode(z0)
    if trace_dir is not None:
        d = Path(trace_dir)
        d.mkdir(parents=True, exist_ok=True)
        ids = ids or [f"{k:03d}" for k in range(out.shape[0])]
        for k, (t, x0) in enumerate(trace):
            imgs = ae.decode(x0).permute(0, 2, 3, 1).numpy()
            for sid, img in zip(ids, imgs):
                io.save_png(d / f"{sid}_step{k:03d}_t{t:04d}.png", img)
    return out
