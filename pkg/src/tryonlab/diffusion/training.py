"""Training loop for the try-on UNet and the tokenizer's trainable head."""
import csv
import logging
from dataclasses import dataclass

import numpy as np
import torch

from .. import checkpoint
from ..errors import DependencyError, TrainingDivergedError
from . import losses
from .schedule import forward_diffuse
from .unet import GarmentTokenizer, UNet, build_denoising_input
from ..runtime import fast_cpu

log = logging.getLogger(__name__)


@dataclass
class DiffusionTrainConfig:
    steps: int = 3000
    batch_size: int = 8
    lr: float = 2e-5
    warmup_steps: int = 3000
    warmup_start: float = 1e-6
    cfg_drop: float = 0.2
    lambda_cons: float = losses.LAMBDA_CONS
    prior_branch: bool = True
    cons_loss: bool = True
    global_cond: bool = True
    seed: int = 0


def warmup_lr(step, cfg):
    if cfg.warmup_steps <= 0 or step >= cfg.warmup_steps:
        return cfg.lr
    return cfg.warmup_start + (cfg.lr - cfg.warmup_start) * step / cfg.warmup_steps


def trainable_parameters(unet, tokenizer):
    return list(unet.parameters()) + [p for n, p in tokenizer.named_parameters()
                                      if not n.startswith("backbone.")]


def branch_predictions(unet, tokens, z_main, z_prior, local, m_r, t, eps, schedule, prior_branch):
    """Clean-latent predictions for the main branch and (optionally) the prior
    branch, both noised with the same ``eps`` at the same ``t``."""
    zt_main = forward_diffuse(z_main, t, eps, schedule)
    x = build_denoising_input(zt_main, local, m_r, "main", t)
    if not prior_branch:
        return unet(x, t, tokens), None
    zt_prior = forward_diffuse(z_prior, t, eps, schedule)
    xp = build_denoising_input(zt_prior, local, m_r, "prior", t)
    B = x.shape[0]
    out = unet(torch.cat([x, xp]), torch.cat([t, t]), torch.cat([tokens, tokens]))
    return out[:B], out[B:]


def diffusion_loss(batch, t, eps, unet, tokens, schedule, prior_branch=True):
    pm, pp = branch_predictions(unet, tokens, batch["z_main"], batch["z_prior"], batch["local"],
                                batch["m_r"], t, eps, schedule, prior_branch)
    return losses.dual_branch_loss(pm, pp, batch["z_main"]), pm


@fast_cpu
def train_diffusion(pairs, schedule, ae, flatten_net, cfg: DiffusionTrainConfig,
                    unet_arch=None, tokenizer_arch=None, curve_path=None, log_every=250):
    """``pairs`` comes from :func:`conditioning.prepare_pairs` on paired data.

    The autoencoder, flattening network and tokenizer backbone stay frozen;
    only the UNet and the tokenizer projection/embeddings are updated.
    Returns ``(unet, tokenizer, curve)`` with ``curve`` rows
    ``(step, L_diff, L_cons, L_total)``.
    """
    if ae is None:
        raise DependencyError("diffusion training needs the autoencoder (run `train-autoencoder`)")
    if cfg.cons_loss and cfg.lambda_cons > 0 and flatten_net is None:
        raise DependencyError("consistency loss needs the flattening network (run `train-flatten`)")
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    unet = UNet(**{k: v for k, v in (unet_arch or {}).items() if k != "kind"})
    tokenizer = GarmentTokenizer(**{k: v for k, v in (tokenizer_arch or {}).items() if k != "kind"})
    frozen_before = {"tokenizer_backbone": checkpoint.state_hash(tokenizer.backbone)}
    params = trainable_parameters(unet, tokenizer)
    opt = torch.optim.Adam(params, lr=warmup_lr(0, cfg))
    use_cons = cfg.cons_loss and cfg.lambda_cons > 0
    n = pairs["z_main"].shape[0]
    curve = []
    writer = None
    fh = None
    if curve_path is not None:
        fh = open(curve_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["step", "L_diff", "L_cons", "L_total"])
    try:
        for step in range(cfg.steps):
            for g in opt.param_groups:
                g["lr"] = warmup_lr(step, cfg)
            b = torch.randint(0, n, (cfg.batch_size,), generator=gen)
            batch = {k: v[b] for k, v in pairs.items()}
            t = torch.randint(1, schedule.T + 1, (cfg.batch_size,), generator=gen)
            eps = torch.randn(batch["z_main"].shape, generator=gen)
            if cfg.global_cond:
                drop = torch.rand(cfg.batch_size, generator=gen) < cfg.cfg_drop
            else:
                drop = True
            tokens = tokenizer(batch["C"], drop)
            l_diff, pred_main = diffusion_loss(batch, t, eps, unet, tokens, schedule, cfg.prior_branch)
            l_cons = None
            if use_cons:
                l_cons = losses.consistency_loss(pred_main, ae.decode, flatten_net,
                                                 batch["m_C"], batch["C"], batch["m_cp"])
            loss = losses.tryon_loss(l_diff, l_cons, cfg.lambda_cons)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(step, loss.item())
            opt.zero_grad()
            loss.backward()
            opt.step()
            row = (step, l_diff.item(), l_cons.item() if l_cons is not None else 0.0, loss.item())
            curve.append(row)
            if writer is not None:
                writer.writerow([row[0]] + [f"{v:.8g}" for v in row[1:]])
            if log_every and step % log_every == 0:
                log.info("diffusion step %d  L_diff %.4f  L_cons %.4f", step, row[1], row[2])
    finally:
        if fh is not None:
            fh.close()
    if checkpoint.state_hash(tokenizer.backbone) != frozen_before["tokenizer_backbone"]:
        raise RuntimeError("tokenizer backbone changed during training")
    unet.eval()
    tokenizer.eval()
    return unet, tokenizer, curve


def moving_average(values, window=50):
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return v.copy()
    c = np.cumsum(np.concatenate([[0.0], v]))
    return (c[window:] - c[:-window]) / window
