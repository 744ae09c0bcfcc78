"""Dual-branch diffusion loss, garment-consistency loss and their sum."""
import torch

from ..errors import DependencyError, ShapeError
from ..flowwarp.networks import take_off
from ..flowwarp.torchops import warp

LAMBDA_CONS = 0.15


def _mse(a, b):
    return ((a - b) ** 2).mean()


def dual_branch_loss(pred_main, pred_prior, z0_main):
    """Mean-squared error of both branch predictions against the main clean
    latent, averaged over the two branches.  ``pred_prior=None`` keeps only
    the main term (single-branch training)."""
    if pred_main.shape != z0_main.shape or (pred_prior is not None and pred_prior.shape != z0_main.shape):
        raise ShapeError("branch predictions must match the target latent shape")
    if pred_prior is None:
        return _mse(pred_main, z0_main)
    return 0.5 * (_mse(pred_main, z0_main) + _mse(pred_prior, z0_main))


def masked_mean_abs(x, y, mask):
    """Mean ``|x - y|`` over the pixels where ``mask`` is set (all channels)."""
    mask = mask.expand_as(x)
    return ((x - y).abs() * mask).sum() / mask.sum().clamp_min(1.0)


def flatten_generated(image, m_C, m_cp, flatten_net):
    """Take the worn garment off ``image`` and flatten it back onto the
    flat-garment canvas."""
    parsed = take_off(image, m_C)
    flow, _ = flatten_net(parsed, m_cp)
    return warp(parsed, flow)


def consistency_loss(pred_z0, decoder, flatten_net, m_C, C, m_cp):
    """Masked L1 over ``m_cp`` between the flattened decoded prediction and
    the flat garment.  ``decoder`` maps latents to images; both networks are
    expected frozen, gradients flow only into ``pred_z0``."""
    if flatten_net is None:
        raise DependencyError("consistency loss needs a trained flattening network (run `train-flatten`)")
    if decoder is None:
        raise DependencyError("consistency loss needs a trained autoencoder (run `train-autoencoder`)")
    c_hat = flatten_generated(decoder(pred_z0), m_C, m_cp, flatten_net)
    return masked_mean_abs(c_hat, C, m_cp)


def tryon_loss(l_diff, l_cons=None, lambda_cons=LAMBDA_CONS):
    if l_cons is None or lambda_cons == 0:
        return l_diff
    return l_diff + lambda_cons * l_cons
