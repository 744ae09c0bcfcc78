"""Training loop shared by the warping and flattening networks."""
import logging

import numpy as np
import torch

from ..errors import TrainingDivergedError, ValidationError
from . import losses
from .networks import FlattenNetwork, WarpNetwork, clothes_stack, person_stack, take_off
from .torchops import to_grid_units, to_nchw, warp
from ..runtime import fast_cpu

log = logging.getLogger(__name__)

ROLES = ("warp", "flatten")


def role_tensors(arrays, role, idx=None):
    """Network inputs, target, loss mask and oracle flow for ``role``.

    warp:    (person stack, clothes stack) -> C_w_gt, mask m_C, oracle F_gt
    flatten: (T^C, m_cp)                   -> C,      mask m_cp, oracle F_gt_inv
    """
    sel = (lambda a: a) if idx is None else (lambda a: a[idx])
    g = lambda name: to_nchw(sel(arrays[name]))
    if role == "warp":
        inputs = (person_stack(g("P_a"), g("m"), g("pose_map")), clothes_stack(g("C"), g("m_cp")))
        return inputs, g("C_w_gt"), g("m_C"), g("F_gt")
    if role == "flatten":
        m_C = g("m_C")
        inputs = (take_off(g("T"), m_C), g("m_cp"))
        # oracle flow is only meaningful where the flat garment was visible when worn
        visible = g("m_cp") * (warp(m_C, g("F_gt_inv")) >= 0.5).to(m_C.dtype)
        return inputs, g("C"), visible, g("F_gt_inv")
    raise ValidationError(f"unknown flow-network role {role!r}; expected one of {ROLES}")


def predict(net, role, inputs):
    """Returns ``(image, flow, per_level_flows)``."""
    if role == "warp":
        person, clothes = inputs
        flow, levels = net(person, clothes)
        return warp(clothes[:, :3], flow), flow, levels
    parsed, m_cp = inputs
    flow, levels = net(parsed, m_cp)
    return warp(parsed, flow), flow, levels


def prediction_for_loss(role, pred, target_mask):
    # the warp target only exists on the worn garment pixels
    return pred * target_mask if role == "warp" else pred


def regularized_flows(levels):
    """Per-level flows in grid units, the scale the smoothness weights are set for."""
    return [to_grid_units(f) for f in levels]


def endpoint_error(flow, oracle, mask):
    epe = (flow - oracle).norm(dim=1, keepdim=True)
    return float((epe * mask).sum() / mask.sum().clamp_min(1.0))


def lr_factor(epoch, epochs, hold_frac):
    """Constant for the first ``hold_frac`` of training, then linear to 0."""
    hold = hold_frac * epochs
    if epoch < hold:
        return 1.0
    return max(0.0, (epochs - epoch) / max(epochs - hold, 1e-12))


def build_network(role, arch=None):
    arch = dict(arch or {})
    if role == "warp":
        return WarpNetwork(**arch)
    if role == "flatten":
        return FlattenNetwork(**arch)
    raise ValidationError(f"unknown flow-network role {role!r}; expected one of {ROLES}")


@fast_cpu
def train_flow_network(arrays, role, *, indices=None, epochs=100, batch_size=32, lr=5e-5,
                       hold_frac=0.3, weights=None, extractor=None, seed=0, steps=None,
                       arch=None, ema=0.9, log_every=10):
    """Train a warping or flattening network.

    ``arrays`` maps field names to stacked numpy arrays (``Dataset.arrays``).
    When ``steps`` is given the run lasts exactly that many optimizer steps and
    the epoch bookkeeping follows from it.  Returns ``(net, history)`` where the
    history holds per-step losses, per-epoch means, an EMA-smoothed curve and
    the endpoint error of the predicted flow against the known oracle flow.
    """
    if role not in ROLES:
        raise ValidationError(f"unknown flow-network role {role!r}; expected one of {ROLES}")
    weights = tuple(weights) if weights is not None else (
        losses.WARP_WEIGHTS if role == "warp" else losses.FLAT_WEIGHTS)
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    idx_all = np.arange(len(arrays["C"])) if indices is None else np.asarray(indices)
    n = len(idx_all)
    if n == 0:
        raise ValidationError("no training samples")
    inputs_all, target_all, mask_all, oracle_all = role_tensors(arrays, role, idx_all)

    net = build_network(role, arch)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    per_epoch = max(1, -(-n // batch_size))
    total = steps if steps is not None else epochs * per_epoch
    n_epochs = -(-total // per_epoch)

    hist = {"role": role, "step_loss": [], "epoch_loss": [], "smoothed": [], "epe": []}
    smooth = None
    step = 0
    for epoch in range(n_epochs):
        for g in opt.param_groups:
            g["lr"] = lr * lr_factor(epoch, n_epochs, hold_frac)
        order = torch.randperm(n, generator=gen)
        ep_losses = []
        for k in range(0, n, batch_size):
            if step >= total:
                break
            b = order[k:k + batch_size]
            inputs = tuple(x[b] for x in inputs_all)
            pred, flow, levels = predict(net, role, inputs)
            comps = losses.flow_loss_components(
                prediction_for_loss(role, pred, mask_all[b]), target_all[b], regularized_flows(levels),
                extractor)
            loss = losses.aggregate(comps, weights)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(step, loss.item())
            opt.zero_grad()
            loss.backward()
            opt.step()
            val = loss.item()
            hist["step_loss"].append(val)
            ep_losses.append(val)
            step += 1
        mean = float(np.mean(ep_losses))
        smooth = mean if smooth is None else ema * smooth + (1 - ema) * mean
        hist["epoch_loss"].append(mean)
        hist["smoothed"].append(smooth)
        if log_every and (epoch % log_every == 0 or epoch == n_epochs - 1):
            with torch.no_grad():
                _, flow, _ = predict(net, role, tuple(x[:64] for x in inputs_all))
                epe = endpoint_error(flow, oracle_all[:64], mask_all[:64])
            hist["epe"].append((epoch, epe))
            log.info("%s epoch %d  loss %.5f  epe %.3f px", role, epoch, mean, epe)
    sm = np.asarray(hist["smoothed"])
    hist["monotone"] = bool(np.all(np.diff(sm) <= 1e-12)) if len(sm) > 1 else True
    hist["final_loss"] = hist["step_loss"][-1]
    hist["steps"] = step
    net.eval()
    return net, hist


@torch.no_grad()
def flatten_scores(net, arrays, indices=None, batch_size=64):
    """Per-sample masked L1 over ``m_cp`` of (Ĉ, C) and of the take-off-only
    baseline (T^C, C)."""
    idx_all = np.arange(len(arrays["C"])) if indices is None else np.asarray(indices)
    est, base = [], []
    for k in range(0, len(idx_all), batch_size):
        (parsed, m_cp), C, _, _ = role_tensors(arrays, "flatten", idx_all[k:k + batch_size])
        c_hat = warp(parsed, net(parsed, m_cp)[0])
        area = 3.0 * m_cp.sum(dim=(1, 2, 3))
        est.append(((c_hat - C).abs() * m_cp).sum(dim=(1, 2, 3)) / area)
        base.append(((parsed - C).abs() * m_cp).sum(dim=(1, 2, 3)) / area)
    return torch.cat(est).numpy(), torch.cat(base).numpy()


@torch.no_grad()
def warp_scores(net, arrays, indices=None, batch_size=64):
    """Per-sample masked L1 over ``m_C`` of (C^w, C_w_gt) and of the unwarped garment."""
    idx_all = np.arange(len(arrays["C"])) if indices is None else np.asarray(indices)
    est, base = [], []
    for k in range(0, len(idx_all), batch_size):
        inputs, target, m_C, _ = role_tensors(arrays, "warp", idx_all[k:k + batch_size])
        c_w = predict(net, "warp", inputs)[0]
        area = 3.0 * m_C.sum(dim=(1, 2, 3))
        est.append(((c_w - target).abs() * m_C).sum(dim=(1, 2, 3)) / area)
        base.append(((inputs[1][:, :3] - target).abs() * m_C).sum(dim=(1, 2, 3)) / area)
    return torch.cat(est).numpy(), torch.cat(base).numpy()
