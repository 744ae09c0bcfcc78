"""Mixed image/flow losses for the warping and flattening networks."""
from collections import namedtuple

import torch

from ..errors import ShapeError

FlowLoss = namedtuple("FlowLoss", "l1 per sec tv")

# (lambda_per, lambda_sec, lambda_tv)
FLAT_WEIGHTS = (0.1, 10.0, 0.01)
WARP_WEIGHTS = (0.2, 0.01, 6.0)


def _diffs(flow, order):
    """Finite differences of a ``(..., H, W)`` field along W and H, flattened
    and concatenated (either axis may contribute nothing)."""
    if order == 1:
        dx = flow[..., :, 1:] - flow[..., :, :-1]
        dy = flow[..., 1:, :] - flow[..., :-1, :]
    else:
        dx = flow[..., :, 2:] - 2.0 * flow[..., :, 1:-1] + flow[..., :, :-2]
        dy = flow[..., 2:, :] - 2.0 * flow[..., 1:-1, :] + flow[..., :-2, :]
    return torch.cat([dx.reshape(-1), dy.reshape(-1)])


def second_order_smoothness(flow):
    d = _diffs(flow, 2)
    return (d**2).mean() if d.numel() else flow.new_zeros(())


def total_variation(flow):
    d = _diffs(flow, 1)
    return d.abs().mean() if d.numel() else flow.new_zeros(())


def perceptual_distance(pred, target, extractor):
    if extractor is None:
        return pred.new_zeros(())
    fp = extractor(pred)
    ft = extractor(target)
    return torch.stack([(a - b).abs().mean() for a, b in zip(fp, ft)]).mean()


def flow_loss_components(pred, target, flow, extractor=None):
    """``(L1, L_per, L_sec, L_TV)``.

    ``flow`` may be one tensor or a list of per-level flows; the two flow
    regularizers are then averaged over levels.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"pred {tuple(pred.shape)} != target {tuple(target.shape)}")
    flows = flow if isinstance(flow, (list, tuple)) else [flow]
    l1 = (pred - target).abs().mean()
    per = perceptual_distance(pred, target, extractor)
    sec = torch.stack([second_order_smoothness(f) for f in flows]).mean()
    tv = torch.stack([total_variation(f) for f in flows]).mean()
    return FlowLoss(l1, per, sec, tv)


def aggregate(components, weights):
    l1, per, sec, tv = components
    w_per, w_sec, w_tv = weights
    return l1 + w_per * per + w_sec * sec + w_tv * tv


def aggregate_flat_loss(components, weights=FLAT_WEIGHTS):
    return aggregate(components, weights)


def aggregate_warp_loss(components, weights=WARP_WEIGHTS):
    return aggregate(components, weights)
