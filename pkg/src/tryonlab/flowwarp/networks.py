"""Appearance-flow networks: a five-level FPN encoder feeding cascaded
residual flow blocks, refined coarse to fine."""
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ShapeError, ValidationError
from .torchops import compose, mask_pyramid, upsample_flow, warp

N_LEVELS = 5


def _conv(cin, cout, stride=1, k=3):
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2)


class FPN(nn.Module):
    """Bottom-up conv pyramid with a top-down lateral pathway.

    Level ``i`` has resolution ``input / 2**i`` for ``i = 0..4``; every level
    is projected to ``out_channels``.
    """

    def __init__(self, in_channels, widths=(16, 24, 32, 32, 32), out_channels=32):
        super().__init__()
        if len(widths) != N_LEVELS:
            raise ValidationError(f"FPN needs {N_LEVELS} widths, got {len(widths)}")
        self.in_channels = in_channels
        self.down = nn.ModuleList()
        prev = in_channels
        for i, w in enumerate(widths):
            self.down.append(nn.Sequential(
                _conv(prev, w, stride=1 if i == 0 else 2), nn.SiLU(),
                _conv(w, w), nn.SiLU(),
            ))
            prev = w
        self.lateral = nn.ModuleList(_conv(w, out_channels, k=1) for w in widths)
        self.smooth = nn.ModuleList(_conv(out_channels, out_channels) for _ in widths)

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"FPN expects {self.in_channels} channels, got {x.shape[1]}")
        H, W = x.shape[-2:]
        if H % 2 ** (N_LEVELS - 1) or W % 2 ** (N_LEVELS - 1):
            raise ShapeError(f"input {H}x{W} not divisible by {2 ** (N_LEVELS - 1)}")
        feats = []
        for block in self.down:
            x = block(x)
            feats.append(x)
        out = [None] * N_LEVELS
        top = None
        for i in reversed(range(N_LEVELS)):
            p = self.lateral[i](feats[i])
            if top is not None:
                p = p + F.interpolate(top, size=p.shape[-2:], mode="nearest")
            top = p
            out[i] = self.smooth[i](p)
        return out


class FlowBlock(nn.Module):
    """Predicts a residual flow from (warped source features, condition)."""

    def __init__(self, feat_channels, cond_channels, hidden=32):
        super().__init__()
        self.net = nn.Sequential(
            _conv(feat_channels + cond_channels, hidden), nn.SiLU(),
            _conv(hidden, hidden), nn.SiLU(),
            _conv(hidden, 2),
        )
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)

    def forward(self, feat, cond):
        return self.net(torch.cat([feat, cond], dim=1))


def cascade_estimate(features, conds, blocks):
    """Coarse-to-fine flow estimation.

    The coarsest block predicts a flow directly.  At each finer level the
    running flow is upsampled (displacements doubled), used to warp that
    level's features, and composed with the block's residual.  Returns the
    full-resolution flow and the per-level flows (finest first).
    """
    if len(features) != N_LEVELS or len(blocks) != N_LEVELS:
        raise ValidationError(f"cascade needs {N_LEVELS} feature levels and blocks")
    if conds is None or len(conds) != N_LEVELS or any(c is None for c in conds):
        raise ValidationError("a condition is required at each of the five levels")
    flow = None
    per_level = [None] * N_LEVELS
    for i in reversed(range(N_LEVELS)):
        feat = features[i]
        if flow is not None:
            flow = upsample_flow(flow)
            feat = warp(feat, flow)
        residual = blocks[i](feat, conds[i])
        flow = residual if flow is None else compose(flow, residual)
        per_level[i] = flow
    return flow, per_level


class WarpNetwork(nn.Module):
    """Flat garment -> body.  Person stack: agnostic image, try-on region and
    pose heatmaps; clothes stack: garment image + flat-clothes-position mask."""

    def __init__(self, person_channels=10, clothes_channels=4, widths=(16, 24, 32, 32, 32),
                 feat_channels=32, hidden=32):
        super().__init__()
        self.arch = dict(kind="warp", person_channels=person_channels,
                         clothes_channels=clothes_channels, widths=list(widths),
                         feat_channels=feat_channels, hidden=hidden)
        self.clothes_fpn = FPN(clothes_channels, widths, feat_channels)
        self.person_fpn = FPN(person_channels, widths, feat_channels)
        self.blocks = nn.ModuleList(FlowBlock(feat_channels, feat_channels, hidden)
                                    for _ in range(N_LEVELS))

    def forward(self, person_stack, clothes_stack):
        src = self.clothes_fpn(clothes_stack)
        tgt = self.person_fpn(person_stack)
        return cascade_estimate(src, tgt, self.blocks)


class FlattenNetwork(nn.Module):
    """Worn garment (clothes-parsed try-on) -> flat garment, conditioned on
    the flat-clothes-position mask at every pyramid level."""

    def __init__(self, in_channels=3, widths=(16, 24, 32, 32, 32), feat_channels=32, hidden=32):
        super().__init__()
        self.arch = dict(kind="flatten", in_channels=in_channels, widths=list(widths),
                         feat_channels=feat_channels, hidden=hidden)
        self.fpn = FPN(in_channels, widths, feat_channels)
        self.blocks = nn.ModuleList(FlowBlock(feat_channels, 1, hidden) for _ in range(N_LEVELS))

    def forward(self, parsed, m_cp):
        feats = self.fpn(parsed)
        return cascade_estimate(feats, mask_pyramid(m_cp, N_LEVELS), self.blocks)


def build(arch):
    arch = dict(arch)
    kind = arch.pop("kind")
    if kind == "warp":
        return WarpNetwork(**arch)
    if kind == "flatten":
        return FlattenNetwork(**arch)
    raise ValidationError(f"unknown flow network kind {kind!r}")


def person_stack(agnostic, region, pose_map):
    """Agnostic person image and try-on region (the segmentation proxy)
    stacked with the pose heatmaps.  Inputs are ``(B, *, H, W)``."""
    return torch.cat([agnostic, region, pose_map], dim=1)


def clothes_stack(garment, m_cp):
    return torch.cat([garment, m_cp], dim=1)


def warp_network_forward(person, clothes, net):
    """Returns ``(flow, C_w, m_w)`` with ``m_w`` binarized at 0.5."""
    flow, _ = net(person, clothes)
    garment, m_cp = clothes[:, :3], clothes[:, 3:4]
    c_w = warp(garment, flow)
    m_w = (warp(m_cp, flow) >= 0.5).to(garment.dtype)
    return flow, c_w, m_w


def take_off(try_on, m_C):
    """Clothes-parsed image: the try-on image masked to the worn garment."""
    if try_on.shape[-2:] != m_C.shape[-2:]:
        raise ShapeError("try-on image and clothes mask differ in size")
    return try_on * m_C


def flatten_network_forward(parsed, m_cp, net):
    """Returns ``(flattening flow, estimated flat garment)``."""
    flow, _ = net(parsed, m_cp)
    return flow, warp(parsed, flow)
