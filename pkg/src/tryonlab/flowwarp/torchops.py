"""Differentiable flow operations on ``(B, C, H, W)`` tensors.

Flows are ``(B, 2, H, W)`` pixel displacements ``(dx, dy)`` with the same
backward-warp convention as :mod:`tryonlab.flowwarp.fields`.
"""
import torch
import torch.nn.functional as F

from ..errors import ShapeError


def _taps(size, coord, clamp):
    c0 = torch.floor(coord)
    w1 = coord - c0
    i0 = c0.long()
    i1 = i0 + 1
    if clamp:
        hi = size - 1
        # at the far border both taps collapse onto the last pixel
        return i0.clamp(0, hi), i1.clamp(0, hi), 1.0 - w1, w1, None, None
    v0 = (i0 >= 0) & (i0 < size)
    v1 = (i1 >= 0) & (i1 < size)
    return i0.clamp(0, size - 1), i1.clamp(0, size - 1), 1.0 - w1, w1, v0, v1


def warp(image, flow, padding="zeros"):
    """Bilinear backward warp ``out(x) = image(x + flow(x))``.

    ``padding="zeros"`` reads 0 off the canvas, ``"border"`` clamps.  A zero
    flow returns the input exactly.
    """
    if image.shape[-2:] != flow.shape[-2:] or image.shape[0] != flow.shape[0]:
        raise ShapeError(f"image {tuple(image.shape)} and flow {tuple(flow.shape)} disagree")
    if padding not in ("zeros", "border"):
        raise ValueError(f"unknown padding {padding!r}")
    B, C, H, W = image.shape
    ys = torch.arange(H, dtype=flow.dtype, device=flow.device).view(1, H, 1)
    xs = torch.arange(W, dtype=flow.dtype, device=flow.device).view(1, 1, W)
    x = xs + flow[:, 0]
    y = ys + flow[:, 1]
    clamp = padding == "border"
    if clamp:
        x = x.clamp(0, W - 1)
        y = y.clamp(0, H - 1)
    x0, x1, wx0, wx1, vx0, vx1 = _taps(W, x, clamp)
    y0, y1, wy0, wy1, vy0, vy1 = _taps(H, y, clamp)
    flat = image.reshape(B, C, H * W)

    def tap(yi, xi, w, vy, vx):
        idx = (yi * W + xi).view(B, 1, H * W).expand(B, C, H * W)
        val = torch.gather(flat, 2, idx).view(B, C, H, W)
        if vy is not None:
            w = w * (vy & vx).to(w.dtype)
        return val * w.unsqueeze(1)

    return (tap(y0, x0, wy0 * wx0, vy0, vx0) + tap(y0, x1, wy0 * wx1, vy0, vx1)
            + tap(y1, x0, wy1 * wx0, vy1, vx0) + tap(y1, x1, wy1 * wx1, vy1, vx1))


def compose(f, g):
    """Flow of warping by ``f`` then ``g``: ``g(x) + f(x + g(x))``."""
    return g + warp(f, g, padding="border")


def upsample_flow(flow):
    """Double the resolution of a flow and scale its displacements by 2."""
    return 2.0 * F.interpolate(flow, scale_factor=2, mode="bilinear", align_corners=False)


def to_grid_units(flow):
    """Pixel displacements -> normalized [-1, 1] sampling-grid units
    (``2 / (size - 1)`` per axis), resolution independent across levels."""
    H, W = flow.shape[-2:]
    scale = flow.new_tensor([2.0 / max(W - 1, 1), 2.0 / max(H - 1, 1)]).view(2, 1, 1)
    return flow * scale


def mask_pyramid(mask, levels):
    """Area-averaged (soft) copies of ``mask`` at strides ``1, 2, ..., 2**(levels-1)``."""
    return [mask if i == 0 else F.avg_pool2d(mask, 2**i) for i in range(levels)]


def to_nchw(arr, dtype=torch.float32):
    """``(N, H, W, C)`` or ``(N, H, W)`` numpy array -> ``(N, C, H, W)`` tensor."""
    t = torch.as_tensor(arr, dtype=dtype)
    if t.ndim == 3:
        t = t.unsqueeze(-1)
    return t.permute(0, 3, 1, 2).contiguous()


def to_nhwc(t):
    return t.detach().permute(0, 2, 3, 1).cpu().numpy()
