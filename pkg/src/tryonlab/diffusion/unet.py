"""x0-predicting conditional UNet and the garment tokenizer used as its
global (cross-attention) condition."""
import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ShapeError, ValidationError
from .freeu import freeu_reweight

BRANCHES = ("main", "prior")


def build_denoising_input(z_t, local_cond, m_r, branch="main", t=None):
    """Channel stack ``[z_t ; local_cond ; m_r]`` with ``2c + 1`` channels.

    ``branch`` and ``t`` only tag the call; both branches share the layout.
    """
    if branch not in BRANCHES:
        raise ValidationError(f"unknown branch {branch!r}")
    if m_r.ndim == z_t.ndim - 1:
        m_r = m_r.unsqueeze(1)
    if z_t.shape != local_cond.shape or m_r.shape[1] != 1 or \
            z_t.shape[-2:] != m_r.shape[-2:] or z_t.shape[0] != m_r.shape[0]:
        raise ShapeError(f"denoising input parts disagree: z_t {tuple(z_t.shape)}, "
                         f"local {tuple(local_cond.shape)}, mask {tuple(m_r.shape)}")
    return torch.cat([z_t, local_cond, m_r.to(z_t.dtype)], dim=1)


def timestep_embedding(t, dim, max_period=10000.0):
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = torch.as_tensor(t, dtype=torch.float32).reshape(-1, 1) * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def _norm(ch):
    return nn.GroupNorm(min(8, ch), ch)


class ResBlock(nn.Module):
    def __init__(self, cin, cout, tdim):
        super().__init__()
        self.n1 = _norm(cin)
        self.c1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.t = nn.Linear(tdim, cout)
        self.n2 = _norm(cout)
        self.c2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.c1(F.silu(self.n1(x)))
        h = h + self.t(temb)[:, :, None, None]
        h = self.c2(F.silu(self.n2(h)))
        return h + self.skip(x)


class CrossAttention(nn.Module):
    def __init__(self, ch, token_dim, heads=4):
        super().__init__()
        self.norm = _norm(ch)
        self.attn = nn.MultiheadAttention(ch, heads, kdim=token_dim, vdim=token_dim, batch_first=True)

    def forward(self, x, tokens):
        B, C, H, W = x.shape
        q = self.norm(x).flatten(2).transpose(1, 2)
        out, _ = self.attn(q, tokens, tokens, need_weights=False)
        return x + out.transpose(1, 2).reshape(B, C, H, W)


class Stage(nn.Module):
    def __init__(self, cin, cout, tdim, token_dim, heads):
        super().__init__()
        self.res = ResBlock(cin, cout, tdim)
        self.attn = CrossAttention(cout, token_dim, heads)

    def forward(self, x, temb, tokens):
        return self.attn(self.res(x, temb), tokens)


class UNet(nn.Module):
    """Two-stage (by default) UNet over latent grids.

    Input ``2c + 1`` channels, output ``c`` channels (the clean-latent estimate).
    Decoder stages are numbered from the deepest (1) outwards; FreeU factors
    apply to stages 1 and 2.
    """

    def __init__(self, latent_channels=4, channels=(32, 64), time_dim=128, token_dim=64, heads=4):
        super().__init__()
        if len(channels) < 2:
            raise ValidationError("the UNet needs at least two stages")
        self.arch = dict(kind="unet", latent_channels=latent_channels, channels=list(channels),
                         time_dim=time_dim, token_dim=token_dim, heads=heads)
        c = latent_channels
        self.in_channels = 2 * c + 1
        self.time_dim = time_dim
        self.time_mlp = nn.Sequential(nn.Linear(time_dim, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim))
        self.conv_in = nn.Conv2d(self.in_channels, channels[0], 3, padding=1)
        self.down = nn.ModuleList()
        prev = channels[0]
        for ch in channels:
            self.down.append(Stage(prev, ch, time_dim, token_dim, heads))
            prev = ch
        self.mid1 = Stage(prev, prev, time_dim, token_dim, heads)
        self.mid2 = ResBlock(prev, prev, time_dim)
        self.up = nn.ModuleList()
        for ch in reversed(channels):
            self.up.append(Stage(prev + ch, ch, time_dim, token_dim, heads))
            prev = ch
        self.out = nn.Sequential(_norm(prev), nn.SiLU(), nn.Conv2d(prev, c, 3, padding=1))
        self.factor = 2 ** len(channels)

    def forward(self, x, t, tokens, freeu=None):
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"UNet expects {self.in_channels} input channels, got {x.shape[1]}")
        H, W = x.shape[-2:]
        if H % self.factor or W % self.factor:
            raise ShapeError(f"latent {H}x{W} not divisible by {self.factor}")
        t = torch.as_tensor(t).reshape(-1).expand(x.shape[0])
        temb = self.time_mlp(timestep_embedding(t, self.time_dim).to(x.dtype))
        h = self.conv_in(x)
        skips = []
        for stage in self.down:
            h = stage(h, temb, tokens)
            skips.append(h)
            h = F.avg_pool2d(h, 2)
        h = self.mid2(self.mid1(h, temb, tokens), temb)
        for k, stage in enumerate(self.up, start=1):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            skip = skips.pop()
            h, skip = freeu_reweight(h, skip, k, freeu)
            h = stage(torch.cat([h, skip], dim=1), temb, tokens)
        return self.out(h)


def unet_predict(x, tokens, t, unet, freeu=None):
    return unet(x, t, tokens, freeu)


class GarmentTokenizer(nn.Module):
    """Frozen seeded convolutional backbone pooled to a ``grid`` of tokens,
    followed by a trainable projection, positional embedding and a learned
    null sequence used for condition dropout."""

    def __init__(self, token_dim=64, grid=(4, 3), widths=(16, 32, 64), backbone_seed=1234):
        super().__init__()
        self.arch = dict(kind="tokenizer", token_dim=token_dim, grid=list(grid),
                         widths=list(widths), backbone_seed=backbone_seed)
        self.grid = tuple(grid)
        gen = torch.Generator().manual_seed(backbone_seed)
        layers, prev = [], 3
        for w in widths:
            conv = nn.Conv2d(prev, w, 3, stride=2, padding=1)
            with torch.no_grad():
                bound = math.sqrt(6.0 / (prev * 9))
                conv.weight.copy_((torch.rand(conv.weight.shape, generator=gen) * 2 - 1) * bound)
                conv.bias.copy_((torch.rand(conv.bias.shape, generator=gen) * 2 - 1) * 0.1)
            layers += [conv, nn.SiLU()]
            prev = w
        self.backbone = nn.Sequential(*layers).requires_grad_(False)
        L = grid[0] * grid[1]
        self.proj = nn.Linear(prev + 3, token_dim)
        self.pos = nn.Parameter(torch.randn(L, token_dim) * 0.02)
        self.null = nn.Parameter(torch.randn(L, token_dim) * 0.02)

    @property
    def length(self):
        return self.grid[0] * self.grid[1]

    def backbone_features(self, C):
        feats = F.adaptive_avg_pool2d(self.backbone(C), self.grid)
        color = F.adaptive_avg_pool2d(C, self.grid)
        return torch.cat([feats, color], dim=1).flatten(2).transpose(1, 2)

    def forward(self, C, drop=False):
        """``drop`` is a bool or a per-item boolean tensor."""
        if C.ndim != 4 or C.shape[1] != 3:
            raise ShapeError(f"garment batch must be (B, 3, H, W), got {tuple(C.shape)}")
        B = C.shape[0]
        null = self.null.unsqueeze(0).expand(B, -1, -1)
        if drop is True:
            return null
        tokens = self.proj(self.backbone_features(C)) + self.pos
        if drop is False:
            return tokens
        drop = torch.as_tensor(drop, dtype=torch.bool).reshape(B, 1, 1)
        return torch.where(drop, null, tokens)


def global_encode(C, tokenizer, drop=False):
    return tokenizer(C, drop)


def build(arch):
    arch = dict(arch)
    kind = arch.pop("kind")
    if kind == "unet":
        return UNet(**arch)
    if kind == "tokenizer":
        return GarmentTokenizer(**arch)
    raise ValidationError(f"unknown diffusion network kind {kind!r}")
