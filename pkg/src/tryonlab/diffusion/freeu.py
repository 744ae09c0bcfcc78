"""Backbone / skip-connection reweighting applied inside the UNet decoder."""
import math
from dataclasses import dataclass

import torch

from ..errors import ParameterRangeError

# low band: |f| <= this many cycles/sample along each axis (a quarter of Nyquist)
LOW_BAND = 0.125


@dataclass(frozen=True)
class FreeUFactors:
    b1: float = 1.1
    b2: float = 1.2
    s1: float = 0.9
    s2: float = 0.6

    def __post_init__(self):
        for k in ("b1", "b2", "s1", "s2"):
            if not getattr(self, k) > 0:
                raise ParameterRangeError(f"FreeU factor {k} must be positive, got {getattr(self, k)}")

    def for_stage(self, stage):
        return {1: (self.b1, self.s1), 2: (self.b2, self.s2)}.get(stage)


def low_band_mask(h, w, device=None):
    fy = torch.fft.fftfreq(h, device=device).abs() <= LOW_BAND + 1e-12
    fx = torch.fft.fftfreq(w, device=device).abs() <= LOW_BAND + 1e-12
    return fy[:, None] & fx[None, :]


def scale_low_band(x, s):
    """Scale the low-frequency band of the 2-D spectrum of ``x`` by ``s``."""
    spec = torch.fft.fft2(x.to(torch.float64) if x.dtype == torch.float64 else x.float())
    band = low_band_mask(*x.shape[-2:], device=x.device)
    scale = torch.where(band, torch.as_tensor(s, dtype=spec.real.dtype), torch.ones((), dtype=spec.real.dtype))
    return torch.fft.ifft2(spec * scale).real.to(x.dtype)


def freeu_reweight(backbone, skip, stage, factors):
    """Stages 1 and 2 (counted from the deepest decoder stage) are reweighted:
    the first ``ceil(C/2)`` backbone channels times ``b`` and the skip's low
    band times ``s``.  Other stages, and unit factors, pass through untouched."""
    if factors is None:
        return backbone, skip
    if not isinstance(factors, FreeUFactors):
        factors = FreeUFactors(**dict(factors))
    bs = factors.for_stage(stage)
    if bs is None:
        return backbone, skip
    b, s = bs
    if b != 1.0:
        half = math.ceil(backbone.shape[1] / 2)
        backbone = torch.cat([backbone[:, :half] * b, backbone[:, half:]], dim=1)
    if s != 1.0:
        skip = scale_low_band(skip, s)
    return backbone, skip
