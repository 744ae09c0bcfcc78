"""Noise schedules and the closed-form forward process."""
import math
from dataclasses import dataclass

import numpy as np
import torch

from ..errors import ParameterRangeError, ShapeError

SCHEDULE_KINDS = ("linear", "cosine", "constant")


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    T: int
    beta: np.ndarray       # beta[s - 1] = beta_s, s = 1..T
    alpha_bar: np.ndarray  # alpha_bar[t], t = 0..T, alpha_bar[0] = 1

    def ab(self, t):
        """``alpha_bar`` at integer steps ``t`` (0..T) as float64 numpy."""
        return self.alpha_bar[np.asarray(t)]

    def ab_torch(self, t, dtype=torch.float32):
        t = torch.as_tensor(t, dtype=torch.long)
        return torch.as_tensor(self.alpha_bar, dtype=torch.float64)[t].to(dtype)


def _cosine_betas(T, s=0.008, max_beta=0.999):
    f = lambda t: math.cos((t / T + s) / (1 + s) * math.pi / 2) ** 2
    return np.array([min(1.0 - f(k) / f(k - 1), max_beta) for k in range(1, T + 1)])


def make_schedule(kind="linear", T=200, beta_start=1e-4, beta_end=0.02, beta=None):
    """``kind="constant"`` (a test hook) uses ``beta`` at every step."""
    if int(T) != T or T < 1:
        raise ParameterRangeError(f"T must be an integer >= 1, got {T}")
    T = int(T)
    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64) if T > 1 \
            else np.array([beta_start], dtype=np.float64)
    elif kind == "cosine":
        betas = _cosine_betas(T)
    elif kind == "constant":
        if beta is None:
            raise ParameterRangeError("constant schedule needs beta")
        betas = np.full(T, float(beta))
    else:
        raise ParameterRangeError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    if not np.all((betas > 0) & (betas < 1)):
        raise ParameterRangeError("every beta must lie in (0, 1)")
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(kind, T, betas, alpha_bar)


def _check_t(t, schedule, lo=1):
    arr = np.asarray(t.detach().cpu() if torch.is_tensor(t) else t)
    if arr.size and (arr.min() < lo or arr.max() > schedule.T):
        raise ParameterRangeError(f"time-step out of range [{lo}, {schedule.T}]: {arr.min()}..{arr.max()}")


def _bcast(coef, like):
    if torch.is_tensor(like):
        c = torch.as_tensor(coef, dtype=like.dtype, device=like.device)
        return c.view(-1, *([1] * (like.ndim - 1))) if c.ndim else c
    c = np.asarray(coef, dtype=np.float64)
    return c.reshape(-1, *([1] * (np.ndim(like) - 1))) if c.ndim else c


def forward_diffuse(z0, t, eps, schedule):
    """``sqrt(ab_t) z0 + sqrt(1 - ab_t) eps``; ``t`` scalar or one per batch item."""
    _check_t(t, schedule)
    if tuple(np.shape(eps)) != tuple(np.shape(z0)):
        raise ShapeError(f"eps {tuple(np.shape(eps))} does not match z0 {tuple(np.shape(z0))}")
    tt = np.asarray(t.cpu() if torch.is_tensor(t) else t)
    ab = schedule.ab(tt)
    return _bcast(np.sqrt(ab), z0) * z0 + _bcast(np.sqrt(1.0 - ab), z0) * eps
