"""Per-pair conditioning tensors shared by training and sampling."""
import numpy as np
import torch

from ..flowwarp.networks import clothes_stack, person_stack
from ..flowwarp.torchops import to_nchw, warp
from ..latentspace import downsize_mask


@torch.no_grad()
def warp_garment(warp_net, P_a, m, pose_map, C, m_cp):
    """Warped garment and its binarized mask from the warping network."""
    flow, _ = warp_net(person_stack(P_a, m, pose_map), clothes_stack(C, m_cp))
    c_w = warp(C, flow)
    m_w = (warp(m_cp, flow) >= 0.5).to(C.dtype)
    return c_w, m_w


def prewarped_tryon(c_w, m_w, P_a, m):
    """Warped garment pasted onto the agnostic person inside the try-on region."""
    paste = m_w * m
    return paste * c_w + (1.0 - paste) * P_a


@torch.no_grad()
def prepare_pairs(arrays, person_idx, garment_idx, ae, warp_net, batch_size=64):
    """Tensors for (person, garment) pairs.

    Keys: C, m_cp, P_a, m, C_w, m_w, T_w (pre-warped try-on), z_prior = E(C_w),
    local = E(T_w), m_r, and for paired rows (person == garment) T, m_C, z_main.
    ``m_C_est = m_w & m`` stands in for the clothes mask when no ground truth exists.
    """
    person_idx = np.asarray(person_idx)
    garment_idx = np.asarray(garment_idx)
    paired = bool(np.all(person_idx == garment_idx))
    out = {}
    for k in range(0, len(person_idx), batch_size):
        pi, gi = person_idx[k:k + batch_size], garment_idx[k:k + batch_size]
        g = lambda name, idx: to_nchw(arrays[name][idx])
        C, m_cp = g("C", gi), g("m_cp", gi)
        P_a, m, pose = g("P_a", pi), g("m", pi), g("pose_map", pi)
        c_w, m_w = warp_garment(warp_net, P_a, m, pose, C, m_cp)
        t_w = prewarped_tryon(c_w, m_w, P_a, m)
        part = dict(C=C, m_cp=m_cp, P_a=P_a, m=m, C_w=c_w, m_w=m_w, T_w=t_w,
                    m_C_est=m_w * m, z_prior=ae.encode(c_w), local=ae.encode(t_w),
                    m_r=downsize_mask(m, ae.d))
        if paired:
            T = g("T", pi)
            part.update(T=T, m_C=g("m_C", pi), z_main=ae.encode(T))
        for key, val in part.items():
            out.setdefault(key, []).append(val)
    return {key: torch.cat(v) for key, v in out.items()}
