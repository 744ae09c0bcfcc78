"""Image-quality metrics and paired / unpaired evaluation reports."""
import csv
import hashlib
import json
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import correlate1d

from . import io
from .errors import ShapeError, ValidationError

SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K = (0.01, 0.03)
FRECHET_EPS = 1e-6

CSV_COLUMNS = ("sample_id", "garment_id", "ssim", "masked_l1", "consistency")
OMITTED = {
    "lpips": "omitted: needs pretrained perceptual weights",
    "kid": "omitted: the Frechet proxy covers distribution distance",
    "fid": "replaced by frechet_proxy on the autoencoder's own encoder features",
}


def gaussian_window(size=SSIM_WIN, sigma=SSIM_SIGMA):
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img, g):
    """Separable 'valid' correlation over the two spatial axes."""
    half = len(g) // 2
    out = correlate1d(img, g, axis=0, mode="constant")
    out = correlate1d(out, g, axis=1, mode="constant")
    H, W = img.shape[:2]
    return out[half:H - half, half:W - half]


def ssim_map(x, y, data_range=1.0):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"ssim inputs differ: {x.shape} vs {y.shape}")
    if x.shape[0] < SSIM_WIN or x.shape[1] < SSIM_WIN:
        raise ShapeError(f"images must be at least {SSIM_WIN}x{SSIM_WIN}")
    g = gaussian_window()
    c1 = (SSIM_K[0] * data_range) ** 2
    c2 = (SSIM_K[1] * data_range) ** 2
    # moments of data shifted by its first pixel: better conditioned, and exact
    # (zero variance, mean equal to the value) on constant images
    sx, sy = x[:1, :1], y[:1, :1]
    dx, dy = x - sx, y - sy
    fx, fy = _filter_valid(dx, g), _filter_valid(dy, g)
    mx, my = sx + fx, sy + fy
    sxx = _filter_valid(dx * dx, g) - fx * fx
    syy = _filter_valid(dy * dy, g) - fy * fy
    sxy = _filter_valid(dx * dy, g) - fx * fy
    lum = (2 * mx * my + c1) / (mx * mx + my * my + c1)
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    return lum * cs


def ssim(x, y, data_range=1.0):
    """Mean SSIM (Gaussian 11x11 window, sigma 1.5) over the valid region and
    all channels of ``(H, W)`` or ``(H, W, C)`` images."""
    m = ssim_map(x, y, data_range)
    ref = m.flat[0]
    # shifted mean: exact on constant maps, where a plain mean can drift by an ulp
    return float(ref + (m - ref).mean())


def masked_l1(x, y, mask):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if x.shape != y.shape:
        raise ShapeError(f"masked_l1 inputs differ: {x.shape} vs {y.shape}")
    if mask.shape != x.shape[:mask.ndim]:
        raise ShapeError(f"mask {mask.shape} does not match image {x.shape}")
    if not mask.any():
        raise ValidationError("masked_l1 needs a non-empty mask")
    return float(np.abs(x - y)[mask].mean())


def _sqrtm_psd_product(a, b):
    """Trace of ``(a b)^{1/2}`` through the symmetric form ``a^{1/2} b a^{1/2}``."""
    wa, va = np.linalg.eigh(a)
    ra = (va * np.sqrt(np.clip(wa, 0, None))) @ va.T
    m = ra @ b @ ra
    w = np.linalg.eigvalsh((m + m.T) / 2)
    return float(np.sqrt(np.clip(w, 0, None)).sum())


def gaussian_frechet(mu_a, cov_a, mu_b, cov_b):
    mu_a, mu_b = np.atleast_1d(mu_a), np.atleast_1d(mu_b)
    cov_a, cov_b = np.atleast_2d(cov_a), np.atleast_2d(cov_b)
    d = mu_a - mu_b
    val = float(d @ d + np.trace(cov_a) + np.trace(cov_b) - 2 * _sqrtm_psd_product(cov_a, cov_b))
    return max(val, 0.0)


def frechet_proxy(feats_a, feats_b, eps=FRECHET_EPS):
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    a = a.reshape(len(a), -1)
    b = b.reshape(len(b), -1)
    if len(a) < 2 or len(b) < 2:
        raise ValidationError("frechet_proxy needs at least 2 samples per set")
    if a.shape[1] != b.shape[1]:
        raise ShapeError("feature sets differ in dimension")
    reg = eps * np.eye(a.shape[1])
    cov_a = np.cov(a, rowvar=False).reshape(a.shape[1], a.shape[1]) + reg
    cov_b = np.cov(b, rowvar=False).reshape(b.shape[1], b.shape[1]) + reg
    return gaussian_frechet(a.mean(0), cov_a, b.mean(0), cov_b)


@torch.no_grad()
def pooled_features(images, ae, batch_size=64):
    """Global-average-pooled perceptual taps, concatenated (``N x D``)."""
    from .latentspace import perceptual_features
    t = torch.as_tensor(np.asarray(images, dtype=np.float32)).permute(0, 3, 1, 2)
    out = []
    for k in range(0, len(t), batch_size):
        feats = perceptual_features(t[k:k + batch_size], ae)
        out.append(torch.cat([f.mean(dim=(2, 3)) for f in feats], dim=1))
    return torch.cat(out).double().numpy()


@torch.no_grad()
def flat_consistency(try_on, m_C, flatten_net, C, m_cp):
    """Per-sample masked L1 over ``m_cp`` between the flattened worn garment
    and the flat garment.  Inputs are ``(B, *, H, W)`` tensors."""
    from .diffusion.losses import flatten_generated
    if flatten_net is None:
        from .errors import DependencyError
        raise DependencyError("flat consistency needs the flattening network (run `train-flatten`)")
    c_hat = flatten_generated(try_on, m_C, m_cp, flatten_net)
    m = m_cp.expand_as(c_hat)
    return (((c_hat - C).abs() * m).sum(dim=(1, 2, 3)) / m.sum(dim=(1, 2, 3)).clamp_min(1.0)).numpy()


def fingerprint(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def build_report(setting, rows, frechet, config_fp):
    """``rows``: dicts with sample_id, garment_id, consistency and (paired) ssim, masked_l1."""
    if setting not in ("paired", "unpaired"):
        raise ValidationError(f"unknown setting {setting!r}")
    agg = {"mean_consistency": float(np.mean([r["consistency"] for r in rows])),
           "frechet_proxy": float(frechet)}
    if setting == "paired":
        agg["mean_ssim"] = float(np.mean([r["ssim"] for r in rows]))
        agg["mean_masked_l1"] = float(np.mean([r["masked_l1"] for r in rows]))
    else:
        rows = [{k: v for k, v in r.items() if k not in ("ssim", "masked_l1")} for r in rows]
    return {"setting": setting, "rows": rows, "aggregates": agg,
            "config_fingerprint": config_fp, "omitted_metrics": OMITTED}


def write_report(report, out_dir, stem=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = stem or f"report_{report['setting']}"
    io.write_json(out / f"{stem}.json", report)
    with open(out / f"{stem}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in report["rows"]:
            w.writerow([r.get(c, "") if not isinstance(r.get(c), float) else f"{r[c]:.8f}"
                        for c in CSV_COLUMNS])
    return out / f"{stem}.json"


def score_pairs(pred, cond, gt=None, flatten_net=None, ids=None, garment_ids=None):
    """Per-row metrics for predicted try-on images ``pred (B, 3, H, W)``.

    With ground truth ``gt`` (paired) SSIM is taken against ``T`` and masked
    L1 over the clothes mask ``m_C``; consistency always uses the flattening
    network with the true clothes mask when known, else the estimated one.
    """
    m_C = cond["m_C"] if "m_C" in cond else cond["m_C_est"]
    cons = flat_consistency(pred, m_C, flatten_net, cond["C"], cond["m_cp"])
    p = pred.permute(0, 2, 3, 1).double().numpy()
    rows = []
    for k in range(p.shape[0]):
        row = {"sample_id": ids[k] if ids else str(k),
               "garment_id": garment_ids[k] if garment_ids else (ids[k] if ids else str(k)),
               "consistency": float(cons[k])}
        if gt is not None:
            g = gt[k].permute(1, 2, 0).double().numpy()
            row["ssim"] = ssim(p[k], g)
            row["masked_l1"] = masked_l1(p[k], g, m_C[k, 0].numpy() > 0.5)
        rows.append(row)
    return rows
