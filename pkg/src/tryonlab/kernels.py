"""Hot numeric loops used by data generation, flow oracles and metrics.

Every kernel exists twice: an explicit-loop version compiled with numba
``@njit`` and a vectorized pure-numpy version.  The numba path is used when
numba imports and ``TRYONLAB_DISABLE_NUMBA`` is unset (or ``0``); the numpy
path is always importable and is what the numba path is tested against.

Coordinates follow the flow convention used throughout the package: pixel
``(row i, col j)`` sits at ``x = j``, ``y = i``.
"""
import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

_ENV_FLAG = "TRYONLAB_DISABLE_NUMBA"
_use_numba = numba is not None and os.environ.get(_ENV_FLAG, "0") in ("", "0")


def njit(fn):
    if numba is None:  # pragma: no cover
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


def backend():
    return "numba" if _use_numba else "numpy"


def set_backend(name):
    """Switch between ``"numba"`` and ``"numpy"`` at runtime (tests, benchmarks)."""
    global _use_numba
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and numba is None:
        raise RuntimeError("numba is not installed")
    _use_numba = name == "numba"


# --------------------------------------------------------------------------
# bilinear backward warp, zero outside the canvas


@njit
def _warp_bilinear_nb(image, flow):
    H, W, C = image.shape
    out = np.zeros((H, W, C), dtype=np.float64)
    for i in range(H):
        for j in range(W):
            x = j + flow[i, j, 0]
            y = i + flow[i, j, 1]
            x0 = np.floor(x)
            y0 = np.floor(y)
            fx = x - x0
            fy = y - y0
            ix = int(x0)
            iy = int(y0)
            for dy in range(2):
                yy = iy + dy
                if yy < 0 or yy >= H:
                    continue
                wy = fy if dy == 1 else 1.0 - fy
                if wy == 0.0:
                    continue
                for dx in range(2):
                    xx = ix + dx
                    if xx < 0 or xx >= W:
                        continue
                    wx = fx if dx == 1 else 1.0 - fx
                    if wx == 0.0:
                        continue
                    w = wx * wy
                    for c in range(C):
                        out[i, j, c] += w * image[yy, xx, c]
    return out


def _warp_bilinear_np(image, flow):
    H, W, C = image.shape
    jj, ii = np.meshgrid(np.arange(W), np.arange(H))
    x = jj + flow[..., 0]
    y = ii + flow[..., 1]
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    ix = x0.astype(np.int64)
    iy = y0.astype(np.int64)
    out = np.zeros((H, W, C), dtype=np.float64)
    for dy in (0, 1):
        wy = fy if dy else 1.0 - fy
        yy = iy + dy
        for dx in (0, 1):
            wx = fx if dx else 1.0 - fx
            xx = ix + dx
            w = wx * wy
            ok = (yy >= 0) & (yy < H) & (xx >= 0) & (xx < W) & (w != 0.0)
            vals = image[np.clip(yy, 0, H - 1), np.clip(xx, 0, W - 1)]
            out += np.where(ok[..., None], w[..., None] * vals, 0.0)
    return out


def warp_bilinear(image, flow):
    """``out[i, j] = bilinear(image, (j + dx, i + dy))``; taps off-canvas read 0.

    ``image`` is ``(H, W, C)``; ``flow`` is ``(H, W, 2)`` holding ``(dx, dy)``.
    Returns float64.
    """
    image = np.ascontiguousarray(image, dtype=np.float64)
    flow = np.ascontiguousarray(flow, dtype=np.float64)
    if _use_numba:
        return _warp_bilinear_nb(image, flow)
    return _warp_bilinear_np(image, flow)


# --------------------------------------------------------------------------
# bilinear lookup at arbitrary points with edge clamping (for flow fields)


@njit
def _lookup_clamped_nb(field, pts):
    H, W, C = field.shape
    N = pts.shape[0]
    out = np.empty((N, C), dtype=np.float64)
    for n in range(N):
        x = min(max(pts[n, 0], 0.0), W - 1.0)
        y = min(max(pts[n, 1], 0.0), H - 1.0)
        ix = min(int(np.floor(x)), W - 2) if W > 1 else 0
        iy = min(int(np.floor(y)), H - 2) if H > 1 else 0
        fx = x - ix
        fy = y - iy
        ix1 = min(ix + 1, W - 1)
        iy1 = min(iy + 1, H - 1)
        for c in range(C):
            top = (1.0 - fx) * field[iy, ix, c] + fx * field[iy, ix1, c]
            bot = (1.0 - fx) * field[iy1, ix, c] + fx * field[iy1, ix1, c]
            out[n, c] = (1.0 - fy) * top + fy * bot
    return out


def _lookup_clamped_np(field, pts):
    H, W, C = field.shape
    x = np.clip(pts[:, 0], 0.0, W - 1.0)
    y = np.clip(pts[:, 1], 0.0, H - 1.0)
    ix = np.minimum(np.floor(x).astype(np.int64), max(W - 2, 0))
    iy = np.minimum(np.floor(y).astype(np.int64), max(H - 2, 0))
    fx = (x - ix)[:, None]
    fy = (y - iy)[:, None]
    ix1 = np.minimum(ix + 1, W - 1)
    iy1 = np.minimum(iy + 1, H - 1)
    top = (1.0 - fx) * field[iy, ix] + fx * field[iy, ix1]
    bot = (1.0 - fx) * field[iy1, ix] + fx * field[iy1, ix1]
    return (1.0 - fy) * top + fy * bot


def lookup_clamped(field, pts):
    """Bilinear lookup of ``field (H, W, C)`` at ``pts (N, 2)`` = ``(x, y)``,
    clamping coordinates to the canvas."""
    field = np.ascontiguousarray(field, dtype=np.float64)
    pts = np.ascontiguousarray(pts, dtype=np.float64).reshape(-1, 2)
    if _use_numba:
        return _lookup_clamped_nb(field, pts)
    return _lookup_clamped_np(field, pts)


# --------------------------------------------------------------------------
# thin-plate spline evaluation and inversion
#
# f(p) = a[0] + a[1] * x + a[2] * y + sum_k w[k] * U(|p - c_k|),
# U(r) = r^2 log(r^2), U(0) = 0


@njit
def _tps_eval_nb(pts, ctrl, w, a):
    N = pts.shape[0]
    K = ctrl.shape[0]
    D = w.shape[1]
    out = np.empty((N, D), dtype=np.float64)
    for n in range(N):
        x = pts[n, 0]
        y = pts[n, 1]
        for d in range(D):
            out[n, d] = a[0, d] + a[1, d] * x + a[2, d] * y
        for k in range(K):
            ddx = x - ctrl[k, 0]
            ddy = y - ctrl[k, 1]
            r2 = ddx * ddx + ddy * ddy
            if r2 > 0.0:
                u = r2 * np.log(r2)
                for d in range(D):
                    out[n, d] += w[k, d] * u
    return out


def _tps_kernel(r2):
    with np.errstate(divide="ignore", invalid="ignore"):
        u = r2 * np.log(r2)
    return np.where(r2 > 0.0, u, 0.0)


def _tps_eval_np(pts, ctrl, w, a):
    r2 = ((pts[:, None, :] - ctrl[None, :, :]) ** 2).sum(-1)
    affine = a[0] + pts[:, :1] * a[1] + pts[:, 1:2] * a[2]
    return affine + _tps_kernel(r2) @ w


def tps_eval(pts, ctrl, w, a):
    """Evaluate a fitted TPS with weights ``w (K, D)`` and affine ``a (3, D)``."""
    pts = np.ascontiguousarray(pts, dtype=np.float64).reshape(-1, 2)
    ctrl = np.ascontiguousarray(ctrl, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    a = np.ascontiguousarray(a, dtype=np.float64)
    if _use_numba:
        return _tps_eval_nb(pts, ctrl, w, a)
    return _tps_eval_np(pts, ctrl, w, a)


@njit
def _tps_invert_nb(targets, ctrl, w, a, iters, tol):
    N = targets.shape[0]
    out = np.empty((N, 2), dtype=np.float64)
    resid = np.empty(N, dtype=np.float64)
    p = np.empty((1, 2), dtype=np.float64)
    for n in range(N):
        gx = targets[n, 0]
        gy = targets[n, 1]
        px = gx
        py = gy
        err = 0.0
        for _ in range(iters):
            p[0, 0] = px
            p[0, 1] = py
            d = _tps_eval_nb(p, ctrl, w, a)
            nx = gx - d[0, 0]
            ny = gy - d[0, 1]
            err = abs(nx - px) + abs(ny - py)
            px = nx
            py = ny
            if err < tol:
                break
        out[n, 0] = px - gx
        out[n, 1] = py - gy
        resid[n] = err
    return out, resid


def _tps_invert_np(targets, ctrl, w, a, iters, tol):
    p = targets.copy()
    err = np.full(len(targets), np.inf)
    active = np.ones(len(targets), dtype=bool)
    for _ in range(iters):
        if not active.any():
            break
        d = _tps_eval_np(p[active], ctrl, w, a)
        new = targets[active] - d
        err[active] = np.abs(new - p[active]).sum(-1)
        p[active] = new
        active[active] = err[active] >= tol
    return p - targets, err


def tps_invert(targets, ctrl, w, a, iters=200, tol=1e-10):
    """Solve ``x + f(x) = y`` for each target ``y`` by fixed-point iteration.

    ``f`` is the 2-D TPS displacement field.  Returns ``(x - y, residual)``
    where ``residual`` is the last iterate step size (a convergence check;
    the iteration contracts when the displacement Jacobian has norm < 1).
    """
    targets = np.ascontiguousarray(targets, dtype=np.float64).reshape(-1, 2)
    ctrl = np.ascontiguousarray(ctrl, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    a = np.ascontiguousarray(a, dtype=np.float64)
    if _use_numba:
        return _tps_invert_nb(targets, ctrl, w, a, iters, tol)
    return _tps_invert_np(targets, ctrl, w, a, iters, tol)


# --------------------------------------------------------------------------
# polygon rasterization (even-odd rule, sampled at pixel centres)


@njit
def _raster_polygon_nb(verts, H, W):
    out = np.zeros((H, W), dtype=np.uint8)
    nv = verts.shape[0]
    for i in range(H):
        y = float(i)
        for j in range(W):
            x = float(j)
            inside = False
            k = nv - 1
            for m in range(nv):
                xm = verts[m, 0]
                ym = verts[m, 1]
                xk = verts[k, 0]
                yk = verts[k, 1]
                if (ym > y) != (yk > y):
                    xc = xm + (y - ym) * (xk - xm) / (yk - ym)
                    if x < xc:
                        inside = not inside
                k = m
            if inside:
                out[i, j] = 1
    return out


def _raster_polygon_np(verts, H, W):
    jj, ii = np.meshgrid(np.arange(W, dtype=np.float64), np.arange(H, dtype=np.float64))
    inside = np.zeros((H, W), dtype=bool)
    vk = np.roll(verts, 1, axis=0)
    for (xm, ym), (xk, yk) in zip(verts, vk):
        crosses = (ym > ii) != (yk > ii)
        with np.errstate(divide="ignore", invalid="ignore"):
            xc = xm + (ii - ym) * (xk - xm) / (yk - ym)
        inside ^= crosses & (jj < xc)
    return inside.astype(np.uint8)


def raster_polygon(verts, shape):
    """Binary mask of pixels whose centre lies inside the polygon ``verts (N, 2)``."""
    H, W = shape
    verts = np.ascontiguousarray(verts, dtype=np.float64)
    if _use_numba:
        return _raster_polygon_nb(verts, H, W)
    return _raster_polygon_np(verts, H, W)
