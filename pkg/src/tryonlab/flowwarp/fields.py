"""Dense flow fields on numpy arrays.

A flow is an ``(H, W, 2)`` array of pixel displacements ``(dx, dy)``.  Warps
are backward: ``apply_flow(img, f)[y, x] = img(x + dx, y + dy)``.
"""
import numpy as np

from .. import kernels
from ..errors import NumericalError, ShapeError


def check_flow(flow, shape=None):
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[-1] != 2:
        raise ShapeError(f"flow must be (H, W, 2), got {flow.shape}")
    if shape is not None and tuple(flow.shape[:2]) != tuple(shape[:2]):
        raise ShapeError(f"flow resolution {flow.shape[:2]} != image {tuple(shape[:2])}")
    if not np.all(np.isfinite(flow)):
        raise NumericalError("flow has non-finite entries")
    return flow


def identity_grid(shape):
    H, W = shape
    jj, ii = np.meshgrid(np.arange(W, dtype=np.float64), np.arange(H, dtype=np.float64))
    return np.stack([jj, ii], axis=-1)


def apply_flow(image, flow):
    """Backward bilinear warp; samples falling off the canvas read 0.

    Accepts ``(H, W)`` or ``(H, W, C)`` images and keeps the input dtype.
    A zero flow returns the input bit-exactly.
    """
    image = np.asarray(image)
    flow = check_flow(flow, image.shape)
    squeeze = image.ndim == 2
    img3 = image[..., None] if squeeze else image
    out = kernels.warp_bilinear(img3, flow)
    if squeeze:
        out = out[..., 0]
    dtype = image.dtype if np.issubdtype(image.dtype, np.floating) else np.float64
    return out.astype(dtype, copy=False)


def compose_flows(f, g):
    """Flow equivalent to warping by ``f`` and then by ``g``.

    ``(f (+) g)(x) = g(x) + f(x + g(x))`` with bilinear lookup of ``f``
    clamped to the canvas edge.
    """
    f = check_flow(f)
    g = check_flow(g, f.shape)
    H, W, _ = f.shape
    pts = (identity_grid((H, W)) + g).reshape(-1, 2)
    return g + kernels.lookup_clamped(f, pts).reshape(H, W, 2)


# --------------------------------------------------------------------------
# thin-plate splines


def _tps_U(r2):
    with np.errstate(divide="ignore", invalid="ignore"):
        u = r2 * np.log(r2)
    return np.where(r2 > 0.0, u, 0.0)


def tps_fit(src, values):
    """Solve the TPS system interpolating ``values (K, D)`` at ``src (K, 2)``.

    Returns ``(w, a)`` for :func:`tryonlab.kernels.tps_eval`.
    """
    src = np.asarray(src, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    K = len(src)
    if src.shape != (K, 2) or values.shape[0] != K:
        raise ShapeError("control points and values must have matching length")
    if K < 3:
        raise NumericalError("TPS needs at least 3 control points")
    P = np.hstack([np.ones((K, 1)), src])
    if np.linalg.matrix_rank(P) < 3:
        raise NumericalError("TPS control points are collinear; system is singular")
    r2 = ((src[:, None] - src[None]) ** 2).sum(-1)
    L = np.zeros((K + 3, K + 3))
    L[:K, :K] = _tps_U(r2)
    L[:K, K:] = P
    L[K:, :K] = P.T
    rhs = np.zeros((K + 3, values.shape[1]))
    rhs[:K] = values
    try:
        sol = np.linalg.solve(L, rhs)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"singular TPS system: {exc}") from exc
    return sol[:K], sol[K:]


def tps_flow(src_points, dst_points, resolution):
    """Dense flow whose value at each ``src`` point is ``dst - src``.

    The TPS interpolant reproduces affine maps exactly and otherwise
    minimizes bending energy.
    """
    src = np.asarray(src_points, dtype=np.float64)
    dst = np.asarray(dst_points, dtype=np.float64)
    if src.shape != dst.shape:
        raise ShapeError(f"src {src.shape} and dst {dst.shape} differ")
    w, a = tps_fit(src, dst - src)
    H, W = resolution
    grid = identity_grid((H, W)).reshape(-1, 2)
    return kernels.tps_eval(grid, src, w, a).reshape(H, W, 2)


def tps_inverse_flow(src_points, dst_points, resolution, iters=200, tol=1e-10):
    """Dense inverse of :func:`tps_flow`: ``g(y)`` with ``y + g(y) = x`` where
    ``x + f(x) = y``.  Raises when the fixed-point solve does not converge."""
    src = np.asarray(src_points, dtype=np.float64)
    dst = np.asarray(dst_points, dtype=np.float64)
    w, a = tps_fit(src, dst - src)
    H, W = resolution
    grid = identity_grid((H, W)).reshape(-1, 2)
    inv, resid = kernels.tps_invert(grid, src, w, a, iters, tol)
    if not np.all(np.isfinite(inv)) or resid.max() > 1e-6:
        raise NumericalError(f"TPS inversion did not converge (residual {resid.max():.3g})")
    return inv.reshape(H, W, 2)


def jacobian_min_det(flow):
    """Smallest Jacobian determinant of ``x -> x + flow(x)`` (central differences)."""
    flow = check_flow(flow)
    dfx_dy, dfx_dx = np.gradient(flow[..., 0])
    dfy_dy, dfy_dx = np.gradient(flow[..., 1])
    det = (1.0 + dfx_dx) * (1.0 + dfy_dy) - dfx_dy * dfy_dx
    return float(det.min())
