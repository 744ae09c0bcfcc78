import numpy as np
from hypothesis import given, settings, strategies as st

from tryonlab import kernels
from tryonlab.flowwarp import fields


def _run(backend, fn, *args, **kw):
    prev = kernels.backend()
    kernels.set_backend(backend)
    try:
        return fn(*args, **kw)
    finally:
        kernels.set_backend(prev)


def _arrays(seed, H=9, W=7, C=3, scale=3.0):
    rng = np.random.default_rng(seed)
    return rng.random((H, W, C)), rng.normal(0, scale, (H, W, 2))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), scale=st.floats(0.0, 6.0))
def test_warp_backends_agree(seed, scale):
    img, flow = _arrays(seed, scale=scale)
    a = _run("numba", kernels.warp_bilinear, img, flow)
    b = _run("numpy", kernels.warp_bilinear, img, flow)
    np.testing.assert_allclose(a, b, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_lookup_backends_agree(seed):
    rng = np.random.default_rng(seed)
    field = rng.normal(size=(6, 5, 2))
    pts = rng.uniform(-3, 9, size=(40, 2))
    a = _run("numba", kernels.lookup_clamped, field, pts)
    b = _run("numpy", kernels.lookup_clamped, field, pts)
    np.testing.assert_allclose(a, b, atol=1e-12)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_tps_backends_agree(seed):
    rng = np.random.default_rng(seed)
    ctrl = rng.uniform(0, 20, size=(6, 2))
    dst = ctrl + rng.normal(0, 0.5, size=ctrl.shape)
    w, a = fields.tps_fit(ctrl, dst - ctrl)
    pts = rng.uniform(0, 20, size=(30, 2))
    e1 = _run("numba", kernels.tps_eval, pts, ctrl, w, a)
    e2 = _run("numpy", kernels.tps_eval, pts, ctrl, w, a)
    np.testing.assert_allclose(e1, e2, atol=1e-10)
    i1, r1 = _run("numba", kernels.tps_invert, pts, ctrl, w, a)
    i2, r2 = _run("numpy", kernels.tps_invert, pts, ctrl, w, a)
    np.testing.assert_allclose(i1, i2, atol=1e-8)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(3, 9))
def test_raster_backends_agree(seed, n):
    rng = np.random.default_rng(seed)
    verts = rng.uniform(-2, 14, size=(n, 2))
    a = _run("numba", kernels.raster_polygon, verts, (12, 10))
    b = _run("numpy", kernels.raster_polygon, verts, (12, 10))
    np.testing.assert_array_equal(a, b)


def test_raster_square_counts_pixel_centres():
    for backend in ("numba", "numpy"):
        m = _run(backend, kernels.raster_polygon, np.array([[1.5, 1.5], [4.5, 1.5], [4.5, 3.5], [1.5, 3.5]]), (6, 6))
        assert m.sum() == 3 * 2
        assert m[2:4, 2:5].all()


def test_zero_flow_is_exact_identity():
    img, _ = _arrays(0)
    for backend in ("numba", "numpy"):
        out = _run(backend, kernels.warp_bilinear, img, np.zeros(img.shape[:2] + (2,)))
        assert np.array_equal(out, img)
