import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from tryonlab.errors import NumericalError, ShapeError, ValidationError
from tryonlab.flowwarp import fields, losses, networks, torchops, training


# --------------------------------------------------------------------------
# numpy field ops


def test_apply_flow_zero_is_exact():
    img = np.random.default_rng(0).random((8, 6, 3))
    assert np.array_equal(fields.apply_flow(img, np.zeros((8, 6, 2))), img)


def test_apply_flow_integer_shift():
    img = np.arange(24, dtype=float).reshape(4, 6)
    flow = np.zeros((4, 6, 2))
    flow[..., 0] = 1.0
    out = fields.apply_flow(img, flow)
    np.testing.assert_array_equal(out[:, :-1], img[:, 1:])
    np.testing.assert_array_equal(out[:, -1], 0.0)


def test_apply_flow_ramp_midpoint():
    img = np.array([[0.0, 2.0]])
    flow = np.zeros((1, 2, 2))
    flow[..., 0] = 0.5
    assert fields.apply_flow(img, flow)[0, 0] == 1.0


def test_apply_flow_shape_mismatch():
    with pytest.raises(ShapeError):
        fields.apply_flow(np.zeros((4, 4)), np.zeros((4, 5, 2)))


def test_compose_zero_and_constants():
    z = np.zeros((5, 7, 2))
    assert np.array_equal(fields.compose_flows(z, z), z)
    a = np.broadcast_to([1.5, -0.25], (5, 7, 2)).copy()
    b = np.broadcast_to([-0.5, 2.0], (5, 7, 2)).copy()
    np.testing.assert_allclose(fields.compose_flows(a, b), a + b, atol=1e-6)


@settings(max_examples=20, deadline=None)
@given(a=st.tuples(st.floats(-3, 3), st.floats(-3, 3)), b=st.tuples(st.floats(-3, 3), st.floats(-3, 3)))
def test_compose_constants_property(a, b):
    fa = np.broadcast_to(a, (6, 5, 2)).copy()
    fb = np.broadcast_to(b, (6, 5, 2)).copy()
    np.testing.assert_allclose(fields.compose_flows(fa, fb), fa + fb, atol=1e-6)


def test_tps_identity_and_translation():
    src = np.array([[2.0, 3.0], [10.0, 4.0], [6.0, 12.0], [1.0, 9.0]])
    assert np.all(fields.tps_flow(src, src, (16, 12)) == 0)
    flow = fields.tps_flow(src, src + [3.0, 0.0], (16, 12))
    np.testing.assert_allclose(flow, np.broadcast_to([3.0, 0.0], flow.shape), atol=1e-9)


def _solve_by_elimination(A, b):
    # Gaussian elimination with partial pivoting, written out as the oracle
    A = A.astype(float).copy()
    b = b.astype(float).copy()
    n = len(A)
    for k in range(n):
        p = k + np.argmax(np.abs(A[k:, k]))
        A[[k, p]], b[[k, p]] = A[[p, k]], b[[p, k]]
        for i in range(k + 1, n):
            f = A[i, k] / A[k, k]
            A[i, k:] -= f * A[k, k:]
            b[i] -= f * b[k]
    x = np.zeros_like(b)
    for i in reversed(range(n)):
        x[i] = (b[i] - A[i, i + 1:] @ x[i + 1:]) / A[i, i]
    return x


def test_tps_four_corners_against_hand_solve():
    H, W = 9, 7
    src = np.array([[0.0, 0.0], [6.0, 0.0], [0.0, 8.0], [6.0, 8.0]])
    dst = src.copy()
    dst[3, 0] += 2.0
    flow = fields.tps_flow(src, dst, (H, W))
    np.testing.assert_allclose(flow[8, 6], [2.0, 0.0], atol=1e-9)
    # independent evaluation: U(r) = r^2 log r^2, system [[K, P], [P^T, 0]]
    def U(r2):
        return np.where(r2 > 0, r2 * np.log(np.where(r2 > 0, r2, 1.0)), 0.0)
    K = U(((src[:, None] - src[None]) ** 2).sum(-1))
    P = np.hstack([np.ones((4, 1)), src])
    L = np.block([[K, P], [P.T, np.zeros((3, 3))]])
    rhs = np.vstack([dst - src, np.zeros((3, 2))])
    sol = _solve_by_elimination(L, rhs)
    w, a = sol[:4], sol[4:]
    for (y, x) in [(4, 3), (2, 5), (7, 1)]:
        pt = np.array([x, y], dtype=float)
        expect = a[0] + pt @ a[1:] + U(((pt - src) ** 2).sum(-1)) @ w
        np.testing.assert_allclose(flow[y, x], expect, atol=1e-9)


def test_tps_collinear_raises():
    src = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]])
    with pytest.raises(NumericalError):
        fields.tps_flow(src, src, (4, 4))


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_tps_interpolates_controls(seed):
    rng = np.random.default_rng(seed)
    src = rng.integers(0, 12, size=(5, 2)).astype(float)
    if np.linalg.matrix_rank(np.hstack([np.ones((5, 1)), src])) < 3 or len(np.unique(src, axis=0)) < 5:
        return
    dst = src + rng.normal(0, 1.0, size=src.shape)
    flow = fields.tps_flow(src, dst, (12, 12))
    for (x, y), d in zip(src.astype(int), dst - src):
        np.testing.assert_allclose(flow[y, x], d, atol=1e-6)


# --------------------------------------------------------------------------
# torch ops


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_torch_warp_matches_numpy(seed):
    rng = np.random.default_rng(seed)
    img = rng.random((6, 5, 3))
    flow = rng.normal(0, 2.0, (6, 5, 2))
    ref = fields.apply_flow(img, flow)
    out = torchops.warp(torchops.to_nchw(img[None], torch.float64), torchops.to_nchw(flow[None], torch.float64))
    np.testing.assert_allclose(torchops.to_nhwc(out)[0], ref, atol=1e-12)


def test_torch_warp_zero_flow_exact():
    img = torch.rand(2, 3, 8, 6)
    assert torch.equal(torchops.warp(img, torch.zeros(2, 2, 8, 6)), img)


def test_torch_border_matches_grid_sample():
    g = torch.Generator().manual_seed(0)
    img = torch.rand(1, 2, 7, 5, generator=g, dtype=torch.float64)
    flow = torch.randn(1, 2, 7, 5, generator=g, dtype=torch.float64) * 3
    H, W = 7, 5
    ys, xs = torch.meshgrid(torch.arange(H, dtype=torch.float64), torch.arange(W, dtype=torch.float64),
                            indexing="ij")
    gx = (xs + flow[0, 0]) / (W - 1) * 2 - 1
    gy = (ys + flow[0, 1]) / (H - 1) * 2 - 1
    ref = torch.nn.functional.grid_sample(img, torch.stack([gx, gy], -1)[None], mode="bilinear",
                                          padding_mode="border", align_corners=True)
    torch.testing.assert_close(torchops.warp(img, flow, "border"), ref, atol=1e-12, rtol=0)


def test_torch_warp_gradcheck():
    g = torch.Generator().manual_seed(1)
    img = torch.rand(1, 2, 5, 4, generator=g, dtype=torch.float64, requires_grad=True)
    flow = (torch.rand(1, 2, 5, 4, generator=g, dtype=torch.float64) * 2.6 - 1.3 + 0.37).requires_grad_()
    assert torch.autograd.gradcheck(lambda i, f: torchops.warp(i, f), (img, flow))


def test_torch_compose_constants():
    a = torch.zeros(1, 2, 6, 5)
    a[:, 0], a[:, 1] = 0.75, -1.25
    b = torch.zeros(1, 2, 6, 5)
    b[:, 0], b[:, 1] = -0.5, 0.5
    torch.testing.assert_close(torchops.compose(a, b), a + b, atol=1e-6, rtol=0)


def test_upsample_flow_doubles():
    f = torch.ones(1, 2, 3, 4)
    up = torchops.upsample_flow(f)
    assert up.shape == (1, 2, 6, 8)
    assert torch.all(up == 2.0)


# --------------------------------------------------------------------------
# networks


def test_fpn_level_shapes():
    fpn = networks.FPN(4)
    feats = fpn(torch.zeros(1, 4, 64, 48))
    assert [tuple(f.shape[-2:]) for f in feats] == [(64, 48), (32, 24), (16, 12), (8, 6), (4, 3)]


def test_fpn_zero_params_zero_features():
    fpn = networks.FPN(4)
    for p in fpn.parameters():
        torch.nn.init.zeros_(p)
    feats = fpn(torch.rand(1, 4, 64, 48))
    assert all(torch.all(f == 0) for f in feats)


def test_fpn_channel_mismatch():
    with pytest.raises((ShapeError, RuntimeError)):
        networks.FPN(4)(torch.zeros(1, 3, 64, 48))


def test_fpn_deterministic():
    torch.manual_seed(0)
    a = networks.FPN(3)
    torch.manual_seed(0)
    b = networks.FPN(3)
    x = torch.rand(1, 3, 64, 48)
    assert all(torch.equal(u, v) for u, v in zip(a(x), b(x)))


class _ConstBlock(torch.nn.Module):
    def __init__(self, value):
        super().__init__()
        self.value = value

    def forward(self, feat, cond):
        out = torch.zeros(feat.shape[0], 2, *feat.shape[-2:])
        out[:, 0] = self.value
        return out


def _pyramid():
    return [torch.zeros(1, 1, 64 >> i, 48 >> i) for i in range(5)]


def test_cascade_all_zero():
    blocks = [_ConstBlock(0.0) for _ in range(5)]
    flow, _ = networks.cascade_estimate(_pyramid(), _pyramid(), blocks)
    assert torch.all(flow == 0)


@pytest.mark.parametrize("level", range(5))
def test_cascade_scaling_rule(level):
    blocks = [_ConstBlock(1.0 if i == level else 0.0) for i in range(5)]
    flow, _ = networks.cascade_estimate(_pyramid(), _pyramid(), blocks)
    assert flow.shape == (1, 2, 64, 48)
    assert torch.allclose(flow[:, 0], torch.full((1, 64, 48), float(2**level)))
    assert torch.all(flow[:, 1] == 0)


def test_cascade_missing_condition():
    blocks = [_ConstBlock(0.0) for _ in range(5)]
    conds = _pyramid()
    conds[2] = None
    with pytest.raises(ValidationError):
        networks.cascade_estimate(_pyramid(), conds, blocks)


def test_untrained_warp_net_returns_garment():
    net = networks.WarpNetwork()
    C, m_cp = torch.rand(2, 3, 64, 48), (torch.rand(2, 1, 64, 48) > 0.5).float()
    person = torch.rand(2, 10, 64, 48)
    flow, c_w, m_w = networks.warp_network_forward(person, networks.clothes_stack(C, m_cp), net)
    assert torch.all(flow == 0)
    assert torch.equal(c_w, C) and torch.equal(m_w, m_cp)
    again = networks.warp_network_forward(person, networks.clothes_stack(C, m_cp), net)
    assert torch.equal(again[1], c_w)


def test_take_off_cases():
    img = torch.rand(1, 3, 4, 6)
    assert torch.equal(networks.take_off(img, torch.ones(1, 1, 4, 6)), img)
    assert torch.all(networks.take_off(img, torch.zeros(1, 1, 4, 6)) == 0)
    half = torch.zeros(1, 1, 4, 6)
    half[..., :3] = 1
    out = networks.take_off(img, half)
    assert torch.equal(out[..., :3], img[..., :3]) and torch.all(out[..., 3:] == 0)
    with pytest.raises(ShapeError):
        networks.take_off(img, torch.ones(1, 1, 4, 5))


def test_untrained_flatten_net_identity():
    net = networks.FlattenNetwork()
    parsed = torch.rand(1, 3, 64, 48)
    flow, c_hat = networks.flatten_network_forward(parsed, torch.ones(1, 1, 64, 48), net)
    assert torch.all(flow == 0) and torch.equal(c_hat, parsed)


def test_build_roundtrip_arch():
    net = networks.FlattenNetwork(widths=(8, 8, 8, 8, 8), feat_channels=8, hidden=8)
    assert networks.build(net.arch).arch == net.arch
    with pytest.raises(ValidationError):
        networks.build({"kind": "nope"})


# --------------------------------------------------------------------------
# losses


def test_losses_vanish_on_identity():
    img = torch.rand(1, 3, 5, 6)
    comps = losses.flow_loss_components(img, img, torch.zeros(1, 2, 5, 6))
    assert all(float(c) == 0 for c in comps)


@settings(max_examples=20, deadline=None)
@given(coef=st.lists(st.floats(-2, 2), min_size=6, max_size=6))
def test_affine_flow_sec_vanishes(coef):
    ys, xs = torch.meshgrid(torch.arange(7.0, dtype=torch.float64), torch.arange(9.0, dtype=torch.float64),
                            indexing="ij")
    a = coef
    flow = torch.stack([a[0] + a[1] * xs + a[2] * ys, a[3] + a[4] * xs + a[5] * ys])[None]
    assert float(losses.second_order_smoothness(flow)) <= 1e-10


@settings(max_examples=20, deadline=None)
@given(c=st.tuples(st.floats(-5, 5), st.floats(-5, 5)))
def test_constant_flow_tv_vanishes(c):
    flow = torch.tensor(c, dtype=torch.float64).view(1, 2, 1, 1).expand(1, 2, 6, 4)
    assert float(losses.total_variation(flow)) == 0.0


def test_step_flow_hand_values():
    flow = torch.tensor([0.0, 0.0, 1.0, 1.0], dtype=torch.float64).view(1, 1, 1, 4)
    assert float(losses.total_variation(flow)) == pytest.approx(1 / 3, abs=1e-15)
    assert float(losses.second_order_smoothness(flow)) == 1.0


def test_loss_shape_mismatch():
    with pytest.raises(ShapeError):
        losses.flow_loss_components(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 5), torch.zeros(1, 2, 4, 4))


@pytest.mark.parametrize("fn,comps,expect", [
    (losses.aggregate_flat_loss, (0, 0, 0, 0), 0.0),
    (losses.aggregate_flat_loss, (1, 1, 1, 1), 11.11),
    (losses.aggregate_flat_loss, (0.5, 0.2, 0.01, 2.0), 0.64),
    (losses.aggregate_warp_loss, (0, 0, 0, 0), 0.0),
    (losses.aggregate_warp_loss, (1, 1, 1, 1), 7.21),
    (losses.aggregate_warp_loss, (0.3, 0.5, 2.0, 0.01), 0.48),
])
def test_aggregate_values(fn, comps, expect):
    assert fn(comps) == pytest.approx(expect, abs=1e-12)


# --------------------------------------------------------------------------
# training


def test_lr_factor_schedule():
    assert training.lr_factor(0, 100, 0.3) == 1.0
    assert training.lr_factor(29, 100, 0.3) == 1.0
    assert training.lr_factor(65, 100, 0.3) == pytest.approx(0.5)
    assert training.lr_factor(100, 100, 0.3) == 0.0


def test_unknown_role():
    with pytest.raises(ValidationError):
        training.build_network("dress")


@pytest.mark.parametrize("role,lr,hold", [("warp", 1.5e-3, 0.3), ("flatten", 2e-3, 1.0)])
def test_single_sample_overfit(role, lr, hold):
    from tryonlab.synthgen import SAMPLE_FIELDS, make_sample
    s, _, _ = make_sample(0, 3)
    arrays = {f: getattr(s, f)[None] for f in SAMPLE_FIELDS if f != "sample_id"}
    # image term only: the regularizers are 0 at the zero-flow start and have a
    # nonzero floor at any flow that fits, so the full objective cannot drop 10x
    net, hist = training.train_flow_network(arrays, role, steps=200, batch_size=1, lr=lr,
                                            weights=(0.0, 0.0, 0.0), hold_frac=hold, log_every=0)
    assert hist["steps"] == 200
    assert hist["step_loss"][-1] < 0.1 * hist["step_loss"][0]


def test_grid_units():
    f = torch.zeros(1, 2, 5, 9)
    f[:, 0] = 4.0  # half the width in x
    f[:, 1] = -2.0  # half the height in y
    g = torchops.to_grid_units(f)
    assert torch.allclose(g[:, 0], torch.ones(1, 5, 9)) and torch.allclose(g[:, 1], -torch.ones(1, 5, 9))
