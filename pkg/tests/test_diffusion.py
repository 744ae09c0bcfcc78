import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from tryonlab.diffusion import losses
from tryonlab.diffusion.freeu import FreeUFactors
from tryonlab.diffusion.schedule import forward_diffuse, make_schedule
from tryonlab.diffusion.training import (DiffusionTrainConfig, moving_average, train_diffusion,
                                         trainable_parameters, warmup_lr)
from tryonlab.diffusion.unet import GarmentTokenizer, UNet, build_denoising_input, global_encode
from tryonlab.errors import DependencyError, ParameterRangeError, ShapeError, ValidationError
from tryonlab.flowwarp.networks import FlattenNetwork
from tryonlab.synthgen import GarmentSpec, gen_garment


# --------------------------------------------------------------------------
# schedule and forward process


def test_constant_hook_closed_form():
    s = make_schedule("constant", 3, beta=0.1)
    assert abs(s.alpha_bar[3] - 0.729) <= 1e-12
    assert s.alpha_bar[0] == 1.0


@pytest.mark.parametrize("kind", ["linear", "cosine"])
@pytest.mark.parametrize("T", [200, 1000])
def test_alpha_bar_strictly_decreasing(kind, T):
    ab = make_schedule(kind, T).alpha_bar
    assert ab[0] == 1.0 and len(ab) == T + 1
    assert np.all(np.diff(ab) < 0)


def test_linear_betas_interpolate():
    s = make_schedule("linear", 1000)
    assert s.beta[0] == pytest.approx(1e-4, abs=1e-18)
    assert s.beta[-1] == pytest.approx(0.02, abs=1e-18)
    for k in (1, 137, 500, 998):
        # independent recomputation: beta_s = b1 + (s - 1) (bT - b1) / (T - 1), s = k + 1
        assert s.beta[k] == pytest.approx(1e-4 + k * (0.02 - 1e-4) / 999, rel=1e-12)


def test_schedule_errors():
    with pytest.raises(ParameterRangeError):
        make_schedule("sigmoid", 10)
    with pytest.raises(ParameterRangeError):
        make_schedule("linear", 0)
    with pytest.raises(ParameterRangeError):
        make_schedule("constant", 3, beta=1.5)


def test_forward_diffuse_substitution():
    s = make_schedule("constant", 2, beta=0.5)  # alpha_bar_2 = 0.25
    assert float(forward_diffuse(2.0, 2, 1.0, s)) == pytest.approx(1.8660254, abs=1e-7)
    z0 = torch.randn(3, 4, 2, 2)
    s200 = make_schedule()
    out = forward_diffuse(z0, 57, torch.zeros_like(z0), s200)
    torch.testing.assert_close(out, np.sqrt(s200.alpha_bar[57]) * z0)


def test_forward_diffuse_per_item_t_and_errors():
    s = make_schedule()
    z0 = torch.randn(2, 4, 3, 3)
    eps = torch.randn_like(z0)
    t = torch.tensor([1, 200])
    out = forward_diffuse(z0, t, eps, s)
    for i in range(2):
        ab = s.alpha_bar[int(t[i])]
        torch.testing.assert_close(out[i], np.sqrt(ab) * z0[i] + np.sqrt(1 - ab) * eps[i])
    with pytest.raises(ParameterRangeError):
        forward_diffuse(z0, 0, eps, s)
    with pytest.raises(ParameterRangeError):
        forward_diffuse(z0, 201, eps, s)
    with pytest.raises(ShapeError):
        forward_diffuse(z0, 5, eps[:1], s)


# --------------------------------------------------------------------------
# denoising input, tokenizer, unet


def _latents(B=2, c=4, h=16, w=12, seed=0):
    g = torch.Generator().manual_seed(seed)
    return (torch.randn(B, c, h, w, generator=g), torch.randn(B, c, h, w, generator=g),
            (torch.rand(B, 1, h, w, generator=g) > 0.5).float())


def test_denoising_input_layout():
    z, local, m_r = _latents()
    x = build_denoising_input(z, local, m_r, "main", 5)
    assert x.shape[1] == 9
    assert torch.equal(x[:, :4], z) and torch.equal(x[:, 4:8], local) and torch.equal(x[:, 8:], m_r)
    zp = torch.randn_like(z)
    xp = build_denoising_input(zp, local, m_r, "prior", 5)
    assert torch.equal(x[:, 4:], xp[:, 4:])
    assert not torch.equal(x[:, :4], xp[:, :4])


def test_denoising_input_errors():
    z, local, m_r = _latents()
    with pytest.raises(ShapeError):
        build_denoising_input(z, local[:, :3], m_r)
    with pytest.raises(ValidationError):
        build_denoising_input(z, local, m_r, "side")


def _garment(color):
    img, _ = gen_garment(GarmentSpec("solid", color), 0)
    return torch.as_tensor(img).permute(2, 0, 1)[None]


def test_tokenizer_null_deterministic_and_color_sensitive():
    torch.manual_seed(0)
    tok = GarmentTokenizer()
    C = torch.cat([_garment((0.8, 0.2, 0.2)), _garment((0.2, 0.2, 0.8))])
    assert torch.equal(global_encode(C, tok, True), global_encode(C, tok, True))
    a = global_encode(C, tok)
    assert torch.equal(a, global_encode(C, tok))
    assert a.shape == (2, 12, 64)
    assert float((a[0] - a[1]).detach().norm()) > 0
    mixed = tok(C, torch.tensor([True, False]))
    assert torch.equal(mixed[0], tok.null) and torch.equal(mixed[1], a[1])


def test_tokenizer_backbone_is_frozen_and_seeded():
    a, b = GarmentTokenizer(), GarmentTokenizer()
    for p, q in zip(a.backbone.parameters(), b.backbone.parameters()):
        assert torch.equal(p, q) and not p.requires_grad
    names = {id(p) for p in trainable_parameters(UNet(), a)}
    assert not any(id(p) in names for p in a.backbone.parameters())


@pytest.fixture(scope="module")
def unet():
    torch.manual_seed(0)
    net = UNet()
    return net.eval()


def test_unet_shape_freeu_identity_and_time(unet):
    z, local, m_r = _latents()
    x = build_denoising_input(z, local, m_r)
    tokens = torch.randn(2, 12, 64)
    with torch.no_grad():
        plain = unet(x, torch.tensor([5, 5]), tokens)
        unit = unet(x, torch.tensor([5, 5]), tokens, FreeUFactors(1.0, 1.0, 1.0, 1.0))
        other = unet(x, torch.tensor([200, 200]), tokens)
        freeu = unet(x, torch.tensor([5, 5]), tokens, FreeUFactors())
    assert plain.shape == (2, 4, 16, 12)
    assert torch.equal(plain, unit)
    assert float((plain - other).norm()) > 0
    assert float((plain - freeu).norm()) > 0


def test_unet_input_checks(unet):
    with pytest.raises(ShapeError):
        unet(torch.zeros(1, 8, 16, 12), 1, torch.zeros(1, 12, 64))
    with pytest.raises(ShapeError):
        unet(torch.zeros(1, 9, 14, 12), 1, torch.zeros(1, 12, 64))


# --------------------------------------------------------------------------
# losses


def test_dual_branch_oracle_and_offset():
    z0 = torch.randn(2, 4, 3, 3)
    assert float(losses.dual_branch_loss(z0, z0, z0)) == 0.0
    assert float(losses.dual_branch_loss(z0, z0 + 1.0, z0)) == pytest.approx(0.5, abs=1e-7)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_dual_branch_brute_force_and_symmetry(seed):
    rng = np.random.default_rng(seed)
    a, b, z = (rng.normal(size=(2, 2, 2, 3)) for _ in range(3))
    total = 0.0
    for x in (a, b):
        sq = 0.0
        for v, w in zip(x.ravel(), z.ravel()):
            sq += (v - w) ** 2
        total += sq / z.size
    got = losses.dual_branch_loss(*(torch.as_tensor(v) for v in (a, b, z)))
    swapped = losses.dual_branch_loss(*(torch.as_tensor(v) for v in (b, a, z)))
    assert float(got) == pytest.approx(total / 2, rel=1e-12)
    assert float(got) == float(swapped)


def test_dual_branch_shape_error():
    with pytest.raises(ShapeError):
        losses.dual_branch_loss(torch.zeros(1, 4, 2, 2), torch.zeros(1, 4, 2, 3), torch.zeros(1, 4, 2, 2))


def test_consistency_loss_values():
    flat = FlattenNetwork()  # zero-initialized flow heads: flattening is the identity
    C = torch.rand(2, 3, 64, 48)
    m_C = torch.ones(2, 1, 64, 48)
    m_cp = torch.zeros(2, 1, 64, 48)
    m_cp[..., 10:50, 8:40] = 1
    ident = lambda z: z
    with torch.no_grad():
        assert float(losses.consistency_loss(C, ident, flat, m_C, C, m_cp)) == 0.0
        shifted = C + 0.1 * m_cp
        assert float(losses.consistency_loss(shifted, ident, flat, m_C, C, m_cp)) == pytest.approx(0.1, abs=1e-6)
    with pytest.raises(DependencyError):
        losses.consistency_loss(C, ident, None, m_C, C, m_cp)


def test_tryon_loss_arithmetic():
    assert losses.tryon_loss(torch.tensor(0.0), torch.tensor(0.0)) == 0.0
    assert float(losses.tryon_loss(torch.tensor(0.5), torch.tensor(0.2))) == pytest.approx(0.53)
    l = torch.tensor(0.5)
    assert losses.tryon_loss(l, torch.tensor(0.2), 0.0) is l


def test_lambda_zero_step_gradients_match_pure_diffusion():
    torch.manual_seed(0)
    unet = UNet(channels=(8, 16), time_dim=16, token_dim=8, heads=2)
    z, local, m_r = _latents(B=1)
    x = build_denoising_input(z, local, m_r)
    tokens = torch.randn(1, 12, 8)
    t = torch.tensor([3])

    def grads(lam):
        unet.zero_grad()
        pred = unet(x, t, tokens)
        l_diff = losses.dual_branch_loss(pred, None, z)
        l_cons = pred.abs().mean()
        losses.tryon_loss(l_diff, l_cons, lam).backward() if lam is not None else l_diff.backward()
        return [p.grad.clone() for p in unet.parameters()]

    for a, b in zip(grads(0.0), grads(None)):
        assert torch.equal(a, b)


# --------------------------------------------------------------------------
# training helpers


def test_warmup_lr():
    cfg = DiffusionTrainConfig(lr=1e-3, warmup_steps=100, warmup_start=1e-6)
    assert warmup_lr(0, cfg) == 1e-6
    assert warmup_lr(50, cfg) == pytest.approx(1e-6 + 0.5 * (1e-3 - 1e-6))
    assert warmup_lr(100, cfg) == 1e-3 and warmup_lr(10_000, cfg) == 1e-3


def test_moving_average():
    np.testing.assert_allclose(moving_average(np.arange(6.0), 3), [1, 2, 3, 4])


def test_train_diffusion_dependencies():
    s = make_schedule()
    with pytest.raises(DependencyError):
        train_diffusion({}, s, None, None, DiffusionTrainConfig())
    with pytest.raises(DependencyError):
        train_diffusion({}, s, object(), None, DiffusionTrainConfig(cons_loss=True))
