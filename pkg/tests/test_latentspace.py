import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from tryonlab import latentspace
from tryonlab.errors import ShapeError, UsageError


def _zero(module, bias=0.0):
    for name, p in module.named_parameters():
        torch.nn.init.constant_(p, bias if name.endswith("bias") else 0.0)


def test_latent_shape():
    ae = latentspace.Autoencoder(4, 4)
    z = ae.encode(torch.rand(2, 3, 64, 48))
    assert z.shape == (2, 4, 16, 12)
    assert ae.decode(z).shape == (2, 3, 64, 48)


def test_regularized_head_channels():
    assert latentspace.Autoencoder(4, 4).head.out_channels == 8
    assert latentspace.Autoencoder(4, 4, regularized=False).head.out_channels == 4


def test_d8_works_at_128x96():
    ae = latentspace.Autoencoder(8, 4)
    x = torch.rand(1, 3, 128, 96)
    assert ae.encode(x).shape == (1, 4, 16, 12)
    assert ae.decode(ae.encode(x)).shape == x.shape


def test_indivisible_shape_raises():
    ae = latentspace.Autoencoder(4, 4)
    with pytest.raises(ShapeError):
        ae.encode(torch.rand(1, 3, 62, 48))
    with pytest.raises(ShapeError):
        ae.decode(torch.rand(1, 3, 16, 12))


def test_zero_encoder_zero_latent():
    ae = latentspace.Autoencoder()
    _zero(ae)
    assert torch.all(ae.encode(torch.zeros(1, 3, 64, 48)) == 0)


def test_zero_decoder_constant_image():
    ae = latentspace.Autoencoder()
    _zero(ae)
    torch.nn.init.constant_(ae.dec_out.bias, 0.3)
    out = ae.decode(torch.zeros(1, 4, 16, 12))
    assert torch.allclose(out, torch.sigmoid(torch.tensor(0.3)).expand_as(out))


def test_encode_deterministic():
    torch.manual_seed(0)
    ae = latentspace.Autoencoder()
    x = torch.rand(2, 3, 64, 48)
    assert torch.equal(ae.encode(x), ae.encode(x))


def test_perceptual_features_untrained_raises():
    with pytest.raises(UsageError):
        latentspace.perceptual_features(torch.rand(1, 3, 64, 48), latentspace.Autoencoder())


def test_perceptual_feature_shapes_and_lipschitz():
    torch.manual_seed(0)
    ae = latentspace.freeze(latentspace.Autoencoder())
    ae.trained.fill_(1.0)
    x = torch.rand(1, 3, 64, 48, dtype=torch.float32)
    feats = latentspace.perceptual_features(x, ae)
    assert [tuple(f.shape[-2:]) for f in feats] == [(32, 24), (16, 12), (8, 6)]
    assert all(torch.equal(a, b) for a, b in zip(feats, latentspace.perceptual_features(x, ae)))
    assert not any(f.requires_grad for f in feats)
    # finite-difference probe: the feature change scales linearly with the input step
    d = torch.randn_like(x)
    d /= d.norm()
    slopes = []
    for eps in (1e-2, 1e-3):
        moved = latentspace.perceptual_features(x + eps * d, ae)
        slopes.append(sum(float((a - b).norm()) for a, b in zip(moved, feats)) / eps)
    assert slopes[1] == pytest.approx(slopes[0], rel=0.2)


@pytest.mark.parametrize("block,expect", [
    ([[1, 1], [0, 0]], 1.0),
    ([[1, 0], [0, 0]], 0.0),
    ([[1, 1], [1, 1]], 1.0),
])
def test_downsize_mask_tie_rule(block, expect):
    out = latentspace.downsize_mask(np.array(block, dtype=np.float32), 2)
    assert out.shape == (1, 1) and out[0, 0] == expect


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_downsize_mask_idempotent_d1(seed):
    m = (np.random.default_rng(seed).random((8, 12)) > 0.5).astype(np.float32)
    once = latentspace.downsize_mask(m, 1)
    assert np.array_equal(once, m)
    assert np.array_equal(latentspace.downsize_mask(once, 1), once)


def test_downsize_mask_torch_and_shape_error():
    m = torch.ones(2, 1, 8, 12)
    assert torch.all(latentspace.downsize_mask(m, 4) == 1)
    with pytest.raises(ShapeError):
        latentspace.downsize_mask(torch.ones(1, 7, 8), 2)


def _four_images():
    from tryonlab.synthgen import make_sample
    return np.stack([make_sample(0, i)[0].T for i in range(4)])


def test_overfit_four_images():
    imgs = _four_images()
    _, hist = latentspace.train_autoencoder(imgs, steps=2000, batch_size=4, lr=2e-3, log_every=0)
    first = np.mean([h[2] for h in hist[:10]])
    last = np.mean([h[2] for h in hist[-10:]])
    assert last < 0.1 * first


def test_training_seeded_determinism_and_kl_zero():
    imgs = _four_images()
    a, ha = latentspace.train_autoencoder(imgs, steps=20, batch_size=2, log_every=0, seed=3)
    b, hb = latentspace.train_autoencoder(imgs, steps=20, batch_size=2, log_every=0, seed=3)
    assert ha == hb
    assert all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))
    _, h0 = latentspace.train_autoencoder(imgs, steps=20, batch_size=2, log_every=0, seed=3, kl_weight=0.0)
    assert all(total == recon for _, total, recon, _ in h0)
    assert float(a.trained) == 1.0
