import numpy as np
import pytest
import torch

from atklab.datagen import generate_set, stack
from atklab.diffmath import ContractError, Rng, finite_difference, grad
from atklab.diffusion import NoiseSchedule, forward_diffuse
from atklab.models import (
    TrainingError, _guard, accuracy, ddpm_eval_loss, timestep_embedding, train_ddpm, train_featurenet,
    train_vae, unet_forward,
)
from conftest import OracleVictim, double


def test_unet_shapes(tiny_victim):
    x = torch.randn(2, 3, 16, 16)
    eps, mid = unet_forward(x, 10, tiny_victim)
    assert eps.shape == x.shape
    assert mid.shape == (2, 16, 4, 4)
    assert tiny_victim.mid(x, 10).shape == mid.shape


def test_unet_named_taps(tiny_victim):
    _, feats = unet_forward(torch.randn(1, 3, 16, 16), 3, tiny_victim, taps=("mid", "up1", "up0"))
    assert set(feats) == {"mid", "up1", "up0"}
    assert feats["up0"].shape[-1] == 16


def test_mid_matches_full_forward(tiny_victim):
    x = torch.randn(2, 3, 8, 8)
    assert torch.allclose(tiny_victim.mid(x, 40), unet_forward(x, 40, tiny_victim)[1], atol=1e-6)


def test_unet_rejects_bad_shape(tiny_victim):
    with pytest.raises(ContractError):
        unet_forward(torch.randn(1, 3, 10, 10), 5, tiny_victim)
    with pytest.raises(ContractError):
        tiny_victim.eps(torch.randn(1, 2, 8, 8), 5)


def test_unet_deterministic(tiny_victim):
    x = torch.randn(2, 3, 8, 8)
    assert torch.equal(tiny_victim.eps(x, 7), tiny_victim.eps(x, 7))


def test_unet_gradient_fd_8x8(tiny_victim):
    v = double(tiny_victim)
    x = torch.randn(1, 3, 8, 8, dtype=torch.float64)
    fn = lambda z: v.eps(z, 250).sum()
    xg = x.clone().requires_grad_(True)
    analytic = grad(fn(xg), xg)
    idx = torch.randperm(x.numel(), generator=torch.Generator().manual_seed(0))[:40]
    numeric = finite_difference(fn, x, step=1e-3, coords=idx)
    a = analytic.flatten()[idx]
    rel = (a - numeric.flatten()[idx]).abs() / a.abs().clamp_min(1e-3)
    assert rel.max().item() < 1e-2


def test_frozen_weights(tiny_victim, tiny_featnet, tiny_vae):
    assert all(not p.requires_grad for p in tiny_victim.unet.parameters())
    assert all(not p.requires_grad for p in tiny_featnet.net.parameters())
    assert all(not p.requires_grad for p in tiny_vae.net.parameters())


def test_timestep_embedding_shape():
    e = timestep_embedding(torch.tensor([0, 5, 999]), 16)
    assert e.shape == (3, 16) and torch.isfinite(e).all()


def test_oracle_denoiser_has_zero_loss():
    sched = NoiseSchedule()
    x = torch.rand(4, 3, 8, 8)
    eps = torch.randn_like(x)
    t = np.array([1, 100, 500, 1000])
    x_t = forward_diffuse(2 * x - 1, t, eps, sched)
    loss = ((OracleVictim(eps, sched).eps(x_t, t) - eps) ** 2).mean()
    assert loss.item() == 0.0


def test_training_guard():
    _guard(0.5, 0, "x")
    with pytest.raises(TrainingError, match="diverged"):
        _guard(float("nan"), 3, "x")
    with pytest.raises(TrainingError):
        _guard(11.0, 3, "x")


def test_training_smoke_is_deterministic_and_nonnegative():
    xs, ys = stack(generate_set(64, seed=0, size=16))
    v1, log1 = train_ddpm(xs, 1, Rng(2), base=8, batch=16)
    v2, log2 = train_ddpm(xs, 1, Rng(2), base=8, batch=16)
    assert log1.losses == log2.losses and all(l >= 0 for l in log1.losses)
    for k, w in v1.state_dict().items():
        assert torch.equal(w, v2.state_dict()[k])
    assert ddpm_eval_loss(v1, xs[:8], Rng(3)) >= 0


def test_train_ddpm_rejects_empty():
    with pytest.raises(ContractError):
        train_ddpm(torch.zeros(0, 3, 8, 8), 1, Rng(0))


def test_vae_and_featurenet_smoke():
    xs, ys = stack(generate_set(48, seed=1, size=16))
    vae, log = train_vae(xs, 1, Rng(0), base=8, batch=16)
    assert vae.encode(xs[:2]).shape == (2, 4, 4, 4)
    assert vae.latent_shape == (4, 4, 4)
    assert vae.roundtrip(xs[:2]).shape == xs[:2].shape
    fn, flog = train_featurenet(xs, ys, 1, Rng(0), widths=(4, 6, 8), batch=16)
    assert 0.0 <= accuracy(fn, xs, ys) <= 1.0
    with pytest.raises(ContractError):
        train_featurenet(xs, ys[:3], 1, Rng(0))


def test_featurenet_taps_get_coarser(tiny_featnet):
    taps = tiny_featnet.taps(torch.rand(2, 3, 32, 32))
    assert tiny_featnet.n_taps == len(taps) >= 2
    sizes = [t.shape[-1] for t in taps]
    assert sizes == sorted(sizes, reverse=True)
    assert tiny_featnet.pooled(torch.rand(2, 3, 32, 32)).shape == (2, taps[-1].shape[1])


def test_codec_deterministic(tiny_vae):
    x = torch.rand(2, 3, 16, 16)
    assert torch.equal(tiny_vae.encode(x), tiny_vae.encode(x))
    assert torch.equal(tiny_vae.decode(tiny_vae.encode(x)), tiny_vae.decode(tiny_vae.encode(x)))
