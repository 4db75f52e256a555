import math

import numpy as np
import pytest
from _fd import fd_grad, rel_error

from snrlab.diffusion import (
    DcoConfig,
    NoisyBatch,
    OffsetNoiseConfig,
    dco_loss,
    direct_loss,
    dm_loss,
    forward_diffuse,
    importance_weighted_loss,
    per_item_squared_error,
    sample_noise,
    velocity_target,
)
from snrlab.lora import attach
from snrlab.net import NULL_ID, Architecture, Cond, init_params
from snrlab.samplers import LogitNormal, StyleFriendly


def _batch(arch, n=4, seed=0):
    rng = np.random.default_rng(seed)
    x0 = rng.uniform(-1, 1, (n,) + arch.image_shape)
    eps = rng.standard_normal(x0.shape)
    batch = NoisyBatch.build(x0, eps, lam=rng.normal(-2, 3, n))
    cond = Cond(np.array([0, 1, NULL_ID, 1][:n]), np.array([2, 0, NULL_ID, NULL_ID][:n]))
    return batch, cond


def test_forward_diffuse_values():
    x0, eps = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    assert np.array_equal(forward_diffuse(x0, eps, 0.0), x0)
    assert np.array_equal(forward_diffuse(x0, eps, 1.0), eps)
    assert np.allclose(forward_diffuse(x0, eps, 0.25), [0.75, 0.25], atol=0)
    with pytest.raises(ValueError):
        forward_diffuse(x0, eps, 1.5)
    with pytest.raises(ValueError):
        forward_diffuse(x0, np.zeros(3), 0.5)


def test_forward_diffuse_per_item_t():
    x0 = np.ones((2, 3, 2, 2))
    out = forward_diffuse(x0, np.zeros_like(x0), np.array([0.25, 0.5]))
    assert np.all(out[0] == 0.75) and np.all(out[1] == 0.5)


def test_velocity_target():
    x0 = np.array([1.0, 0.0])
    assert not velocity_target(x0, x0).any()
    assert np.array_equal(velocity_target(x0, np.array([0.0, 1.0])), [-1.0, 1.0])
    a = 2.5
    rng = np.random.default_rng(0)
    u, w = rng.standard_normal(5), rng.standard_normal(5)
    assert np.allclose(velocity_target(a * u, a * w), a * velocity_target(u, w))


def test_noise_without_offset_matches_plain_gaussian():
    a = sample_noise(np.random.default_rng(1), (4, 3, 16, 16))
    b = np.random.default_rng(1).standard_normal((4, 3, 16, 16))
    assert np.array_equal(a, b)


def test_offset_noise_channel_mean_std():
    eps = sample_noise(np.random.default_rng(2), (100_000, 3, 16, 16), 0.1)
    means = eps.mean(axis=(2, 3))
    expected = math.sqrt(1 / 256 + 0.01)
    assert abs(means.std() - expected) < 0.003
    plain = sample_noise(np.random.default_rng(2), (20_000, 3, 16, 16), 0.0).mean(axis=(2, 3))
    assert abs(plain.std() - 1 / 16) < 0.003


def test_offset_noise_deterministic_and_separate_stream():
    a = sample_noise(np.random.default_rng(3), (2, 3, 4, 4), 0.1)
    b = sample_noise(np.random.default_rng(3), (2, 3, 4, 4), 0.1)
    assert np.array_equal(a, b)
    c = sample_noise(np.random.default_rng(3), (2, 3, 4, 4), 0.1, offset_rng=np.random.default_rng(9))
    d = sample_noise(np.random.default_rng(3), (2, 3, 4, 4), 0.0)
    # the pixel noise is shared; the difference is a per-channel constant
    diff = c - d
    assert np.allclose(diff, diff[..., :1, :1])


def test_config_validation():
    with pytest.raises(ValueError):
        OffsetNoiseConfig(-0.1)
    with pytest.raises(ValueError):
        DcoConfig(0.0)
    assert DcoConfig().beta_T == 1.0


def test_batch_build_requires_one_level():
    x0 = np.zeros((2, 3, 4, 4))
    with pytest.raises(ValueError):
        NoisyBatch.build(x0, x0)
    with pytest.raises(ValueError):
        NoisyBatch.build(x0, x0, t=0.5, lam=0.0)
    b = NoisyBatch.build(x0, x0 + 1, t=0.5)
    assert np.all(b.lam == 0.0) and np.all(b.x_t == 0.5)


def test_dm_loss_zero_output_equals_target_power(tiny_params, tiny_arch):
    p = tiny_params.copy()
    p.tensors["head.weight"][:] = 0
    p.tensors["head.bias"][:] = 0
    batch, cond = _batch(tiny_arch)
    loss, _ = dm_loss(p, batch, cond)
    assert loss == pytest.approx(np.mean(batch.target_v**2), rel=1e-12)


def test_dm_loss_perfect_predictor(tiny_params, tiny_arch):
    # a net whose output is its bias alone, set to a shared target
    p = tiny_params.copy()
    p.tensors["head.weight"][:] = 0
    x0 = np.zeros((3,) + tiny_arch.image_shape)
    eps = np.broadcast_to(np.random.default_rng(4).standard_normal(tiny_arch.image_shape), x0.shape).copy()
    batch = NoisyBatch.build(x0, eps, t=np.array([0.2, 0.5, 0.7]))
    p.tensors["head.bias"][:] = batch.target_v[0].reshape(-1)
    loss, _ = dm_loss(p, batch, Cond.null(3))
    assert loss == 0.0


@pytest.mark.parametrize("wrt", ["base", "adapter"])
def test_dm_loss_gradients(tiny_params, tiny_arch, wrt):
    batch, cond = _batch(tiny_arch)
    ad = attach(tiny_params, "all", rank=2, rng=np.random.default_rng(5))
    for _, b in ad.pairs.values():
        b[:] = np.random.default_rng(6).normal(0, 0.2, b.shape)
    _, grads = dm_loss(tiny_params, batch, cond, adapter=ad, wrt=wrt)
    arrays = dict(tiny_params.tensors) if wrt == "base" else {f"{n}.lora_{s}": ad.pairs[n]["AB".index(s)]
                                                                for n in ad.targets for s in "AB"}
    assert set(grads) == set(arrays)
    for name, g in grads.items():
        num = fd_grad(lambda: dm_loss(tiny_params, batch, cond, adapter=ad)[0], arrays[name], h=1e-4)
        assert rel_error(g, num) < 1e-4, name


def test_dco_loss_gradients(tiny_params, tiny_arch):
    batch, cond = _batch(tiny_arch)
    ad = attach(tiny_params, "all", rank=2, rng=np.random.default_rng(7))
    for _, b in ad.pairs.values():
        b[:] = np.random.default_rng(8).normal(0, 0.2, b.shape)
    cfg = DcoConfig(beta_T=3.0)
    _, grads = dco_loss(tiny_params, tiny_params, batch, cond, cfg, adapter=ad, wrt="both")
    arrays = dict(tiny_params.tensors)
    arrays.update({f"{n}.lora_{s}": ad.pairs[n]["AB".index(s)] for n in ad.targets for s in "AB"})
    assert set(grads) == set(arrays)
    phi = tiny_params.copy()  # frozen reference; perturbing theta must not move it
    for name, g in grads.items():
        num = fd_grad(lambda: dco_loss(tiny_params, phi, batch, cond, cfg, adapter=ad)[0], arrays[name], h=1e-4)
        assert rel_error(g, num) < 1e-4, name


def test_dco_identical_models_give_ln2(tiny_params, tiny_arch):
    batch, cond = _batch(tiny_arch)
    loss, _ = dco_loss(tiny_params, tiny_params, batch, cond)
    assert loss == pytest.approx(math.log(2), abs=1e-12)


def test_dco_saturates_when_theta_is_much_better(tiny_params, tiny_arch):
    batch, cond = _batch(tiny_arch)
    worse = tiny_params.copy()
    worse.tensors["head.bias"] += 40.0
    loss, _ = dco_loss(tiny_params, worse, batch, cond)
    assert loss < 1e-100


def test_dco_per_item_error_is_pixel_mean(tiny_params, tiny_arch):
    batch, cond = _batch(tiny_arch)
    se = per_item_squared_error(tiny_params, batch, cond)
    loss, _ = dm_loss(tiny_params, batch, cond)
    assert se.mean() == pytest.approx(loss, rel=1e-12)


def test_importance_weighted_constant_error(monkeypatch, tiny_params):
    import snrlab.diffusion as d

    monkeypatch.setattr(d, "per_item_squared_error", lambda params, batch, cond, adapter=None: np.full(len(batch), 2.5))
    sf = StyleFriendly()
    x0 = np.zeros(tiny_params.arch.image_shape)
    est, se = importance_weighted_loss(tiny_params, x0, Cond.of(0, 0), sf, np.random.default_rng(0), 200_000,
                                       return_stderr=True)
    assert est == pytest.approx(2.5 * sf.mass(-20, 20), abs=4 * se)
    assert direct_loss(tiny_params, x0, Cond.of(0, 0), sf, np.random.default_rng(0), 100) == 2.5


def test_loss_forms_agree_on_frozen_net():
    arch = Architecture(2, 2, image_shape=(3, 8, 8), hidden_widths=(64, 64))
    p = init_params(arch, np.random.default_rng(0), np.float64)
    x0 = np.random.default_rng(1).uniform(-1, 1, arch.image_shape)
    cond = Cond.of(1, 0)
    for sampler in (LogitNormal(), StyleFriendly()):
        a, sa = direct_loss(p, x0, cond, sampler, np.random.default_rng(2), 20_000, return_stderr=True)
        b, sb = importance_weighted_loss(p, x0, cond, sampler, np.random.default_rng(3), 20_000, return_stderr=True)
        assert abs(a - b) < 3 * math.hypot(sa, sb)


def test_single_sample_estimate_reproducible(tiny_params):
    x0 = np.zeros(tiny_params.arch.image_shape)
    a = importance_weighted_loss(tiny_params, x0, Cond.of(0, 0), LogitNormal(), np.random.default_rng(4), 1)
    b = importance_weighted_loss(tiny_params, x0, Cond.of(0, 0), LogitNormal(), np.random.default_rng(4), 1)
    assert a == b
    with pytest.raises(ValueError):
        importance_weighted_loss(tiny_params, x0, Cond.of(0, 0), LogitNormal(), np.random.default_rng(4), 10, 1.0, 0.0)
