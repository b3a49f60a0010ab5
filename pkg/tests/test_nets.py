import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from decoupled_swarm import nets
from decoupled_swarm import tensor as T
from decoupled_swarm.nets import AdaptationField, GaussianDiag, NetConfig
from decoupled_swarm.tensor import ShapeError, Tensor

CFG = NetConfig()
SMALL = NetConfig(latent_dim=3, base_channels=2, depth=1, height=8, width=8, encoder_channels=2, da_channels=3)


@pytest.fixture(scope="module")
def params():
    rng = np.random.default_rng(0)
    return {
        "seg": nets.init_seg(CFG, rng),
        "prior": nets.init_prior(CFG, rng),
        "post": nets.init_posterior(CFG, rng),
        "da": nets.init_da(CFG, rng, "distribution"),
    }


def _image(seed=1, cfg=CFG):
    return Tensor(np.random.default_rng(seed).normal(size=(1, cfg.height, cfg.width)))


def test_config_rejects_indivisible_size():
    with pytest.raises(ValueError, match="divisible"):
        NetConfig(height=20, depth=3)


def test_seg_outputs_simplex(params):
    probs = nets.forward_seg(params["seg"], _image(), Tensor(np.ones(CFG.latent_dim)))
    assert probs.shape == (2, 32, 32)
    np.testing.assert_allclose(probs.data.sum(axis=0), 1.0, atol=1e-9)


def test_seg_zero_head_gives_uniform(params):
    seg = params["seg"].copy()
    seg["head.w"] = np.zeros(seg["head.w"].shape)
    seg["head.b"] = np.zeros(seg["head.b"].shape)
    probs = nets.forward_seg(seg, _image(), Tensor(np.zeros(CFG.latent_dim)))
    np.testing.assert_array_equal(probs.data, 0.5)


def test_seg_is_deterministic(params):
    z = Tensor(np.random.default_rng(3).normal(size=CFG.latent_dim))
    a = nets.forward_seg(params["seg"], _image(), z).data
    b = nets.forward_seg(params["seg"], _image(), z).data
    assert a.tobytes() == b.tobytes()


def test_seg_batched_matches_single(params):
    rng = np.random.default_rng(4)
    imgs = rng.normal(size=(3, 1, 32, 32))
    zs = rng.normal(size=(3, CFG.latent_dim))
    batched = nets.forward_seg(params["seg"], Tensor(imgs), Tensor(zs)).data
    for i in range(3):
        one = nets.forward_seg(params["seg"], Tensor(imgs[i]), Tensor(zs[i])).data
        np.testing.assert_allclose(batched[i], one, atol=1e-12)


def test_seg_shape_errors(params):
    with pytest.raises(ShapeError):
        nets.forward_seg(params["seg"], Tensor(np.zeros((1, 30, 32))), Tensor(np.zeros(CFG.latent_dim)))
    with pytest.raises(ShapeError):
        nets.forward_seg(params["seg"], _image(), Tensor(np.zeros(CFG.latent_dim + 1)))


def test_prior_zero_heads_is_standard_normal(params):
    psi = params["prior"].copy()
    for n in ("mu.w", "mu.b", "log_sigma.w", "log_sigma.b"):
        psi[n] = np.zeros(psi[n].shape)
    g = nets.forward_prior(psi, _image())
    np.testing.assert_array_equal(g.mu.data, 0.0)
    np.testing.assert_array_equal(g.sigma, 1.0)
    assert g.dim == CFG.latent_dim


def test_prior_separates_images(params):
    a = nets.forward_prior(params["prior"], _image(1)).mu.data
    b = nets.forward_prior(params["prior"], _image(2)).mu.data
    assert not np.allclose(a, b)


def test_posterior_sees_the_label(params):
    lab = np.zeros((32, 32), dtype=np.uint8)
    lab[8:20, 8:20] = 1
    flipped = 1 - lab
    oh = lambda l: Tensor(np.stack([l == 0, l == 1]).astype(float))
    a = nets.forward_posterior(params["post"], _image(), oh(lab))
    b = nets.forward_posterior(params["post"], _image(), oh(flipped))
    assert a.mu.shape == (CFG.latent_dim,)
    assert not np.allclose(a.mu.data, b.mu.data)


def test_posterior_zero_heads_is_standard_normal(params):
    phi = params["post"].copy()
    for n in ("mu.w", "mu.b", "log_sigma.w", "log_sigma.b"):
        phi[n] = np.zeros(phi[n].shape)
    g = nets.forward_posterior(phi, _image(), Tensor(np.ones((2, 32, 32)) / 2))
    np.testing.assert_array_equal(g.mu.data, 0.0)
    np.testing.assert_array_equal(g.log_sigma.data, 0.0)


def test_sample_latent_cases():
    mu = Tensor(np.array([0.5, -1.0]))
    ls = Tensor(np.array([0.3, -0.2]))
    np.testing.assert_array_equal(nets.sample_latent(GaussianDiag(mu, ls), np.zeros(2)).data, mu.data)
    e = np.array([1.3, -0.7])
    np.testing.assert_array_equal(nets.sample_latent(GaussianDiag(Tensor(np.zeros(2)), Tensor(np.zeros(2))), e).data, e)
    with pytest.raises(ShapeError):
        nets.sample_latent(GaussianDiag(mu, ls), np.zeros(3))


def test_sample_latent_gradients():
    rng = np.random.default_rng(5)
    eps = rng.normal(size=4)
    f = lambda m, s: T.sum(nets.sample_latent(GaussianDiag(m, s), eps))
    assert T.grad_check(f, [Tensor(rng.normal(size=4)), Tensor(rng.normal(size=4))]) < 1e-4
    m, s = Tensor(np.zeros(4), requires_grad=True), Tensor(rng.normal(size=4), requires_grad=True)
    T.backward(f(m, s))
    np.testing.assert_allclose(m.grad, 1.0)
    np.testing.assert_allclose(s.grad, eps * np.exp(s.data))


@pytest.mark.parametrize("mode", nets.DA_MODES)
def test_da_field_is_column_stochastic(mode):
    rng = np.random.default_rng(6)
    theta = nets.init_da(CFG, rng, mode)
    cond = Tensor(rng.normal(size=(nets.da_input_channels(CFG, mode) or 1, 32, 32)))
    field = nets.forward_da(theta, cond, mode)
    assert field.w.shape == (2, 2, 32, 32)
    field.check(1e-6)
    assert field.pixels == 32 * 32


def test_da_fixed_ignores_conditioning():
    theta = nets.init_da(CFG, np.random.default_rng(7), "fixed")
    a = nets.forward_da(theta, Tensor(np.zeros((8, 32, 32))), "fixed").w.data
    b = nets.forward_da(theta, Tensor(np.ones((8, 32, 32))), "fixed").w.data
    assert a.tobytes() == b.tobytes()


def test_da_rejects_wrong_conditioning(params):
    with pytest.raises(ShapeError):
        nets.forward_da(params["da"], _image(), "distribution")
    with pytest.raises(ValueError):
        nets.forward_da(params["da"], _image(), "other")


def _swap_field(h, w):
    swap = np.array([[0.0, 1.0], [1.0, 0.0]])
    return AdaptationField(Tensor(np.broadcast_to(swap[:, :, None, None], (2, 2, h, w)).copy()))


def test_identity_adaptation_is_fixed_point():
    probs = T.channel_softmax(Tensor(np.random.default_rng(8).normal(size=(2, 4, 4))))
    out = nets.apply_adaptation(AdaptationField.identity(2, 4, 4), probs)
    np.testing.assert_array_equal(out.data, probs.data)


def test_swap_adaptation_permutes():
    probs = np.zeros((2, 1, 1))
    probs[:, 0, 0] = [0.9, 0.1]
    out = nets.apply_adaptation(_swap_field(1, 1), Tensor(probs)).data
    np.testing.assert_allclose(out[:, 0, 0], [0.1, 0.9])


def _random_field(rng, c, h, w):
    raw = rng.uniform(0.01, 1.0, size=(c, c, h, w))
    return raw / raw.sum(axis=0, keepdims=True)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(2, 4))
def test_apply_adaptation_matches_pixel_loop(seed, c):
    rng = np.random.default_rng(seed)
    w = _random_field(rng, c, 4, 4)
    p = rng.uniform(0.01, 1.0, size=(c, 4, 4))
    p /= p.sum(axis=0)
    got = nets.apply_adaptation(AdaptationField(Tensor(w)), Tensor(p)).data
    ref = np.zeros_like(p)
    for y in range(4):
        for x in range(4):
            ref[:, y, x] = w[:, :, y, x] @ p[:, y, x]
    np.testing.assert_allclose(got, ref, atol=1e-12, rtol=0)
    np.testing.assert_allclose(got.sum(axis=0), 1.0, atol=1e-9)


def test_apply_adaptation_shape_error():
    with pytest.raises(ShapeError):
        nets.apply_adaptation(AdaptationField.identity(2, 4, 4), Tensor(np.ones((2, 4, 5)) / 2))


def test_end_to_end_gradients_on_small_instance():
    rng = np.random.default_rng(9)
    seg = nets.init_seg(SMALL, rng)
    da = nets.init_da(SMALL, rng, "distribution")
    image = rng.normal(size=(1, 8, 8))
    z = rng.normal(size=SMALL.latent_dim)
    weights = rng.normal(size=(2, 8, 8))
    head, da_last = seg["head.w"].data, da["conv4.w"].data
    enc = seg["enc0.0.w"].data

    def f(head_w, da_w, enc_w, zz):
        s = seg.copy()
        s["head.w"], s["enc0.0.w"] = head_w, enc_w
        d = da.copy()
        d["conv4.w"] = da_w
        probs = nets.forward_seg(s, image, zz)
        field = nets.forward_da(d, nets.broadcast_latent(zz, 8, 8), "distribution")
        return T.sum(nets.apply_adaptation(field, probs) * weights)

    err = T.grad_check(f, [Tensor(head), Tensor(da_last), Tensor(enc), Tensor(z)])
    assert err < 1e-4


def test_checkpoint_round_trip(tmp_path, params):
    nets.save_params(params["da"], tmp_path / "da.pset")
    back = nets.load_params(tmp_path / "da.pset")
    assert back.schema() == params["da"].schema()
    assert back.to_bytes() == params["da"].to_bytes()
