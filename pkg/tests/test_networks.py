import numpy as np
import pytest

from bwseg import gradcheck
from bwseg import tensor as T
from bwseg.networks import (Generator, LatentGaussian, SegUNet, UNetConfig, decode_checkpoint, encode_checkpoint,
                            load_checkpoint, sample_z, save_checkpoint)
from bwseg.tensor import ShapeError, Tensor


@pytest.fixture(scope="module")
def gen():
    return Generator(UNetConfig(), latent_dim=16, image_shape=(64, 64), rng=np.random.default_rng(0))


@pytest.fixture
def image():
    return np.random.default_rng(1).random((1, 1, 64, 64))


def test_config_validation():
    for bad in (dict(depth=0), dict(base_width=3), dict(n_classes=1), dict(dropout=1.0), dict(dropout=-0.1)):
        with pytest.raises(ValueError):
            UNetConfig(**bad)
    with pytest.raises(ShapeError):
        UNetConfig(depth=2).check_input(np.zeros((1, 1, 6, 8)))


def test_e1_shapes_and_purity(gen, image):
    q1, q2 = gen.encode_e1(image), gen.encode_e1(image.copy())
    assert q1.dim == 16 and q1.mean.shape == (1, 16)
    assert np.array_equal(q1.mean.data, q2.mean.data) and np.array_equal(q1.logvar.data, q2.logvar.data)
    assert np.all(q1.variance > 0)


def test_d1_shape_and_purity(gen):
    z = Tensor(np.random.default_rng(2).standard_normal((1, 16)))
    r1, r2 = gen.decode_d1(z, (64, 64)), gen.decode_d1(z, (64, 64))
    assert r1.shape == (1, 1, 64, 64) and np.array_equal(r1.data, r2.data)


def test_d2_is_simplex_with_c_channels(gen, image):
    rng = np.random.default_rng(3)
    feats = gen.encode_e2(image)
    probs = gen.decode_d2(feats, Tensor(rng.standard_normal((1, 16)))).data
    assert probs.shape == (1, 4, 64, 64)
    assert probs.min() >= 0 and np.max(np.abs(probs.sum(axis=1) - 1)) < 1e-9


def test_d2_depends_on_z():
    g = Generator(UNetConfig(base_width=4), latent_dim=4, image_shape=(16, 16), rng=np.random.default_rng(4))
    gradcheck._jitter_params(g, np.random.default_rng(5))
    x = np.random.default_rng(6).random((1, 1, 16, 16))
    feats = g.encode_e2(x)
    a = g.decode_d2(feats, Tensor(np.zeros((1, 4)))).data
    b = g.decode_d2(feats, Tensor(np.ones((1, 4)))).data
    assert np.mean(np.abs(a - b)) > 0


def test_sample_z_examples():
    q = LatentGaussian(Tensor([[0.0, 0.0]]), Tensor([[0.0, 0.0]]))
    np.testing.assert_array_equal(sample_z(q, eps=np.array([[1.0, -1.0]])).data, [[1.0, -1.0]])
    q = LatentGaussian(Tensor([[0.7, -2.0]]), Tensor([[-1e9, -1e9]]))
    # logvar clamps at -20, leaving sigma = e^-10
    z = sample_z(q, eps=np.array([[3.0, -3.0]])).data
    np.testing.assert_allclose(z, [[0.7 + 3 * np.exp(-10), -2.0 - 3 * np.exp(-10)]], rtol=1e-12)
    np.testing.assert_allclose(z, [[0.7, -2.0]], atol=2e-4)
    with pytest.raises(ShapeError):
        sample_z(q, eps=np.zeros((1, 3)))


def test_sample_z_monte_carlo_mean():
    n = 100_000
    mu, lv = np.array([0.5, -1.0, 2.0]), np.array([0.0, 1.0, -2.0])
    q = LatentGaussian(Tensor(np.tile(mu, (n, 1))), Tensor(np.tile(lv, (n, 1))))
    z = sample_z(q, np.random.default_rng(7)).data
    sigma = np.exp(lv / 2)
    assert np.all(np.abs(z.mean(axis=0) - mu) < 3 * sigma / np.sqrt(n))


def test_sample_z_prior_ignores_posterior():
    q = LatentGaussian(Tensor([[5.0]]), Tensor([[3.0]]))
    assert sample_z(q, eps=np.array([[0.25]]), prior=True).data[0, 0] == 0.25


def test_untrained_segnet_is_uniform(image):
    net = SegUNet(UNetConfig(), rng=np.random.default_rng(8))
    np.testing.assert_array_equal(net(image).data, 0.25)


def test_segnet_dropout_semantics(image):
    net = SegUNet(UNetConfig(dropout=0.0), rng=np.random.default_rng(9))
    gradcheck._jitter_params(net, np.random.default_rng(10))
    np.testing.assert_array_equal(net(image, True, np.random.default_rng(0)).data, net(image).data)

    net = SegUNet(UNetConfig(dropout=0.3), rng=np.random.default_rng(9))
    gradcheck._jitter_params(net, np.random.default_rng(10))
    a = net(image, True, np.random.default_rng(11)).data
    b = net(image, True, np.random.default_rng(11)).data
    c = net(image, True, np.random.default_rng(12)).data
    assert np.array_equal(a, b) and not np.array_equal(a, c)
    assert np.max(np.abs(a.sum(axis=1) - 1)) < 1e-9
    with pytest.raises(ValueError):
        net(image, True, None)


def test_gradients_through_all_networks():
    # generator (e1, d1, e2, d2) and the backbone on 1-2 x 8x8 inputs
    for i in range(3):
        assert gradcheck.case_stage1(np.random.default_rng([101, i])) < 1e-4
        assert gradcheck.case_segnet(np.random.default_rng([102, i])) < 1e-4


def test_checkpoint_roundtrip_is_bit_exact(tmp_path, gen):
    path = tmp_path / "g.ckpt"
    save_checkpoint(path, gen)
    state = load_checkpoint(path)
    assert list(state) == list(gen.params)
    for k, v in gen.state_dict().items():
        assert np.array_equal(state[k], v) and state[k].dtype == np.float64
    again = Generator.from_state(state)
    assert again.image_shape == (64, 64) and again.latent_dim == 16
    assert encode_checkpoint(again.state_dict()) == path.read_bytes()


def test_segnet_from_state_infers_architecture():
    net = SegUNet(UNetConfig(n_classes=3, base_width=6, depth=3), rng=np.random.default_rng(0))
    back = SegUNet.from_state(decode_checkpoint(encode_checkpoint(net.state_dict())), dropout=0.2)
    assert back.cfg == UNetConfig(n_classes=3, base_width=6, depth=3, dropout=0.2)


def test_checkpoint_corruption_detected(gen):
    blob = encode_checkpoint(gen.state_dict())
    with pytest.raises(ValueError, match="magic"):
        decode_checkpoint(b"XXXXXXXX" + blob[8:])
    flipped = bytearray(blob)
    flipped[100] ^= 1
    with pytest.raises(ValueError, match="CRC"):
        decode_checkpoint(bytes(flipped))
    with pytest.raises(ValueError):
        decode_checkpoint(blob[:50])


def test_float32_networks():
    net = SegUNet(UNetConfig(), rng=np.random.default_rng(0), dtype=np.float32)
    out = net(np.zeros((1, 1, 8, 8)))
    assert out.dtype == np.float32


def test_load_state_rejects_mismatch(gen):
    net = SegUNet(UNetConfig())
    with pytest.raises(ValueError):
        net.load_state_dict(gen.state_dict())


def test_kl_dominated_training_pulls_posterior_to_prior():
    from bwseg import losses as L
    from bwseg.pipeline import Adam

    rng = np.random.default_rng(13)
    g = Generator(UNetConfig(base_width=4), latent_dim=4, image_shape=(16, 16), rng=rng)
    x = rng.random((4, 1, 16, 16))
    # start far from the prior
    g.params["e1_mu_b"].data = np.full(4, 2.0)
    g.params["e1_logvar_b"].data = np.full(4, -2.0)
    opt = Adam(g.parameters(), lr=0.02)
    for _ in range(300):
        g.zero_grad()
        with T.Tape() as tape:
            T.backward(tape, L.kl_loss(g.encode_e1(x)))
        opt.step()
    q = g.encode_e1(x)
    assert np.max(np.abs(q.mean.data)) < 0.1
    assert np.max(np.abs(q.variance - 1)) < 0.1
