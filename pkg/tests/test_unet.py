import numpy as np
import pytest

from miniweave import lora
from miniweave import tensor as T
from miniweave.codec import TextEncoder, Vocabulary
from miniweave.unet import CROSS, SELF, ControlError, UNetConfig, VideoUNet


@pytest.fixture(scope="module")
def net():
    return VideoUNet(UNetConfig(seed=1))


@pytest.fixture(scope="module")
def cond():
    return TextEncoder(Vocabulary(["a", "red", "square"]), seed=0).encode_prompt("a red square")


def latent(frames=3, seed=0):
    return np.random.default_rng(seed).standard_normal((frames, 48, 16, 16)).astype(np.float32)


def test_layout(net):
    assert net.cfg.resolutions == [256, 64, 64, 64, 256]
    assert net.cross_layer_names() == ["down0_xf.attn2", "down1_xf.attn2", "mid_xf.attn2", "up0_xf.attn2", "up1_xf.attn2"]
    assert set(net.layer_resolution().values()) == {256, 64}


def test_zero_init_temporal_identity(net, cond):
    z = latent()
    a, _ = net.predict_noise(z, 500, cond, temporal=True)
    b, _ = net.predict_noise(z, 500, cond, temporal=False)
    assert np.array_equal(a.data, b.data)


def test_fresh_lora_identity(cond):
    net = VideoUNet(UNetConfig(seed=2))
    z = latent(2)
    before, rec0 = net.predict_noise(z, 10, cond, record=True)
    lora.attach(net, "*.attn2.to_v", rank=4, seed=0)
    after, rec1 = net.predict_noise(z, 10, cond, record=True)
    assert np.array_equal(before.data, after.data)
    assert all(np.array_equal(rec0[k].data, rec1[k].data) for k in rec0)


def test_single_frame_st_attention_is_self_attention():
    net = VideoUNet(UNetConfig(seed=3))
    layer = net.attention_layers(SELF)[0]
    x = T.Tensor(np.random.default_rng(0).standard_normal((1, 10, 64)).astype(np.float64))
    st = layer(x).data
    plain = layer.attend(layer.to_q(x), layer.to_k(x), layer.to_v(x)).data
    np.testing.assert_allclose(st, plain, rtol=1e-10, atol=1e-12)


def test_st_attention_keys_from_first_and_former():
    net = VideoUNet(UNetConfig(seed=3))
    layer = net.attention_layers(SELF)[0]
    x = np.random.default_rng(1).standard_normal((3, 4, 64))
    out = layer(T.Tensor(x)).data
    x2 = x.copy()
    x2[1] += 1.0  # frame 2 is a key source only for frame 3
    out2 = layer(T.Tensor(x2)).data
    assert np.array_equal(out[0], out2[0])
    assert not np.allclose(out[2], out2[2])


def test_record_contents_and_rows_sum_to_one(net, cond):
    _, rec = net.predict_noise(latent(2), 100, cond, record=True)
    assert len([k for k in rec if k.endswith("attn2")]) == 5 and len([k for k in rec if k.endswith("attn1")]) == 5
    for name, p in rec.items():
        assert np.allclose(p.data.sum(-1), 1.0, atol=1e-5)
        if name.endswith("attn2"):
            assert p.shape[2:] == (net.layer_resolution()[name], 16)
        else:
            assert p.shape[-1] == 2 * p.shape[-2]


def test_record_off_keeps_nothing(net, cond):
    _, rec = net.predict_noise(latent(1), 100, cond)
    assert rec is None and net.ctx.store == {}


def test_shape_mismatch(net, cond):
    with pytest.raises(T.DimensionError):
        net.predict_noise(np.zeros((2, 47, 16, 16)), 0, cond)


def test_inject_attention(net, cond):
    z = latent(1)
    base, rec = net.predict_noise(z, 300, cond, record=True)
    name = "mid_xf.attn2"
    net.inject_attention(name, rec[name].data)
    same, _ = net.predict_noise(z, 300, cond)
    assert np.array_equal(base.data, same.data)
    uniform = np.full(rec[name].shape, 1.0 / 16, dtype=np.float32)
    net.inject_attention(name, uniform)
    changed, rec2 = net.predict_noise(z, 300, cond, record=True)
    assert np.array_equal(rec2[name].data, uniform) and not np.array_equal(changed.data, base.data)
    assert net.ctx.overrides == {}


def test_inject_errors(net, cond):
    with pytest.raises(ControlError):
        net.inject_attention("nope.attn2", np.zeros(1))
    net.inject_attention("mid_xf.attn2", np.zeros((1, 1)))
    with pytest.raises(ControlError):
        net.predict_noise(latent(1), 0, cond)


def test_deterministic(net, cond):
    z = latent(2, seed=4)
    assert np.array_equal(net.predict_noise(z, 7, cond)[0].data, net.predict_noise(z, 7, cond)[0].data)


def test_temporal_modules_mix_frames_once_trained(cond):
    net = VideoUNet(UNetConfig(seed=5))
    rng = np.random.default_rng(0)
    for name, p in net.named_parameters():
        if name.endswith(("tconv1.up", "temporal.to_out.weight")):
            p.data = (0.05 * rng.standard_normal(p.shape)).astype(np.float32)
    z = latent(3)
    a, _ = net.predict_noise(z, 100, cond, temporal=True)
    b, _ = net.predict_noise(z, 100, cond, temporal=False)
    assert not np.allclose(a.data, b.data)
