import numpy as np
import pytest

from cloudcam import layers as L
from cloudcam import tensor as T
from cloudcam.errors import BadMagicError, CheckpointShapeError, ConfigError, ShapeError, TruncatedFileError
from cloudcam.losses import LossConfig, mto_loss
from cloudcam.model import (ModelConfig, build_model, checkpoint_bytes, checkpoint_from_bytes, forward,
                            load_checkpoint, save_checkpoint)
from cloudcam.tensor import Tensor

from conftest import grad_check


def conv_params(ci, co, k):
    return co * ci * k * k + co


def test_parameter_count_hand_tally():
    # W = 32, attention (r = 8) on both skips, two heads
    tally = [
        conv_params(2, 32, 3), conv_params(32, 32, 3),          # enc1
        conv_params(32, 64, 3), conv_params(64, 64, 3),         # enc2
        conv_params(64, 128, 3), conv_params(128, 128, 3),      # bottleneck
        128 * 64 * 4 + 64,                                       # up1
        8 * 64 + 8 + 64 * 8 + 64,                                # att2
        conv_params(128, 64, 3), conv_params(64, 64, 3),        # dec2
        64 * 32 * 4 + 32,                                        # up2
        4 * 32 + 4 + 32 * 4 + 32,                                # att1
        conv_params(64, 32, 3), conv_params(32, 32, 3),         # dec1
        2 * (conv_params(64, 32, 3) + conv_params(32, 1, 1)),   # two heads
    ]
    assert sum(tally) == 504590
    assert build_model(ModelConfig(), seed=0).num_parameters() == 504590


def attention_params(c, r):
    # one shared two-layer MLP per skip
    return 2 * c * c // r + c // r + c


@pytest.mark.parametrize("width,r", [(32, 8), (16, 4), (8, 8)])
def test_attention_parameter_increment(width, r):
    on = build_model(ModelConfig(base_width=width, attention_reduction=r, use_attention=True), 0)
    off = build_model(ModelConfig(base_width=width, attention_reduction=r, use_attention=False), 0)
    assert on.num_parameters() - off.num_parameters() == attention_params(width, r) + attention_params(2 * width, r)


def test_forward_shapes_and_finiteness():
    m = build_model(ModelConfig(), 0)
    cot, cer = forward(m, np.zeros((2, 64, 64)))
    assert cot.shape == cer.shape == (1, 64, 64)
    assert np.all(np.isfinite(cot.data)) and np.all(np.isfinite(cer.data))


def test_forward_batched_matches_single(rng):
    m = build_model(ModelConfig(base_width=8, window=16), 3)
    x = rng.uniform(0, 1, (3, 2, 16, 16))
    bc, br = forward(m, x)
    for i in range(3):
        c, r = forward(m, x[i])
        np.testing.assert_allclose(bc.data[i], c.data, atol=1e-12)
        np.testing.assert_allclose(br.data[i], r.data, atol=1e-12)


def test_forward_deterministic_and_seeded(rng):
    x = rng.uniform(0, 1, (2, 16, 16))
    a = build_model(ModelConfig(base_width=8, window=16), 5)
    b = build_model(ModelConfig(base_width=8, window=16), 5)
    for name in a.params:
        assert np.array_equal(a.params[name].data, b.params[name].data)
    assert np.array_equal(forward(a, x)[0].data, forward(a, x)[0].data)
    assert np.array_equal(forward(a, x)[1].data, forward(b, x)[1].data)


def test_channel_order_matters(rng):
    m = build_model(ModelConfig(base_width=8, window=16), 1)
    x = rng.uniform(0, 1, (2, 16, 16))
    c1, _ = forward(m, x)
    c2, _ = forward(m, x[::-1].copy())
    assert not np.allclose(c1.data, c2.data)


def test_forward_rejects_wrong_shape():
    m = build_model(ModelConfig(base_width=8, window=16), 0)
    with pytest.raises(ShapeError):
        forward(m, np.zeros((3, 16, 16)))
    with pytest.raises(ShapeError):
        forward(m, np.zeros((2, 32, 32)))


@pytest.mark.parametrize("kw", [dict(window=66), dict(base_width=12, attention_reduction=8), dict(kernel=4),
                                dict(in_channels=3)])
def test_invalid_config(kw):
    with pytest.raises(ConfigError):
        build_model(ModelConfig(**kw), 0)


def hand_unet(m, x):
    """Plain UNet assembled directly from layers, independent of model.forward."""
    p = m.params

    def cr(name, t):
        return T.relu(L.conv2d(t, L.Conv2dParams(p[name + ".weight"], p[name + ".bias"], 1, 1)))

    e1 = cr("enc1.conv2", cr("enc1.conv1", x))
    e2 = cr("enc2.conv2", cr("enc2.conv1", L.maxpool2(e1)))
    b = cr("bottleneck.conv2", cr("bottleneck.conv1", L.maxpool2(e2)))
    u1 = L.transposed_conv2(b, p["up1.weight"], p["up1.bias"])
    d2 = cr("dec2.conv2", cr("dec2.conv1", T.concat([u1, e2], axis=0)))
    u2 = L.transposed_conv2(d2, p["up2.weight"], p["up2.bias"])
    d1 = cr("dec1.conv2", cr("dec1.conv1", T.concat([u2, e1], axis=0)))
    out = L.conv2d(d1, L.Conv2dParams(p["head.out.weight"], p["head.out.bias"], 1, 0))
    return out.data[0:1], out.data[1:2]


def test_plain_unet_matches_hand_assembly(rng):
    m = build_model(ModelConfig(base_width=8, window=16, use_attention=False, use_dual_heads=False), 2)
    x = rng.uniform(0, 1, (2, 16, 16))
    cot, cer = forward(m, x)
    ref_cot, ref_cer = hand_unet(m, Tensor(x))
    assert np.array_equal(cot.data, ref_cot)
    assert np.array_equal(cer.data, ref_cer)


@pytest.mark.parametrize("attention", [True, False])
def test_end_to_end_gradient(attention, rng):
    m = build_model(ModelConfig(window=16, use_attention=attention), 4)
    x = rng.uniform(0, 1, (2, 16, 16))
    tc, tr = rng.uniform(0, 3, (1, 16, 16)), rng.uniform(0, 1, (1, 16, 16))

    def loss():
        c, r = forward(m, x)
        return mto_loss(tc, c, tr, r, LossConfig(1.0, 15.0))

    err = grad_check(loss, m.parameters(), max_probe=3, rng=rng, skip_kinks=True)
    assert err <= 1e-4, err


# -- checkpoints -----------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, rng):
    m = build_model(ModelConfig(base_width=8, window=16), 7)
    path = tmp_path / "m.camc"
    save_checkpoint(m, path)
    m2 = load_checkpoint(path)
    assert m2.config == m.config
    for name, p in m.params.items():
        assert np.array_equal(m2.params[name].data, p.data.astype(np.float32).astype(np.float64))
    x = rng.uniform(0, 1, (2, 16, 16))
    for a, b in zip(forward(m, x), forward(m2, x)):
        np.testing.assert_allclose(b.data, a.data, rtol=1e-6, atol=1e-6)
    assert checkpoint_bytes(m2) == path.read_bytes()


def test_checkpoint_empty_file(tmp_path):
    path = tmp_path / "empty.camc"
    path.write_bytes(b"")
    with pytest.raises(TruncatedFileError):
        load_checkpoint(path)


def test_checkpoint_truncated_payload():
    buf = checkpoint_bytes(build_model(ModelConfig(base_width=8, window=16), 0))
    with pytest.raises(TruncatedFileError):
        checkpoint_from_bytes(buf[:-3])


def test_checkpoint_bad_magic_and_version():
    buf = checkpoint_bytes(build_model(ModelConfig(base_width=8, window=16), 0))
    with pytest.raises(BadMagicError):
        checkpoint_from_bytes(b"XXXX" + buf[4:])
    with pytest.raises(BadMagicError):
        checkpoint_from_bytes(buf[:4] + b"\x02\x00" + buf[6:])


def test_checkpoint_config_mismatch(tmp_path):
    path = tmp_path / "m.camc"
    save_checkpoint(build_model(ModelConfig(base_width=8, window=16), 0), path)
    with pytest.raises(CheckpointShapeError):
        load_checkpoint(path, expected_config=ModelConfig(base_width=16, window=16))


def test_checkpoint_shape_disagreement_with_embedded_config():
    a = build_model(ModelConfig(base_width=8, window=16), 0)
    b = build_model(ModelConfig(base_width=16, window=16), 0)
    # header of ``a`` followed by parameters of ``b``
    head_a = checkpoint_bytes(a).split(b'"window":16}', 1)[0] + b'"window":16}'
    body_b = checkpoint_bytes(b).split(b'"window":16}', 1)[1]
    with pytest.raises(CheckpointShapeError):
        checkpoint_from_bytes(head_a + body_b)
