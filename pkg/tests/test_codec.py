import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from zippo.codec import Codec, CodecConfig, replicate_matte, train_codec
from zippo.synth import SynthConfig, generate
from zippo.tensor import ShapeError
from zippo.trainer import TrainConfig, train

SMALL = CodecConfig(latent_channels=4, factor=4, base_width=8)


@pytest.fixture(scope="module")
def tiny_images():
    im, _, _, _ = generate(SynthConfig(count=24, resolution=16, background="mixed", seed=3))
    return im


def test_replicate_matte():
    m = np.zeros((4, 5))
    m[1, 2] = 0.5
    img = replicate_matte(m)
    assert img.shape == (4, 5, 3)
    assert np.all(img[1, 2] == 0.5)
    assert not replicate_matte(np.zeros((3, 3))).any()
    r = np.random.default_rng(0).random((6, 6))
    img = replicate_matte(r)
    assert np.array_equal(img[..., 0], img[..., 1]) and np.array_equal(img[..., 1], img[..., 2])


def test_identity_mode_round_trips_exactly():
    codec = Codec(CodecConfig.identity())
    rng = np.random.default_rng(1)
    x = rng.integers(0, 256, size=(8, 8, 3)).astype(np.float32) / 255
    assert np.array_equal(codec.encode(x), x.transpose(2, 0, 1))
    assert np.array_equal(codec.decode(codec.encode(x)), x)
    m = rng.integers(0, 256, size=(8, 8)).astype(np.float32) / 255
    assert np.array_equal(codec.decode_matte(codec.encode_matte(m)), m)


def test_trained_mode_shapes_and_determinism():
    codec = Codec(CodecConfig(), seed=0)
    x = np.random.default_rng(2).random((32, 32, 3)).astype(np.float32)
    z = codec.encode(x)
    assert z.shape == (4, 8, 8)
    assert np.array_equal(z, codec.encode(x.copy()))
    assert codec.decode(z).shape == (32, 32, 3)
    assert codec.decode_matte(z).shape == (32, 32)


def test_dimension_errors():
    codec = Codec(SMALL)
    with pytest.raises(ShapeError):
        codec.encode(np.zeros((30, 32, 3)))
    with pytest.raises(ShapeError):
        codec.encode(np.zeros((32, 32)))
    with pytest.raises(ShapeError):
        codec.decode(np.zeros((3, 8, 8)))
    with pytest.raises(ValueError):
        CodecConfig(factor=3)
    with pytest.raises(ValueError):
        CodecConfig(latent_channels=4, factor=1, mode="pixel-identity")


@settings(max_examples=20, deadline=None)
@given(z=arrays(np.float32, (2, 4, 2, 2), elements=st.floats(-50, 50, width=32)))
def test_decode_is_clamped(z):
    codec = Codec(SMALL, seed=1)
    out = codec.decode_batch(z)
    assert out.shape == (2, 8, 8, 3)
    assert out.min() >= 0.0 and out.max() <= 1.0
    m = codec.decode_mattes(z)
    assert m.min() >= 0.0 and m.max() <= 1.0


def test_decode_matte_averages_channels():
    codec = Codec(CodecConfig.identity())
    z = np.stack([np.full((4, 4), 0.2), np.full((4, 4), 0.4), np.full((4, 4), 0.9)]).astype(np.float32)
    assert np.allclose(codec.decode_matte(z), 0.5)


def test_zero_steps_keeps_initial_parameters(tiny_images):
    codec, report = train_codec(tiny_images, SMALL, steps=0, seed=4)
    fresh = Codec(SMALL, seed=4)
    for (n1, a), (n2, b) in zip(sorted(codec.state_dict().items()), sorted(fresh.state_dict().items())):
        assert n1 == n2 and np.array_equal(a, b)
    assert report.steps == 0 and float(codec.latent_scale.data) == 1.0


def test_training_is_seeded_and_reduces_loss(tiny_images):
    a, rep = train_codec(tiny_images, SMALL, steps=40, lr=3e-3, seed=7, batch_size=8)
    b, _ = train_codec(tiny_images, SMALL, steps=40, lr=3e-3, seed=7, batch_size=8)
    for k, v in a.state_dict().items():
        assert np.array_equal(v, b.state_dict()[k])
    assert rep.train_loss_after < rep.train_loss_before
    assert np.isfinite(rep.holdout_mse)
    assert len(rep.losses) == 40


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        train_codec(np.zeros((0, 16, 16, 3)), SMALL)


def test_sections_round_trip(tiny_images):
    codec, _ = train_codec(tiny_images, SMALL, steps=5, seed=0, batch_size=4)
    back = Codec.from_sections(codec.to_sections())
    assert back.config == codec.config
    assert float(back.latent_scale.data) == float(codec.latent_scale.data)
    assert np.array_equal(back.encode_batch(tiny_images[:2]), codec.encode_batch(tiny_images[:2]))


def test_codec_is_frozen_during_denoiser_training(tiny_images):
    codec, _ = train_codec(tiny_images, SMALL, steps=5, seed=0, batch_size=4)
    before = {k: v.copy() for k, v in codec.state_dict().items()}
    scale = float(codec.latent_scale.data)
    mattes = tiny_images[..., 0]
    from zippo.unet import UNetConfig
    train((tiny_images, mattes, np.ones(len(mattes), dtype=np.int64)), TrainConfig(steps=2, batch_size=2, log_every=0),
          codec, unet_config=UNetConfig(base_width=8, levels=2, emb_dim=16))
    for k, v in codec.state_dict().items():
        assert np.array_equal(v, before[k])
    assert float(codec.latent_scale.data) == scale
