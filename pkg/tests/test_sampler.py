import time

import numpy as np
import pytest

from zippo.codec import Codec, CodecConfig
from zippo.sampler import (SampleRequest, TransparentImage, batch_sample, joint_generate, matte_to_rgb,
                           rgb_to_matte)
from zippo.scheduler import make_plan, make_schedule
from zippo.unet import EMPTY_PROMPT, DistributionIdentifier, UNetConfig, ZippoUNet

D = DistributionIdentifier
SCHEDULE = make_schedule(200)
IDENT = Codec(CodecConfig.identity())


@pytest.fixture(scope="module")
def model():
    return ZippoUNet(UNetConfig(latent_channels=3, base_width=8, levels=2, emb_dim=16), seed=0)


class Recorder:
    """Stands in for the denoiser: predicts zero noise and records its inputs."""

    def __init__(self, levels=2):
        self.config = UNetConfig(latent_channels=3, levels=levels)
        self.calls = []

    def predict(self, z, t, c, d):
        self.calls.append((z.copy(), np.array(t), np.array(c), np.array(d)))
        return np.zeros_like(z)


def _image(seed=0, hw=8):
    return np.random.default_rng(seed).random((hw, hw, 3)).astype(np.float32)


def _matte(seed=0, hw=8):
    return np.random.default_rng(seed).random((hw, hw)).astype(np.float32)


def test_task_outputs(model):
    m = rgb_to_matte(_image(), model, IDENT, SCHEDULE, steps=4, seed=1)
    assert m.shape == (8, 8) and m.min() >= 0 and m.max() <= 1
    img = matte_to_rgb(_matte(), 2, model, IDENT, SCHEDULE, steps=4, seed=1)
    assert img.shape == (8, 8, 3) and img.min() >= 0 and img.max() <= 1
    ti = joint_generate(3, model, IDENT, SCHEDULE, steps=4, seed=1, size=(8, 8))
    assert isinstance(ti, TransparentImage)
    assert ti.color.shape == (8, 8, 3) and ti.alpha.shape == (8, 8)


def test_determinism_and_debug_mode(model):
    a = rgb_to_matte(_image(), model, IDENT, SCHEDULE, steps=5, seed=3)
    b = rgb_to_matte(_image(), model, IDENT, SCHEDULE, steps=5, seed=3, debug=True)
    assert np.array_equal(a, b)
    c = rgb_to_matte(_image(), model, IDENT, SCHEDULE, steps=5, seed=4)
    assert not np.array_equal(a, c)
    x = matte_to_rgb(_matte(), 1, model, IDENT, SCHEDULE, steps=5, seed=3, debug=True)
    assert np.array_equal(x, matte_to_rgb(_matte(), 1, model, IDENT, SCHEDULE, steps=5, seed=3))


def test_batch_matches_single_calls_and_permutes(model):
    reqs = [
        SampleRequest(D.R2M, _image(1), steps=4, seed=10),
        SampleRequest(D.M2R, _matte(2), prompt=2, steps=4, seed=11),
        SampleRequest(D.JOINT, prompt=1, steps=4, seed=12, size=(8, 8)),
        SampleRequest(D.R2M, _image(3), steps=3, seed=13),
    ]
    together = batch_sample(reqs, model, IDENT, SCHEDULE)
    alone = [batch_sample([r], model, IDENT, SCHEDULE)[0] for r in reqs]
    order = [2, 0, 3, 1]
    permuted = batch_sample([reqs[i] for i in order], model, IDENT, SCHEDULE)

    def flat(x):
        return np.concatenate([x.color.ravel(), x.alpha.ravel()]) if isinstance(x, TransparentImage) else x.ravel()

    for a, b in zip(together, alone):
        np.testing.assert_allclose(flat(a), flat(b), atol=1e-5)
    for k, i in enumerate(order):
        np.testing.assert_allclose(flat(permuted[k]), flat(together[i]), atol=1e-5)


def test_conditioning_slots_held_clean():
    rec = Recorder()
    img, matte = _image(5), _matte(6)
    batch_sample([SampleRequest(D.R2M, img, steps=6, seed=0), SampleRequest(D.M2R, matte, prompt=4, steps=6, seed=0)],
                 rec, IDENT, SCHEDULE)
    assert len(rec.calls) == 6
    plan = make_plan(200, 6)
    for (z, t, c, d), tk in zip(rec.calls, plan):
        assert np.all(t == tk)
        assert np.array_equal(z[0, :3], img.transpose(2, 0, 1))
        assert np.array_equal(z[1, 3:], np.repeat(matte[None], 3, axis=0))
        assert c.tolist() == [EMPTY_PROMPT, 4] and d.tolist() == [int(D.R2M), int(D.M2R)]


def test_joint_split_follows_slot_order():
    # with zero predicted noise, DDIM maps z_T to z_T / sqrt(alpha_bar_T), slot by slot
    rec = Recorder()
    out = batch_sample([SampleRequest(D.JOINT, prompt=2, steps=5, seed=9, size=(8, 8))], rec, IDENT, SCHEDULE)[0]
    rng = np.random.default_rng(9)
    rgb = rng.standard_normal((3, 8, 8), dtype=np.float32)
    matte = rng.standard_normal((3, 8, 8), dtype=np.float32)
    z0_rgb = rec.calls[0][0][0, :3].astype(np.float64) / np.sqrt(SCHEDULE.alpha_bar(200))
    assert np.array_equal(rec.calls[0][0][0, :3], rgb) and np.array_equal(rec.calls[0][0][0, 3:], matte)
    np.testing.assert_allclose(out.color, np.clip(z0_rgb, 0, 1).transpose(1, 2, 0), atol=1e-4)
    expect_alpha = np.clip(matte.astype(np.float64) / np.sqrt(SCHEDULE.alpha_bar(200)), 0, 1).mean(axis=0)
    np.testing.assert_allclose(out.alpha, np.clip(expect_alpha, 0, 1), atol=1e-4)


def test_request_validation(model):
    with pytest.raises(ValueError):
        SampleRequest(D.R2M)
    with pytest.raises(ValueError):
        SampleRequest(D.M2R, _image())
    with pytest.raises(ValueError):
        SampleRequest(D.JOINT, _matte())
    with pytest.raises(NotImplementedError):
        SampleRequest(D.JOINT, guidance_scale=3.0)
    with pytest.raises(ValueError, match="mixed"):
        batch_sample([SampleRequest(D.R2M, _image(hw=8)), SampleRequest(D.R2M, _image(hw=4))], model, IDENT, SCHEDULE)
    with pytest.raises(ValueError, match="divisible"):
        batch_sample([SampleRequest(D.R2M, _image(hw=5))], model, IDENT, SCHEDULE)
    assert batch_sample([], model, IDENT, SCHEDULE) == []


def test_eight_joint_requests_within_budget():
    m = ZippoUNet(UNetConfig(), seed=0)
    codec = Codec(CodecConfig(), seed=0)
    reqs = [SampleRequest(D.JOINT, prompt=1 + i % 5, seed=i) for i in range(8)]
    start = time.perf_counter()
    out = batch_sample(reqs, m, codec, SCHEDULE)
    elapsed = time.perf_counter() - start
    assert len(out) == 8 and all(o.color.shape == (32, 32, 3) for o in out)
    assert elapsed < 60.0
