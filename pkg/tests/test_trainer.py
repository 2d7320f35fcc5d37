import numpy as np
import pytest

from zippo.codec import Codec, CodecConfig
from zippo.optim import Adam
from zippo.scheduler import make_schedule
from zippo.trainer import (EncodedBatch, NonFiniteLossError, TaskMode, TrainConfig, TrainSample, branch_losses,
                           build_branch_inputs, cosine_lr, draw_noise, load_checkpoint, smoothed, train,
                           training_step)
from zippo.unet import EMPTY_PROMPT, DistributionIdentifier, UNetConfig, ZippoUNet

D = DistributionIdentifier
C = 3
TINY = UNetConfig(latent_channels=C, base_width=8, levels=2, emb_dim=16, vocab=8)


def encoded(n=4, hw=4, seed=0):
    rng = np.random.default_rng(seed)
    return EncodedBatch(
        rng.standard_normal((n, C, hw, hw)).astype(np.float32),
        rng.standard_normal((n, C, hw, hw)).astype(np.float32),
        rng.integers(1, 6, size=n),
    )


def test_cosine_lr_endpoints():
    assert cosine_lr(0, 100, 0.1) == 0.1
    assert cosine_lr(100, 100, 0.1) == pytest.approx(0.0, abs=1e-18)
    assert cosine_lr(50, 100, 0.1) == pytest.approx(0.05)
    lrs = [cosine_lr(s, 37, 1.0) for s in range(38)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        cosine_lr(101, 100, 0.1)


def test_noise_reassignment_over_100_steps():
    schedule = make_schedule(200)
    data = encoded(n=3)
    for step in range(100):
        t, eps, eps_hat = draw_noise(11, step, data, schedule.T)
        r2m, m2r, joint = build_branch_inputs(schedule, data.z_x, data.z_a, eps_hat, eps, t, data.prompts)
        assert np.array_equal(joint.target, np.concatenate([m2r.target, r2m.target], axis=1))
        assert np.array_equal(joint.joint_input[:, :C], m2r.joint_input[:, :C])
        assert np.array_equal(joint.joint_input[:, C:], r2m.joint_input[:, C:])
        assert np.array_equal(r2m.joint_input[:, :C], data.z_x)
        assert np.array_equal(m2r.joint_input[:, C:], data.z_a)


def test_branch_contract():
    schedule = make_schedule(200)
    data = encoded(n=2)
    t = np.array([1, 200])
    zero = np.zeros_like(data.z_x)
    r2m, m2r, joint = build_branch_inputs(schedule, data.z_x, data.z_a, zero, zero, t, data.prompts)
    assert (r2m.identifier, m2r.identifier, joint.identifier) == (D.R2M, D.M2R, D.JOINT)
    assert np.all(r2m.prompt == EMPTY_PROMPT)
    assert np.array_equal(m2r.prompt, data.prompts) and np.array_equal(joint.prompt, data.prompts)
    assert r2m.mask.tolist() == [False] * C + [True] * C
    assert m2r.mask.tolist() == [True] * C + [False] * C
    assert joint.mask.all()
    scale = np.sqrt(schedule.alpha_bar(t)).astype(np.float32)[:, None, None, None]
    assert np.allclose(joint.joint_input[:, :C], scale * data.z_x, atol=1e-6)
    assert np.allclose(joint.joint_input[:, C:], scale * data.z_a, atol=1e-6)
    with pytest.raises(ValueError):
        build_branch_inputs(schedule, data.z_x, data.z_a[:, :2], zero, zero, t, data.prompts)


def _model():
    return ZippoUNet(TINY, seed=0)


def test_single_mode_finite_difference_on_output_channels():
    schedule = make_schedule(200)
    data = encoded(n=2)
    t, eps, eps_hat = draw_noise(0, 0, data, schedule.T)
    branches = [b for b in build_branch_inputs(schedule, data.z_x, data.z_a, eps_hat, eps, t, data.prompts)
                if b.identifier in TaskMode.SINGLE.branches]
    model = _model()
    bias = model.conv_out.bias
    losses, _ = branch_losses(model, branches, t)
    bias.grad = None
    losses[D.R2M].backward()
    assert np.all(bias.grad[:C] == 0.0) and np.any(bias.grad[C:] != 0.0)
    for ch in range(C):
        old = bias.data[ch]
        bias.data[ch] = old + 1e-3
        hi = branch_losses(model, branches, t)[0][D.R2M].item()
        bias.data[ch] = old - 1e-3
        lo = branch_losses(model, branches, t)[0][D.R2M].item()
        bias.data[ch] = old
        assert abs(hi - lo) / 2e-3 < 1e-7


def test_training_step_reports_and_updates():
    schedule = make_schedule(200)
    data = encoded(n=2)
    codec = Codec(CodecConfig.identity())
    model = _model()
    before = {k: v.copy() for k, v in model.state_dict().items()}
    opt = Adam(model.parameters(), lr=1e-3)
    rep = training_step(data, model, codec, schedule, opt, TrainConfig(steps=5, mode="full"), 0)
    assert all(np.isfinite(v) and v >= 0 for v in (rep.l_r2m, rep.l_m2r, rep.l_joint))
    assert rep.total == pytest.approx(rep.l_r2m + rep.l_m2r + rep.l_joint, rel=1e-5)
    assert any(not np.array_equal(v, model.state_dict()[k]) for k, v in before.items())

    for mode, present in (("single", (True, False, False)), ("dual", (True, True, False))):
        m = _model()
        rep = training_step(data, m, codec, schedule, Adam(m.parameters()), TrainConfig(mode=mode), 0)
        assert tuple(v is not None for v in (rep.l_r2m, rep.l_m2r, rep.l_joint)) == present


def test_training_step_accepts_samples():
    rng = np.random.default_rng(0)
    samples = [TrainSample(rng.random((4, 4, 3)).astype(np.float32), rng.random((4, 4)).astype(np.float32), 2)
               for _ in range(2)]
    model = _model()
    rep = training_step(samples, model, Codec(CodecConfig.identity()), make_schedule(200),
                        Adam(model.parameters()), TrainConfig(), 3)
    assert rep.step == 3 and np.isfinite(rep.total)


def test_non_finite_loss_names_branch():
    data = encoded(n=2)
    data.z_a[0, 0, 0, 0] = np.nan
    model = _model()
    with pytest.raises(NonFiniteLossError, match="r2m"):
        training_step(data, model, Codec(CodecConfig.identity()), make_schedule(200), Adam(model.parameters()),
                      TrainConfig(), 0)


def _dataset(n=6):
    rng = np.random.default_rng(1)
    images = rng.random((n, 4, 4, 3)).astype(np.float32)
    mattes = rng.random((n, 4, 4)).astype(np.float32)
    return images, mattes, rng.integers(1, 6, size=n)


def test_train_is_deterministic(tmp_path):
    codec = Codec(CodecConfig.identity())
    cfg = TrainConfig(steps=4, batch_size=3, log_every=0)
    a = train(_dataset(), cfg, codec, out_dir=tmp_path / "a", unet_config=TINY)
    b = train(_dataset(), cfg, codec, out_dir=tmp_path / "b", unet_config=TINY)
    assert [vars(r) for r in a.history] == [vars(r) for r in b.history]
    assert (tmp_path / "a" / "checkpoint.zippo").read_bytes() == (tmp_path / "b" / "checkpoint.zippo").read_bytes()
    assert (tmp_path / "a" / "history.csv").read_bytes() == (tmp_path / "b" / "history.csv").read_bytes()


def test_zero_steps_and_checkpoint_round_trip(tmp_path):
    codec = Codec(CodecConfig.identity())
    res = train(_dataset(), TrainConfig(steps=0, mode="dual", T=50, log_every=0), codec, out_dir=tmp_path,
                unet_config=TINY)
    fresh = ZippoUNet(res.model.config, seed=0)
    for k, v in fresh.state_dict().items():
        assert np.array_equal(v, res.model.state_dict()[k])
    bundle = load_checkpoint(tmp_path / "checkpoint.zippo")
    assert bundle.mode is TaskMode.DUAL
    assert bundle.schedule.T == 50
    assert np.array_equal(bundle.schedule.alphas_bar, res.schedule.alphas_bar)
    assert bundle.model.config == res.model.config
    assert bundle.codec.config == codec.config
    for k, v in res.model.state_dict().items():
        assert np.array_equal(v, bundle.model.state_dict()[k])


def test_history_csv(tmp_path):
    res = train(_dataset(), TrainConfig(steps=3, mode="single", log_every=0), Codec(CodecConfig.identity()),
                out_dir=tmp_path, unet_config=TINY)
    lines = (tmp_path / "history.csv").read_text().splitlines()
    assert lines[0] == "step,l_r2m,l_m2r,l_joint,lr"
    assert len(lines) == 4
    step, r2m, m2r, joint, lr = lines[1].split(",")
    assert step == "0" and m2r == "" and joint == "" and float(r2m) == res.history[0].l_r2m


def test_train_needs_codec():
    with pytest.raises(ValueError):
        train(_dataset(), TrainConfig(steps=1), None)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(steps=-1)
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(loss_weights=(1.0, -1.0, 1.0))
    with pytest.raises(ValueError):
        TrainConfig(mode="triple")


def test_smoothed_loss_goes_down():
    res = train(_dataset(12), TrainConfig(steps=120, batch_size=4, lr=3e-3, log_every=0),
                Codec(CodecConfig.identity()), unet_config=TINY)
    s = smoothed([h.total for h in res.history])
    assert s[-1] < s[0]
    assert np.allclose(smoothed([1.0, 3.0, 5.0], window=2), [1.0, 2.0, 4.0])
