"""Three-branch training with shared noise draws.

For each sample one timestep ``t``, one matte noise ``eps`` and one RGB
noise ``eps_hat`` are drawn. The branches reuse them:

========  ==========================================  ============  ==============
branch    joint input                                 prompt        target (slot)
========  ==========================================  ============  ==============
R2M       cat(z_x, noised(z_a, eps))                  empty         eps (matte)
M2R       cat(noised(z_x, eps_hat), z_a)              class         eps_hat (RGB)
JOINT     cat(noised(z_x, eps_hat), noised(z_a, eps))  class         cat(eps_hat, eps)
========  ==========================================  ============  ==============

so the joint target is exactly the concatenation of the two single-branch
targets. Active branches are stacked on the batch axis and run through the
denoiser in one pass; each branch's loss is the MSE over its supervised
slot only.
"""

from __future__ import annotations

import csv
import enum
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as tc
from .checkpoint import load_sections, save_sections, scalar, strip_prefix, with_prefix
from .codec import Codec, replicate_matte
from .optim import Adam
from .scheduler import NoiseSchedule, add_noise, make_schedule
from .unet import EMPTY_PROMPT, DistributionIdentifier, UNetConfig, ZippoUNet, matte_slot, rgb_slot

log = logging.getLogger(__name__)

R2M, M2R, JOINT = DistributionIdentifier.R2M, DistributionIdentifier.M2R, DistributionIdentifier.JOINT


class TaskMode(str, enum.Enum):
    SINGLE = "single"
    DUAL = "dual"
    FULL = "full"

    @property
    def branches(self) -> tuple[DistributionIdentifier, ...]:
        return {"single": (R2M,), "dual": (R2M, M2R), "full": (R2M, M2R, JOINT)}[self.value]

    @property
    def code(self) -> int:
        return ("single", "dual", "full").index(self.value)

    @classmethod
    def from_code(cls, code: int) -> "TaskMode":
        return cls(("single", "dual", "full")[int(code)])


class NonFiniteLossError(FloatingPointError):
    def __init__(self, branch: str, step: int, value: float):
        super().__init__(f"non-finite {branch} loss ({value}) at step {step}")
        self.branch = branch
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 20000
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    mode: TaskMode = TaskMode.FULL
    T: int = 200
    beta_start: float = 1e-3
    beta_end: float | None = None
    loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    log_every: int = 500

    def __post_init__(self):
        object.__setattr__(self, "mode", TaskMode(self.mode))
        if self.steps < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("steps must be >= 0, batch_size >= 1 and lr > 0")
        if len(self.loss_weights) != 3 or any(w < 0 for w in self.loss_weights):
            raise ValueError(f"loss_weights must be three non-negative numbers, got {self.loss_weights}")

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.T, self.beta_start, self.beta_end)


@dataclass
class TrainSample:
    image: np.ndarray
    matte: np.ndarray
    prompt: int


@dataclass
class EncodedBatch:
    z_x: np.ndarray
    z_a: np.ndarray
    prompts: np.ndarray

    def __len__(self) -> int:
        return len(self.prompts)

    def take(self, idx) -> "EncodedBatch":
        return EncodedBatch(self.z_x[idx], self.z_a[idx], self.prompts[idx])


@dataclass
class StepReport:
    step: int
    l_r2m: float | None
    l_m2r: float | None
    l_joint: float | None
    total: float
    lr: float


@dataclass
class BranchInput:
    identifier: DistributionIdentifier
    joint_input: np.ndarray
    prompt: np.ndarray
    target: np.ndarray
    mask: np.ndarray  # boolean over the 2C output channels
    slot: slice


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    if total_steps <= 0 or not 0 <= step <= total_steps:
        raise ValueError(f"cosine_lr needs 0 <= step <= total_steps, got step={step}, total={total_steps}")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def _channel_mask(C: int, slot: slice) -> np.ndarray:
    mask = np.zeros(2 * C, dtype=bool)
    mask[slot] = True
    return mask


def build_branch_inputs(schedule: NoiseSchedule, z_x, z_a, eps_hat, eps, t, c) -> list[BranchInput]:
    """Inputs, targets and loss masks for the R2M, M2R and JOINT branches.

    Arrays are batched (N×C×h×w); ``t`` and ``c`` are length-N. Each noised
    latent is computed once and shared, which is what makes the joint
    branch's input and target bit-identical to the single branches' pieces.
    """
    z_x, z_a, eps_hat, eps = (np.asarray(a, dtype=np.float32) for a in (z_x, z_a, eps_hat, eps))
    if not (z_x.shape == z_a.shape == eps_hat.shape == eps.shape):
        raise ValueError(
            f"latent/noise shapes differ: z_x {z_x.shape}, z_a {z_a.shape}, eps_hat {eps_hat.shape}, eps {eps.shape}"
        )
    n, C = z_x.shape[:2]
    c = np.broadcast_to(np.asarray(c, dtype=np.int64), (n,))
    noised_a = add_noise(schedule, z_a, eps, t)
    noised_x = add_noise(schedule, z_x, eps_hat, t)
    rs, ms = rgb_slot(C), matte_slot(C)
    both = slice(0, 2 * C)
    return [
        BranchInput(R2M, np.concatenate([z_x, noised_a], axis=1), np.full(n, EMPTY_PROMPT), eps, _channel_mask(C, ms), ms),
        BranchInput(M2R, np.concatenate([noised_x, z_a], axis=1), c.copy(), eps_hat, _channel_mask(C, rs), rs),
        BranchInput(
            JOINT,
            np.concatenate([noised_x, noised_a], axis=1),
            c.copy(),
            np.concatenate([eps_hat, eps], axis=1),
            _channel_mask(C, both),
            both,
        ),
    ]


def draw_noise(seed: int, step: int, batch: EncodedBatch, T: int):
    """Per-sample streams keyed by (seed, step, position in batch)."""
    n = len(batch)
    shape = batch.z_x.shape[1:]
    t = np.empty(n, dtype=np.int64)
    eps = np.empty((n,) + shape, dtype=np.float32)
    eps_hat = np.empty((n,) + shape, dtype=np.float32)
    for i in range(n):
        rng = np.random.default_rng([seed, step, i])
        t[i] = rng.integers(1, T + 1)
        eps[i] = rng.standard_normal(shape, dtype=np.float32)
        eps_hat[i] = rng.standard_normal(shape, dtype=np.float32)
    return t, eps, eps_hat


def encode_dataset(codec: Codec, images, mattes, prompts, chunk: int = 128) -> EncodedBatch:
    if codec is None:
        raise ValueError("a codec (trained or pixel-identity) is required")
    images = np.asarray(images, dtype=np.float32)
    mattes = np.asarray(mattes, dtype=np.float32)
    zx = [codec.encode_batch(images[i : i + chunk]) for i in range(0, len(images), chunk)]
    za = [codec.encode_batch(replicate_matte(mattes[i : i + chunk])) for i in range(0, len(mattes), chunk)]
    return EncodedBatch(np.concatenate(zx), np.concatenate(za), np.asarray(prompts, dtype=np.int64))


def _as_encoded(batch, codec) -> EncodedBatch:
    if isinstance(batch, EncodedBatch):
        return batch
    batch = list(batch)
    if not batch:
        raise ValueError("empty batch")
    return encode_dataset(
        codec,
        np.stack([s.image for s in batch]),
        np.stack([s.matte for s in batch]),
        np.array([s.prompt for s in batch]),
    )


def branch_losses(model: ZippoUNet, branches: Sequence[BranchInput], t: np.ndarray):
    """Run the active branches as one stacked batch; return {identifier: loss tensor}."""
    n = len(t)
    z = np.concatenate([b.joint_input for b in branches])
    prompts = np.concatenate([b.prompt for b in branches])
    idents = np.concatenate([np.full(n, int(b.identifier)) for b in branches])
    pred = model(z, np.tile(t, len(branches)), prompts, idents)
    losses = {}
    for k, b in enumerate(branches):
        part = tc.getitem(pred, (slice(k * n, (k + 1) * n), b.slot))
        losses[b.identifier] = tc.mse(part, b.target)
    return losses, pred


def training_step(batch, model: ZippoUNet, codec: Codec, schedule: NoiseSchedule, optimizer: Adam,
                  config: TrainConfig, step: int) -> StepReport:
    """One optimisation step over ``batch`` (an EncodedBatch or TrainSamples)."""
    enc = _as_encoded(batch, codec)
    if len(enc) == 0:
        raise ValueError("empty batch")
    t, eps, eps_hat = draw_noise(config.seed, step, enc, schedule.T)
    all_branches = build_branch_inputs(schedule, enc.z_x, enc.z_a, eps_hat, eps, t, enc.prompts)
    active = [b for b in all_branches if b.identifier in config.mode.branches]
    losses, _ = branch_losses(model, active, t)

    names = {R2M: "r2m", M2R: "m2r", JOINT: "joint"}
    values = {}
    for ident, loss in losses.items():
        v = loss.item()
        if not math.isfinite(v):
            raise NonFiniteLossError(names[ident], step, v)
        values[ident] = v
    total = None
    for ident, loss in losses.items():
        term = loss * float(config.loss_weights[int(ident)])
        total = term if total is None else total + term

    lr = cosine_lr(step, max(config.steps, step + 1), config.lr)
    optimizer.zero_grad()
    total.backward()
    optimizer.step(lr)
    return StepReport(step, values.get(R2M), values.get(M2R), values.get(JOINT), total.item(), lr)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Bundle:
    model: ZippoUNet
    codec: Codec
    schedule: NoiseSchedule
    mode: TaskMode


def save_checkpoint(path, model: ZippoUNet, codec: Codec, schedule: NoiseSchedule, mode: TaskMode) -> None:
    sections = with_prefix("codec.", codec.to_sections())
    sections.update(with_prefix("unet.", model.config.to_sections()))
    sections.update({f"unet.param.{k}": v for k, v in model.state_dict().items()})
    sections.update({f"schedule.{k}": np.float32(v) for k, v in schedule.params().items()})
    sections["train.mode"] = np.float32(TaskMode(mode).code)
    save_sections(path, sections)


def load_checkpoint(path) -> Bundle:
    sections = load_sections(path)
    codec = Codec.from_sections(strip_prefix("codec.", sections))
    unet_sections = strip_prefix("unet.", sections)
    model = ZippoUNet(UNetConfig.from_sections(unet_sections))
    model.load_state_dict(strip_prefix("param.", unet_sections))
    sch = strip_prefix("schedule.", sections)
    schedule = make_schedule(int(round(scalar(sch["T"]))), scalar(sch["beta_start"]), scalar(sch["beta_end"]))
    return Bundle(model, codec, schedule, TaskMode.from_code(int(round(float(sections["train.mode"])))))


# ---------------------------------------------------------------------------
# loop


HISTORY_COLUMNS = ("step", "l_r2m", "l_m2r", "l_joint", "lr")


def write_history(path, history: Sequence[StepReport]) -> None:
    def fmt(v):
        return "" if v is None else repr(float(v))

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for r in history:
            w.writerow([r.step, fmt(r.l_r2m), fmt(r.l_m2r), fmt(r.l_joint), fmt(r.lr)])


def smoothed(values: Sequence[float], window: int = 50) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return v
    c = np.cumsum(np.concatenate([[0.0], v]))
    idx = np.arange(1, v.size + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


@dataclass
class TrainResult:
    model: ZippoUNet
    schedule: NoiseSchedule
    history: list[StepReport] = field(default_factory=list)
    seconds: float = 0.0
    checkpoint: Path | None = None


def train(dataset, config: TrainConfig, codec: Codec | None, out_dir=None, unet_config: UNetConfig | None = None,
          callback: Callable[[StepReport], None] | None = None) -> TrainResult:
    """Train a fresh denoiser on a frozen codec.

    ``dataset`` is an :class:`EncodedBatch`, a sequence of
    :class:`TrainSample`, or an ``(images, mattes, prompts)`` tuple. With
    ``out_dir`` set, ``checkpoint.zippo`` and ``history.csv`` are written there.
    """
    if codec is None:
        raise ValueError("train needs a codec: train one first or use pixel-identity mode")
    if isinstance(dataset, tuple) and len(dataset) == 3 and not isinstance(dataset, EncodedBatch):
        data = encode_dataset(codec, *dataset)
    else:
        data = _as_encoded(dataset, codec)
    if len(data) == 0:
        raise ValueError("dataset is empty")
    schedule = config.schedule()
    base = unet_config or UNetConfig()
    ucfg = UNetConfig(**{**base.__dict__, "latent_channels": codec.config.latent_channels, "num_timesteps": config.T})
    model = ZippoUNet(ucfg, seed=config.seed)
    opt = Adam(model.parameters(), lr=config.lr)

    history: list[StepReport] = []
    start = time.perf_counter()
    n = len(data)
    for step in range(config.steps):
        pick = np.random.default_rng([config.seed, step]).choice(n, size=min(config.batch_size, n), replace=False)
        report = training_step(data.take(np.sort(pick)), model, codec, schedule, opt, config, step)
        history.append(report)
        if callback is not None:
            callback(report)
        if config.log_every and (step % config.log_every == 0 or step == config.steps - 1):
            recent = smoothed([h.total for h in history])[-1]
            log.info("step %d/%d total %.4f (smoothed %.4f) lr %.2e", step, config.steps, report.total, recent, report.lr)
    result = TrainResult(model, schedule, history, time.perf_counter() - start)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "checkpoint.zippo", model, codec, schedule, config.mode)
        write_history(out / "history.csv", history)
        result.checkpoint = out / "checkpoint.zippo"
    return result
