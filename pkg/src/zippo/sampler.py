"""Task-level inference: RGB-to-matte, matte-to-RGB and joint generation.

All three tasks run the same deterministic DDIM loop over a joint latent.
A conditioning slot (the RGB latent for R2M, the matte latent for M2R) is
reset to its clean encoding after every step, so only the other slot is
denoised and only that half of each noise prediction matters. JOINT
denoises both slots and splits the result at channel C.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .codec import Codec, replicate_matte
from .scheduler import NoiseSchedule, ddim_step, make_plan
from .unet import EMPTY_PROMPT, DistributionIdentifier, ZippoUNet

R2M, M2R, JOINT = DistributionIdentifier.R2M, DistributionIdentifier.M2R, DistributionIdentifier.JOINT
DEFAULT_STEPS = 20


@dataclass
class SampleRequest:
    task: DistributionIdentifier
    condition: np.ndarray | None = None  # image for R2M, matte for M2R
    prompt: int = EMPTY_PROMPT
    steps: int = DEFAULT_STEPS
    seed: int = 0
    size: tuple[int, int] = (32, 32)  # output size for JOINT
    guidance_scale: float = 1.0

    def __post_init__(self):
        self.task = DistributionIdentifier(self.task)
        if self.task == R2M:
            if self.condition is None or np.ndim(self.condition) != 3:
                raise ValueError("R2M needs an H×W×3 image condition")
        elif self.task == M2R:
            if self.condition is None or np.ndim(self.condition) != 2:
                raise ValueError("M2R needs an H×W matte condition")
        elif self.condition is not None:
            raise ValueError("JOINT takes no condition")
        if self.guidance_scale != 1.0:
            raise NotImplementedError("classifier-free guidance is not supported; keep guidance_scale=1")

    @property
    def pixel_size(self) -> tuple[int, int]:
        if self.condition is not None:
            return tuple(np.shape(self.condition)[:2])
        return tuple(self.size)


@dataclass
class TransparentImage:
    color: np.ndarray
    alpha: np.ndarray


class ConditionDriftError(AssertionError):
    pass


def _run_group(requests: Sequence[SampleRequest], model: ZippoUNet, codec: Codec, schedule: NoiseSchedule,
               debug: bool) -> list:
    C = codec.config.latent_channels
    h, w = requests[0].pixel_size
    lat = codec.latent_shape(h, w)
    n = len(requests)
    z = np.empty((n, 2 * C) + lat[1:], dtype=np.float32)
    clean = np.zeros_like(z)
    keep = np.zeros((n, 2 * C), dtype=bool)  # channels held at their clean value
    prompts = np.empty(n, dtype=np.int64)
    idents = np.empty(n, dtype=np.int64)
    for i, req in enumerate(requests):
        rng = np.random.default_rng(req.seed)
        idents[i] = int(req.task)
        if req.task == R2M:
            clean[i, :C] = codec.encode(np.asarray(req.condition, dtype=np.float32))
            keep[i, :C] = True
            z[i, C:] = rng.standard_normal(lat, dtype=np.float32)
            prompts[i] = EMPTY_PROMPT
        elif req.task == M2R:
            clean[i, C:] = codec.encode(replicate_matte(req.condition))
            keep[i, C:] = True
            z[i, :C] = rng.standard_normal(lat, dtype=np.float32)
            prompts[i] = req.prompt
        else:
            z[i, :C] = rng.standard_normal(lat, dtype=np.float32)
            z[i, C:] = rng.standard_normal(lat, dtype=np.float32)
            prompts[i] = req.prompt
    hold = keep[:, :, None, None]
    z = np.where(hold, clean, z)

    plan = make_plan(schedule.T, requests[0].steps)
    for k, t in enumerate(plan):
        t_prev = plan[k + 1] if k + 1 < len(plan) else 0
        if debug and not np.array_equal(z[np.broadcast_to(hold, z.shape)], clean[np.broadcast_to(hold, z.shape)]):
            raise ConditionDriftError(f"conditioning slot drifted before step t={t}")
        eps = model.predict(z, np.full(n, t), prompts, idents)
        z = np.where(hold, clean, ddim_step(schedule, z, eps, t, t_prev))

    out = []
    for i, req in enumerate(requests):
        if req.task == R2M:
            out.append(codec.decode_matte(z[i, C:]))
        elif req.task == M2R:
            out.append(codec.decode(z[i, :C]))
        else:
            out.append(TransparentImage(codec.decode(z[i, :C]), codec.decode_matte(z[i, C:])))
    return out


def batch_sample(requests: Sequence[SampleRequest], model: ZippoUNet, codec: Codec, schedule: NoiseSchedule,
                 debug: bool = False, chunk: int = 256) -> list:
    """Run requests together; results come back in request order.

    Requests must share a pixel size. Each request's starting noise comes
    from its own seed, so results do not depend on batch composition.
    """
    requests = list(requests)
    if not requests:
        return []
    sizes = {r.pixel_size for r in requests}
    if len(sizes) > 1:
        raise ValueError(f"mixed image sizes in one batch: {sorted(sizes)}")
    h, w = sizes.pop()
    f = codec.config.factor
    div = f * 2 ** (model.config.levels - 1)
    if h % div or w % div:
        raise ValueError(f"image size {h}x{w} must be divisible by {div} for this codec and denoiser")
    results: list = [None] * len(requests)
    by_steps: dict[int, list[int]] = {}
    for i, r in enumerate(requests):
        by_steps.setdefault(r.steps, []).append(i)
    for idx in by_steps.values():
        for s in range(0, len(idx), chunk):
            part = idx[s : s + chunk]
            for i, res in zip(part, _run_group([requests[i] for i in part], model, codec, schedule, debug)):
                results[i] = res
    return results


def rgb_to_matte(image, model, codec, schedule, steps: int = DEFAULT_STEPS, seed: int = 0, debug: bool = False) -> np.ndarray:
    return batch_sample([SampleRequest(R2M, np.asarray(image), steps=steps, seed=seed)], model, codec, schedule, debug)[0]


def matte_to_rgb(matte, prompt: int, model, codec, schedule, steps: int = DEFAULT_STEPS, seed: int = 0,
                 debug: bool = False) -> np.ndarray:
    req = SampleRequest(M2R, np.asarray(matte), prompt=prompt, steps=steps, seed=seed)
    return batch_sample([req], model, codec, schedule, debug)[0]


def joint_generate(prompt: int, model, codec, schedule, steps: int = DEFAULT_STEPS, seed: int = 0,
                   size: tuple[int, int] = (32, 32), debug: bool = False) -> TransparentImage:
    req = SampleRequest(JOINT, prompt=prompt, steps=steps, seed=seed, size=size)
    return batch_sample([req], model, codec, schedule, debug)[0]
