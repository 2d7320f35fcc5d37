"""Shared image/matte autoencoder.

Images are H×W×3 float arrays in [0, 1]; mattes are H×W. Latents are
channel-first C×(H/f)×(W/f). A matte is encoded by replicating it into three
channels, and decoded by averaging the three decoded channels, so both
modalities live in one latent space while the codec only ever trains on RGB.

``pixel-identity`` mode skips the network (C=3, f=1) and is an exact round
trip; it exists for tests and for running the diffusion stack in pixel space.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as tc
from .optim import Adam
from .tensor import Conv2d, GroupNorm, Module, Parameter, ShapeError, Tensor, norm_groups

log = logging.getLogger(__name__)

TRAINED = "trained-autoencoder"
IDENTITY = "pixel-identity"
MODES = (TRAINED, IDENTITY)


@dataclass(frozen=True)
class CodecConfig:
    latent_channels: int = 4
    factor: int = 4
    base_width: int = 32
    mode: str = TRAINED

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown codec mode {self.mode!r}; expected one of {MODES}")
        if self.mode == IDENTITY and (self.latent_channels != 3 or self.factor != 1):
            raise ValueError("pixel-identity mode requires latent_channels=3 and factor=1")
        f = self.factor
        if f < 1 or f & (f - 1):
            raise ValueError(f"downscale factor must be a power of two, got {f}")

    @classmethod
    def identity(cls) -> "CodecConfig":
        return cls(latent_channels=3, factor=1, mode=IDENTITY)

    def to_sections(self) -> dict[str, np.ndarray]:
        out = {f"config.{k}": np.float32(v) for k, v in asdict(self).items() if k != "mode"}
        out["config.mode"] = np.float32(MODES.index(self.mode))
        return out

    @classmethod
    def from_sections(cls, sections) -> "CodecConfig":
        kw = {}
        for f in fields(cls):
            key = f"config.{f.name}"
            if key not in sections:
                continue
            v = int(round(float(sections[key])))
            kw[f.name] = MODES[v] if f.name == "mode" else v
        return cls(**kw)


def replicate_matte(matte: np.ndarray) -> np.ndarray:
    """H×W matte -> H×W×3 image with three equal channels."""
    matte = np.asarray(matte, dtype=np.float32)
    return np.repeat(matte[..., None], 3, axis=-1)


class _Stage(Module):
    """Pre-norm residual block: x + conv(SiLU(GN(conv(SiLU(GN(x)))))).

    The identity path carries absolute intensity, which group norm alone
    would discard (a flat image normalises to zeros).
    """

    def __init__(self, channels: int, rng):
        self.norm1 = GroupNorm(norm_groups(channels), channels)
        self.conv1 = Conv2d(channels, channels, 3, rng)
        self.norm2 = GroupNorm(norm_groups(channels), channels)
        self.conv2 = Conv2d(channels, channels, 3, rng)

    def forward(self, x):
        h = self.conv1(tc.silu(self.norm1(x)))
        return x + self.conv2(tc.silu(self.norm2(h)))


class Codec(Module):
    def __init__(self, config: CodecConfig = CodecConfig(), seed: int = 0):
        self.config = config
        # latents are multiplied by this before leaving encode(); fitted after training
        self.latent_scale = Parameter(np.ones(()))
        self.latent_scale.requires_grad = False
        if config.mode == IDENTITY:
            return
        rng = np.random.default_rng(seed)
        w, f = config.base_width, config.factor
        # pixels are folded into channels up front, so every conv runs at latent resolution
        self.enc_in = Conv2d(3 * f * f, w, 3, rng)
        self.enc_stages = [_Stage(w, rng), _Stage(w, rng)]
        self.enc_out = Conv2d(w, config.latent_channels, 1, rng)
        self.dec_in = Conv2d(config.latent_channels, w, 3, rng)
        self.dec_stages = [_Stage(w, rng), _Stage(w, rng)]
        self.dec_out = Conv2d(w, 3 * f * f, 3, rng)

    def named_parameters(self, prefix: str = ""):
        for name, p in super().named_parameters(prefix):
            if p is not self.latent_scale:
                yield name, p

    # -- graph-level passes (NCHW tensors, images in [-1, 1]) ---------------

    def encode_tensor(self, x: Tensor) -> Tensor:
        h = self.enc_in(tc.space_to_depth(x, self.config.factor))
        for stage in self.enc_stages:
            h = stage(h)
        return self.enc_out(tc.silu(h))

    def decode_tensor(self, z: Tensor) -> Tensor:
        h = self.dec_in(z)
        for stage in self.dec_stages:
            h = stage(h)
        return tc.depth_to_space(self.dec_out(tc.silu(h)), self.config.factor)

    # -- public array API ------------------------------------------------------

    def latent_shape(self, height: int, width: int) -> tuple[int, int, int]:
        f = self.config.factor
        return (self.config.latent_channels, height // f, width // f)

    def _check_dims(self, h: int, w: int) -> None:
        f = self.config.factor
        if h % f or w % f:
            raise ShapeError(f"image size {h}x{w} is not divisible by the codec factor {f}")

    def encode_batch(self, images: np.ndarray) -> np.ndarray:
        """N×H×W×3 images in [0,1] -> N×C×h×w latents."""
        images = np.asarray(images, dtype=np.float32)
        if images.ndim != 4 or images.shape[-1] != 3:
            raise ShapeError(f"expected N×H×W×3 images, got {images.shape}")
        self._check_dims(*images.shape[1:3])
        x = np.ascontiguousarray(images.transpose(0, 3, 1, 2))
        if self.config.mode == IDENTITY:
            return x
        with tc.no_grad():
            z = self.encode_tensor(Tensor(x * 2.0 - 1.0)).data
        return z * self.latent_scale.data

    def decode_batch(self, latents: np.ndarray) -> np.ndarray:
        """N×C×h×w latents -> N×H×W×3 images clamped to [0,1]."""
        latents = np.asarray(latents, dtype=np.float32)
        if latents.ndim != 4 or latents.shape[1] != self.config.latent_channels:
            raise ShapeError(
                f"expected N×{self.config.latent_channels}×h×w latents, got shape {latents.shape}"
            )
        if self.config.mode == IDENTITY:
            img = latents
        else:
            with tc.no_grad():
                img = (self.decode_tensor(Tensor(latents / self.latent_scale.data)).data + 1.0) * 0.5
        return np.clip(img, 0.0, 1.0).transpose(0, 2, 3, 1).copy()

    def encode(self, image: np.ndarray) -> np.ndarray:
        return self.encode_batch(np.asarray(image)[None])[0]

    def decode(self, latent: np.ndarray) -> np.ndarray:
        return self.decode_batch(np.asarray(latent)[None])[0]

    def encode_matte(self, matte: np.ndarray) -> np.ndarray:
        return self.encode(replicate_matte(matte))

    def decode_matte(self, latent: np.ndarray) -> np.ndarray:
        return self.decode_mattes(np.asarray(latent)[None])[0]

    def encode_mattes(self, mattes: np.ndarray) -> np.ndarray:
        return self.encode_batch(replicate_matte(mattes))

    def decode_mattes(self, latents: np.ndarray) -> np.ndarray:
        rgb = self.decode_batch(latents)
        # mean written as an offset from the first channel, so equal channels come back bit-exact
        r = rgb[..., 0]
        mean = r + ((rgb[..., 1] - r) + (rgb[..., 2] - r)) / np.float32(3.0)
        return np.clip(mean, 0.0, 1.0)

    # -- persistence -----------------------------------------------------------

    def to_sections(self) -> dict[str, np.ndarray]:
        out = self.config.to_sections()
        out["latent_scale"] = np.asarray(self.latent_scale.data, dtype=np.float32)
        for name, arr in self.state_dict().items():
            out[f"param.{name}"] = arr
        return out

    @classmethod
    def from_sections(cls, sections) -> "Codec":
        codec = cls(CodecConfig.from_sections(sections))
        codec.load_state_dict({k[len("param."):]: v for k, v in sections.items() if k.startswith("param.")})
        if "latent_scale" in sections:
            codec.latent_scale.data = np.asarray(sections["latent_scale"], dtype=np.float32).reshape(())
        return codec


@dataclass
class CodecReport:
    train_loss_before: float
    train_loss_after: float
    holdout_mse: float
    latent_scale: float
    steps: int
    losses: list[float] = field(default_factory=list)


def _recon_mse(codec: Codec, images: np.ndarray, batch: int = 64) -> float:
    if len(images) == 0:
        return float("nan")
    total = 0.0
    for i in range(0, len(images), batch):
        chunk = images[i : i + batch]
        rec = codec.decode_batch(codec.encode_batch(chunk))
        total += float(np.sum((rec - chunk) ** 2, dtype=np.float64))
    return total / images.size


def train_codec(
    images,
    config: CodecConfig = CodecConfig(),
    steps: int = 2000,
    lr: float = 2e-3,
    seed: int = 0,
    batch_size: int = 32,
    holdout_fraction: float = 0.05,
) -> tuple[Codec, CodecReport]:
    """Fit the autoencoder on RGB images with plain MSE and a cosine lr.

    After fitting, ``latent_scale`` is set to the reciprocal standard
    deviation of training latents so diffusion sees roughly unit-variance
    inputs. Mattes are never part of training.
    """
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4 or len(images) == 0:
        raise ValueError("train_codec needs a non-empty N×H×W×3 image stack")
    codec = Codec(config, seed=seed)
    if config.mode == IDENTITY:
        return codec, CodecReport(0.0, 0.0, 0.0, 1.0, 0)
    codec._check_dims(*images.shape[1:3])

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(images))
    n_hold = int(round(len(images) * holdout_fraction)) if len(images) > 1 else 0
    hold, train = images[order[:n_hold]], images[order[n_hold:]]
    probe = train[: min(len(train), 256)]

    before = _recon_mse(codec, probe)
    opt = Adam(codec.parameters(), lr=lr)
    losses = []
    for step in range(steps):
        idx = np.random.default_rng([seed, step]).integers(0, len(train), size=min(batch_size, len(train)))
        x = Tensor(np.ascontiguousarray(train[idx].transpose(0, 3, 1, 2)) * 2.0 - 1.0)
        loss = tc.mse(codec.decode_tensor(codec.encode_tensor(x)), x)
        opt.zero_grad()
        loss.backward()
        opt.step(lr * 0.5 * (1.0 + np.cos(np.pi * step / steps)))
        losses.append(loss.item())
        if step % 500 == 0:
            log.info("codec step %d loss %.5f", step, losses[-1])

    if steps > 0:
        zs = codec.encode_batch(train[: min(len(train), 512)])
        codec.latent_scale.data = np.asarray(1.0 / max(float(zs.std()), 1e-6), dtype=np.float32)
    after = _recon_mse(codec, probe)
    report = CodecReport(before, after, _recon_mse(codec, hold), float(codec.latent_scale.data), steps, losses)
    return codec, report
