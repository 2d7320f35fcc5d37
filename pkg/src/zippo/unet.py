"""Joint-latent denoiser with task routing.

The network sees a joint latent of ``2C`` channels: RGB slot first, matte slot
second (:data:`RGB_SLOT`, :data:`MATTE_SLOT`). Its input and output
convolutions cover both slots, so each modality gets its own first and last
layer weights. Conditioning is one embedding vector per sample, the sum of

* a timestep embedding (sin-cos features through a two-layer MLP),
* a task identifier embedding (sin-cos of the one-hot index, own MLP),
* a prompt embedding (lookup table, row 0 is the empty prompt),

which every residual block projects to a per-channel bias.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as tc
from .tensor import Conv2d, GroupNorm, Linear, Module, Parameter, ShapeError, Tensor, norm_groups


class DistributionIdentifier(enum.IntEnum):
    R2M = 0
    M2R = 1
    JOINT = 2

    def one_hot(self) -> np.ndarray:
        v = np.zeros(len(DistributionIdentifier), dtype=np.float32)
        v[int(self)] = 1.0
        return v

    @classmethod
    def from_one_hot(cls, vec) -> "DistributionIdentifier":
        vec = np.asarray(vec)
        if vec.shape != (len(cls),) or np.count_nonzero(vec == 1) != 1 or np.count_nonzero(vec) != 1:
            raise ValueError(f"not a one-hot identifier: {vec}")
        return cls(int(np.argmax(vec)))


EMPTY_PROMPT = 0


def rgb_slot(C: int) -> slice:
    return slice(0, C)


def matte_slot(C: int) -> slice:
    return slice(C, 2 * C)


@dataclass(frozen=True)
class UNetConfig:
    latent_channels: int = 4
    base_width: int = 32
    levels: int = 3
    emb_dim: int = 128
    vocab: int = 8
    num_identifiers: int = 3
    num_timesteps: int = 200

    def __post_init__(self):
        if self.emb_dim % 2:
            raise ValueError(f"emb_dim must be even, got {self.emb_dim}")
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        if self.vocab < 1 or self.latent_channels < 1 or self.base_width < 1:
            raise ValueError("latent_channels, base_width and vocab must be positive")

    def widths(self) -> list[int]:
        return [self.base_width * (1 if i == 0 else 2) for i in range(self.levels)]

    def to_sections(self) -> dict[str, np.ndarray]:
        return {f"config.{k}": np.float32(v) for k, v in asdict(self).items()}

    @classmethod
    def from_sections(cls, sections) -> "UNetConfig":
        kw = {f.name: int(round(float(sections[f"config.{f.name}"]))) for f in fields(cls) if f"config.{f.name}" in sections}
        return cls(**kw)


def sincos_embed(index, dim: int) -> np.ndarray:
    """Sinusoidal features, interleaved: ``[sin f0, cos f0, sin f1, cos f1, ...]``.

    Component ``2k`` is ``sin(index / 10000**(2k/dim))``. ``index`` may be a
    scalar or a 1-D array (one row per entry).
    """
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    idx = np.asarray(index, dtype=np.float64)
    if np.any(idx < 0):
        raise ValueError("sincos_embed index must be non-negative")
    freqs = 1.0 / 10000.0 ** (np.arange(0, dim, 2, dtype=np.float64) / dim)
    ang = idx[..., None] * freqs
    out = np.empty(idx.shape + (dim,), dtype=np.float64)
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out.astype(np.float32)


class MLP2(Module):
    def __init__(self, dim: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, dim, rng)
        self.fc2 = Linear(dim, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(tc.silu(self.fc1(x)))


class ResBlock(Module):
    def __init__(self, cin: int, cout: int, emb_dim: int, rng: np.random.Generator):
        self.norm1 = GroupNorm(norm_groups(cin), cin)
        self.conv1 = Conv2d(cin, cout, 3, rng)
        self.emb_proj = Linear(emb_dim, cout, rng)
        self.norm2 = GroupNorm(norm_groups(cout), cout)
        self.conv2 = Conv2d(cout, cout, 3, rng)
        self.skip = Conv2d(cin, cout, 1, rng) if cin != cout else None

    def forward(self, x: Tensor, emb: Tensor) -> Tensor:
        h = self.conv1(tc.silu(self.norm1(x)))
        bias = self.emb_proj(emb)
        h = h + tc.reshape(bias, bias.shape + (1, 1))
        h = self.conv2(tc.silu(self.norm2(h)))
        return h + (self.skip(x) if self.skip is not None else x)


class ZippoUNet(Module):
    def __init__(self, config: UNetConfig = UNetConfig(), seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        C, E = config.latent_channels, config.emb_dim
        widths = config.widths()

        self.time_mlp = MLP2(E, rng)
        self.ident_mlp = MLP2(E, rng)
        table = rng.normal(0.0, 1.0, size=(config.vocab, E)).astype(np.float32)
        table[EMPTY_PROMPT] = 0.0
        self.prompt_table = Parameter(table)

        self.conv_in = Conv2d(2 * C, widths[0], 3, rng)
        self.down_blocks = []
        self.downsamplers = []
        prev = widths[0]
        for i, w in enumerate(widths):
            self.down_blocks.append(ResBlock(prev, w, E, rng))
            prev = w
            if i < config.levels - 1:
                self.downsamplers.append(Conv2d(w, w, 3, rng, stride=2))
        self.mid_blocks = [ResBlock(prev, prev, E, rng), ResBlock(prev, prev, E, rng)]
        self.up_blocks = []
        self.upsamplers = []
        for i in reversed(range(config.levels)):
            w = widths[i]
            self.up_blocks.append(ResBlock(prev + w, w, E, rng))
            prev = w
            if i > 0:
                self.upsamplers.append(Conv2d(w, w, 3, rng))
        self.norm_out = GroupNorm(norm_groups(prev), prev)
        self.conv_out = Conv2d(prev, 2 * C, 3, rng)

    # -- conditioning -----------------------------------------------------

    def _check_t(self, t: np.ndarray) -> None:
        if np.any(t < 1) or np.any(t > self.config.num_timesteps):
            raise ValueError(f"timestep outside [1, {self.config.num_timesteps}]: {t}")

    def embed_timestep(self, t) -> Tensor:
        t = np.atleast_1d(np.asarray(t))
        self._check_t(t)
        feats = Tensor(sincos_embed(t, self.config.emb_dim), dtype=self.prompt_table.dtype)
        return self.time_mlp(feats)

    def embed_identifier(self, d) -> Tensor:
        idx = np.atleast_1d(np.asarray(d, dtype=np.int64))
        if np.any(idx < 0) or np.any(idx >= self.config.num_identifiers):
            raise ValueError(f"invalid distribution identifier: {d}")
        feats = Tensor(sincos_embed(idx, self.config.emb_dim), dtype=self.prompt_table.dtype)
        return self.ident_mlp(feats)

    def embed_prompt(self, c) -> Tensor:
        ids = np.atleast_1d(np.asarray(c, dtype=np.int64))
        if np.any(ids < 0) or np.any(ids >= self.config.vocab):
            raise ValueError(f"prompt id outside vocabulary [0, {self.config.vocab}): {c}")
        return tc.embedding(self.prompt_table, ids)

    def conditioning(self, t, c, d) -> Tensor:
        return self.embed_timestep(t) + self.embed_identifier(d) + self.embed_prompt(c)

    # -- network ------------------------------------------------------------

    def forward(self, z, t, c, d) -> Tensor:
        """Predict noise for a batch of joint latents.

        ``z`` is N×2C×h×w (a single 2C×h×w latent is promoted to a batch of
        one); ``t``, ``c`` and ``d`` are scalars or length-N arrays.
        """
        z = tc.as_tensor(z)
        if z.data.ndim == 3:
            z = tc.reshape(z, (1,) + z.shape)
        cfg = self.config
        n, ch, h, w = z.shape
        if ch != 2 * cfg.latent_channels:
            raise ShapeError(f"joint latent must have {2 * cfg.latent_channels} channels, got {ch}")
        div = 2 ** (cfg.levels - 1)
        if h % div or w % div:
            raise ShapeError(f"spatial dims {h}x{w} must be divisible by {div}")
        t, c, d = (np.broadcast_to(np.asarray(v), (n,)) for v in (t, c, d))
        emb = tc.silu(self.conditioning(t, c, d))

        x = self.conv_in(z)
        skips = []
        for i, block in enumerate(self.down_blocks):
            x = block(x, emb)
            skips.append(x)
            if i < len(self.downsamplers):
                x = self.downsamplers[i](x)
        for block in self.mid_blocks:
            x = block(x, emb)
        for j, block in enumerate(self.up_blocks):
            x = block(tc.concat([x, skips.pop()], axis=1), emb)
            if j < len(self.upsamplers):
                x = self.upsamplers[j](tc.upsample_nearest2x(x))
        return self.conv_out(tc.silu(self.norm_out(x)))

    def predict(self, z, t, c, d) -> np.ndarray:
        with tc.no_grad():
            return self.forward(z, t, c, d).data

    # -- channel inflation ----------------------------------------------------

    def inflate_from(self, conv_in_weight, conv_in_bias, conv_out_weight, conv_out_bias) -> None:
        """Initialise the 2C-channel input/output convs from C-channel ones.

        Input kernels are copied onto both slots at half weight, so a joint
        latent whose two slots are equal sees the original response. Output
        kernels and biases are copied onto both slots unchanged.
        """
        self.conv_in.weight.data = inflate_input_weight(conv_in_weight).astype(self.conv_in.weight.dtype)
        self.conv_in.bias.data = np.asarray(conv_in_bias, dtype=self.conv_in.bias.dtype).copy()
        w, b = inflate_output(conv_out_weight, conv_out_bias)
        self.conv_out.weight.data = w.astype(self.conv_out.weight.dtype)
        self.conv_out.bias.data = b.astype(self.conv_out.bias.dtype)


def inflate_input_weight(weight) -> np.ndarray:
    weight = np.asarray(weight)
    return np.concatenate([weight * 0.5, weight * 0.5], axis=1)


def inflate_output(weight, bias) -> tuple[np.ndarray, np.ndarray]:
    weight, bias = np.asarray(weight), np.asarray(bias)
    return np.concatenate([weight, weight], axis=0), np.concatenate([bias, bias], axis=0)
