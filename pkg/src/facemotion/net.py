"""The audio- and style-conditioned convolutional denoiser.

The network predicts the clean displacement sequence from its noised
version. Pipeline: a single fully connected motion encoder lifts each
frame to the latent width, a projected sinusoidal embedding of the
diffusion step is added to every frame, an hourglass of strided 1D
convolutions reduces the temporal dimension and a linear-upsampling
convolution block restores it. After every convolution block a condition
block concatenates the features with the (resolution-matched) audio
channels and applies a dimension-preserving convolution. A per-identity
style vector is added before the fully connected motion decoder.

Everything is fully convolutional in time: a model trained on short
crops runs on sequences of any length. Inputs whose length is not a
multiple of the total stride are replicate-padded internally and cropped
back after decoding.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import AudioFeatureSequence, MotionSequence
from .errors import ConfigError, DataFormatError, DimensionError, SequenceTooShortError

CHECKPOINT_MAGIC = b"3DFP"
CHECKPOINT_VERSION = 1
STYLE_PREFIX = "style."


@dataclass(frozen=True)
class NetworkConfig:
    num_vertices: int
    latent_channels: int = 64
    audio_channels_in: int = 768
    num_down_blocks: int = 2
    temporal_stride: int = 2
    kernel_size: int = 3
    fps: float = 30.0

    def __post_init__(self):
        if self.num_vertices < 1:
            raise ConfigError(f"num_vertices must be >= 1, got {self.num_vertices}")
        if self.latent_channels < 2 or self.latent_channels % 2 != 0:
            raise ConfigError(
                f"latent_channels must be even and >= 2, got {self.latent_channels}")
        if self.audio_channels_in < 1:
            raise ConfigError(f"audio_channels_in must be >= 1, got {self.audio_channels_in}")
        if self.num_down_blocks < 1:
            raise ConfigError(f"num_down_blocks must be >= 1, got {self.num_down_blocks}")
        if self.temporal_stride < 1:
            raise ConfigError(f"temporal_stride must be >= 1, got {self.temporal_stride}")
        if self.kernel_size < 1 or self.kernel_size % 2 != 1:
            raise ConfigError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.fps <= 0:
            raise ConfigError(f"fps must be positive, got {self.fps}")

    @property
    def motion_dim(self) -> int:
        return self.num_vertices * 3

    @property
    def pad_multiple(self) -> int:
        return self.temporal_stride ** self.num_down_blocks

    @property
    def conv_pad(self) -> int:
        return (self.kernel_size - 1) // 2


def sinusoidal_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal position code for diffusion steps, interleaved sin/cos.

    Frequencies are geometric with base 10000; `t` may be a scalar or a
    vector (giving a [len(t), dim] matrix). This is the pre-projection
    code: at t=0 the sin entries are 0 and the cos entries are 1.
    """
    if dim < 2 or dim % 2 != 0:
        raise ConfigError(f"embedding dim must be even and >= 2, got {dim}")
    half = dim // 2
    freqs = np.power(10000.0, -np.arange(half) / half)
    t_arr = np.asarray(t, dtype=np.float64)
    ang = np.multiply.outer(t_arr, freqs)
    out = np.empty(ang.shape[:-1] + (dim,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


@dataclass
class Condition:
    """Conditioning inputs: projected audio channels and a speaker identity.

    `audio` is the projected [latent_channels, N] matrix (channels first)
    or None, which stands for an all-zeros matrix of that shape — the
    unconditional marker. `style_id` selects a style vector; None (or an
    unknown id) means the zero style vector.
    """

    audio: object = None
    style_id: str | None = None

    @classmethod
    def zero(cls) -> "Condition":
        return cls(audio=None, style_id=None)

    def audio_array(self) -> np.ndarray | None:
        if self.audio is None:
            return None
        return self.audio.data if isinstance(self.audio, Tensor) else np.asarray(self.audio)


def _init_params(config: NetworkConfig, rng: np.random.Generator) -> dict:
    c = config.latent_channels
    k = config.kernel_size
    d3 = config.motion_dim

    def w(shape, fan_in):
        return ad.parameter(rng.standard_normal(shape) / np.sqrt(fan_in))

    params = {
        "enc.w": w((d3, c), d3),
        "enc.b": ad.parameter(np.zeros(c)),
        "tproj.w": w((c, c), c),
        "tproj.b": ad.parameter(np.zeros(c)),
        "aproj.w": w((config.audio_channels_in, c), config.audio_channels_in),
        "aproj.b": ad.parameter(np.zeros(c)),
        "up.k": w((c, c, k), c * k),
        "dec.w": w((c, d3), c),
        "dec.b": ad.parameter(np.zeros(d3)),
    }
    for lvl in range(config.num_down_blocks):
        params[f"down{lvl}.k"] = w((c, c, k), c * k)
        params[f"cond{lvl}.k"] = w((c, 2 * c, k), 2 * c * k)
    params[f"cond{config.num_down_blocks}.k"] = w((c, 2 * c, k), 2 * c * k)
    return params


class Denoiser:
    """Clean-sequence predictor with learned audio projection and style table."""

    def __init__(self, config: NetworkConfig, params: dict):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: NetworkConfig, identity_ids=(), seed: int = 0) -> "Denoiser":
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(17,)))
        params = _init_params(config, rng)
        model = cls(config, params)
        for identity in identity_ids:
            model.add_style(identity)
        return model

    # -- parameters ---------------------------------------------------------

    def parameters(self) -> dict:
        return self.params

    def param_names(self):
        return sorted(self.params)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def style_ids(self):
        return sorted(n[len(STYLE_PREFIX):] for n in self.params if n.startswith(STYLE_PREFIX))

    def add_style(self, identity: str) -> Tensor:
        """Register a fresh all-zeros style vector for `identity` (idempotent)."""
        key = STYLE_PREFIX + str(identity)
        if key not in self.params:
            self.params[key] = ad.parameter(np.zeros(self.config.latent_channels))
        return self.params[key]

    def style_vector(self, identity) -> Tensor:
        """Style row for an identity; unknown or None yields the zero vector."""
        key = STYLE_PREFIX + str(identity)
        if identity is None or key not in self.params:
            return ad.as_tensor(np.zeros(self.config.latent_channels))
        return self.params[key]

    def copy(self) -> "Denoiser":
        params = {n: ad.parameter(p.data.copy()) for n, p in self.params.items()}
        return Denoiser(self.config, params)

    # -- building blocks ----------------------------------------------------

    def timestep_embedding(self, t) -> Tensor:
        """Projected sinusoidal embedding of the diffusion step; [dim] or [B, dim]."""
        code = sinusoidal_embedding(t, self.config.latent_channels)
        return ad.linear(code, self.params["tproj.w"], self.params["tproj.b"])

    def audio_project(self, features) -> Tensor:
        """Project raw per-frame features [N, F] to [latent_channels, N]."""
        if isinstance(features, AudioFeatureSequence):
            features = features.values
        feats = ad.as_tensor(features)
        if feats.ndim != 2:
            raise DimensionError(f"features must be [N, F], got shape {feats.shape}")
        if feats.shape[1] != self.config.audio_channels_in:
            raise DimensionError(
                f"feature channels {feats.shape[1]} != "
                f"configured {self.config.audio_channels_in}")
        return ad.swap_last2(ad.linear(feats, self.params["aproj.w"], self.params["aproj.b"]))

    def condition_block(self, level: int, features, audio) -> Tensor:
        """Concatenate features with audio and apply a dimension-preserving conv."""
        features, audio = ad.as_tensor(features), ad.as_tensor(audio)
        merged = ad.concat_channels(features, audio)
        return ad.silu(ad.conv1d(merged, self.params[f"cond{level}.k"],
                                 stride=1, pad=self.config.conv_pad))

    # -- forward ------------------------------------------------------------

    def _forward_batch(self, x, t, audio, style_ids) -> Tensor:
        """Denoise a batch.

        x: [B, N, D*3] array or tensor; t: length-B int vector;
        audio: [B, C, N] tensor/array or None (zeros); style_ids: length-B
        sequence of identity keys (None entries use the zero vector).
        Returns the predicted clean batch, [B, N, D*3].
        """
        cfg = self.config
        x = ad.as_tensor(x)
        if x.ndim != 3 or x.shape[2] != cfg.motion_dim:
            raise DimensionError(
                f"expected [B, N, {cfg.motion_dim}] input, got shape {x.shape}")
        nbatch, n = x.shape[0], x.shape[1]
        if n < 1:
            raise SequenceTooShortError("empty motion sequence")
        if len(style_ids) != nbatch:
            raise DimensionError(f"{len(style_ids)} style ids for batch of {nbatch}")
        n_pad = -n % cfg.pad_multiple

        h = ad.linear(x, self.params["enc.w"], self.params["enc.b"])
        temb = self.timestep_embedding(np.asarray(t, dtype=np.float64).reshape(nbatch))
        h = ad.add(h, ad.reshape(temb, (nbatch, 1, cfg.latent_channels)))
        h = ad.swap_last2(h)
        h = ad.pad_replicate_last(h, 0, n_pad)

        if audio is None:
            audio = ad.as_tensor(np.zeros((nbatch, cfg.latent_channels, n)))
        else:
            audio = ad.as_tensor(audio)
            if audio.shape != (nbatch, cfg.latent_channels, n):
                raise DimensionError(
                    f"audio condition shape {audio.shape} != "
                    f"{(nbatch, cfg.latent_channels, n)}")
        audio_full = ad.pad_replicate_last(audio, 0, n_pad)

        level_audio = audio_full
        for lvl in range(cfg.num_down_blocks):
            h = ad.silu(ad.conv1d(h, self.params[f"down{lvl}.k"],
                                  stride=cfg.temporal_stride, pad=cfg.conv_pad))
            level_audio = ad.avg_pool1d(level_audio, cfg.temporal_stride)
            h = self.condition_block(lvl, h, level_audio)

        h = ad.upsample_linear(h, cfg.pad_multiple)
        h = ad.silu(ad.conv1d(h, self.params["up.k"], stride=1, pad=cfg.conv_pad))
        h = self.condition_block(cfg.num_down_blocks, h, audio_full)

        style = ad.stack_rows([self.style_vector(s) for s in style_ids])
        h = ad.add(h, ad.reshape(style, (nbatch, cfg.latent_channels, 1)))

        h = ad.swap_last2(h)
        y = ad.linear(h, self.params["dec.w"], self.params["dec.b"])
        if n_pad:
            y = ad.narrow(y, 1, 0, n)
        return y

    def predict_x0(self, motion, t: int, cond: Condition):
        """Predict the clean sequence for one noised sequence.

        Accepts a MotionSequence or an [N, D*3] array and returns the
        same kind. `cond.audio` must already be projected ([C, N]).
        """
        is_seq = isinstance(motion, MotionSequence)
        values = motion.values if is_seq else np.asarray(motion, dtype=np.float64)
        audio = cond.audio_array()
        if audio is not None:
            audio = audio[None]
        out = self._forward_batch(values[None], np.array([t]), audio, [cond.style_id])
        out_values = out.data[0]
        if is_seq:
            return MotionSequence(values=out_values, fps=motion.fps)
        return out_values

    # -- serialization ------------------------------------------------------

    def save(self, path):
        """Write a checkpoint; round-trips bit-exactly."""
        cfg = self.config
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<I", CHECKPOINT_VERSION))
            f.write(struct.pack("<IIIIII", cfg.num_vertices, cfg.latent_channels,
                                cfg.audio_channels_in, cfg.num_down_blocks,
                                cfg.temporal_stride, cfg.kernel_size))
            f.write(struct.pack("<d", cfg.fps))
            f.write(struct.pack("<I", len(self.params)))
            for name in self.param_names():
                arr = self.params[name].data
                encoded = name.encode("utf-8")
                f.write(struct.pack("<I", len(encoded)))
                f.write(encoded)
                f.write(struct.pack("<I", arr.ndim))
                f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "Denoiser":
        path = Path(path)
        from .data import _read_exact
        with open(path, "rb") as f:
            magic = _read_exact(f, 4, path, "magic")
            if magic != CHECKPOINT_MAGIC:
                raise DataFormatError(
                    f"{path}: bad magic {magic!r} at byte 0, expected {CHECKPOINT_MAGIC!r}")
            (version,) = struct.unpack("<I", _read_exact(f, 4, path, "version"))
            if version != CHECKPOINT_VERSION:
                raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
            fields = struct.unpack("<IIIIII", _read_exact(f, 24, path, "config"))
            (fps,) = struct.unpack("<d", _read_exact(f, 8, path, "fps"))
            config = NetworkConfig(num_vertices=fields[0], latent_channels=fields[1],
                                   audio_channels_in=fields[2], num_down_blocks=fields[3],
                                   temporal_stride=fields[4], kernel_size=fields[5],
                                   fps=fps)
            (count,) = struct.unpack("<I", _read_exact(f, 4, path, "parameter count"))
            params = {}
            for _ in range(count):
                (name_len,) = struct.unpack("<I", _read_exact(f, 4, path, "name length"))
                name = _read_exact(f, name_len, path, "name").decode("utf-8")
                (ndim,) = struct.unpack("<I", _read_exact(f, 4, path, "rank"))
                shape = struct.unpack(f"<{ndim}I",
                                      _read_exact(f, 4 * ndim, path, "shape"))
                size = int(np.prod(shape)) if ndim else 1
                raw = _read_exact(f, size * 8, path, f"parameter {name}")
                arr = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
                params[name] = ad.parameter(arr)
            extra = f.read(1)
            if extra:
                raise DataFormatError(f"{path}: trailing bytes at byte {f.tell() - 1}")
        return cls(config, params)
