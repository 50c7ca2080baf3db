"""Variance schedule, forward noising, guided reverse sampling, keyframe editing.

The forward process follows the closed form
``x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps``. The reverse step
has two variants:

* ``MARGINAL`` (default): ``x_{t-1} = sqrt(abar_{t-1}) * x0_hat +
  sqrt(1 - abar_{t-1}) * z`` — re-noise the predicted clean sequence to
  the t-1 marginal with fresh noise.
* ``POSTERIOR``: the standard DDPM posterior mean/variance given
  ``x0_hat`` and ``x_t``.

Both variants return ``x0_hat`` exactly at t=1 (the final step draws no
noise), which also makes keyframe inpainting exact: during editing the
predicted clean sequence is overwritten with the constraint values after
every prediction, including the last one.

Guidance blends the conditional and unconditional predictions,
``uncond + s * (cond - uncond)``, where the unconditional pass zeroes
the audio condition but keeps the style vector. The identities at s=0
and s=1 hold bitwise. Scales below 1 trade conditioning accuracy for
output diversity; the default is 0.5.

Sampling is a pure function of (inputs, seed, parameters): sample k of a
run draws its noise from an rng stream keyed by (seed, k).
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import MotionSequence, read_mseq
from .errors import ConfigError, ContractError, DataFormatError, DimensionError
from .net import Condition, Denoiser

GUIDANCE_DEFAULT = 0.5


class StepVariant(enum.Enum):
    """How the reverse step turns a clean-sequence prediction into x_{t-1}."""

    MARGINAL = "marginal"
    POSTERIOR = "posterior"


@dataclass(frozen=True)
class DiffusionSchedule:
    """Per-step noise levels: beta_t, alpha_t = 1 - beta_t, abar_t = prod alpha.

    Arrays are indexed by t-1 for t = 1..T; abar_0 = 1 by convention.
    """

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        for name in ("betas", "alphas", "alpha_bars"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if not (self.betas.ndim == 1 and self.betas.shape == self.alphas.shape
                == self.alpha_bars.shape):
            raise ConfigError("schedule arrays must be 1-D and equal length")
        if self.betas.size < 1:
            raise ConfigError("schedule needs at least one step")
        if np.any(self.betas <= 0) or np.any(self.betas > 0.999):
            raise ConfigError("betas must lie in (0, 0.999]")
        if np.any(np.diff(self.alpha_bars) >= 0) and self.betas.size > 1:
            raise ConfigError("alpha_bar must be strictly decreasing")

    @property
    def num_steps(self) -> int:
        return self.betas.size

    def alpha_bar(self, t) -> np.ndarray:
        """abar_t for t in 0..T (abar_0 = 1), scalar or vector t."""
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.num_steps):
            raise ContractError(f"step {t} outside 0..{self.num_steps}")
        padded = np.concatenate([[1.0], self.alpha_bars])
        return padded[t]

    def q_sample(self, x0: np.ndarray, t, eps: np.ndarray) -> np.ndarray:
        """Noise x0 to step t: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.

        `t` may be a scalar or, for a batch [B, ...], a length-B vector
        (t=0 is the identity by the abar_0 = 1 convention).
        """
        x0 = np.asarray(x0, dtype=np.float64)
        eps = np.asarray(eps, dtype=np.float64)
        if x0.shape != eps.shape:
            raise DimensionError(f"noise shape {eps.shape} != data shape {x0.shape}")
        abar = self.alpha_bar(t)
        if abar.ndim == 1:
            abar = abar.reshape((-1,) + (1,) * (x0.ndim - 1))
        return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps

    def reverse_step(self, x_t: np.ndarray, t: int, x0_hat: np.ndarray,
                     rng: np.random.Generator | None = None,
                     variant: StepVariant = StepVariant.MARGINAL,
                     noise: np.ndarray | None = None) -> np.ndarray:
        """Draw x_{t-1} given the prediction x0_hat (and x_t for POSTERIOR).

        At t=1 both variants return x0_hat exactly and draw no noise.
        `noise` overrides the rng draw (for deterministic checks).
        """
        if not 1 <= t <= self.num_steps:
            raise ContractError(f"step {t} outside 1..{self.num_steps}")
        x0_hat = np.asarray(x0_hat, dtype=np.float64)
        if t == 1:
            return x0_hat.copy()
        if noise is None:
            if rng is None:
                raise ContractError("reverse_step needs an rng or explicit noise for t > 1")
            noise = rng.standard_normal(x0_hat.shape)
        abar_prev = self.alpha_bar(t - 1)
        if variant is StepVariant.MARGINAL:
            return np.sqrt(abar_prev) * x0_hat + np.sqrt(1.0 - abar_prev) * noise
        if variant is StepVariant.POSTERIOR:
            x_t = np.asarray(x_t, dtype=np.float64)
            beta = self.betas[t - 1]
            alpha = self.alphas[t - 1]
            abar = self.alpha_bars[t - 1]
            mean = (np.sqrt(abar_prev) * beta / (1.0 - abar) * x0_hat
                    + np.sqrt(alpha) * (1.0 - abar_prev) / (1.0 - abar) * x_t)
            var = (1.0 - abar_prev) / (1.0 - abar) * beta
            return mean + np.sqrt(var) * noise
        raise ConfigError(f"unknown step variant {variant!r}")


def make_schedule(num_steps: int, kind: str = "cosine") -> DiffusionSchedule:
    """Build a variance schedule.

    cosine: abar_t = f(t)/f(0) with f(t) = cos^2(((t/T + 0.008)/1.008) * pi/2),
    betas clipped to 0.999 and abar recomputed from the clipped values.
    linear: betas evenly spaced over [1e-4, 0.02].
    """
    if num_steps < 1:
        raise ConfigError(f"num_steps must be >= 1, got {num_steps}")
    if kind == "cosine":
        grid = np.arange(num_steps + 1) / num_steps
        f = np.cos((grid + 0.008) / 1.008 * np.pi / 2.0) ** 2
        betas = np.minimum(1.0 - f[1:] / f[:-1], 0.999)
    elif kind == "linear":
        betas = np.linspace(1e-4, 0.02, num_steps)
    else:
        raise ConfigError(f"unknown schedule kind {kind!r}")
    alphas = 1.0 - betas
    return DiffusionSchedule(betas=betas, alphas=alphas, alpha_bars=np.cumprod(alphas))


# ---------------------------------------------------------------------------
# keyframe constraints


@dataclass
class KeyframeConstraint:
    """Frame indices bound to ground-truth displacement rows."""

    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.indices.ndim != 1 or self.values.ndim != 2:
            raise DimensionError("keyframes need 1-D indices and 2-D values")
        if self.indices.size != self.values.shape[0]:
            raise DimensionError(
                f"{self.indices.size} indices for {self.values.shape[0]} value rows")
        if self.indices.size and (np.any(np.diff(self.indices) <= 0) or self.indices[0] < 0):
            raise ContractError("keyframe indices must be non-negative, strictly increasing")

    @property
    def n_keyframes(self) -> int:
        return self.indices.size

    def check_length(self, n_frames: int):
        if self.indices.size and self.indices[-1] >= n_frames:
            raise ContractError(
                f"keyframe index {self.indices[-1]} out of range for {n_frames} frames")

    def apply(self, x: np.ndarray):
        """Overwrite constrained rows of x in place."""
        if self.indices.size:
            x[self.indices] = self.values


def load_keyframes(path) -> KeyframeConstraint:
    """Read a keyframe spec: JSON with n_frames and (index, values_file, row) triples."""
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
        n_frames = int(payload["n_frames"])
        raw = payload["keyframes"]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"{path}: not a valid keyframe file ({exc})") from exc
    cache = {}
    pairs = []
    for item in raw:
        try:
            index, values_file, row = int(item["index"]), item["values_file"], int(item["row"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DataFormatError(f"{path}: malformed keyframe entry {item!r}") from exc
        if values_file not in cache:
            cache[values_file] = read_mseq(path.parent / values_file)
        motion = cache[values_file]
        if not 0 <= row < motion.n_frames:
            raise DataFormatError(
                f"{path}: row {row} outside {values_file} ({motion.n_frames} frames)")
        pairs.append((index, motion.values[row]))
    pairs.sort(key=lambda p: p[0])
    constraint = KeyframeConstraint(
        indices=np.array([p[0] for p in pairs], dtype=np.int64),
        values=np.array([p[1] for p in pairs]) if pairs else np.zeros((0, 0)),
    )
    constraint.check_length(n_frames)
    return constraint


def save_keyframes(path, n_frames: int, indices, values_file: str, rows):
    payload = {
        "n_frames": int(n_frames),
        "keyframes": [
            {"index": int(i), "values_file": values_file, "row": int(r)}
            for i, r in zip(indices, rows)
        ],
    }
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True))


# ---------------------------------------------------------------------------
# guided sampling


@dataclass
class SamplerConfig:
    guidance_scale: float = GUIDANCE_DEFAULT
    seed: int = 0
    variant: StepVariant = StepVariant.MARGINAL
    keyframes: KeyframeConstraint | None = None

    def __post_init__(self):
        if self.guidance_scale < 0:
            raise ConfigError(f"guidance scale must be >= 0, got {self.guidance_scale}")


def guided_blend(uncond, cond, s: float):
    """uncond + s * (cond - uncond); exactly cond at s=1 and uncond at s=0."""
    if s == 1.0:
        return cond
    if s == 0.0:
        return uncond
    return uncond + s * (cond - uncond)


def cfg_predict(model: Denoiser, x_t, t: int, cond: Condition, s: float):
    """Guided clean-sequence prediction for one sequence.

    The unconditional branch zeroes the audio and keeps the style vector.
    """
    conditional = model.predict_x0(x_t, t, cond)
    if s == 1.0:
        return conditional
    unconditional = model.predict_x0(x_t, t, Condition(audio=None, style_id=cond.style_id))
    if s == 0.0:
        return unconditional
    cvals = conditional.values if isinstance(conditional, MotionSequence) else conditional
    uvals = unconditional.values if isinstance(unconditional, MotionSequence) else unconditional
    blended = guided_blend(uvals, cvals, s)
    if isinstance(conditional, MotionSequence):
        return MotionSequence(values=blended, fps=conditional.fps)
    return blended


@dataclass
class SampleSpec:
    """One sequence to draw in a batched sampling run."""

    rng: np.random.Generator
    audio: np.ndarray | None = None        # projected [C, N] or None for zeros
    style_id: str | None = None
    guidance: float = GUIDANCE_DEFAULT
    keyframes: KeyframeConstraint | None = None


def _rng_for_sample(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(index,)))


def sample_batch(model: Denoiser, schedule: DiffusionSchedule, specs, n_frames: int,
                 variant: StepVariant = StepVariant.MARGINAL) -> np.ndarray:
    """Run the reverse process for several SampleSpec items of equal length.

    Returns the stacked clean sequences, [len(specs), n_frames, D*3].
    Each item consumes only its own rng stream, so a batch's k-th output
    is bit-identical to running that spec alone.
    """
    if n_frames < 1:
        raise ContractError(f"n_frames must be >= 1, got {n_frames}")
    cfg = model.config
    nbatch = len(specs)
    d3 = cfg.motion_dim
    style_ids = [spec.style_id for spec in specs]
    scales = np.array([spec.guidance for spec in specs])

    audio = None
    if any(spec.audio is not None for spec in specs):
        audio = np.zeros((nbatch, cfg.latent_channels, n_frames))
        for i, spec in enumerate(specs):
            if spec.audio is None:
                continue
            arr = np.asarray(spec.audio, dtype=np.float64)
            if arr.shape != (cfg.latent_channels, n_frames):
                raise DimensionError(
                    f"spec {i}: projected audio shape {arr.shape} != "
                    f"{(cfg.latent_channels, n_frames)}")
            audio[i] = arr
    for spec in specs:
        if spec.keyframes is not None:
            spec.keyframes.check_length(n_frames)

    need_cond = audio is not None and np.any(scales != 0.0)
    need_uncond = np.any(scales != 1.0) or audio is None

    x = np.stack([spec.rng.standard_normal((n_frames, d3)) for spec in specs])
    for t in range(schedule.num_steps, 0, -1):
        t_vec = np.full(nbatch, t)
        out_c = model._forward_batch(x, t_vec, audio, style_ids).data if need_cond else None
        out_u = model._forward_batch(x, t_vec, None, style_ids).data if need_uncond else None
        if out_c is None:
            x0_hat = out_u.copy()
        elif out_u is None:
            x0_hat = out_c.copy()
        else:
            s3 = scales[:, None, None]
            x0_hat = np.where(s3 == 1.0, out_c,
                              np.where(s3 == 0.0, out_u, out_u + s3 * (out_c - out_u)))
        for i, spec in enumerate(specs):
            if spec.keyframes is not None:
                spec.keyframes.apply(x0_hat[i])
        if t == 1:
            return x0_hat
        # Vectorized reverse step; coefficients are scalar since t is shared.
        z = np.empty_like(x)
        for i, spec in enumerate(specs):
            z[i] = spec.rng.standard_normal((n_frames, d3))
        abar_prev = schedule.alpha_bars[t - 2]
        if variant is StepVariant.MARGINAL:
            x = np.sqrt(abar_prev) * x0_hat + np.sqrt(1.0 - abar_prev) * z
        else:
            beta = schedule.betas[t - 1]
            alpha = schedule.alphas[t - 1]
            abar = schedule.alpha_bars[t - 1]
            x = (np.sqrt(abar_prev) * beta / (1.0 - abar) * x0_hat
                 + np.sqrt(alpha) * (1.0 - abar_prev) / (1.0 - abar) * x
                 + np.sqrt((1.0 - abar_prev) / (1.0 - abar) * beta) * z)
    raise AssertionError("unreachable: schedule has at least one step")


def _cond_spec(cond: Condition, n_frames: int, cfg: SamplerConfig,
               sample_index: int) -> SampleSpec:
    audio = cond.audio_array()
    if audio is not None and audio.shape[-1] != n_frames:
        raise DimensionError(
            f"condition covers {audio.shape[-1]} frames, requested {n_frames}")
    return SampleSpec(rng=_rng_for_sample(cfg.seed, sample_index), audio=audio,
                      style_id=cond.style_id, guidance=cfg.guidance_scale,
                      keyframes=cfg.keyframes)


def sample(model: Denoiser, schedule: DiffusionSchedule, cond: Condition,
           n_frames: int, cfg: SamplerConfig) -> MotionSequence:
    """Draw one sequence from Gaussian noise, deterministically in cfg.seed."""
    return sample_many(model, schedule, cond, n_frames, cfg, 1)[0]


def sample_many(model: Denoiser, schedule: DiffusionSchedule, cond: Condition,
                n_frames: int, cfg: SamplerConfig, n_samples: int):
    """Draw `n_samples` independent sequences; sample k uses rng stream (seed, k)."""
    if n_samples < 1:
        raise ConfigError(f"n_samples must be >= 1, got {n_samples}")
    specs = [_cond_spec(cond, n_frames, cfg, k) for k in range(n_samples)]
    out = sample_batch(model, schedule, specs, n_frames, variant=cfg.variant)
    return [MotionSequence(values=out[k], fps=model.config.fps) for k in range(n_samples)]


def inpaint_sample(model: Denoiser, schedule: DiffusionSchedule, cond: Condition,
                   n_frames: int, keyframes: KeyframeConstraint,
                   cfg: SamplerConfig) -> MotionSequence:
    """Sample with constrained frames: keyframe rows are exact in the output."""
    keyframes.check_length(n_frames)
    return sample(model, schedule, cond, n_frames, replace(cfg, keyframes=keyframes))


def unconditional_sample(model: Denoiser, schedule: DiffusionSchedule,
                         n_frames: int, cfg: SamplerConfig) -> MotionSequence:
    """Sample with zero audio and no style (honors cfg.keyframes if set)."""
    return sample(model, schedule, Condition.zero(), n_frames, cfg)
