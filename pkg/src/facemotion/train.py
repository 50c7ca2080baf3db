"""Losses, optimizer, the training loop, and person-specific fine-tuning.

The objective is the clean-sequence reconstruction error plus a weighted
velocity term::

    loss = mse(x0, x0_hat) + lambda_vel * mse(diff(x0), diff(x0_hat))

where diff takes frame-to-frame differences; both terms are means over
their entries. Each training item draws its own diffusion step t uniform
in 1..T and its own noise; with probability `cond_dropout_p` the
projected audio condition of an item is zeroed so the model also learns
unconditional prediction.

Every iteration derives its randomness from an rng stream keyed by
(seed, iteration), so a run resumed from a checkpoint reproduces the
uninterrupted run bit-exactly.
"""

from __future__ import annotations

import csv
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import DatasetManifest, LoadedSequence, load_split
from .diffusion import DiffusionSchedule, make_schedule
from .errors import ConfigError, ContractError, DataFormatError, NumericalError
from .net import Denoiser, NetworkConfig

OPT_STATE_MAGIC = b"3DOS"
OPT_STATE_VERSION = 1


@dataclass
class TrainConfig:
    iterations: int
    lr: float = 1e-4
    batch_size: int = 64
    lambda_vel: float = 10.0
    cond_dropout_p: float = 0.1
    crop_len: int = 30
    diffusion_steps: int = 500
    schedule: str = "cosine"
    seed: int = 0
    checkpoint_every: int = 1000

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lambda_vel < 0:
            raise ConfigError(f"lambda_vel must be >= 0, got {self.lambda_vel}")
        if not 0.0 <= self.cond_dropout_p <= 1.0:
            raise ConfigError(f"cond_dropout_p must be in [0, 1], got {self.cond_dropout_p}")
        if self.crop_len < 2:
            raise ConfigError(f"crop_len must be >= 2, got {self.crop_len}")
        if self.diffusion_steps < 1:
            raise ConfigError(f"diffusion_steps must be >= 1, got {self.diffusion_steps}")
        if self.checkpoint_every < 1:
            raise ConfigError(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")


# ---------------------------------------------------------------------------
# losses


def l_simple(x0, x0_hat) -> Tensor:
    """Mean squared reconstruction error over all entries."""
    return ad.mse(x0_hat, ad.as_tensor(x0))


def l_vel(x0, x0_hat) -> Tensor:
    """Mean squared error between frame-difference sequences.

    Frames are the second-to-last axis; sequences with fewer than two
    frames contribute zero (with a warning).
    """
    x0_hat = ad.as_tensor(x0_hat)
    x0 = np.asarray(x0, dtype=np.float64)
    n = x0.shape[-2]
    if n < 2:
        warnings.warn("velocity loss needs >= 2 frames; returning 0", stacklevel=2)
        return ad.as_tensor(np.zeros(()))
    d_true = np.diff(x0, axis=-2)
    axis = x0_hat.ndim - 2
    d_pred = ad.sub(ad.narrow(x0_hat, axis, 1, n - 1), ad.narrow(x0_hat, axis, 0, n - 1))
    return ad.mse(d_pred, ad.as_tensor(d_true))


def l_total(x0, x0_hat, lambda_vel: float = 10.0) -> Tensor:
    """l_simple + lambda_vel * l_vel."""
    if lambda_vel < 0:
        raise ConfigError(f"lambda_vel must be >= 0, got {lambda_vel}")
    return ad.add(l_simple(x0, x0_hat), ad.mul(l_vel(x0, x0_hat), lambda_vel))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """First/second moment accumulators, keyed like the parameter dict."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: dict) -> "AdamState":
        return cls(m={n: np.zeros_like(p.data) for n, p in params.items()},
                   v={n: np.zeros_like(p.data) for n, p in params.items()})

    def ensure(self, params: dict):
        for name, p in params.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)


def adam_step(params: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One Adam update with bias correction; missing gradients count as zero."""
    state.ensure(params)
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for name in sorted(params):
        p = params[name]
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        elif not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name!r} "
                                 f"at optimizer step {state.step}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def save_adam_state(path, state: AdamState, iteration: int):
    names = sorted(state.m)
    with open(path, "wb") as f:
        f.write(OPT_STATE_MAGIC)
        f.write(struct.pack("<IQQ", OPT_STATE_VERSION, state.step, iteration))
        f.write(struct.pack("<I", len(names)))
        for name in names:
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            arr = state.m[name]
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(state.v[name], dtype="<f8").tobytes())


def load_adam_state(path):
    """Returns (AdamState, iteration)."""
    from .data import _read_exact
    path = Path(path)
    state = AdamState()
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, path, "magic")
        if magic != OPT_STATE_MAGIC:
            raise DataFormatError(f"{path}: bad magic {magic!r}, expected {OPT_STATE_MAGIC!r}")
        version, step, iteration = struct.unpack("<IQQ", _read_exact(f, 20, path, "header"))
        if version != OPT_STATE_VERSION:
            raise DataFormatError(f"{path}: unsupported optimizer-state version {version}")
        state.step = int(step)
        (count,) = struct.unpack("<I", _read_exact(f, 4, path, "entry count"))
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(f, 4, path, "name length"))
            name = _read_exact(f, name_len, path, "name").decode("utf-8")
            (ndim,) = struct.unpack("<I", _read_exact(f, 4, path, "rank"))
            shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim, path, "shape"))
            size = int(np.prod(shape)) if ndim else 1
            m = np.frombuffer(_read_exact(f, size * 8, path, "m"), dtype="<f8")
            v = np.frombuffer(_read_exact(f, size * 8, path, "v"), dtype="<f8")
            state.m[name] = m.astype(np.float64).reshape(shape)
            state.v[name] = v.astype(np.float64).reshape(shape)
    return state, int(iteration)


# ---------------------------------------------------------------------------
# training steps


@dataclass
class TrainStepStats:
    l_simple: float
    l_vel: float
    l_total: float
    n_cond_dropped: int


def train_step(model: Denoiser, schedule: DiffusionSchedule, batch,
               opt_state: AdamState, config: TrainConfig,
               rng: np.random.Generator) -> TrainStepStats:
    """One optimization step on a batch of (motion, features, identity) crops.

    Draw order from `rng`: per-item diffusion steps, noise, then the
    condition-dropout mask.
    """
    if not batch:
        raise ContractError("empty batch")
    x0 = np.stack([item[0] for item in batch])
    feats = np.stack([item[1] for item in batch])
    ids = [item[2] for item in batch]
    nbatch = x0.shape[0]

    t = rng.integers(1, schedule.num_steps + 1, size=nbatch)
    eps = rng.standard_normal(x0.shape)
    x_t = schedule.q_sample(x0, t, eps)
    keep = (rng.random(nbatch) >= config.cond_dropout_p).astype(np.float64)
    n_dropped = int(nbatch - keep.sum())

    model.zero_grad()
    with Tape():
        projected = ad.linear(feats, model.params["aproj.w"], model.params["aproj.b"])
        audio = ad.mul(ad.swap_last2(projected), keep.reshape(nbatch, 1, 1))
        pred = model._forward_batch(x_t, t, audio, ids)
        simple = l_simple(x0, pred)
        vel = l_vel(x0, pred)
        loss = ad.add(simple, ad.mul(vel, config.lambda_vel))
        if not np.isfinite(loss.data):
            raise NumericalError(f"non-finite training loss at optimizer step "
                                 f"{opt_state.step + 1}")
        ad.backward(loss)
    adam_step(model.params, opt_state, config.lr)
    return TrainStepStats(l_simple=simple.item(), l_vel=vel.item(),
                          l_total=loss.item(), n_cond_dropped=n_dropped)


def _iteration_rng(seed: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                        spawn_key=(iteration,)))


def _make_batch(sequences, config: TrainConfig, rng: np.random.Generator):
    """Pick batch members and crop windows; one rng stream, fixed draw order."""
    idx = rng.integers(0, len(sequences), size=config.batch_size)
    batch = []
    for i in idx:
        seq = sequences[i]
        n = seq.motion.shape[0]
        start = int(rng.integers(0, n - config.crop_len + 1))
        stop = start + config.crop_len
        batch.append((seq.motion[start:stop], seq.features[start:stop], seq.identity))
    return batch


def _usable(sequences, crop_len: int):
    out = []
    for seq in sequences:
        if seq.motion.shape[0] < crop_len:
            warnings.warn(f"skipping a {seq.motion.shape[0]}-frame sequence shorter "
                          f"than crop length {crop_len}", stacklevel=3)
            continue
        out.append(seq)
    return out


def _run_training(model: Denoiser, sequences, config: TrainConfig, out_dir=None,
                  opt_state: AdamState | None = None, start_iteration: int = 0,
                  log=None):
    """Iterate train_step from `start_iteration` to config.iterations."""
    sequences = _usable(sequences, config.crop_len)
    if not sequences:
        raise ConfigError("no usable training sequences (all shorter than crop length?)")
    schedule = make_schedule(config.diffusion_steps, config.schedule)
    if opt_state is None:
        opt_state = AdamState.for_params(model.params)
    opt_state.ensure(model.params)

    ckpt_dir = None
    loss_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        ckpt_dir = out_dir / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        loss_path = out_dir / "loss_log.csv"
        if start_iteration == 0 or not loss_path.exists():
            with open(loss_path, "w", newline="") as f:
                csv.writer(f).writerow(["iteration", "l_simple", "l_vel", "l_total"])

    def save(tag: str, iteration: int):
        if ckpt_dir is None:
            return
        model.save(ckpt_dir / f"{tag}.ckpt")
        save_adam_state(ckpt_dir / f"{tag}.opt", opt_state, iteration)

    history = []
    loss_rows = []
    for iteration in range(start_iteration, config.iterations):
        rng = _iteration_rng(config.seed, iteration)
        batch = _make_batch(sequences, config, rng)
        stats = train_step(model, schedule, batch, opt_state, config, rng)
        history.append(stats)
        loss_rows.append([iteration, repr(stats.l_simple), repr(stats.l_vel),
                          repr(stats.l_total)])
        done = iteration + 1
        at_checkpoint = done % config.checkpoint_every == 0
        if at_checkpoint and done < config.iterations:
            save(f"step_{done:07d}", done)
        if loss_path is not None and (at_checkpoint or done % 200 == 0
                                      or done == config.iterations):
            with open(loss_path, "a", newline="") as f:
                csv.writer(f).writerows(loss_rows)
            loss_rows.clear()
        if log is not None and (done % config.checkpoint_every == 0
                                or done == config.iterations):
            log(done, stats)
    save("final", config.iterations)
    return history


def train_loop(manifest: DatasetManifest, config: TrainConfig,
               net_config: NetworkConfig | None = None, out_dir=None,
               resume_from=None, log=None) -> Denoiser:
    """Train a fresh model on the manifest's train split (or resume one).

    Writes checkpoints and a loss CSV under `out_dir` when given.
    Deterministic in (seed, config, data): resuming from a saved
    checkpoint/optimizer pair reproduces the uninterrupted run bit-exactly.
    """
    sequences = load_split(manifest, "train")
    if not sequences:
        raise ConfigError("manifest has an empty train split")
    if resume_from is not None:
        model = Denoiser.load(resume_from)
        opt_state, start_iteration = load_adam_state(Path(resume_from).with_suffix(".opt"))
    else:
        if net_config is None:
            net_config = NetworkConfig(num_vertices=manifest.num_vertices,
                                       audio_channels_in=manifest.feature_channels,
                                       fps=manifest.fps)
        identities = manifest.identities("train")
        model = Denoiser.init(net_config, identities, seed=config.seed)
        opt_state, start_iteration = None, 0
    _run_training(model, sequences, config, out_dir=out_dir, opt_state=opt_state,
                  start_iteration=start_iteration, log=log)
    return model


def style_split(entries, train_frac: float = 0.45, val_frac: float = 0.05):
    """Split one identity's sequences for style adaptation.

    The default fractions give the 18/2/20 train/val/test split at 40
    sequences and scale down for smaller collections (at least one
    training and one test sequence).
    """
    n = len(entries)
    if n < 2:
        raise ConfigError(f"style adaptation needs at least 2 sequences, got {n}")
    train = max(1, round(train_frac * n))
    val = min(round(val_frac * n), n - train - 1)
    return entries[:train], entries[train:train + val], entries[train + val:]


def finetune_personal(base: Denoiser, target_sequences, identity: str,
                      config: TrainConfig, out_dir=None, log=None) -> Denoiser:
    """Adapt a trained model to one subject's reference sequences.

    The target identity gets a fresh zero style vector and all parameters
    stay trainable; the objective is unchanged. `target_sequences` is a
    list of LoadedSequence for the target identity.
    """
    if not target_sequences:
        raise ConfigError("fine-tuning requires at least one target sequence")
    model = base.copy()
    model.add_style(identity)
    sequences = [
        LoadedSequence(identity=identity, motion=s.motion, features=s.features, fps=s.fps)
        for s in target_sequences
    ]
    _run_training(model, sequences, config, out_dir=out_dir, log=log)
    return model
