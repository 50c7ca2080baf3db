"""Sequence containers, binary file formats, resampling, and the synthetic dataset.

Motion is stored as per-frame vertex displacements relative to a template
mesh: an [N, D*3] float64 matrix for N frames and D vertices. Audio
features are an [M, F] matrix at their own frame rate and get linearly
resampled to the motion frame rate before use.

File formats (all little-endian, payload as raw float64 so round-trips
are bit-exact):

  MSEQ  magic "MSEQ", u32 version=1, u32 N, u32 D, f64 fps, N*D*3 f64
  AFEA  magic "AFEA", u32 version=1, u32 M, u32 F, f64 rate, M*F f64

The synthetic generator replaces a motion-capture corpus at desk scale:
per identity it draws a gain vector g over the D*3 coordinates, features
are band-limited random signals, and displacements are
``g * (features @ W.T)`` smoothed by a centered 3-frame moving average
plus small observation noise, where W is one fixed seeded mixing matrix
that concentrates energy on the lip vertices. Everything is linear in
the features (before noise), so expected outputs have a closed form.
"""

from __future__ import annotations

import json
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    ContractError,
    DataFormatError,
    DimensionError,
    NumericalError,
    SequenceTooShortError,
)

FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")


def _check_finite(values: np.ndarray, what: str):
    if not np.all(np.isfinite(values)):
        raise NumericalError(f"{what} contains non-finite values")


@dataclass
class MotionSequence:
    """N frames of vertex displacements, one row of D*3 values per frame."""

    values: np.ndarray
    fps: float = 30.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DimensionError(f"motion values must be 2-D, got shape {self.values.shape}")
        if self.values.shape[0] < 1:
            raise SequenceTooShortError("motion sequence has no frames")
        if self.values.shape[1] % 3 != 0 or self.values.shape[1] == 0:
            raise DimensionError(
                f"motion row width {self.values.shape[1]} is not a positive multiple of 3")
        if self.fps <= 0:
            raise ContractError(f"fps must be positive, got {self.fps}")
        _check_finite(self.values, "motion sequence")

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_vertices(self) -> int:
        return self.values.shape[1] // 3


@dataclass
class AudioFeatureSequence:
    """M frames of F-channel audio features at `rate` frames per second."""

    values: np.ndarray
    rate: float = 30.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DimensionError(f"feature values must be 2-D, got shape {self.values.shape}")
        if self.values.shape[0] < 1:
            raise SequenceTooShortError("feature sequence has no frames")
        if self.rate <= 0:
            raise ContractError(f"rate must be positive, got {self.rate}")
        _check_finite(self.values, "feature sequence")

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]


@dataclass
class TemplateMesh:
    """Rest geometry plus the vertex subset used by the lip metrics."""

    rest_positions: np.ndarray
    lip_indices: np.ndarray

    def __post_init__(self):
        self.rest_positions = np.asarray(self.rest_positions, dtype=np.float64)
        if self.rest_positions.ndim != 2 or self.rest_positions.shape[1] != 3:
            raise DimensionError("rest positions must be [D, 3]")
        self.lip_indices = np.unique(np.asarray(self.lip_indices, dtype=np.int64))
        if self.lip_indices.size == 0:
            raise ContractError("lip_indices must be non-empty")
        if self.lip_indices.min() < 0 or self.lip_indices.max() >= self.n_vertices:
            raise ContractError("lip_indices out of range")

    @property
    def n_vertices(self) -> int:
        return self.rest_positions.shape[0]

    def save(self, path):
        payload = {
            "version": FORMAT_VERSION,
            "lip_indices": [int(i) for i in self.lip_indices],
            "rest_positions": [[float(v) for v in row] for row in self.rest_positions],
        }
        Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "TemplateMesh":
        try:
            payload = json.loads(Path(path).read_text())
            return cls(np.array(payload["rest_positions"]), np.array(payload["lip_indices"]))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DataFormatError(f"{path}: not a valid template file ({exc})") from exc


@dataclass
class ManifestEntry:
    identity: str
    split: str
    motion: str
    features: str


@dataclass
class DatasetManifest:
    """Index of a dataset directory: one motion/feature file pair per entry."""

    fps: float
    num_vertices: int
    feature_channels: int
    seed: int
    template_file: str
    entries: list = field(default_factory=list)
    root: Path = field(default_factory=Path)

    def for_split(self, split: str):
        if split not in SPLITS:
            raise ConfigError(f"unknown split {split!r}, expected one of {SPLITS}")
        return [e for e in self.entries if e.split == split]

    def identities(self, split=None):
        seen = []
        for e in self.entries:
            if (split is None or e.split == split) and e.identity not in seen:
                seen.append(e.identity)
        return seen

    def template(self) -> TemplateMesh:
        return TemplateMesh.load(self.root / self.template_file)

    def save(self, path):
        path = Path(path)
        payload = {
            "version": FORMAT_VERSION,
            "fps": self.fps,
            "num_vertices": self.num_vertices,
            "feature_channels": self.feature_channels,
            "seed": self.seed,
            "template_file": self.template_file,
            "entries": [
                {"identity": e.identity, "split": e.split,
                 "motion": e.motion, "features": e.features}
                for e in self.entries
            ],
        }
        path.write_text(json.dumps(payload, indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            payload = json.loads(path.read_text())
            entries = [ManifestEntry(**e) for e in payload["entries"]]
            return cls(
                fps=float(payload["fps"]),
                num_vertices=int(payload["num_vertices"]),
                feature_channels=int(payload["feature_channels"]),
                seed=int(payload["seed"]),
                template_file=payload["template_file"],
                entries=entries,
                root=path.parent,
            )
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DataFormatError(f"{path}: not a valid manifest ({exc})") from exc


# ---------------------------------------------------------------------------
# binary formats


def _read_exact(f, n: int, path, what: str) -> bytes:
    offset = f.tell()
    buf = f.read(n)
    if len(buf) != n:
        raise DataFormatError(
            f"{path}: truncated while reading {what} at byte {offset} "
            f"(wanted {n} bytes, got {len(buf)})")
    return buf


def _write_container(path, magic: bytes, dims: tuple, rate: float, values: np.ndarray):
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<III", FORMAT_VERSION, *dims))
        f.write(struct.pack("<d", rate))
        f.write(np.ascontiguousarray(values, dtype="<f8").tobytes())


def _read_container(path, magic: bytes, row_width):
    """Parse magic/version/dims/rate/payload; `row_width` maps d1 to payload columns."""
    path = Path(path)
    with open(path, "rb") as f:
        got = _read_exact(f, 4, path, "magic")
        if got != magic:
            raise DataFormatError(
                f"{path}: bad magic {got!r} at byte 0, expected {magic!r}")
        version, d0, d1 = struct.unpack("<III", _read_exact(f, 12, path, "header"))
        if version != FORMAT_VERSION:
            raise DataFormatError(f"{path}: unsupported version {version} at byte 4")
        (rate,) = struct.unpack("<d", _read_exact(f, 8, path, "rate field"))
        if d0 == 0:
            raise SequenceTooShortError(f"{path}: file holds an empty sequence")
        width = row_width(d1)
        payload = _read_exact(f, d0 * width * 8, path, "payload")
        extra = f.read(1)
        if extra:
            raise DataFormatError(f"{path}: trailing bytes at byte {f.tell() - 1}")
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(d0, width)
    return rate, values


def write_mseq(path, motion: MotionSequence):
    # Header stores D (vertex count); rows hold D*3 values.
    _write_container(path, b"MSEQ",
                     (motion.n_frames, motion.n_vertices), motion.fps, motion.values)


def read_mseq(path) -> MotionSequence:
    fps, values = _read_container(path, b"MSEQ", lambda d: d * 3)
    return MotionSequence(values=values, fps=fps)


def write_afea(path, features: AudioFeatureSequence):
    _write_container(path, b"AFEA",
                     (features.n_frames, features.n_channels), features.rate, features.values)


def read_afea(path) -> AudioFeatureSequence:
    rate, values = _read_container(path, b"AFEA", lambda f: f)
    return AudioFeatureSequence(values=values, rate=rate)


# ---------------------------------------------------------------------------
# resampling and cropping


def resample_features(features: AudioFeatureSequence, target_fps: float) -> AudioFeatureSequence:
    """Per-channel linear interpolation onto the target frame rate.

    Output length is round(M * target_fps / rate); sample positions past
    the last input frame clamp to it.
    """
    if target_fps <= 0:
        raise ContractError(f"target_fps must be positive, got {target_fps}")
    if features.rate == target_fps:
        return AudioFeatureSequence(values=features.values.copy(), rate=features.rate)
    m = features.n_frames
    if m < 2:
        raise SequenceTooShortError(
            f"cannot resample {m} frame(s) across rates {features.rate} -> {target_fps}")
    m_out = int(round(m * target_fps / features.rate))
    if m_out < 1:
        raise SequenceTooShortError(f"resampling would produce {m_out} frames")
    pos = np.arange(m_out) * (features.rate / target_fps)
    pos = np.clip(pos, 0.0, m - 1)
    i0 = np.minimum(pos.astype(np.int64), m - 2)
    w = (pos - i0)[:, None]
    out = features.values[i0] * (1.0 - w) + features.values[i0 + 1] * w
    return AudioFeatureSequence(values=out, rate=target_fps)


def random_crop(motion: MotionSequence, features: AudioFeatureSequence,
                length: int, rng: np.random.Generator):
    """Crop the same frame window [i, i+length) from both sequences."""
    n = motion.n_frames
    if features.n_frames != n:
        raise DimensionError(
            f"motion ({n} frames) and features ({features.n_frames}) are not frame-aligned")
    if length < 1:
        raise ContractError(f"crop length must be >= 1, got {length}")
    if n < length:
        raise SequenceTooShortError(f"sequence of {n} frames shorter than crop length {length}")
    start = int(rng.integers(0, n - length + 1))
    return (
        MotionSequence(values=motion.values[start:start + length].copy(), fps=motion.fps),
        AudioFeatureSequence(values=features.values[start:start + length].copy(),
                             rate=features.rate),
    )


# ---------------------------------------------------------------------------
# synthetic dataset


#: Relative weight of non-lip rows in the mixing matrix.
NONLIP_MIX_SCALE = 0.25
#: Log-std of the per-identity multiplicative gains. Keeps identities
#: distinct enough for personalization to matter while the shared
#: audio-to-motion structure dominates.
IDENTITY_GAIN_SIGMA = 0.2
OBSERVATION_NOISE = 1e-3


def lip_vertex_count(n_vertices: int) -> int:
    return math.ceil(n_vertices / 4)


def _rng_for(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))


def mixing_matrix(n_vertices: int, n_channels: int, seed: int) -> np.ndarray:
    """Fixed seeded feature-to-displacement map [D*3, F], lip rows weighted up."""
    rng = _rng_for(seed, 0)
    w = rng.standard_normal((n_vertices * 3, n_channels)) / np.sqrt(n_channels)
    scale = np.full(n_vertices, NONLIP_MIX_SCALE)
    scale[:lip_vertex_count(n_vertices)] = 1.0
    return w * np.repeat(scale, 3)[:, None]


def identity_gain(n_vertices: int, seed: int, identity_index: int) -> np.ndarray:
    """Per-coordinate multiplicative gain vector [D*3] for one identity."""
    rng = _rng_for(seed, 1, identity_index)
    return np.exp(IDENTITY_GAIN_SIGMA * rng.standard_normal(n_vertices * 3))


def bandlimited_features(n_frames: int, n_channels: int, fps: float,
                         rng: np.random.Generator) -> np.ndarray:
    """Random smooth signals: per channel a sum of four low-frequency sinusoids."""
    t = np.arange(n_frames) / fps
    out = np.zeros((n_frames, n_channels))
    for c in range(n_channels):
        freqs = rng.uniform(0.3, 3.0, size=4)
        phases = rng.uniform(0.0, 2.0 * np.pi, size=4)
        amps = rng.uniform(0.5, 1.0, size=4) / np.arange(1, 5)
        out[:, c] = np.sum(
            amps[:, None] * np.sin(2.0 * np.pi * freqs[:, None] * t + phases[:, None]),
            axis=0)
    return out


def moving_average3(x: np.ndarray) -> np.ndarray:
    """Centered 3-frame moving average over axis 0, zero-padded at the ends."""
    out = x.copy()
    out[1:] += x[:-1]
    out[:-1] += x[1:]
    return out / 3.0


def oracle_displacements(features: np.ndarray, gain: np.ndarray,
                         mix: np.ndarray) -> np.ndarray:
    """Noise-free generator output: smoothed gain-scaled linear response."""
    return moving_average3((features @ mix.T) * gain)


def synth_generate(out_dir, n_identities: int = 12, seqs_per_identity: int = 40,
                   n_vertices: int = 40, n_channels: int = 8, fps: float = 30.0,
                   seed: int = 0, split_counts=(8, 2, 2),
                   min_frames: int = 90, max_frames: int = 150) -> DatasetManifest:
    """Generate a synthetic dataset tree and return its manifest.

    Identities are assigned to train/val/test in order according to
    `split_counts`. Deterministic: the same arguments always produce a
    byte-identical tree.
    """
    if n_vertices < 8:
        raise ConfigError(f"need at least 8 vertices, got {n_vertices}")
    if n_channels < 4:
        raise ConfigError(f"need at least 4 feature channels, got {n_channels}")
    if len(split_counts) != 3 or any(c < 0 for c in split_counts):
        raise ConfigError(f"split must be three non-negative counts, got {split_counts}")
    if sum(split_counts) != n_identities:
        raise ConfigError(
            f"split {tuple(split_counts)} does not sum to {n_identities} identities")
    if not 1 <= min_frames <= max_frames:
        raise ConfigError(f"bad frame range [{min_frames}, {max_frames}]")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    mix = mixing_matrix(n_vertices, n_channels, seed)
    rest = _rng_for(seed, 2).standard_normal((n_vertices, 3))
    template = TemplateMesh(rest_positions=rest,
                            lip_indices=np.arange(lip_vertex_count(n_vertices)))
    template.save(out_dir / "template.json")

    splits = [s for s, c in zip(SPLITS, split_counts) for _ in range(c)]
    entries = []
    for i in range(n_identities):
        identity = f"id{i:02d}"
        gain = identity_gain(n_vertices, seed, i)
        for j in range(seqs_per_identity):
            rng = _rng_for(seed, 3, i, j)
            n = int(rng.integers(min_frames, max_frames + 1))
            feats = bandlimited_features(n, n_channels, fps, rng)
            disp = oracle_displacements(feats, gain, mix)
            disp = disp + OBSERVATION_NOISE * rng.standard_normal(disp.shape)
            mpath = f"{identity}_{j:03d}.mseq"
            fpath = f"{identity}_{j:03d}.afea"
            write_mseq(out_dir / mpath, MotionSequence(values=disp, fps=fps))
            write_afea(out_dir / fpath, AudioFeatureSequence(values=feats, rate=fps))
            entries.append(ManifestEntry(identity=identity, split=splits[i],
                                         motion=mpath, features=fpath))

    manifest = DatasetManifest(fps=fps, num_vertices=n_vertices,
                               feature_channels=n_channels, seed=seed,
                               template_file="template.json", entries=entries,
                               root=out_dir)
    manifest.save(out_dir / "manifest.json")
    return manifest


@dataclass
class LoadedSequence:
    """A motion/feature pair pulled into memory, features at motion rate."""

    identity: str
    motion: np.ndarray
    features: np.ndarray
    fps: float


def load_split(manifest: DatasetManifest, split: str, min_frames: int = 1):
    """Load a split; sequences shorter than `min_frames` are skipped with a warning."""
    out = []
    for entry in manifest.for_split(split):
        motion = read_mseq(manifest.root / entry.motion)
        features = read_afea(manifest.root / entry.features)
        if features.rate != motion.fps:
            features = resample_features(features, motion.fps)
        if features.n_frames != motion.n_frames:
            raise DimensionError(
                f"{entry.motion}: {motion.n_frames} motion frames vs "
                f"{features.n_frames} feature frames after resampling")
        if motion.n_frames < min_frames:
            warnings.warn(
                f"skipping {entry.motion}: {motion.n_frames} frames < {min_frames}",
                stacklevel=2)
            continue
        out.append(LoadedSequence(identity=entry.identity, motion=motion.values,
                                  features=features.values, fps=motion.fps))
    return out
