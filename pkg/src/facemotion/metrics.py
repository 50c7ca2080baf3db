"""Evaluation metrics: warping-tolerant lip sync, vertex errors, diversity.

* ``lip_sync``: dynamic time warping distance between the lip-vertex
  trajectories of prediction and ground truth. DTW uses per-frame
  Euclidean cost, steps (1,0)/(0,1)/(1,1), boundary-to-boundary paths,
  and returns the accumulated cost divided by the warping-path length.
  Among equal-cost paths the shorter one is preferred, which pins the
  normalization deterministically.
* ``lip_max``: mean over frames of the worst per-frame lip vertex error.
* ``l2_region``: mean per-vertex Euclidean error over frames and a vertex
  subset (the lip region or the whole face).
* ``div_e``: mean pairwise (frame- and vertex-averaged) vertex distance
  across several samples generated from the same audio; zero for a
  deterministic model.

``guidance_sweep`` runs the diversity/accuracy trade-off experiment:
for each guidance scale on a 0.0..1.0 grid it draws K samples per test
sequence and reports mean lip sync and diversity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import MotionSequence, TemplateMesh
from .diffusion import DiffusionSchedule, SampleSpec, StepVariant, sample_batch
from .errors import ContractError, DimensionError
from .net import Denoiser

GUIDANCE_GRID = tuple(i / 10 for i in range(11))


def _as_values(x) -> np.ndarray:
    return x.values if isinstance(x, MotionSequence) else np.asarray(x, dtype=np.float64)


def dtw_distance(a, b) -> float:
    """Path-length-normalized dynamic time warping distance.

    `a` and `b` are [N, K] trajectories (1-D inputs are treated as K=1).
    Minimizes accumulated per-frame Euclidean cost over monotone
    boundary-to-boundary alignments; ties in cost prefer the shorter
    path; the result is cost / path length.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64).T).T
    b = np.atleast_2d(np.asarray(b, dtype=np.float64).T).T
    if a.shape[0] < 1 or b.shape[0] < 1:
        raise ContractError("dtw_distance needs non-empty trajectories")
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"trajectory dims differ: {a.shape[1]} vs {b.shape[1]}")
    na, nb = a.shape[0], b.shape[0]
    cost = np.sqrt(np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=2))

    big = np.inf
    acc = np.full((na, nb), big)
    length = np.zeros((na, nb), dtype=np.int64)
    for i in range(na):
        ci = cost[i]
        ai = acc[i]
        li = length[i]
        ap = acc[i - 1] if i else None
        lp = length[i - 1] if i else None
        for j in range(nb):
            if i == 0 and j == 0:
                ai[0] = ci[0]
                li[0] = 1
                continue
            best_c, best_l = big, 0
            if i and j:
                best_c, best_l = ap[j - 1], lp[j - 1]
            if i:
                c = ap[j]
                if c < best_c or (c == best_c and lp[j] < best_l):
                    best_c, best_l = c, lp[j]
            if j:
                c = ai[j - 1]
                if c < best_c or (c == best_c and li[j - 1] < best_l):
                    best_c, best_l = c, li[j - 1]
            ai[j] = best_c + ci[j]
            li[j] = best_l + 1
    return float(acc[-1, -1] / length[-1, -1])


def lip_trajectory(motion, mesh: TemplateMesh) -> np.ndarray:
    """Per-frame concatenated lip-vertex coordinates, [N, 3 * n_lips]."""
    values = _as_values(motion)
    n = values.shape[0]
    frames = values.reshape(n, -1, 3)
    if frames.shape[1] != mesh.n_vertices:
        raise DimensionError(
            f"motion has {frames.shape[1]} vertices, template has {mesh.n_vertices}")
    return frames[:, mesh.lip_indices, :].reshape(n, -1)


def _paired(pred, gt) -> tuple:
    p, g = _as_values(pred), _as_values(gt)
    if p.shape != g.shape:
        raise DimensionError(f"prediction shape {p.shape} != ground truth {g.shape}")
    return p, g


def lip_sync(pred, gt, mesh: TemplateMesh) -> float:
    """DTW distance between lip-vertex trajectories."""
    _paired(pred, gt)
    return dtw_distance(lip_trajectory(pred, mesh), lip_trajectory(gt, mesh))


def lip_max(pred, gt, mesh: TemplateMesh) -> float:
    """Mean over frames of the maximal per-frame lip vertex distance."""
    p, g = _paired(pred, gt)
    n = p.shape[0]
    diff = (p - g).reshape(n, -1, 3)[:, mesh.lip_indices, :]
    dist = np.sqrt(np.sum(diff * diff, axis=2))
    return float(dist.max(axis=1).mean())


def l2_region(pred, gt, indices) -> float:
    """Mean per-vertex Euclidean distance over frames and selected vertices."""
    p, g = _paired(pred, gt)
    indices = np.asarray(indices, dtype=np.int64)
    n = p.shape[0]
    diff = (p - g).reshape(n, -1, 3)[:, indices, :]
    return float(np.sqrt(np.sum(diff * diff, axis=2)).mean())


def l2_lip(pred, gt, mesh: TemplateMesh) -> float:
    return l2_region(pred, gt, mesh.lip_indices)


def l2_face(pred, gt, mesh: TemplateMesh) -> float:
    return l2_region(pred, gt, np.arange(mesh.n_vertices))


def div_e(samples) -> float:
    """Mean pairwise averaged vertex distance across same-audio samples."""
    values = [_as_values(s) for s in samples]
    if len(values) < 2:
        raise ContractError("diversity needs at least two samples")
    shape = values[0].shape
    if any(v.shape != shape for v in values):
        raise DimensionError("diversity samples must share one shape")
    n = shape[0]
    total = 0.0
    count = 0
    for i in range(len(values)):
        for j in range(i + 1, len(values)):
            diff = (values[i] - values[j]).reshape(n, -1, 3)
            total += float(np.sqrt(np.sum(diff * diff, axis=2)).mean())
            count += 1
    return total / count


@dataclass
class MetricReport:
    """Per-sequence metric values plus their means; `scale` is cosmetic only."""

    per_sequence: list = field(default_factory=list)
    scale: float = 1.0

    METRICS = ("lip_sync", "lip_max", "l2_lip", "l2_face", "div_e")

    def add(self, name: str, **metrics):
        self.per_sequence.append({"sequence": name, **metrics})

    def aggregate(self) -> dict:
        out = {}
        for key in self.METRICS:
            vals = [row[key] for row in self.per_sequence if key in row]
            if vals:
                out[key] = float(np.mean(vals))
        return out

    def rows(self):
        """CSV rows: one per sequence plus a `mean` row; scaled for display."""
        keys = [k for k in self.METRICS if any(k in row for row in self.per_sequence)]
        header = ["sequence"] + keys
        body = []
        for row in self.per_sequence:
            body.append([row["sequence"]]
                        + [repr(row[k] * self.scale) if k in row else "" for k in keys])
        agg = self.aggregate()
        body.append(["mean"] + [repr(agg[k] * self.scale) for k in keys])
        return header, body


def evaluate_pair(pred, gt, mesh: TemplateMesh) -> dict:
    """All error metrics for one prediction/ground-truth pair."""
    return {
        "lip_sync": lip_sync(pred, gt, mesh),
        "lip_max": lip_max(pred, gt, mesh),
        "l2_lip": l2_lip(pred, gt, mesh),
        "l2_face": l2_face(pred, gt, mesh),
    }


# ---------------------------------------------------------------------------
# guidance sweep


@dataclass
class SweepItem:
    """One test sequence for the sweep: projected audio plus ground truth."""

    name: str
    audio: np.ndarray          # projected [C, N]
    gt: MotionSequence
    style_id: str | None = None


def _spawned_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))


def guidance_sweep(model: Denoiser, schedule: DiffusionSchedule, items,
                   mesh: TemplateMesh, s_values=GUIDANCE_GRID, n_samples: int = 8,
                   seed: int = 0, variant: StepVariant = StepVariant.MARGINAL,
                   progress=None):
    """Mean lip sync and diversity per guidance scale.

    For every sequence all (scale, sample) pairs are drawn in one batched
    reverse pass; sample noise is keyed by (seed, sequence, scale, sample)
    so results do not depend on batch composition.
    Returns a list of {"s", "lip_sync", "div_e"} dicts, one per scale.
    """
    if n_samples < 2:
        raise ContractError("the sweep needs n_samples >= 2 to measure diversity")
    s_values = list(s_values)
    sync = np.zeros((len(s_values), len(items)))
    div = np.zeros((len(s_values), len(items)))
    for seq_idx, item in enumerate(items):
        n_frames = item.gt.n_frames
        specs = [
            SampleSpec(rng=_spawned_rng(seed, seq_idx, s_idx, k), audio=item.audio,
                       style_id=item.style_id, guidance=s)
            for s_idx, s in enumerate(s_values)
            for k in range(n_samples)
        ]
        out = sample_batch(model, schedule, specs, n_frames, variant=variant)
        for s_idx in range(len(s_values)):
            block = out[s_idx * n_samples:(s_idx + 1) * n_samples]
            sync[s_idx, seq_idx] = float(np.mean(
                [lip_sync(sample, item.gt, mesh) for sample in block]))
            div[s_idx, seq_idx] = div_e(list(block))
        if progress is not None:
            progress(item.name)
    return [
        {"s": s, "lip_sync": float(sync[i].mean()), "div_e": float(div[i].mean())}
        for i, s in enumerate(s_values)
    ]
