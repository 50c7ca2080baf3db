"""The evaluation metrics, and why lip sync uses dynamic time warping.

Run: python demos/07_metrics_tour.py
"""

import numpy as np

from facemotion.data import TemplateMesh
from facemotion.metrics import div_e, dtw_distance, l2_face, lip_max, lip_sync

mesh = TemplateMesh(rest_positions=np.zeros((4, 3)), lip_indices=[0])
rng = np.random.default_rng(0)

# DTW aligns sequences monotonically before measuring distance; the score
# is the accumulated per-frame cost divided by the warping-path length.
print("dtw([0,0], [1,1])       =", dtw_distance([0.0, 0.0], [1.0, 1.0]))
print("dtw([0,1,2], [0,2])     =", dtw_distance([0.0, 1.0, 2.0], [0.0, 2.0]))
print("dtw of a thing with itself =", dtw_distance([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]))

# A delayed copy of a lip trajectory scores far better under DTW than an
# amplitude error of the same L2 size: timing offsets are forgivable,
# wrong mouth shapes are not.
t = np.arange(42) / 30.0
src = np.zeros((42, 12))
src[:, 0] = np.sin(2 * np.pi * 1.5 * t)
gt = src[:40]
delayed = src[2:42]
err = np.linalg.norm(delayed - gt)
scaled = gt * (1 + err / np.linalg.norm(gt))
print(f"\nsame L2 error ({err:.2f}), different stories:")
print(f"  2-frame delay:    lip_sync {lip_sync(delayed, gt, mesh):.4f}")
print(f"  amplitude error:  lip_sync {lip_sync(scaled, gt, mesh):.4f}")

# The pointwise error metrics.
pred = gt.copy()
pred[:, 0] += 0.3            # lip vertex x off by 0.3 everywhere
pred[:, 3] += 0.1            # a non-lip vertex too
print(f"\nlip_max  (worst lip vertex per frame, averaged): "
      f"{lip_max(pred, gt, mesh):.3f}")
print(f"l2_face  (all vertices):                         "
      f"{l2_face(pred, gt, mesh):.3f}")

# Diversity: mean pairwise distance across samples for the same audio.
base = rng.normal(size=(30, 12))
tight = [base + 0.01 * rng.normal(size=base.shape) for _ in range(5)]
loose = [base + 0.50 * rng.normal(size=base.shape) for _ in range(5)]
print(f"\ndiv_e of near-identical samples: {div_e(tight):.4f}")
print(f"div_e of spread-out samples:     {div_e(loose):.4f}")
print("(a deterministic model scores exactly 0)")
