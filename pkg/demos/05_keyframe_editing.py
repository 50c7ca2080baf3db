"""Motion editing: pin chosen frames and synthesize coherent motion between them.

During sampling the predicted clean sequence is overwritten at the
keyframe rows before every reverse step, so constrained frames are exact
in the output while the free frames stay consistent with the audio.

Run: python demos/05_keyframe_editing.py
"""

import numpy as np

from facemotion import metrics
from facemotion.data import MotionSequence, load_split
from facemotion.diffusion import (KeyframeConstraint, SamplerConfig, inpaint_sample,
                                  make_schedule, unconditional_sample)
from facemotion.net import Condition

from _common import DEMO_TRAIN, demo_model

model, manifest = demo_model()
schedule = make_schedule(DEMO_TRAIN.diffusion_steps, DEMO_TRAIN.schedule)
mesh = manifest.template()

seq = load_split(manifest, "test")[1]
gt = MotionSequence(values=seq.motion)
cond = Condition(audio=model.audio_project(seq.features).data)
n = gt.n_frames

# Inbetweening: preserve a fraction of the boundary frames, synthesize the rest.
print(f"{'preserved':>9} {'l2_face':>9}   (full-sequence error vs ground truth)")
for frac in (0.05, 0.10, 0.20, 0.50):
    edge = max(1, int(round(frac * n / 2)))
    idx = np.concatenate([np.arange(edge), np.arange(n - edge, n)])
    kf = KeyframeConstraint(indices=idx, values=gt.values[idx])
    out = inpaint_sample(model, schedule, cond, n, kf, SamplerConfig(seed=5))
    err = metrics.l2_face(out, gt, mesh)
    exact = np.array_equal(out.values[idx], gt.values[idx])
    print(f"{frac:>9.0%} {err:>9.4f}   keyframes exact: {exact}")

# Sparse keyframes at a fixed rate (here 1 per second at 30 fps).
idx = np.arange(0, n, 30)
kf = KeyframeConstraint(indices=idx, values=gt.values[idx])
out = inpaint_sample(model, schedule, cond, n, kf, SamplerConfig(seed=6))
print(f"\n1 keyframe/sec: l2_face {metrics.l2_face(out, gt, mesh):.4f} "
      f"({idx.size} pinned frames)")

# Editing also works without any audio (unconditional keyframing).
cfg = SamplerConfig(seed=7, keyframes=kf)
out = unconditional_sample(model, schedule, n, cfg)
print(f"unconditional keyframing: pinned frames exact: "
      f"{np.array_equal(out.values[idx], gt.values[idx])}")
