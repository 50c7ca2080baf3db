"""Variance schedules and the forward/reverse diffusion processes.

Run: python demos/02_diffusion_basics.py
"""

import numpy as np

from facemotion.diffusion import make_schedule, StepVariant

# The cosine schedule: abar_t decays smoothly from ~1 to ~0.
for kind in ("cosine", "linear"):
    sch = make_schedule(500, kind)
    marks = [1, 50, 125, 250, 375, 500]
    row = "  ".join(f"t={t}: {sch.alpha_bar(t):.4f}" for t in marks)
    print(f"{kind:>6} abar:  {row}")

sch = make_schedule(500, "cosine")
print("\nterminal abar_500 =", sch.alpha_bars[-1], "(signal is essentially gone)")

# Forward process: interpolate between data and white noise.
rng = np.random.default_rng(1)
x0 = np.sin(np.linspace(0, 4 * np.pi, 60))[:, None] * np.ones((60, 6))
for t in (0, 100, 250, 500):
    x_t = sch.q_sample(x0, t, rng.standard_normal(x0.shape))
    corr = np.corrcoef(x0.ravel(), x_t.ravel())[0, 1]
    print(f"t={t:3d}: corr(x0, x_t) = {corr:+.3f}   std = {x_t.std():.3f}")

# Reverse step (default variant): re-noise the predicted clean sequence to
# the t-1 marginal. At t=1 it returns the prediction exactly.
x0_hat = np.ones((4, 6))
out = sch.reverse_step(None, 1, x0_hat, rng)
print("\nreverse_step at t=1 returns x0_hat exactly:", np.array_equal(out, x0_hat))

out = sch.reverse_step(None, 250, x0_hat, rng, variant=StepVariant.MARGINAL)
print(f"reverse_step at t=250: mean {out.mean():+.3f} (pull toward "
      f"sqrt(abar_249)={np.sqrt(sch.alpha_bars[248]):.3f})")

# The posterior variant needs x_t as well; both agree at the final step.
x_t = rng.standard_normal((4, 6))
a = sch.reverse_step(x_t, 1, x0_hat, rng, variant=StepVariant.MARGINAL)
b = sch.reverse_step(x_t, 1, x0_hat, rng, variant=StepVariant.POSTERIOR)
print("variants agree at t=1:", np.array_equal(a, b))
