"""A tour of the tensor engine: eager numpy ops, a tape, reverse-mode gradients.

Run: python demos/01_autodiff_engine.py
"""

import numpy as np

import facemotion.autodiff as ad

rng = np.random.default_rng(0)

# Tensors wrap float64 numpy arrays; parameters ask for gradients.
w = ad.parameter(rng.normal(size=(3, 2)))
b = ad.parameter(np.zeros(2))
x = ad.tensor(rng.normal(size=(5, 3)))          # plain data, no gradient

# Ops run eagerly. With a Tape active they also record how to run backward.
with ad.Tape() as tape:
    hidden = ad.silu(ad.linear(x, w, b))
    loss = ad.mean_all(ad.mul(hidden, hidden))
    ad.backward(loss)

print(f"loss = {loss.item():.6f}  (tape recorded {len(tape)} ops)")
print("dloss/db =", np.round(b.grad, 6))

# The engine's one correctness story: gradients equal finite differences.
eps = 1e-5
fd = np.zeros_like(b.data)
for i in range(2):
    for sign in (+1, -1):
        b.data[i] += sign * eps
        out = ad.silu(ad.linear(x, w, b)).data
        fd[i] += sign * float((out * out).mean())
        b.data[i] -= sign * eps
fd /= 2 * eps
print("finite diff =", np.round(fd, 6))
print("max |ad - fd| =", np.abs(b.grad - fd).max())

# A tensor consumed twice accumulates both adjoints (additive rule).
v = ad.parameter(np.ones(4))
with ad.Tape():
    ad.backward(ad.sum_all(ad.add(ad.mul(v, 3.0), v)))
print("grad of sum(3v + v):", v.grad, "(expected 4s)")

# The temporal ops the denoiser is made of:
seq = ad.tensor(rng.normal(size=(2, 8)))                    # [channels, frames]
kernel = ad.tensor(rng.normal(size=(2, 2, 3)))
down = ad.conv1d(seq, kernel, stride=2, pad=1)              # halve time
up = ad.upsample_linear(down, 2)                            # restore it
both = ad.concat_channels(seq, up)                          # stack channels
print("\nconv stride 2:", seq.shape, "->", down.shape)
print("upsample x2:  ", down.shape, "->", up.shape)
print("concat:       ", f"{seq.shape} + {up.shape} -> {both.shape}")
