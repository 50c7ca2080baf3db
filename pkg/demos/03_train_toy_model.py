"""Train the demo model on the synthetic dataset and inspect the loss curve.

Run: python demos/03_train_toy_model.py          (about a minute on a CPU)
"""

import csv

import numpy as np

from _common import ARTIFACTS, demo_model

model, manifest = demo_model()

with open(ARTIFACTS / "model" / "loss_log.csv") as f:
    rows = list(csv.DictReader(f))
curve = np.array([float(r["l_simple"]) for r in rows])

print(f"\ntrained on {len(manifest.for_split('train'))} sequences "
      f"({len(manifest.identities('train'))} identities)")
print(f"parameters: {sum(p.data.size for p in model.params.values())}")
print(f"style vectors: {model.style_ids()}")

window = 50
print("\nreconstruction loss (50-iteration means):")
for start in range(0, curve.size, 250):
    chunk = curve[start:start + window]
    bar = "#" * int(60 * chunk.mean() / curve[:window].mean())
    print(f"  iter {start:4d}+  {chunk.mean():.5f}  {bar}")

ratio = curve[-100:].mean() / curve[:100].mean()
print(f"\nfinal/initial loss ratio: {ratio:.3f}")
print(f"checkpoint: {ARTIFACTS / 'model' / 'checkpoints' / 'final.ckpt'}")
