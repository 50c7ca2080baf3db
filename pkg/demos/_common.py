"""Shared setup for the demo scripts: a small dataset and a quickly trained model.

The first demo that needs the trained model builds it (about a minute on
a laptop CPU) and caches everything under demos/_artifacts/ so later
demos start instantly. Delete that directory to retrain.
"""

from pathlib import Path

from facemotion.data import DatasetManifest, synth_generate
from facemotion.net import Denoiser
from facemotion.train import TrainConfig, train_loop

ARTIFACTS = Path(__file__).parent / "_artifacts"

DEMO_TRAIN = TrainConfig(iterations=1500, batch_size=16, lr=3e-4, crop_len=30,
                         diffusion_steps=100, seed=7, checkpoint_every=500)


def demo_dataset() -> DatasetManifest:
    manifest_path = ARTIFACTS / "data" / "manifest.json"
    if manifest_path.exists():
        return DatasetManifest.load(manifest_path)
    print("generating demo dataset (6 identities, 16 vertices) ...")
    return synth_generate(ARTIFACTS / "data", n_identities=6, seqs_per_identity=20,
                          n_vertices=16, n_channels=6, seed=7, split_counts=(4, 1, 1),
                          min_frames=90, max_frames=150)


def demo_model() -> tuple[Denoiser, DatasetManifest]:
    manifest = demo_dataset()
    ckpt = ARTIFACTS / "model" / "checkpoints" / "final.ckpt"
    if ckpt.exists():
        return Denoiser.load(ckpt), manifest
    print("training demo model (1500 iterations, ~1 min) ...")
    model = train_loop(manifest, DEMO_TRAIN, out_dir=ARTIFACTS / "model",
                       log=lambda done, s: print(f"  iter {done}: loss {s.l_total:.4f}"))
    return model, manifest
