"""Acceptance suite: every release criterion as one test, at its stated tolerance.

The expensive criteria share one toy training run (session fixtures): a
synthetic dataset of 12 identities split 8/2/2 (D=40 vertices, F=8
feature channels, 40 sequences of 90-150 frames per identity) and a
model trained for 5000 iterations at batch 16, lr 1e-4, velocity weight
10, condition dropout 0.1, cosine schedule with 500 steps.

A summary with one PASS/FAIL line per criterion is printed at the end of
the pytest run (see conftest).
"""

import time

import numpy as np
import pytest

import facemotion.autodiff as ad
from facemotion import metrics
from facemotion.cli import main
from facemotion.data import (
    LoadedSequence,
    MotionSequence,
    load_split,
    read_mseq,
    synth_generate,
)
from facemotion.diffusion import (
    KeyframeConstraint,
    SamplerConfig,
    SampleSpec,
    inpaint_sample,
    make_schedule,
    sample,
    sample_batch,
    save_keyframes,
)
from facemotion.net import Condition, Denoiser, NetworkConfig
from facemotion.train import TrainConfig, finetune_personal, l_total, l_vel, style_split, train_loop
from oracles import dtw_exhaustive, fd_grad, max_rel_err, spearman

EVAL_GUIDANCE = 0.99  # checkpoint-evaluation guidance (quality regime)


def _rng_stream(seed, *key):
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))


# ---------------------------------------------------------------------------
# shared toy pipeline


@pytest.fixture(scope="session")
def toy_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance_data")
    return synth_generate(root, n_identities=12, seqs_per_identity=40, n_vertices=40,
                          n_channels=8, fps=30.0, seed=20, split_counts=(8, 2, 2),
                          min_frames=90, max_frames=150)


@pytest.fixture(scope="session")
def trained_setup(toy_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance_run")
    config = TrainConfig(iterations=5000, batch_size=16, lr=1e-4, lambda_vel=10.0,
                         cond_dropout_p=0.1, crop_len=30, diffusion_steps=500,
                         schedule="cosine", seed=20, checkpoint_every=1000)
    start = time.time()
    model = train_loop(toy_dataset, config, out_dir=out)
    train_seconds = time.time() - start
    untrained = Denoiser.init(
        NetworkConfig(num_vertices=toy_dataset.num_vertices,
                      audio_channels_in=toy_dataset.feature_channels,
                      fps=toy_dataset.fps),
        toy_dataset.identities("train"), seed=config.seed)
    losses = np.loadtxt(out / "loss_log.csv", delimiter=",", skiprows=1)
    return {
        "model": model,
        "untrained": untrained,
        "manifest": toy_dataset,
        "mesh": toy_dataset.template(),
        "schedule": make_schedule(config.diffusion_steps, config.schedule),
        "l_simple_curve": losses[:, 1],
        "train_seconds": train_seconds,
        "test_sequences": load_split(toy_dataset, "test"),
    }


def _mean_test_lip_sync(model, setup, sequences, seed):
    vals = []
    for i, seq in enumerate(sequences):
        audio = model.audio_project(seq.features).data
        out = sample_batch(model, setup["schedule"],
                           [SampleSpec(rng=_rng_stream(seed, i), audio=audio,
                                       guidance=EVAL_GUIDANCE)],
                           seq.motion.shape[0])
        vals.append(metrics.lip_sync(out[0], MotionSequence(values=seq.motion),
                                     setup["mesh"]))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# criteria


def test_criterion_01_gradient_correctness():
    """Reverse-mode gradients match central finite differences (1e-4, < 1 min)."""
    start = time.time()
    rng = np.random.default_rng(0)

    # every public op, random inputs in [-1, 1]
    cases = [
        (ad.linear, [rng.uniform(-1, 1, (5, 6)), rng.uniform(-1, 1, (6, 3)),
                     rng.uniform(-1, 1, 3)]),
        (lambda x, k: ad.conv1d(x, k, stride=2, pad=1),
         [rng.uniform(-1, 1, (3, 9)), rng.uniform(-1, 1, (4, 3, 3))]),
        (lambda x: ad.upsample_linear(x, 3), [rng.uniform(-1, 1, (2, 5))]),
        (ad.concat_channels, [rng.uniform(-1, 1, (2, 6)), rng.uniform(-1, 1, (3, 6))]),
        (ad.silu, [rng.uniform(-1, 1, (4, 7))]),
        (ad.mse, [rng.uniform(-1, 1, (3, 5)), rng.uniform(-1, 1, (3, 5))]),
    ]
    for op, arrays in cases:
        weights = rng.uniform(0.5, 1.5, op(*[ad.as_tensor(a) for a in arrays]).shape)
        tensors = [ad.parameter(a.copy()) for a in arrays]
        with ad.Tape():
            ad.backward(ad.sum_all(ad.mul(op(*tensors), weights)))
        ref = fd_grad(lambda arrs: float(
            (op(*[ad.as_tensor(a) for a in arrs]).data * weights).sum()), arrays)
        for t, r in zip(tensors, ref):
            assert max_rel_err(t.grad, r) < 1e-4

    # full objective through the complete denoiser, every parameter
    cfg = NetworkConfig(num_vertices=4, latent_channels=8, audio_channels_in=8)
    model = Denoiser.init(cfg, ["id00"], seed=1)
    n = 8
    x0 = rng.uniform(-1, 1, (1, n, 12))
    x_t = rng.uniform(-1, 1, (1, n, 12))
    feats = rng.uniform(-1, 1, (1, n, 8))
    t_vec = np.array([3])

    def run_loss():
        projected = ad.linear(feats, model.params["aproj.w"], model.params["aproj.b"])
        pred = model._forward_batch(x_t, t_vec, ad.swap_last2(projected), ["id00"])
        return l_total(x0, pred, 10.0)

    model.zero_grad()
    with ad.Tape():
        ad.backward(run_loss())

    for name in model.param_names():
        param = model.params[name]
        backup = param.data.copy()

        def loss_of(arrs, _p=param, _b=backup):
            _p.data = arrs[0]
            val = run_loss().item()
            _p.data = _b
            return val

        ref = fd_grad(loss_of, [backup.copy()])[0]
        grad = param.grad if param.grad is not None else np.zeros_like(backup)
        # floor 1e-5: central differences through the ~50-op graph carry an
        # absolute noise of order 1e-10, so components below 1e-5 cannot be
        # resolved at 1e-4 relative; any real defect still exceeds 1e-9.
        assert max_rel_err(grad, ref, floor=1e-5) < 1e-4, f"gradient mismatch for {name}"
    assert time.time() - start < 60.0


def test_criterion_02_forward_process_statistics(toy_dataset):
    """q_sample at t=T is standard normal per coordinate (cosine, T=500, < 1 min)."""
    start = time.time()
    schedule = make_schedule(500, "cosine")
    frames = np.concatenate([s.motion for s in load_split(toy_dataset, "train")])
    draws = 100_000
    rng = np.random.default_rng(2)
    x0 = frames[rng.integers(0, frames.shape[0], size=draws)]
    x_t = schedule.q_sample(x0, 500, rng.standard_normal(x0.shape))
    mean = x_t.mean(axis=0)
    var = x_t.var(axis=0)
    assert np.abs(mean).max() < 0.05
    assert np.all(np.abs(var - 1.0) < 0.05)
    assert time.time() - start < 60.0


def test_criterion_03_cfg_identities(tiny_model):
    """Guidance s=1 is the conditional pass bitwise; s=0 the unconditional."""
    from facemotion.diffusion import cfg_predict
    rng = np.random.default_rng(3)
    for _ in range(100):
        n = int(rng.integers(2, 24))
        x_t = rng.normal(size=(n, 12))
        t = int(rng.integers(1, 501))
        cond = Condition(audio=rng.normal(size=(8, n)),
                         style_id=rng.choice(["id00", "id01", None]))
        conditional = tiny_model.predict_x0(x_t, t, cond)
        unconditional = tiny_model.predict_x0(
            x_t, t, Condition(audio=None, style_id=cond.style_id))
        assert np.array_equal(cfg_predict(tiny_model, x_t, t, cond, 1.0), conditional)
        assert np.array_equal(cfg_predict(tiny_model, x_t, t, cond, 0.0), unconditional)


def test_criterion_04_keyframe_hard_constraint(tiny_model):
    """Inpainted frames equal their constraints; no keyframes means no effect."""
    schedule = make_schedule(64)
    rng = np.random.default_rng(4)
    for trial in range(5):
        n = int(rng.integers(8, 32))
        cond = Condition(audio=rng.normal(size=(8, n)), style_id="id00")
        cfg = SamplerConfig(seed=trial, guidance_scale=0.5)
        k = int(rng.integers(1, n))
        idx = np.sort(rng.choice(n, size=k, replace=False))
        values = rng.normal(size=(k, 12))
        out = inpaint_sample(tiny_model, schedule, cond, n,
                             KeyframeConstraint(indices=idx, values=values), cfg)
        assert np.array_equal(out.values[idx], values)

        empty = KeyframeConstraint(indices=np.zeros(0, dtype=int),
                                   values=np.zeros((0, 12)))
        plain = sample(tiny_model, schedule, cond, n, cfg)
        edited = inpaint_sample(tiny_model, schedule, cond, n, empty, cfg)
        assert np.array_equal(plain.values, edited.values)


def test_criterion_05_dtw_oracle_equivalence():
    """DP distance equals exhaustive monotone-alignment enumeration, exactly."""
    rng = np.random.default_rng(5)
    for _ in range(1000):
        na, nb = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        k = int(rng.integers(1, 4))
        a = rng.normal(size=(na, k))
        b = rng.normal(size=(nb, k))
        assert metrics.dtw_distance(a, b) == dtw_exhaustive(a, b)


def test_criterion_06_end_to_end_toy_training(trained_setup):
    """Training converges (10x loss drop) and beats the untrained baseline 3x."""
    curve = trained_setup["l_simple_curve"]
    assert curve.size == 5000
    ratio = curve[-100:].mean() / curve[:100].mean()
    assert ratio <= 0.1, f"loss ratio {ratio:.3f}"

    sequences = trained_setup["test_sequences"][:6]
    trained_err = _mean_test_lip_sync(trained_setup["model"], trained_setup,
                                      sequences, seed=60)
    untrained_err = _mean_test_lip_sync(trained_setup["untrained"], trained_setup,
                                        sequences, seed=60)
    assert trained_err <= untrained_err / 3.0, (
        f"lip sync {trained_err:.3f} vs untrained {untrained_err:.3f}")
    assert trained_setup["train_seconds"] < 15 * 60


def test_criterion_07_guidance_diversity_tradeoff(trained_setup):
    """Diversity falls with guidance (Spearman <= -0.8); accuracy does not degrade."""
    start = time.time()
    model = trained_setup["model"]
    items = [
        metrics.SweepItem(name=f"t{i}", audio=model.audio_project(seq.features).data,
                          gt=MotionSequence(values=seq.motion))
        for i, seq in enumerate(trained_setup["test_sequences"][:2])
    ]
    rows = metrics.guidance_sweep(model, trained_setup["schedule"], items,
                                  trained_setup["mesh"], n_samples=8, seed=70)
    s_values = [row["s"] for row in rows]
    assert s_values == [i / 10 for i in range(11)]
    rho = spearman(s_values, [row["div_e"] for row in rows])
    assert rho <= -0.8, f"spearman(s, div) = {rho:.3f}"
    quality = [row["lip_sync"] for row in rows if row["s"] >= 0.3]
    inversions = sum(1 for a, b in zip(quality, quality[1:]) if b > a)
    assert inversions <= 1, f"{inversions} lip-sync inversions over s in [0.3, 1.0]"
    assert time.time() - start < 600.0


def test_criterion_08_inbetweening_trend(trained_setup):
    """Full-face error strictly falls as more boundary frames are preserved."""
    model = trained_setup["model"]
    identity = trained_setup["manifest"].identities("test")[1]
    sequences = [s for s in trained_setup["test_sequences"] if s.identity == identity][:6]
    fractions = (0.05, 0.10, 0.20, 0.50)
    errors = []
    for frac in fractions:
        vals = []
        for i, seq in enumerate(sequences):
            n = seq.motion.shape[0]
            edge = max(1, int(round(frac * n / 2)))
            idx = np.concatenate([np.arange(edge), np.arange(n - edge, n)])
            keyframes = KeyframeConstraint(indices=idx, values=seq.motion[idx])
            cond = Condition(audio=model.audio_project(seq.features).data)
            out = inpaint_sample(model, trained_setup["schedule"], cond, n, keyframes,
                                 SamplerConfig(seed=80 + i, keyframes=None))
            vals.append(metrics.l2_face(out, MotionSequence(values=seq.motion),
                                        trained_setup["mesh"]))
        errors.append(float(np.mean(vals)))
    assert all(a > b for a, b in zip(errors, errors[1:])), f"errors {errors}"


def test_criterion_09_personalization_benefit(trained_setup):
    """Fine-tuning helps a held-out identity, monotonically in the data budget."""
    model = trained_setup["model"]
    mesh = trained_setup["mesh"]
    identity = trained_setup["manifest"].identities("test")[1]
    own = [s for s in trained_setup["test_sequences"] if s.identity == identity]
    train_pool, _, test_pool = style_split(own)
    eval_seqs = test_pool[:12]

    def evaluate(m, style_id):
        sync, face = [], []
        for i, seq in enumerate(eval_seqs):
            audio = m.audio_project(seq.features).data
            out = sample_batch(m, trained_setup["schedule"],
                               [SampleSpec(rng=_rng_stream(90, i), audio=audio,
                                           style_id=style_id,
                                           guidance=EVAL_GUIDANCE)],
                               seq.motion.shape[0])
            gt = MotionSequence(values=seq.motion)
            sync.append(metrics.lip_sync(out[0], gt, mesh))
            face.append(metrics.l2_face(out[0], gt, mesh))
        return float(np.mean(sync)), float(np.mean(face))

    def crop(seq, n_frames):
        return LoadedSequence(identity=seq.identity, motion=seq.motion[:n_frames],
                              features=seq.features[:n_frames], fps=seq.fps)

    budgets = [[crop(train_pool[0], 40)], train_pool[:1], train_pool[:4]]
    base = evaluate(model, None)
    results = []
    for budget in budgets:
        config = TrainConfig(iterations=1500, batch_size=16, lr=1e-4, seed=91,
                             checkpoint_every=10 ** 6)
        tuned = finetune_personal(model, budget, identity, config)
        results.append(evaluate(tuned, identity))

    for metric_idx in (0, 1):
        series = [base[metric_idx]] + [r[metric_idx] for r in results]
        assert all(r[metric_idx] < base[metric_idx] for r in results), series
        assert all(a > b for a, b in zip(series[1:], series[2:])), series


def test_criterion_10_velocity_loss_invariance():
    """Constant per-coordinate offsets leave the velocity loss at (float) zero."""
    rng = np.random.default_rng(10)
    for _ in range(100):
        n = int(rng.integers(2, 40))
        width = int(rng.integers(1, 15)) * 3
        x0 = rng.normal(size=(n, width))
        offset = rng.normal(size=width)
        # zero up to float-addition rounding, ~26 orders below loss scale
        assert l_vel(x0, x0 + offset).item() <= 1e-28
    x0 = rng.integers(-8, 8, size=(12, 9)).astype(float)
    offset = rng.integers(-8, 8, size=9).astype(float)
    assert l_vel(x0, x0 + offset).item() == 0.0


def test_criterion_11_reproducibility(tmp_path):
    """Every subcommand is byte-for-byte reproducible from (seed, config, inputs)."""
    import json

    def tree(root):
        return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*"))
                if p.is_file()}

    def run_twice(command, extra):
        outs = []
        for tag in ("a", "b"):
            out = tmp_path / f"{command}_{tag}"
            code = main([command, "--out", str(out)] + extra)
            assert code == 0, command
            outs.append(out)
        assert tree(outs[0]) == tree(outs[1]), command
        return outs[0]

    synth_extra = ["--seed", "7", "--identities", "3", "--split", "1,1,1",
                   "--seqs-per-identity", "2", "--vertices", "8", "--channels", "4",
                   "--min-frames", "20", "--max-frames", "24"]
    data = run_twice("synth-data", synth_extra)

    config = tmp_path / "cfg.json"
    config.write_text(json.dumps({"iterations": 3, "batch_size": 2, "crop_len": 8,
                                  "diffusion_steps": 5, "checkpoint_every": 2,
                                  "lr": 1e-3}))
    manifest = str(data / "manifest.json")
    run = run_twice("train", ["--data", manifest, "--config", str(config),
                              "--seed", "1"])
    ckpt = str(run / "checkpoints" / "final.ckpt")

    run_twice("finetune", ["--data", manifest, "--config", str(config),
                           "--checkpoint", ckpt, "--identity", "id02",
                           "--budget-sequences", "1", "--seed", "2"])

    features = str(data / "id02_000.afea")
    samples = run_twice("sample", ["--checkpoint", ckpt, "--features", features,
                                   "--config", str(config), "--seed", "3",
                                   "--n-samples", "2"])

    gt = data / "id02_000.mseq"
    n_frames = read_mseq(gt).n_frames
    kf_path = tmp_path / "kf.json"
    save_keyframes(kf_path, n_frames, [0, 5], gt.name, [0, 5])
    (tmp_path / gt.name).write_bytes(gt.read_bytes())
    run_twice("edit", ["--checkpoint", ckpt, "--features", features,
                       "--config", str(config), "--seed", "3",
                       "--keyframes", str(kf_path)])

    pred = str(samples / "sample_000.mseq")
    for tag in ("a", "b"):
        out = tmp_path / f"eval_{tag}.csv"
        assert main(["eval", "--pred", pred, "--gt", str(gt),
                     "--template", str(data / "template.json"),
                     "--out", str(out)]) == 0
    assert (tmp_path / "eval_a.csv").read_bytes() == (tmp_path / "eval_b.csv").read_bytes()

    for tag in ("a", "b"):
        out = tmp_path / f"sweep_{tag}.csv"
        assert main(["sweep-guidance", "--checkpoint", ckpt, "--data", manifest,
                     "--config", str(config), "--seed", "4", "--n-samples", "2",
                     "--max-sequences", "1", "--out", str(out)]) == 0
    assert (tmp_path / "sweep_a.csv").read_bytes() == (tmp_path / "sweep_b.csv").read_bytes()
