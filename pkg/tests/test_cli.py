import json

import numpy as np
import pytest

from facemotion.cli import main
from facemotion.data import read_mseq, write_afea, write_mseq, AudioFeatureSequence, MotionSequence
from facemotion.diffusion import save_keyframes


def _tree_bytes(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file()}


SYNTH_ARGS = ["--seqs-per-identity", "2", "--vertices", "8", "--channels", "4",
              "--min-frames", "20", "--max-frames", "24"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Tiny dataset plus a briefly trained checkpoint, shared by CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["synth-data", "--out", str(data), "--seed", "4",
                 "--identities", "3", "--split", "1,1,1"] + SYNTH_ARGS) == 0
    config = root / "train.json"
    config.write_text(json.dumps({
        "iterations": 3, "batch_size": 2, "crop_len": 8, "diffusion_steps": 5,
        "checkpoint_every": 2, "lr": 1e-3,
    }))
    run = root / "run"
    assert main(["train", "--data", str(data / "manifest.json"), "--out", str(run),
                 "--config", str(config), "--seed", "1"]) == 0
    return {"root": root, "data": data, "config": config,
            "ckpt": run / "checkpoints" / "final.ckpt",
            "features": data / "id02_000.afea", "motion": data / "id02_000.mseq"}


class TestSynthData:
    def test_default_identity_count_and_split(self, tmp_path):
        out = tmp_path / "ds"
        assert main(["synth-data", "--out", str(out), "--seed", "0"] + SYNTH_ARGS) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        identities = {e["identity"] for e in manifest["entries"]}
        assert len(identities) == 12
        by_split = {s: {e["identity"] for e in manifest["entries"] if e["split"] == s}
                    for s in ("train", "val", "test")}
        assert (len(by_split["train"]), len(by_split["val"]), len(by_split["test"])) \
            == (8, 2, 2)

    def test_byte_identical_reruns(self, tmp_path):
        args = ["--seed", "9", "--identities", "3", "--split", "1,1,1"] + SYNTH_ARGS
        assert main(["synth-data", "--out", str(tmp_path / "a")] + args) == 0
        assert main(["synth-data", "--out", str(tmp_path / "b")] + args) == 0
        assert _tree_bytes(tmp_path / "a") == _tree_bytes(tmp_path / "b")

    def test_single_identity_needs_split(self, tmp_path, capsys):
        code = main(["synth-data", "--out", str(tmp_path / "x"),
                     "--identities", "1"] + SYNTH_ARGS)
        assert code == 2
        assert "split" in capsys.readouterr().err

    def test_run_manifest_written(self, tmp_path):
        out = tmp_path / "ds"
        main(["synth-data", "--out", str(out), "--seed", "0", "--identities", "3",
              "--split", "1,1,1"] + SYNTH_ARGS)
        payload = json.loads((out / "run_manifest.json").read_text())
        assert payload["command"] == "synth-data"
        assert payload["settings"]["seed"] == 0


class TestTrain:
    def test_zero_iterations_initial_checkpoint_only(self, workspace, tmp_path):
        out = tmp_path / "run0"
        assert main(["train", "--data", str(workspace["data"] / "manifest.json"),
                     "--out", str(out), "--config", str(workspace["config"]),
                     "--iterations", "0"]) == 0
        names = sorted(p.name for p in (out / "checkpoints").glob("*.ckpt"))
        assert names == ["final.ckpt"]
        lines = (out / "loss_log.csv").read_text().strip().splitlines()
        assert lines == ["iteration,l_simple,l_vel,l_total"]

    def test_deterministic_training(self, workspace, tmp_path):
        base = ["train", "--data", str(workspace["data"] / "manifest.json"),
                "--config", str(workspace["config"]), "--seed", "6"]
        assert main(base + ["--out", str(tmp_path / "a")]) == 0
        assert main(base + ["--out", str(tmp_path / "b")]) == 0
        assert ((tmp_path / "a" / "checkpoints" / "final.ckpt").read_bytes()
                == (tmp_path / "b" / "checkpoints" / "final.ckpt").read_bytes())
        assert ((tmp_path / "a" / "loss_log.csv").read_bytes()
                == (tmp_path / "b" / "loss_log.csv").read_bytes())

    def test_missing_manifest_is_data_error(self, workspace, tmp_path):
        assert main(["train", "--data", str(tmp_path / "nope.json"),
                     "--out", str(tmp_path / "o")]) == 3


class TestSample:
    def test_writes_requested_count(self, workspace, tmp_path):
        out = tmp_path / "samples"
        assert main(["sample", "--checkpoint", str(workspace["ckpt"]),
                     "--features", str(workspace["features"]), "--out", str(out),
                     "--n-samples", "3", "--config", str(workspace["config"])]) == 0
        files = sorted(p.name for p in out.glob("*.mseq"))
        assert files == ["sample_000.mseq", "sample_001.mseq", "sample_002.mseq"]

    def test_default_guidance_recorded(self, workspace, tmp_path):
        out = tmp_path / "s"
        main(["sample", "--checkpoint", str(workspace["ckpt"]),
              "--features", str(workspace["features"]), "--out", str(out),
              "--config", str(workspace["config"])])
        manifest = json.loads((out / "run_manifest.json").read_text())
        assert manifest["settings"]["guidance"] == 0.5

    def test_deterministic_outputs(self, workspace, tmp_path):
        base = ["sample", "--checkpoint", str(workspace["ckpt"]),
                "--features", str(workspace["features"]), "--seed", "3",
                "--config", str(workspace["config"])]
        assert main(base + ["--out", str(tmp_path / "a")]) == 0
        assert main(base + ["--out", str(tmp_path / "b")]) == 0
        assert _tree_bytes(tmp_path / "a") == _tree_bytes(tmp_path / "b")

    def test_unconditional_ignores_features(self, workspace, tmp_path):
        common = ["--checkpoint", str(workspace["ckpt"]), "--seed", "2",
                  "--frames", "12", "--unconditional",
                  "--config", str(workspace["config"])]
        assert main(["sample", "--out", str(tmp_path / "w")] + common
                    + ["--features", str(workspace["features"])]) == 0
        assert main(["sample", "--out", str(tmp_path / "wo")] + common) == 0
        assert ((tmp_path / "w" / "sample_000.mseq").read_bytes()
                == (tmp_path / "wo" / "sample_000.mseq").read_bytes())

    def test_needs_features_or_unconditional(self, workspace, tmp_path):
        assert main(["sample", "--checkpoint", str(workspace["ckpt"]),
                     "--out", str(tmp_path / "x")]) == 2

    def test_frames_conflict_rejected(self, workspace, tmp_path):
        assert main(["sample", "--checkpoint", str(workspace["ckpt"]),
                     "--features", str(workspace["features"]),
                     "--frames", "999", "--out", str(tmp_path / "x")]) == 2


class TestEdit:
    def test_requires_keyframe_file(self, workspace, tmp_path, capsys):
        assert main(["edit", "--checkpoint", str(workspace["ckpt"]),
                     "--features", str(workspace["features"]),
                     "--out", str(tmp_path / "x")]) == 2
        assert "keyframes" in capsys.readouterr().err

    def test_full_coverage_reproduces_keyframes(self, workspace, tmp_path):
        gt = read_mseq(workspace["motion"])
        n = gt.n_frames
        kf_path = tmp_path / "kf.json"
        save_keyframes(kf_path, n, range(n), workspace["motion"].name, range(n))
        # values_file is resolved relative to the keyframe file
        (tmp_path / workspace["motion"].name).write_bytes(workspace["motion"].read_bytes())
        out = tmp_path / "edited"
        assert main(["edit", "--checkpoint", str(workspace["ckpt"]),
                     "--features", str(workspace["features"]), "--out", str(out),
                     "--keyframes", str(kf_path),
                     "--config", str(workspace["config"])]) == 0
        result = read_mseq(out / "sample_000.mseq")
        assert np.array_equal(result.values, gt.values)

    def test_partial_keyframes_exact_rows(self, workspace, tmp_path):
        gt = read_mseq(workspace["motion"])
        kf_path = tmp_path / "kf.json"
        save_keyframes(kf_path, gt.n_frames, [0, 5], workspace["motion"].name, [0, 5])
        (tmp_path / workspace["motion"].name).write_bytes(workspace["motion"].read_bytes())
        out = tmp_path / "edited"
        assert main(["edit", "--checkpoint", str(workspace["ckpt"]),
                     "--features", str(workspace["features"]), "--out", str(out),
                     "--keyframes", str(kf_path),
                     "--config", str(workspace["config"])]) == 0
        result = read_mseq(out / "sample_000.mseq")
        assert np.array_equal(result.values[[0, 5]], gt.values[[0, 5]])
        assert not np.array_equal(result.values, gt.values)


class TestEval:
    def test_gt_vs_gt_all_zero(self, workspace, tmp_path):
        out = tmp_path / "report.csv"
        assert main(["eval", "--pred", str(workspace["motion"]),
                     "--gt", str(workspace["motion"]),
                     "--template", str(workspace["data"] / "template.json"),
                     "--out", str(out)]) == 0
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "sequence,lip_sync,lip_max,l2_lip,l2_face"
        mean = lines[-1].split(",")
        assert mean[0] == "mean" and all(float(v) == 0.0 for v in mean[1:])

    def test_deterministic(self, workspace, tmp_path):
        args = ["eval", "--pred", str(workspace["motion"]),
                "--gt", str(workspace["motion"]),
                "--template", str(workspace["data"] / "template.json")]
        assert main(args + ["--out", str(tmp_path / "a.csv")]) == 0
        assert main(args + ["--out", str(tmp_path / "b.csv")]) == 0
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_sample_set_adds_diversity(self, workspace, tmp_path, rng):
        gt = read_mseq(workspace["motion"])
        preds = []
        for i in range(3):
            p = tmp_path / f"p{i}.mseq"
            write_mseq(p, MotionSequence(values=gt.values + rng.normal(size=gt.values.shape)))
            preds.append(str(p))
        out = tmp_path / "report.csv"
        assert main(["eval", "--pred", *preds, "--gt", str(workspace["motion"]),
                     "--template", str(workspace["data"] / "template.json"),
                     "--out", str(out)]) == 0
        header = out.read_text().splitlines()[0]
        assert "div_e" in header

    def test_malformed_pred_is_data_error(self, workspace, tmp_path, capsys):
        bad = tmp_path / "bad.mseq"
        bad.write_bytes(b"garbage")
        assert main(["eval", "--pred", str(bad), "--gt", str(workspace["motion"]),
                     "--template", str(workspace["data"] / "template.json"),
                     "--out", str(tmp_path / "r.csv")]) == 3

    def test_count_mismatch_is_config_error(self, workspace, tmp_path):
        assert main(["eval", "--pred", str(workspace["motion"]),
                     "--gt", str(workspace["motion"]), str(workspace["motion"]),
                     "--template", str(workspace["data"] / "template.json"),
                     "--out", str(tmp_path / "r.csv")]) == 2


class TestSweep:
    def test_grid_rows_and_determinism(self, workspace, tmp_path):
        args = ["sweep-guidance", "--checkpoint", str(workspace["ckpt"]),
                "--data", str(workspace["data"] / "manifest.json"),
                "--n-samples", "2", "--max-sequences", "1", "--seed", "5",
                "--config", str(workspace["config"])]
        assert main(args + ["--out", str(tmp_path / "a.csv")]) == 0
        lines = (tmp_path / "a.csv").read_text().strip().splitlines()
        assert lines[0] == "s,lip_sync,div_e"
        assert len(lines) == 12
        assert [ln.split(",")[0] for ln in lines[1:]] == \
            ["0.0", "0.1", "0.2", "0.3", "0.4", "0.5", "0.6", "0.7", "0.8", "0.9", "1.0"]
        assert main(args + ["--out", str(tmp_path / "b.csv")]) == 0
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


class TestBadUsage:
    def test_unknown_command_exits_two(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2

    def test_bad_config_file(self, workspace, tmp_path):
        bad = tmp_path / "cfg.json"
        bad.write_text("[1, 2]")
        assert main(["train", "--data", str(workspace["data"] / "manifest.json"),
                     "--out", str(tmp_path / "o"), "--config", str(bad)]) == 2
