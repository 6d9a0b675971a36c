import json
import shutil

import numpy as np
import pytest

from priorfuse import cli, experiments, toydata
from priorfuse.imagestack import load_array


def _manifest(task="awgn-blind", **overrides):
    m = experiments.default_manifest(task)
    m["dataset"].update(count=12, image_size=16, train_fraction=0.667)
    m["prior_backend"].update(atoms=6)
    m["train"].update(epochs=2, batch_size=4, lr0=3e-4)
    if task.startswith("inpainting"):
        m["task_params"] = {"patch": 6}
    m.update(overrides)
    return m


def _tiny_phinet(m):
    m["phinet"] = {"depth": 3, "width": 8, "kernel": 3}
    return m


class TestToyData:
    def test_dataset_deterministic(self):
        a = toydata.toy_dataset(3, 16, seed=5)
        b = toydata.toy_dataset(3, 16, seed=5)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.data, y.data)

    def test_scenes_vary(self):
        imgs = toydata.toy_dataset(4, 16, seed=6)
        assert not np.array_equal(imgs[0].data, imgs[1].data)

    def test_split_disjoint_and_exhaustive(self):
        items = list(range(10))
        train, test = toydata.split_dataset(items, 0.7, seed=0)
        assert sorted(train + test) == items
        assert len(train) == 7

    def test_split_deterministic(self):
        items = list(range(20))
        a = toydata.split_dataset(items, 0.5, seed=1)
        b = toydata.split_dataset(items, 0.5, seed=1)
        assert a == b

    def test_bad_fraction(self):
        with pytest.raises(ValueError):
            toydata.split_dataset([1, 2], 1.0, seed=0)


class TestManifest:
    def test_default_valid(self):
        for task in experiments.TASKS:
            experiments.validate_manifest(experiments.default_manifest(task))

    def test_round_trip(self, tmp_path):
        m = experiments.default_manifest("colorization")
        experiments.save_manifest(m, tmp_path / "m.json")
        assert experiments.load_manifest(tmp_path / "m.json") == m

    def test_bad_schema(self):
        m = experiments.default_manifest()
        m["schema"] = "other/9"
        with pytest.raises(experiments.StageError):
            experiments.validate_manifest(m)

    def test_bad_task(self):
        m = experiments.default_manifest()
        m["task"] = "super-resolution"
        with pytest.raises(experiments.StageError):
            experiments.validate_manifest(m)

    def test_stage_error_names_stage(self):
        err = experiments.StageError("train", "boom")
        assert str(err) == "[train] boom"
        assert err.stage == "train"


class TestPrepare:
    def test_awgn_layout_and_meta(self, tmp_path):
        m = _manifest("awgn-blind")
        experiments.cmd_prepare(m, tmp_path)
        assert (tmp_path / "manifest.json").exists()
        with open(tmp_path / "data" / "meta.json") as fh:
            meta = json.load(fh)
        n_train = len(meta["splits"]["train"])
        n_test = len(meta["splits"]["test"])
        assert n_train + n_test == 12 and n_train == 8
        for entry in meta["splits"]["test"]:
            assert 5.0 <= entry["sigma_n"] <= 50.0
            assert (tmp_path / "data" / "test" / f"{entry['id']}.png").exists()
            assert (tmp_path / "data" / "test_obs" / f"{entry['id']}.pfaf").exists()

    def test_inpainting_masks_stored(self, tmp_path):
        m = _manifest("inpainting-central")
        experiments.cmd_prepare(m, tmp_path)
        with open(tmp_path / "data" / "meta.json") as fh:
            meta = json.load(fh)
        entry = meta["splits"]["test"][0]
        mask = load_array(tmp_path / "data" / "masks" / f"test_{entry['id']}.pfaf")
        assert int(mask.sum()) == 36  # 6x6 central patch
        assert (tmp_path / "data" / "masks" / f"test_{entry['id']}.png").exists()

    def test_deterministic_observations(self, tmp_path):
        m = _manifest("awgn-blind")
        experiments.cmd_prepare(m, tmp_path / "a")
        experiments.cmd_prepare(m, tmp_path / "b")
        for split in ("train", "test"):
            a_dir = tmp_path / "a" / "data" / f"{split}_obs"
            for path in a_dir.iterdir():
                other = tmp_path / "b" / "data" / f"{split}_obs" / path.name
                np.testing.assert_array_equal(load_array(path), load_array(other))


class TestStageIsolation:
    def test_stages_require_predecessors(self, tmp_path):
        m = _manifest()
        with pytest.raises(experiments.StageError):
            experiments.cmd_train(m, tmp_path)
        with pytest.raises(experiments.StageError):
            experiments.cmd_evaluate(m, tmp_path)
        with pytest.raises(experiments.StageError):
            experiments.cmd_report(tmp_path)

    def test_analyze_requires_awgn(self, tmp_path):
        m = _manifest("inpainting-central")
        with pytest.raises(experiments.StageError):
            experiments.cmd_analyze_phi(m, tmp_path)


class TestPipelines:
    def _run(self, tmp_path, task, **overrides):
        m = _tiny_phinet(_manifest(task, **overrides))
        experiments.run_pipeline(m, tmp_path)
        return m

    def test_awgn_pipeline(self, tmp_path):
        self._run(tmp_path, "awgn-blind")
        rows = experiments.read_metric_table(tmp_path)
        per_image = [r for r in rows if r["id"] != "mean"]
        assert len(per_image) == 4
        for r in per_image:
            assert r["task"] == "awgn-blind"
            assert r["psnr"] > 0 and 0 <= r["ssim"] <= 1
            assert r["auc"] is None
            assert 0 <= r["mean_phi"] <= 1
        assert rows[-1]["id"] == "mean"
        assert (tmp_path / "plots" / "analysis.txt").exists()
        assert (tmp_path / "plots" / "phi_vs_sigma.png").exists()
        assert (tmp_path / "report.md").exists()

    def test_colorization_pipeline(self, tmp_path):
        self._run(tmp_path, "colorization")
        rows = experiments.read_metric_table(tmp_path)
        per_image = [r for r in rows if r["id"] != "mean"]
        for r in per_image:
            assert 0 <= r["auc"] <= 100
            assert r["sigma_n"] is None

    def test_inpainting_central_pipeline(self, tmp_path):
        self._run(tmp_path, "inpainting-central")
        assert (tmp_path / "eval" / "metrics.tsv").exists()
        phi_files = list((tmp_path / "eval" / "phi").glob("*.pfaf"))
        assert len(phi_files) == 4

    def test_inpainting_random_pipeline(self, tmp_path):
        m = _tiny_phinet(_manifest("inpainting-random"))
        m["dataset"]["image_size"] = 24  # large enough for random patches
        experiments.run_pipeline(m, tmp_path)
        assert (tmp_path / "eval" / "metrics.tsv").exists()

    def test_generator_backend_pipeline(self, tmp_path):
        m = _tiny_phinet(_manifest("awgn-blind"))
        m["prior_backend"] = {"kind": "generator", "latent_dim": 8,
                              "base_channels": 4, "split_layer": 2,
                              "decoder_epochs": 3}
        m["inversion_preset"] = "denoising-desk"
        experiments.run_pipeline(m, tmp_path)
        losses = json.loads((tmp_path / "priors" / "test" / "losses.json").read_text())
        assert len(losses) == 4

    def test_generator_rejects_colorization(self, tmp_path):
        m = _tiny_phinet(_manifest("colorization"))
        m["prior_backend"] = {"kind": "generator"}
        experiments.cmd_prepare(m, tmp_path)
        with pytest.raises(experiments.StageError):
            experiments.cmd_invert(m, tmp_path)


class TestResumeAndDeterminism:
    def test_invert_resumes_and_skips(self, tmp_path):
        m = _tiny_phinet(_manifest("awgn-blind"))
        experiments.cmd_prepare(m, tmp_path)
        experiments.cmd_invert(m, tmp_path)
        first = load_array(tmp_path / "priors" / "test" / "0000.pfaf")
        mtime = (tmp_path / "priors" / "test" / "0000.pfaf").stat().st_mtime_ns
        experiments.cmd_invert(m, tmp_path)  # no-op on existing projections
        assert (tmp_path / "priors" / "test" / "0000.pfaf").stat().st_mtime_ns == mtime
        np.testing.assert_array_equal(
            load_array(tmp_path / "priors" / "test" / "0000.pfaf"), first)

    def test_train_skips_when_complete(self, tmp_path):
        m = _tiny_phinet(_manifest("awgn-blind"))
        experiments.cmd_prepare(m, tmp_path)
        experiments.cmd_invert(m, tmp_path)
        experiments.cmd_train(m, tmp_path)
        meta_path = tmp_path / "checkpoints" / "final" / "meta.json"
        mtime = meta_path.stat().st_mtime_ns
        experiments.cmd_train(m, tmp_path)
        assert meta_path.stat().st_mtime_ns == mtime

    def test_full_run_byte_identical(self, tmp_path):
        m = _tiny_phinet(_manifest("awgn-blind"))
        experiments.run_pipeline(m, tmp_path / "a")
        experiments.run_pipeline(m, tmp_path / "b")
        a = (tmp_path / "a" / "eval" / "metrics.tsv").read_bytes()
        b = (tmp_path / "b" / "eval" / "metrics.tsv").read_bytes()
        assert a == b


class TestCli:
    def test_init_manifest(self, tmp_path):
        out = tmp_path / "m.json"
        assert cli.main(["init-manifest", "--task", "colorization",
                         "--out", str(out)]) == 0
        m = experiments.load_manifest(out)
        assert m["task"] == "colorization"

    def test_full_pipeline_via_cli(self, tmp_path):
        mpath = tmp_path / "m.json"
        experiments.save_manifest(_tiny_phinet(_manifest("awgn-blind")), mpath)
        run = tmp_path / "run"
        for verb in ("prepare", "invert", "train", "evaluate", "analyze-phi",
                     "report"):
            argv = [verb, "--run-dir", str(run)]
            if verb == "prepare":
                argv += ["--manifest", str(mpath)]
            assert cli.main(argv) == 0, verb
        assert (run / "report.md").exists()

    def test_stage_error_exit_code(self, tmp_path, capsys):
        assert cli.main(["train", "--run-dir", str(tmp_path / "empty")]) == 1
        assert "train" in capsys.readouterr().err

    def test_train_overrides(self, tmp_path):
        mpath = tmp_path / "m.json"
        experiments.save_manifest(_tiny_phinet(_manifest("awgn-blind")), mpath)
        run = tmp_path / "run"
        assert cli.main(["prepare", "--run-dir", str(run),
                         "--manifest", str(mpath)]) == 0
        assert cli.main(["invert", "--run-dir", str(run)]) == 0
        assert cli.main(["train", "--run-dir", str(run), "--epochs", "1"]) == 0
        with open(run / "checkpoints" / "final" / "meta.json") as fh:
            meta = json.load(fh)
        assert meta["train_config"]["epochs"] == 1
