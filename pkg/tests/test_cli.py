import json
from pathlib import Path

import matplotlib.image as mpimg
import numpy as np
import pytest
import yaml

from shapeformer.cli import main
from shapeformer.config import SEED_ENV, RunConfig, load_config, resolve_seed
from shapeformer.errors import MissingArtifact, UsageError
from shapeformer.masks import RleMask, rle_decode
from shapeformer.plots import plot_run
from shapeformer.synth import read_dataset, read_manifest

TINY = {
    "seed": 3,
    "data": {"image_size": 32, "num_categories": 2, "object_size": [10, 16]},
    "retriever": {"num_categories": 2, "codebook_size": 8, "code_dim": 4, "grid": 2, "resolution": 8, "width": 4},
    "prior": {"epochs": 1, "batch_size": 16},
    "model": {"image_size": 32, "num_categories": 2, "c_e": 8, "roi_size": 4, "backbone_width": 4,
              "vis_layers": 1, "amodal_layers": 1},
    "train": {"epochs": 1, "batch_size": 4},
}


def tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and not p.name.startswith("run_")}


def manifest(out: Path, command: str) -> dict:
    m = json.loads((out / f"run_{command}.json").read_text())
    for rel in m["outputs"]:
        assert (out / rel).exists(), rel
    return m


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.yaml"
    cfg.write_text(yaml.safe_dump(TINY))
    data, ckpt, tr = root / "data", root / "prior" / "ret.ckpt", root / "train"
    assert main(["gen-data", "--config", str(cfg), "--train", "10", "--test", "5", "--seed", "7",
                 "--out", str(data)]) == 0
    assert main(["train-prior", "--config", str(cfg), "--data", str(data), "--out", str(ckpt)]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(data), "--prior-ckpt", str(ckpt),
                 "--out", str(tr)]) == 0
    return {"root": root, "cfg": cfg, "data": data, "ckpt": ckpt, "train": tr}


class TestCommands:
    def test_gen_data_lists_fifteen_scenes(self, run):
        m = read_manifest(run["data"])
        assert len(m.splits["train"]) + len(m.splits["test"]) == 15
        assert len(read_dataset(run["data"], "test")) == 5
        rm = manifest(run["data"], "gen-data")
        assert rm["seed"] == 7 and rm["config"]["data"]["seed"] == 7

    def test_gen_data_is_byte_identical(self, run, tmp_path):
        out = tmp_path / "again"
        assert main(["gen-data", "--config", str(run["cfg"]), "--train", "10", "--test", "5", "--seed", "7",
                     "--out", str(out)]) == 0
        assert tree_bytes(out) == tree_bytes(run["data"])

    def test_train_prior_outputs(self, run):
        m = manifest(run["ckpt"].parent, "train-prior")
        assert "ret.ckpt" in m["outputs"]
        assert "prior_iou" in json.loads((run["ckpt"].parent / "ret_eval_test.json").read_text())

    def test_train_outputs_and_config_echo(self, run):
        m = manifest(run["train"], "train")
        assert {"model.ckpt", "history.json", "eval_test.json", "config.yaml"} <= set(m["outputs"])
        echo = yaml.safe_load((run["train"] / "config.yaml").read_text())
        assert echo["model"]["c_e"] == 8 and echo["seed"] == 3
        assert m["started"] and m["finished"] and m["code_version"]

    def test_train_twice_same_hash(self, run, tmp_path, capsys):
        hashes = []
        for name in ("a", "b"):
            capsys.readouterr()
            assert main(["train", "--config", str(run["cfg"]), "--data", str(run["data"]), "--prior-ckpt",
                         str(run["ckpt"]), "--out", str(tmp_path / name)]) == 0
            hashes.append(json.loads(capsys.readouterr().out.strip().splitlines()[-1])["param_hash"])
        assert hashes[0] == hashes[1]

    def test_eval(self, run, tmp_path):
        assert main(["eval", "--ckpt", str(run["train"] / "model.ckpt"), "--data", str(run["data"]),
                     "--split", "test", "--out", str(tmp_path)]) == 0
        rep = json.loads((tmp_path / "eval_test.json").read_text())
        assert list(rep) == ["num_instances", "visible", "amodal", "occluding", "occluded"]

    def test_infer(self, run, tmp_path):
        scene = run["data"] / "test" / "scene_000000.json"
        n = len(json.loads(scene.read_text())["instances"])
        assert main(["infer", "--ckpt", str(run["train"] / "model.ckpt"), "--image", str(scene),
                     "--out", str(tmp_path)]) == 0
        assert len(list(tmp_path.glob("roi_*.png"))) == n
        masks = json.loads((tmp_path / "masks.json").read_text())
        assert len(masks["rois"]) == n
        for roi in masks["rois"]:
            assert set(roi["masks"]) == {"visible", "occluding", "amodal", "occluded"}
            assert rle_decode(RleMask.from_json(roi["masks"]["amodal"])).shape == (32, 32)
        with np.load(tmp_path / "attention.npz") as att:
            assert set(att.files) == {"masked", "unmasked"}
            assert att["masked"].shape == att["unmasked"].shape == (n, 2, 4, 4)
        manifest(tmp_path, "infer")

    def test_plot_train_run(self, run, tmp_path):
        assert main(["plot", str(run["train"]), "--out", str(tmp_path)]) == 0
        assert (tmp_path / "loss_curve.png").exists()
        assert (tmp_path / "iou_bars_test.png").exists()

    def test_plot_infer_heatmaps(self, run, tmp_path):
        scene = run["data"] / "test" / "scene_000001.json"
        n = len(json.loads(scene.read_text())["instances"])
        inf = tmp_path / "inf"
        assert main(["infer", "--ckpt", str(run["train"] / "model.ckpt"), "--image", str(scene),
                     "--out", str(inf)]) == 0
        made = plot_run(inf, tmp_path / "figs")
        img = mpimg.imread(made[0])
        assert made[0].name == "attention_heatmaps.png"
        # two columns (masked, unmasked), one row per RoI
        assert img.shape[1] == pytest.approx(2 * 2.2 * 100, abs=2)
        assert img.shape[0] == pytest.approx(n * 2.2 * 100, abs=2)

    def test_ablate_and_plot(self, run, tmp_path):
        out = tmp_path / "abl"
        assert main(["ablate", "--config", str(run["cfg"]), "--data", str(run["data"]), "--prior-ckpt",
                     str(run["ckpt"]), "--out", str(out), "--variants", "full,no-prior-mask",
                     "--seeds", "2"]) == 0
        res = json.loads((out / "ablation.json").read_text())
        assert res["seeds"] == [3, 4] and res["variants"] == ["full", "no-prior-mask"]
        assert main(["plot", str(out)]) == 0
        assert (out / "ablation_bars.png").exists()


class TestErrors:
    def test_unknown_subcommand_exits_2_with_usage(self, capsys):
        assert main(["bogus"]) == 2
        assert "usage:" in capsys.readouterr().err

    def test_no_subcommand(self, capsys):
        assert main([]) == 2

    def test_missing_checkpoint_exits_1(self, run, capsys):
        assert main(["eval", "--ckpt", "/nonexistent.ckpt", "--data", str(run["data"])]) == 1
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert err["error"] == "MissingArtifact"

    def test_variant_needs_prior(self, run, tmp_path):
        assert main(["train", "--config", str(run["cfg"]), "--data", str(run["data"]),
                     "--out", str(tmp_path)]) == 2

    def test_unknown_ablation_variant(self, run, tmp_path):
        assert main(["ablate", "--data", str(run["data"]), "--out", str(tmp_path), "--variants", "x"]) == 2

    def test_plot_empty_dir(self, tmp_path):
        assert main(["plot", str(tmp_path)]) == 1
        with pytest.raises(MissingArtifact):
            plot_run(tmp_path)


class TestConfig:
    def test_seed_precedence(self, monkeypatch):
        monkeypatch.delenv(SEED_ENV, raising=False)
        assert resolve_seed(None, 4) == 4
        monkeypatch.setenv(SEED_ENV, "9")
        assert resolve_seed(None, 4) == 9
        assert resolve_seed(2, 4) == 2
        monkeypatch.setenv(SEED_ENV, "x")
        with pytest.raises(UsageError):
            resolve_seed(None, 4)

    def test_env_seed_reaches_manifest(self, run, tmp_path, monkeypatch):
        monkeypatch.setenv(SEED_ENV, "11")
        assert main(["gen-data", "--config", str(run["cfg"]), "--train", "1", "--test", "1",
                     "--out", str(tmp_path)]) == 0
        assert manifest(tmp_path, "gen-data")["seed"] == 11

    def test_round_trip(self, tmp_path):
        cfg = RunConfig.from_dict(TINY)
        cfg.dump(tmp_path / "c.yaml")
        assert load_config(tmp_path / "c.yaml").to_dict() == cfg.to_dict()

    def test_rejects_unknown_keys(self, tmp_path):
        with pytest.raises(UsageError):
            RunConfig.from_dict({"model": {"nope": 1}})
        with pytest.raises(UsageError):
            RunConfig.from_dict({"extra": {}})
        with pytest.raises(UsageError):
            RunConfig.from_dict({"variant": "bogus"})
        (tmp_path / "bad.yaml").write_text("- a list")
        with pytest.raises(UsageError):
            load_config(tmp_path / "bad.yaml")
