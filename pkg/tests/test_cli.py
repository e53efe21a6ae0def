"""
命令行端到端测试（进程内调用 main，使用小场景与缩小的模型）
"""

import json
import shutil

import numpy as np
import pandas as pd
import pytest

from src.cli import commands
from src.cli.maps import PALETTE, read_ppm
from src.core.data import load_label_stem
from src.core.layers import Variant
from src.core.metrics import parse_key_values
from src.main import main

SMALL_MODEL = [
    "--hidden-dim", "8", "--ffn-dim", "8", "--blocks", "1", "--token-segment", "16",
    "--batch-size", "32", "--train-fraction", "0.2",
]


def synth(out, *extra):
    argv = ["synth", "--out", str(out), "--height", "32", "--width", "32", "--classes", "3", "--seed", "1", *extra]
    assert main(argv) == 0
    return out


def train(scene, out, *extra):
    argv = ["train", "--data", str(scene), "--out", str(out), "--seed", "7", "--epochs", "2", *SMALL_MODEL, *extra]
    return main(argv)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def scene_dir(workspace):
    return synth(workspace / "scene")


@pytest.fixture(scope="module")
def trained(workspace, scene_dir):
    out = workspace / "run"
    assert train(scene_dir, out) == 0
    return out


class TestSynth:
    def test_default_layout(self, scene_dir):
        index = json.loads((scene_dir / "scene.json").read_text(encoding="utf-8"))
        assert len(index["modalities"]) == 3
        for stem in index["modalities"] + ["labels"]:
            assert (scene_dir / f"{stem}.json").is_file()
            assert (scene_dir / f"{stem}.bin").is_file()
        assert (scene_dir / "manifest.json").is_file()

    def test_same_seed_same_bytes(self, tmp_path, scene_dir):
        again = synth(tmp_path / "again")
        for path in scene_dir.glob("*.bin"):
            assert (again / path.name).read_bytes() == path.read_bytes()

    def test_holdout_writes_test_labels(self, tmp_path):
        out = synth(tmp_path / "dual", "--holdout", "0.5")
        train_labels = load_label_stem(out / "labels").labels
        test_labels = load_label_stem(out / "test_labels").labels
        assert not np.any((train_labels > 0) & (test_labels > 0))

    def test_profile(self, tmp_path):
        out = tmp_path / "berlin"
        assert main(["synth", "--out", str(out), "--profile", "berlin", "--height", "32", "--width", "32"]) == 0
        index = json.loads((out / "scene.json").read_text(encoding="utf-8"))
        assert index["modalities"] == ["hs", "sar"]
        assert len(index["class_names"]) == 8

    def test_bad_flag_is_usage_error(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path), "--classes", "many"]) == 2


class TestTrain:
    def test_artifacts(self, trained):
        for name in ("checkpoint.sguw", "model.json", "report.txt", "loss_curve.csv", "manifest.json"):
            assert (trained / name).is_file(), name
        curve = pd.read_csv(trained / "loss_curve.csv")
        assert list(curve.columns) == ["step", "epoch", "loss"]
        assert curve["epoch"].max() == 2
        manifest = json.loads((trained / "manifest.json").read_text(encoding="utf-8"))
        assert manifest["command"] == "train" and manifest["seed"] == 7
        assert str(trained / "checkpoint.sguw") in manifest["digests"]

    def test_byte_identical_rerun(self, tmp_path, scene_dir, trained):
        assert train(scene_dir, tmp_path / "again") == 0
        for name in ("checkpoint.sguw", "report.txt", "loss_curve.csv", "model.json"):
            assert (tmp_path / "again" / name).read_bytes() == (trained / name).read_bytes()

    def test_report_keys(self, trained):
        values = parse_key_values((trained / "report.txt").read_text(encoding="utf-8"))
        assert list(values)[:3] == ["oa", "aa", "kappa"]
        assert len(values) == 3 + 3

    def test_unknown_variant(self, tmp_path, scene_dir):
        assert train(scene_dir, tmp_path / "x", "--variant", "resnet") == 2

    def test_bad_config_key(self, tmp_path, scene_dir):
        config = tmp_path / "bad.cfg"
        config.write_text("learning_rate=0.1\n", encoding="utf-8")
        argv = ["--config", str(config), "train", "--data", str(scene_dir), "--out", str(tmp_path / "x")]
        assert main(argv) == 2

    def test_config_file_applies(self, tmp_path, scene_dir):
        config = tmp_path / "run.cfg"
        config.write_text("epochs=1\nvariant=mlp\n", encoding="utf-8")
        argv = ["--config", str(config), "train", "--data", str(scene_dir), "--out", str(tmp_path / "x"),
                *SMALL_MODEL]
        assert main(argv) == 0
        model = json.loads((tmp_path / "x" / "model.json").read_text(encoding="utf-8"))
        assert model["config"]["variant"] == "mlp"
        assert pd.read_csv(tmp_path / "x" / "loss_curve.csv")["epoch"].max() == 1

    def test_missing_data_dir_is_usage_error(self, tmp_path):
        out = tmp_path / "x"
        assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(out)]) == 2
        assert not out.exists()

    def test_directory_without_index(self, tmp_path):
        (tmp_path / "empty").mkdir()
        out = tmp_path / "x"
        assert train(tmp_path / "empty", out) == 4
        assert not out.exists()

    def test_out_is_a_file(self, tmp_path, scene_dir):
        taken = tmp_path / "taken"
        taken.write_text("", encoding="utf-8")
        assert train(scene_dir, taken) == 2


class TestEval:
    def test_reproduces_train_report(self, tmp_path, scene_dir, trained):
        argv = ["eval", "--checkpoint", str(trained / "checkpoint.sguw"), "--data", str(scene_dir),
                "--out", str(tmp_path / "eval")]
        assert main(argv) == 0
        assert (tmp_path / "eval" / "report.txt").read_bytes() == (trained / "report.txt").read_bytes()

    def test_parallel_workers_same_report(self, tmp_path, scene_dir, trained):
        argv = ["eval", "--checkpoint", str(trained / "checkpoint.sguw"), "--data", str(scene_dir),
                "--workers", "3", "--out", str(tmp_path / "eval")]
        assert main(argv) == 0
        assert (tmp_path / "eval" / "report.txt").read_bytes() == (trained / "report.txt").read_bytes()

    def test_missing_checkpoint(self, tmp_path, scene_dir, capsys):
        argv = ["eval", "--checkpoint", str(tmp_path / "gone.sguw"), "--data", str(scene_dir)]
        assert main(argv) == 4
        assert "gone.sguw" in capsys.readouterr().err

    def test_missing_data_dir(self, tmp_path, trained):
        argv = ["eval", "--checkpoint", str(trained / "checkpoint.sguw"), "--data", str(tmp_path / "nope")]
        assert main(argv) == 2

    def test_corrupt_checkpoint(self, tmp_path, scene_dir, trained):
        broken = tmp_path / "checkpoint.sguw"
        broken.write_bytes((trained / "checkpoint.sguw").read_bytes()[:100])
        (tmp_path / "model.json").write_bytes((trained / "model.json").read_bytes())
        assert main(["eval", "--checkpoint", str(broken), "--data", str(scene_dir)]) == 4

    @pytest.mark.parametrize("split", ["train", "all"])
    def test_other_splits(self, scene_dir, trained, split, capsys):
        argv = ["eval", "--checkpoint", str(trained / "checkpoint.sguw"), "--data", str(scene_dir), "--split", split]
        assert main(argv) == 0
        assert "oa=" in capsys.readouterr().out


def copy_scene(scene_dir, target, edit):
    """复制场景目录并改写 scene.json"""
    shutil.copytree(scene_dir, target)
    index = json.loads((target / "scene.json").read_text(encoding="utf-8"))
    edit(index)
    (target / "scene.json").write_text(json.dumps(index), encoding="utf-8")
    return target


def predict(trained, scene, out):
    return main(["predict", "--checkpoint", str(trained / "checkpoint.sguw"), "--data", str(scene), "--out", str(out)])


class TestPredict:
    def test_map_matches_palette(self, tmp_path, scene_dir, trained):
        out = tmp_path / "pred"
        assert predict(trained, scene_dir, out) == 0
        labels = load_label_stem(out / "prediction").labels
        assert labels.shape == (32, 32)
        assert labels.min() >= 1 and labels.max() <= 3
        rgb = read_ppm(out / "prediction.ppm")
        assert (out / "prediction.ppm").read_bytes()[:2] == b"P6"
        np.testing.assert_array_equal(rgb, PALETTE[labels])

    def test_unlabeled_scene_matches_labeled(self, tmp_path, scene_dir, trained):
        scene = copy_scene(scene_dir, tmp_path / "unlabeled", lambda index: index.pop("labels"))
        (scene / "labels.json").unlink()
        (scene / "labels.bin").unlink()
        assert predict(trained, scene, tmp_path / "a") == 0
        assert predict(trained, scene_dir, tmp_path / "b") == 0
        assert (tmp_path / "a" / "prediction.bin").read_bytes() == (tmp_path / "b" / "prediction.bin").read_bytes()

    def test_index_without_modalities(self, tmp_path, scene_dir, trained):
        scene = copy_scene(scene_dir, tmp_path / "broken", lambda index: index.pop("modalities"))
        assert predict(trained, scene, tmp_path / "pred") == 4
        assert not (tmp_path / "pred").exists()

    def test_missing_data_dir(self, tmp_path, trained):
        assert predict(trained, tmp_path / "nope", tmp_path / "pred") == 2

    def test_band_mismatch(self, tmp_path, trained):
        other = tmp_path / "other"
        assert main(["synth", "--out", str(other), "--height", "32", "--width", "32", "--classes", "3",
                     "--bands", "2,2"]) == 0
        argv = ["predict", "--checkpoint", str(trained / "checkpoint.sguw"),
                "--model", str(trained / "model.json"), "--data", str(other), "--out", str(tmp_path / "p")]
        assert main(argv) == 4


class TestGradcheck:
    def test_single_variant(self, capsys):
        assert main(["gradcheck", "--variant", "dwc-mlp"]) == 0
        out = capsys.readouterr().out
        assert "[dwc_mlp] PASS" in out
        assert "dwc.k3.kernels" in out
        assert "sgu.weight" not in out


class TestAblate:
    def test_table_layout_baseline_and_rerun(self, tmp_path, scene_dir):
        argv = ["ablate", "--data", str(scene_dir), "--seeds", "1,2,3", "--epochs", "5", "--lr", "0.003",
                *SMALL_MODEL]
        assert main(argv + ["--out", str(tmp_path / "a")]) == 0
        table = (tmp_path / "a" / "ablation.txt").read_text(encoding="utf-8")
        lines = table.splitlines()
        assert [cell.strip() for cell in lines[0].split("|")[1:]] == ["MLP", "SGU + MLP", "DWC + MLP", "SGUMLP"]
        assert len(lines) == 2 + 3 + 3
        frame = pd.read_csv(tmp_path / "a" / "ablation.csv")
        assert len(frame) == 4 * 3
        assert sorted(frame["seed"].unique()) == [1, 2, 3]
        mean_oa = frame.groupby("variant")["oa"].mean()
        assert len(mean_oa) == 4
        assert (mean_oa > 1 / 3).all(), mean_oa.to_dict()
        gains = parse_key_values((tmp_path / "a" / "ablation_gains.txt").read_text(encoding="utf-8"))
        assert "sgu_mlp.oa" in gains and "mlp.oa" not in gains

        assert main(argv + ["--out", str(tmp_path / "b")]) == 0
        assert (tmp_path / "b" / "ablation.txt").read_bytes() == (tmp_path / "a" / "ablation.txt").read_bytes()

    def test_failing_variant_does_not_stop_others(self, tmp_path, scene_dir, monkeypatch):
        original = commands.train_and_report

        def flaky(scene, settings, out_dir):
            if settings.variant == Variant.DWC_MLP.value:
                raise OSError("磁盘已满")
            return original(scene, settings, out_dir)

        monkeypatch.setattr(commands, "train_and_report", flaky)
        out = tmp_path / "a"
        argv = ["ablate", "--data", str(scene_dir), "--out", str(out), "--seeds", "1", "--epochs", "1", *SMALL_MODEL]
        assert main(argv) == 2
        frame = pd.read_csv(out / "ablation.csv")
        assert sorted(frame["variant"]) == sorted(v.value for v in Variant if v is not Variant.DWC_MLP)
        last_row = (out / "ablation.txt").read_text(encoding="utf-8").splitlines()[-1]
        assert last_row.split("|")[3].strip() == "n/a"


class TestSyntheticEndToEnd:
    # 默认网络尺寸 (C=256, 4 个块) 单核训练过慢，验收使用缩小的桌面尺寸
    DESK_MODEL = ["--hidden-dim", "16", "--ffn-dim", "16", "--blocks", "1", "--token-segment", "16"]

    def test_learns_default_scene(self, tmp_path):
        scene = tmp_path / "scene"
        assert main(["synth", "--out", str(scene)]) == 0
        index = json.loads((scene / "scene.json").read_text(encoding="utf-8"))
        assert load_label_stem(scene / index["labels"]).labels.shape == (96, 96)
        argv = ["train", "--data", str(scene), "--out", str(tmp_path / "run"), "--variant", "sgu-mlp",
                "--epochs", "50", *self.DESK_MODEL]
        assert main(argv) == 0
        values = parse_key_values((tmp_path / "run" / "report.txt").read_text(encoding="utf-8"))
        assert values["oa"] >= 0.95
