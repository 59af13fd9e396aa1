import csv
import json
import os

import cv2
import numpy as np
import pytest
import torch

from lapseg.checkpoint import load_checkpoint, save_checkpoint
from lapseg.cli import main
from lapseg.data import read_manifest_csv, write_manifest_csv
from lapseg.model import build_model, tiny_config

from conftest import write_dataset

TINY_FLAGS = ["--backbone-a", "tiny_reference", "--backbone-b", "tiny_reference",
              "--no-pretrained", "--width-multiplier", "0.125",
              "--se-reduction", "4", "--input-size", "32x32"]


@pytest.fixture(scope="module")
def prepared(tmp_path_factory, overfit_root):
    out = tmp_path_factory.mktemp("manifests")
    code = main(["prepare", "--root", overfit_root, "--ratios", "1.0,0,0",
                 "--seed", "0", "--out", str(out)])
    assert code == 0
    return str(out)


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory, prepared):
    run_dir = tmp_path_factory.mktemp("run")
    manifest = os.path.join(prepared, "train.csv")
    code = main(["train", "--train-manifest", manifest, "--val-manifest", manifest,
                 "--run-dir", str(run_dir), *TINY_FLAGS,
                 "--epochs", "1", "--batch-size", "8", "--learning-rate", "0.01",
                 "--seed", "0", "--no-augment"])
    assert code == 0
    return str(run_dir)


@pytest.fixture(scope="module")
def best_ckpt(trained_run):
    return os.path.join(trained_run, "checkpoints", "best.ckpt")


class TestPrepare:
    def test_split_sizes_printed(self, dataset_root, tmp_path, capsys):
        code = main(["prepare", "--root", dataset_root, "--seed", "1",
                     "--out", str(tmp_path)])
        assert code == 0
        assert capsys.readouterr().out.strip() == "train=10 val=1 test=1"
        for name in ("train", "val", "test"):
            assert os.path.isfile(tmp_path / f"{name}.csv")

    def test_identity_ratios(self, dataset_root, tmp_path, capsys):
        main(["prepare", "--root", dataset_root, "--ratios", "1,0,0",
              "--out", str(tmp_path)])
        assert "train=12 val=0 test=0" in capsys.readouterr().out
        assert len(read_manifest_csv(tmp_path / "train.csv")) == 12

    def test_byte_identical_reruns(self, dataset_root, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        main(["prepare", "--root", dataset_root, "--seed", "3", "--out", str(a)])
        main(["prepare", "--root", dataset_root, "--seed", "3", "--out", str(b)])
        for name in ("train", "val", "test"):
            assert (a / f"{name}.csv").read_bytes() == (b / f"{name}.csv").read_bytes()

    def test_empty_root_exits_2(self, tmp_path, capsys):
        os.makedirs(tmp_path / "images")
        os.makedirs(tmp_path / "masks")
        code = main(["prepare", "--root", str(tmp_path), "--out", str(tmp_path / "o")])
        assert code == 2

    def test_missing_mask_exits_2_with_path(self, tmp_path, capsys):
        write_dataset(str(tmp_path / "d"), {"a": 2})
        os.remove(tmp_path / "d" / "masks" / "a" / "frame_000.png")
        code = main(["prepare", "--root", str(tmp_path / "d"),
                     "--out", str(tmp_path / "o")])
        assert code == 2
        assert "frame_000" in capsys.readouterr().err


class TestTrain:
    def test_run_dir_contents(self, trained_run):
        assert os.path.isfile(os.path.join(trained_run, "config.json"))
        assert os.path.isfile(os.path.join(trained_run, "train_log.jsonl"))
        assert os.path.isfile(os.path.join(trained_run, "checkpoints", "best.ckpt"))
        resolved = json.load(open(os.path.join(trained_run, "config.json")))
        assert resolved["epochs"] == 1
        assert resolved["width_multiplier"] == 0.125

    def test_flag_overrides_config_file(self, prepared, tmp_path, capsys):
        config_path = tmp_path / "c.json"
        config_path.write_text(json.dumps({"epochs": 100, "augment": False,
                                           "batch_size": 8, "learning_rate": 0.01}))
        manifest = os.path.join(prepared, "train.csv")
        run_dir = tmp_path / "run"
        code = main(["train", "--config", str(config_path),
                     "--train-manifest", manifest, "--val-manifest", manifest,
                     "--run-dir", str(run_dir), *TINY_FLAGS, "--epochs", "1",
                     "--seed", "0"])
        assert code == 0
        lines = open(run_dir / "train_log.jsonl").read().splitlines()
        assert len(lines) == 1

    def test_missing_manifest_flag_is_usage_error(self, capsys):
        with pytest.raises(SystemExit) as err:
            main(["train", "--run-dir", "/tmp/x"])
        assert err.value.code == 2

    def test_unknown_config_key_rejected(self, prepared, tmp_path):
        config_path = tmp_path / "c.json"
        config_path.write_text(json.dumps({"learning_rte": 0.1}))
        manifest = os.path.join(prepared, "train.csv")
        code = main(["train", "--config", str(config_path),
                     "--train-manifest", manifest, "--val-manifest", manifest,
                     "--run-dir", str(tmp_path / "run"), *TINY_FLAGS])
        assert code == 2


class TestEvaluate:
    def test_json_and_csv_agree(self, best_ckpt, prepared, tmp_path, capsys):
        manifest = os.path.join(prepared, "train.csv")
        out_json = tmp_path / "r.json"
        out_csv = tmp_path / "r.csv"
        code = main(["evaluate", "--checkpoint", best_ckpt, "--manifest", manifest,
                     "--out-json", str(out_json), "--out-csv", str(out_csv),
                     "--method", "tiny"])
        assert code == 0
        assert "dice=" in capsys.readouterr().out
        payload = json.loads(out_json.read_text())
        with open(out_csv) as fh:
            row = list(csv.DictReader(fh))[0]
        assert row["method"] == "tiny"
        for key in ("dice", "miou", "recall", "precision", "f2", "accuracy"):
            assert float(row[key]) == payload[key]

    def test_both_empty_scores_one(self, tmp_path, capsys):
        root = tmp_path / "empty"
        os.makedirs(root / "images")
        os.makedirs(root / "masks")
        rng = np.random.default_rng(0)
        for i in range(2):
            img = rng.integers(0, 255, (64, 64, 3), dtype=np.uint8)
            cv2.imwrite(str(root / "images" / f"f{i}.png"), img)
            cv2.imwrite(str(root / "masks" / f"f{i}.png"), np.zeros((64, 64), np.uint8))
        main(["prepare", "--root", str(root), "--ratios", "1,0,0",
              "--out", str(tmp_path / "m")])
        capsys.readouterr()

        torch.manual_seed(0)
        model = build_model(tiny_config(width_multiplier=0.125, input_size=(64, 64)))
        with torch.no_grad():
            model.head.weight.zero_()
            model.head.bias.fill_(-10.0)  # probs ~ 0: prediction empty everywhere
        ckpt = str(tmp_path / "neg.ckpt")
        save_checkpoint(model, ckpt)

        out_json = tmp_path / "r.json"
        code = main(["evaluate", "--checkpoint", ckpt,
                     "--manifest", str(tmp_path / "m" / "train.csv"),
                     "--out-json", str(out_json)])
        assert code == 0
        payload = json.loads(out_json.read_text())
        assert payload["dice"] == 1.0
        assert payload["accuracy"] == 1.0

    def test_config_mismatch_warns(self, best_ckpt, prepared, tmp_path):
        manifest = os.path.join(prepared, "train.csv")
        with pytest.warns(UserWarning, match="differs from checkpoint"):
            main(["evaluate", "--checkpoint", best_ckpt, "--manifest", manifest,
                  "--input-size", "64x64"])

    def test_matches_library_validate_exactly(self, best_ckpt, prepared, tmp_path):
        from lapseg.training import validate
        manifest_path = os.path.join(prepared, "train.csv")
        out_json = tmp_path / "r.json"
        main(["evaluate", "--checkpoint", best_ckpt, "--manifest", manifest_path,
              "--out-json", str(out_json)])
        model, _, _ = load_checkpoint(best_ckpt)
        direct = validate(model, read_manifest_csv(manifest_path))
        payload = json.loads(out_json.read_text())
        for key in ("dice", "miou", "recall", "precision", "f2", "accuracy"):
            assert payload[key] == getattr(direct, key)  # bitwise agreement


class TestPredict:
    def test_masks_written_at_native_resolution(self, best_ckpt, tmp_path, fixed_rng):
        inputs = tmp_path / "frames"
        os.makedirs(inputs)
        frame = fixed_rng.integers(0, 255, (80, 100, 3), dtype=np.uint8)
        cv2.imwrite(str(inputs / "frame.png"), frame)
        out = tmp_path / "preds"
        code = main(["predict", "--checkpoint", best_ckpt, "--input", str(inputs),
                     "--out", str(out)])
        assert code == 0
        mask = cv2.imread(str(out / "frame_mask.png"), cv2.IMREAD_GRAYSCALE)
        assert mask.shape == (80, 100)
        assert set(np.unique(mask)) <= {0, 255}

    def test_round_trip_matches_in_memory_prediction(self, best_ckpt, tmp_path,
                                                     fixed_rng):
        from lapseg.transforms import imread_rgb, resize_image
        inputs = tmp_path / "frames"
        os.makedirs(inputs)
        frame = fixed_rng.integers(0, 255, (64, 64, 3), dtype=np.uint8)
        path = str(inputs / "f.png")
        cv2.imwrite(path, frame)
        out = tmp_path / "preds"
        main(["predict", "--checkpoint", best_ckpt, "--input", path,
              "--out", str(out)])

        model, _, _ = load_checkpoint(best_ckpt)
        image = imread_rgb(path)
        width, height = model.config.input_size
        batch = torch.from_numpy(resize_image(image, (width, height)))
        with torch.no_grad():
            probs = model(batch.permute(2, 0, 1)[None])[0, 0].numpy()
        expected = (probs >= 0.5).astype(np.uint8)
        expected = cv2.resize(expected, (64, 64), interpolation=cv2.INTER_NEAREST)
        written = cv2.imread(str(out / "f_mask.png"), cv2.IMREAD_GRAYSCALE)
        np.testing.assert_array_equal(written // 255, expected)

    def test_zero_logit_checkpoint_predicts_all_on(self, tmp_path, fixed_rng):
        torch.manual_seed(0)
        model = build_model(tiny_config(width_multiplier=0.125, input_size=(32, 32)))
        with torch.no_grad():
            for p in model.head.parameters():
                p.zero_()
        ckpt = str(tmp_path / "zero.ckpt")
        save_checkpoint(model, ckpt)
        frame = fixed_rng.integers(0, 255, (40, 40, 3), dtype=np.uint8)
        path = str(tmp_path / "f.png")
        cv2.imwrite(path, frame)
        out = tmp_path / "preds"
        main(["predict", "--checkpoint", ckpt, "--input", path, "--out", str(out)])
        mask = cv2.imread(str(out / "f_mask.png"), cv2.IMREAD_GRAYSCALE)
        assert (mask == 255).all()  # 0.5 sits on the >= threshold

    def test_overlay_written(self, best_ckpt, tmp_path, fixed_rng):
        frame = fixed_rng.integers(0, 255, (64, 64, 3), dtype=np.uint8)
        path = str(tmp_path / "f.png")
        cv2.imwrite(path, frame)
        out = tmp_path / "preds"
        code = main(["predict", "--checkpoint", best_ckpt, "--input", path,
                     "--out", str(out), "--overlay"])
        assert code == 0
        overlay = cv2.imread(str(out / "f_overlay.png"))
        assert overlay is not None and overlay.shape == (64, 64, 3)

    def test_partial_failure_continues_and_exits_1(self, best_ckpt, tmp_path,
                                                   fixed_rng, capsys):
        inputs = tmp_path / "frames"
        os.makedirs(inputs)
        good = fixed_rng.integers(0, 255, (48, 48, 3), dtype=np.uint8)
        cv2.imwrite(str(inputs / "a_good.png"), good)
        (inputs / "b_bad.png").write_text("not an image")
        out = tmp_path / "preds"
        code = main(["predict", "--checkpoint", best_ckpt, "--input", str(inputs),
                     "--out", str(out)])
        assert code == 1
        assert os.path.isfile(out / "a_good_mask.png")
        assert "b_bad" in capsys.readouterr().err


class TestBench:
    def test_prints_fps(self, best_ckpt, capsys):
        code = main(["bench", "--checkpoint", best_ckpt, "--warmup-iters", "1",
                     "--timed-iters", "10", "--input-size", "32x32"])
        assert code == 0
        out = capsys.readouterr().out
        assert "fps=" in out and "median=" in out

    def test_too_few_iters_exit_2(self, best_ckpt):
        code = main(["bench", "--checkpoint", best_ckpt, "--timed-iters", "5"])
        assert code == 2

    def test_csv_appended(self, best_ckpt, tmp_path):
        out_csv = tmp_path / "bench.csv"
        for _ in range(2):
            main(["bench", "--checkpoint", best_ckpt, "--warmup-iters", "1",
                  "--timed-iters", "10", "--input-size", "32x32",
                  "--out-csv", str(out_csv)])
        lines = out_csv.read_text().strip().splitlines()
        assert lines[0] == "checkpoint,fps,median_ms,mean_ms,std_ms"
        assert len(lines) == 3


class TestDeviceEnv:
    def test_lapseg_device_feeds_flag_default(self, monkeypatch):
        from lapseg.cli import build_parser
        monkeypatch.setenv("LAPSEG_DEVICE", "cpu")
        args = build_parser().parse_args(["bench", "--checkpoint", "x.ckpt"])
        assert args.device == "cpu"
        monkeypatch.delenv("LAPSEG_DEVICE")
        args = build_parser().parse_args(
            ["bench", "--checkpoint", "x.ckpt", "--device", "cpu"])
        assert args.device == "cpu"


class TestCompare:
    def test_single_checkpoint_table(self, best_ckpt, prepared, tmp_path, capsys):
        manifest = os.path.join(prepared, "train.csv")
        out = tmp_path / "cmp"
        code = main(["compare", "--checkpoints", best_ckpt, "--manifest", manifest,
                     "--out", str(out), "--warmup-iters", "1",
                     "--timed-iters", "10", "--input-size", "32x32"])
        assert code == 0
        with open(out / "compare.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["method", "dice", "miou", "recall", "precision",
                           "f2", "accuracy", "fps"]
        assert len(rows) == 2
        assert float(rows[1][7]) > 0

    def test_partial_failure_emits_others(self, best_ckpt, prepared, tmp_path,
                                          capsys):
        manifest = os.path.join(prepared, "train.csv")
        out = tmp_path / "cmp"
        code = main(["compare", "--checkpoints", best_ckpt, "/nonexistent.ckpt",
                     "--manifest", manifest, "--out", str(out),
                     "--warmup-iters", "1", "--timed-iters", "10",
                     "--input-size", "32x32"])
        assert code == 1
        assert os.path.isfile(out / "compare.csv")
        assert "nonexistent" in capsys.readouterr().err

    def test_best_row_bolded(self, best_ckpt, prepared, tmp_path):
        # an untrained model with the same config shows worse dice
        manifest = os.path.join(prepared, "train.csv")
        torch.manual_seed(99)
        untrained = build_model(tiny_config(width_multiplier=0.125,
                                            input_size=(32, 32)))
        fresh = str(tmp_path / "fresh.ckpt")
        save_checkpoint(untrained, fresh)
        out = tmp_path / "cmp"
        code = main(["compare", "--checkpoints", best_ckpt, fresh,
                     "--manifest", manifest, "--out", str(out),
                     "--warmup-iters", "1", "--timed-iters", "10",
                     "--input-size", "32x32"])
        assert code == 0
        table = (out / "compare.md").read_text()
        best_line = [ln for ln in table.splitlines() if ln.startswith("| best ")]
        assert best_line and "**" in best_line[0]
