import numpy as np
import pytest

from mrfdet.cli import (ABLATION_LADDER, _bool, _int_tuple,
                        dataset_spec_from, format_ablation_table, main,
                        mrf_spec_from, parse_config_file, train_config_from)


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("clidata")
    spec = d / "spec.txt"
    spec.write_text("image_size = 32\nnum_images = 6\nseed = 3\n"
                    "max_objects = 2\nsmall_side = 8 16\n"
                    "large_side = 18 24\n# comment line\n")
    assert main(["synth", "--spec", str(spec), "--out", str(d / "data")]) == 0
    return d


class TestConfigParsing:
    def test_parse_file(self, tmp_path):
        p = tmp_path / "c.txt"
        p.write_text("a = 1\n# full comment\nb = two words  # trailing\n\n")
        assert parse_config_file(p) == {"a": "1", "b": "two words"}

    def test_bad_line(self, tmp_path):
        p = tmp_path / "c.txt"
        p.write_text("just some words\n")
        with pytest.raises(ValueError, match="key = value"):
            parse_config_file(p)

    def test_bool_values(self):
        assert _bool("yes") and _bool("True") and _bool("1")
        assert not _bool("off") and not _bool("0")
        with pytest.raises(ValueError):
            _bool("maybe")

    def test_int_tuple(self):
        assert _int_tuple("16, 32, 64") == (16, 32, 64)
        assert _int_tuple("8 8") == (8, 8)

    def test_dataset_spec_defaults_and_overrides(self):
        spec = dataset_spec_from({"image_size": "48", "seed": "9",
                                  "large_side": "30 40"})
        assert spec.image_size == 48 and spec.seed == 9
        assert spec.large_side == (30, 40)
        assert spec.num_classes == 3  # default preserved

    def test_train_config_toggles(self):
        cfg = train_config_from({"mrf": "no", "seg_mode": "off",
                                 "extra_level": "false", "epochs": "12",
                                 "lr_drop_epochs": "8, 10"})
        assert not cfg.toggles.mrf and cfg.toggles.seg_mode == "off"
        assert cfg.epochs == 12 and cfg.lr_drop_epochs == (8, 10)

    def test_mrf_spec_branches(self):
        spec = mrf_spec_from({"in_channels": "32", "out_channels": "32",
                              "branches": "3:1, 3:2"})
        assert [(b.kernel, b.dilation) for b in spec.branches] == [(3, 1), (3, 2)]


class TestCommands:
    def test_synth_writes_dataset(self, data_dir):
        assert (data_dir / "data" / "annotations.txt").exists()
        assert len(list((data_dir / "data" / "images").iterdir())) == 6

    def test_train_then_eval(self, data_dir, capsys):
        cfg = data_dir / "train.txt"
        cfg.write_text("epochs = 2\nwarmup_epochs = 0\nlr_drop_epochs = 1\n"
                       "image_size = 32\nstage_channels = 8 8 8 8\n"
                       "batch_size = 6\n")
        ckpt = data_dir / "model.ckpt"
        assert main(["train", "--config", str(cfg), "--data",
                     str(data_dir / "data"), "--out", str(ckpt)]) == 0
        assert ckpt.exists()
        capsys.readouterr()
        assert main(["eval", "--ckpt", str(ckpt), "--data",
                     str(data_dir / "data")]) == 0
        out = capsys.readouterr().out
        assert "mAP" in out and "class  AP" in out

    def test_eval_coco_style(self, data_dir, capsys):
        ckpt = data_dir / "model.ckpt"
        assert main(["eval", "--ckpt", str(ckpt), "--data",
                     str(data_dir / "data"), "--coco-style"]) == 0
        out = capsys.readouterr().out
        assert "AP@0.5" in out and "AP@[0.5:0.95]" in out

    def test_eval_missing_checkpoint_fails_cleanly(self, data_dir, capsys):
        rc = main(["eval", "--ckpt", str(data_dir / "nope.ckpt"),
                   "--data", str(data_dir / "data")])
        assert rc == 1
        assert capsys.readouterr().err.startswith("error:")

    def test_gradcheck_loss_module(self, capsys):
        assert main(["gradcheck", "--module", "loss"]) == 0
        out = capsys.readouterr().out
        assert "PASS" in out and "FAIL" not in out

    def test_mask_gen(self, data_dir, capsys):
        out_dir = data_dir / "masks"
        assert main(["mask-gen", "--data", str(data_dir / "data"),
                     "--t1", "16", "--t2", "400", "--out", str(out_dir)]) == 0
        files = sorted(out_dir.iterdir())
        assert len(files) == 6
        assert files[0].read_bytes().startswith(b"P5\n32 32\n255\n")

    def test_rf_report_default(self, capsys):
        assert main(["rf-report"]) == 0
        out = capsys.readouterr().out
        assert "branch  k  d  effective" in out
        assert "union of taps" in out

    def test_rf_report_custom(self, tmp_path, capsys):
        spec = tmp_path / "mrf.txt"
        spec.write_text("in_channels = 64\nout_channels = 64\nbranches = 3:1, 3:3\n")
        assert main(["rf-report", "--spec", str(spec)]) == 0
        out = capsys.readouterr().out
        assert " 7  " in out  # effective kernel of the 3:3 branch

    def test_describe(self, tmp_path, capsys):
        cfg = tmp_path / "c.txt"
        cfg.write_text("image_size = 32\nstage_channels = 8 8 8 8\n"
                       "epochs = 3\nwarmup_epochs = 0\nlr_drop_epochs = 2\n")
        assert main(["describe", "--config", str(cfg)]) == 0
        out = capsys.readouterr().out
        assert "anchors total" in out and "parameters:" in out

    def test_bad_config_value_fails_cleanly(self, tmp_path, capsys):
        cfg = tmp_path / "bad.txt"
        cfg.write_text("epochs = banana\n")
        assert main(["describe", "--config", str(cfg)]) == 1
        assert "error:" in capsys.readouterr().err


class TestAblation:
    def test_ladder_rows(self):
        labels = [label for label, _ in ABLATION_LADDER]
        assert labels[0] == "baseline"
        assert labels[-1].endswith("+SWS")
        assert len(labels) == 5

    def test_table_format(self):
        rows = [("baseline", 0.5, 0.4), ("+MRF", 0.6, None)]
        text = format_ablation_table(rows)
        lines = text.splitlines()
        assert lines[0].startswith("configuration")
        assert "0.5000" in lines[1]
        assert "n/a" in lines[2]
