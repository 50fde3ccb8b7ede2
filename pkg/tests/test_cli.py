"""Config plumbing, overlays, and the command flows end to end at toy scale."""

import numpy as np
import pytest

from infomask import cli
from infomask.datagen import load_manifest, read_pgm

TOY_DATA = [
    "image_size=16",
    "n_samples=40",
    "blob_radius_low=3",
    "blob_radius_high=5",
    "split_train=0.5",
    "split_val=0.25",
    "split_test=0.25",
]
TOY_TRAIN = ["epochs=1", "batch_size=4", "seed=3"]


def _run(*argv):
    return cli.main(list(argv))


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert _run("gen-data", "--out", str(d), *TOY_DATA) == 0
    return d


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, data_dir):
    d = tmp_path_factory.mktemp("run")
    assert _run("train", "--data", str(data_dir), "--out", str(d), *TOY_TRAIN) == 0
    return d


class TestConfigParsing:
    def test_text_parsing(self):
        raw = cli.parse_config_text("a = 1\n# comment\n\nb=x y  # trailing\n")
        assert raw == {"a": "1", "b": "x y"}

    def test_duplicate_and_malformed_lines(self):
        with pytest.raises(ValueError, match="config:2"):
            cli.parse_config_text("a=1\na=2\n")
        with pytest.raises(ValueError, match="key=value"):
            cli.parse_config_text("just words\n")

    def test_defaults_and_precedence(self):
        values = cli.resolve_config({"alpha": "0.5"}, {"alpha": "0.25", "epochs": "2"})
        assert values["alpha"] == 0.25
        assert values["epochs"] == 2
        assert values["image_size"] == 64

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="unknown config key"):
            cli.resolve_config({"alhpa": "0.5"})

    def test_typed_errors_name_the_key(self):
        with pytest.raises(ValueError, match="config key epochs"):
            cli.resolve_config({"epochs": "six"})
        with pytest.raises(ValueError, match="config key optimizer"):
            cli.resolve_config({"optimizer": "newton"})
        with pytest.raises(ValueError, match="config key methods"):
            cli.resolve_config({"methods": "infomask,lime"})

    def test_auto_means_none(self):
        values = cli.resolve_config({"threshold": "auto", "kde_bandwidth": "0.1"})
        assert values["threshold"] is None
        assert values["kde_bandwidth"] == 0.1

    def test_format_round_trips(self):
        values = cli.resolve_config({"methods": "infomask,gradcam", "alpha": "0.125"})
        again = cli.resolve_config(cli.parse_config_text(cli.format_config(values)))
        assert again == values


class TestOverlay:
    def test_boundary_and_box(self):
        image = np.zeros((8, 8))
        mask = np.zeros((8, 8), dtype=bool)
        mask[2:6, 2:6] = True
        out = cli.overlay(image, mask, bbox=(1, 1, 6, 6))
        assert out[3, 3] == 0.0  # interior of the mask stays image-valued
        assert out[2, 3] == pytest.approx(200 / 255)  # mask rim
        assert out[1, 1] == 1.0 and out[6, 6] == 1.0  # box corners
        # box edge wins where it crosses the rim
        assert out[2, 1] == 1.0

    def test_mask_without_box(self):
        image = np.full((4, 4), 0.5)
        mask = np.zeros((4, 4), dtype=bool)
        mask[1, 1] = True
        out = cli.overlay(image, mask)
        assert out[1, 1] == pytest.approx(200 / 255)
        assert out[0, 0] == 0.5


class TestGenData:
    def test_layout_and_counts(self, data_dir):
        for split, count in (("train", 20), ("val", 10), ("test", 10)):
            samples = load_manifest(data_dir / f"manifest_{split}.tsv")
            assert len(samples) == count
            assert {s.label for s in samples} == {0, 1}
        assert len(list((data_dir / "images").glob("*.pgm"))) == 40

    def test_config_written_and_reusable(self, data_dir):
        values = cli.resolve_config(
            cli.parse_config_text((data_dir / "config.txt").read_text())
        )
        assert values["n_samples"] == 40
        assert values["image_size"] == 16

    def test_deterministic_given_seed(self, data_dir, tmp_path):
        again = tmp_path / "again"
        assert _run("gen-data", "--out", str(again), *TOY_DATA) == 0
        for split in ("train", "val", "test"):
            a = (data_dir / f"manifest_{split}.tsv").read_bytes()
            b = (again / f"manifest_{split}.tsv").read_bytes()
            assert a == b
        for img in sorted((data_dir / "images").glob("*.pgm")):
            assert img.read_bytes() == (again / "images" / img.name).read_bytes()

    def test_out_root_env_used(self, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.ENV_OUT_ROOT, str(tmp_path))
        assert _run("gen-data", *TOY_DATA, "seed=9") == 0
        assert (tmp_path / "data_seed9" / "manifest_train.tsv").is_file()


class TestTrain:
    def test_run_directory_contents(self, run_dir):
        for name in ("config.txt", "log.txt", "ckpt_1.bin", "selected.bin", "result.txt"):
            assert (run_dir / name).is_file(), name
        fields = cli.parse_config_text((run_dir / "result.txt").read_text())
        assert fields["method"] == "infomask"
        assert fields["selected_epoch"] == "1"
        float(fields["threshold"])

    def test_log_lines_parse(self, run_dir):
        lines = (run_dir / "log.txt").read_text().strip().split("\n")
        assert len(lines) == 6  # five steps of four, then the epoch line
        assert lines[-1].startswith("epoch,1,")

    def test_identical_runs_are_byte_identical(self, data_dir, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert _run("train", "--data", str(data_dir), "--out", str(out), *TOY_TRAIN) == 0
        for name in ("config.txt", "log.txt", "ckpt_1.bin", "selected.bin", "result.txt"):
            assert (a / name).read_bytes() == (b / name).read_bytes(), name

    def test_missing_data_dir(self, tmp_path, capsys):
        assert _run("train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "r")) == 1
        assert "error:" in capsys.readouterr().err

    def test_bad_config_key_fails_cleanly(self, data_dir, tmp_path, capsys):
        rc = _run("train", "--data", str(data_dir), "--out", str(tmp_path / "r"), "alpa=1")
        assert rc == 1
        assert "unknown config key" in capsys.readouterr().err


class TestEvalAndReport:
    def test_eval_writes_artifacts(self, run_dir, data_dir, capsys):
        assert _run("eval", "--run", str(run_dir), "--data", str(data_dir)) == 0
        table = capsys.readouterr().out
        assert table.splitlines()[0].startswith("method\t")
        assert "infomask" in table
        out = run_dir / "eval_test"
        for name in ("per_image.csv", "kde.csv", "scores.txt", "summary.txt"):
            assert (out / name).is_file(), name
        fields = cli.parse_config_text((out / "scores.txt").read_text())
        assert 0.0 <= float(fields["accuracy"]) <= 1.0
        assert fields["n_scored"] == str(
            sum(1 for s in load_manifest(data_dir / "manifest_test.tsv") if s.bbox)
        )

    def test_threshold_override_recorded(self, run_dir, data_dir, tmp_path):
        out = tmp_path / "ev"
        rc = _run(
            "eval", "--run", str(run_dir), "--data", str(data_dir),
            "--out", str(out), "threshold=0.9",
        )
        assert rc == 0
        fields = cli.parse_config_text((out / "scores.txt").read_text())
        assert fields["threshold"] == "0.9"

    def test_eval_rejects_non_run_dir(self, data_dir, tmp_path, capsys):
        assert _run("eval", "--run", str(tmp_path), "--data", str(data_dir)) == 1
        assert "not a run directory" in capsys.readouterr().err

    def test_report_rerenders(self, run_dir, data_dir, tmp_path, capsys):
        assert _run("eval", "--run", str(run_dir), "--data", str(data_dir)) == 0
        capsys.readouterr()
        table_file = tmp_path / "table.tsv"
        rc = _run("report", str(run_dir / "eval_test"), "--out", str(table_file))
        assert rc == 0
        printed = capsys.readouterr().out
        assert printed == table_file.read_text()
        assert printed.splitlines()[1].startswith("infomask\t")

    def test_report_label_falls_back_to_dirname(self, run_dir, data_dir, tmp_path, capsys):
        out = tmp_path / "standalone" / "ev"
        assert _run("eval", "--run", str(run_dir), "--data", str(data_dir), "--out", str(out)) == 0
        capsys.readouterr()
        assert _run("report", str(out)) == 0
        assert "standalone" in capsys.readouterr().out


class TestLocalize:
    def test_overlays_written(self, run_dir, data_dir, capsys):
        rc = _run(
            "localize", "--run", str(run_dir), "--data", str(data_dir), "--limit", "3"
        )
        assert rc == 0
        out = run_dir / "overlays_test"
        files = sorted(out.glob("overlay_*.pgm"))
        assert len(files) == 3
        img = read_pgm(files[0])
        assert img.shape == (16, 16)
        assert img.max() <= 1.0


class TestCompare:
    def test_two_methods_end_to_end(self, data_dir, tmp_path, capsys):
        out = tmp_path / "cmp"
        rc = _run(
            "compare", "--data", str(data_dir), "--out", str(out),
            "methods=infomask,gradcam", *TOY_TRAIN,
        )
        assert rc == 0
        table = (out / "comparison.tsv").read_text()
        lines = table.strip().split("\n")
        assert len(lines) == 3
        assert lines[1].startswith("infomask\t") and lines[2].startswith("gradcam\t")
        for method in ("infomask", "gradcam"):
            d = out / f"run_{method}"
            assert (d / "selected.bin").is_file()
            assert (d / "eval_test" / "per_image.csv").is_file()
        assert capsys.readouterr().out == table
