"""CLI surface: flag handling, exit codes, artifact writing."""

import json

import numpy as np
import pytest

from tmeasure.cli import main
from tmeasure.core import ActivationManifest, ManifestEntry, STShape
from tmeasure.model import random_init, simpleconv_spec, write_dump, write_weights


@pytest.fixture
def model_file(tmp_path):
    spec = simpleconv_spec((16, 16, 1), base_filters=2, dense_features=8, classes=4)
    path = tmp_path / "model.nnw"
    write_weights(path, spec, random_init(spec, seed=0))
    return path


@pytest.fixture
def dump_file(tmp_path):
    man = ActivationManifest([ManifestEntry("a", 0, (2,), "scalar-vector")])
    rng = np.random.default_rng(0)
    path = tmp_path / "st.stdump"
    write_dump(path, man, STShape(6, 4, 2), [rng.random(2) for _ in range(24)])
    return path


class TestMeasureCommand:
    def test_dump_source(self, dump_file, tmp_path, capsys):
        out = tmp_path / "r.json"
        code = main(["measure", "--dump", str(dump_file), "--measure", "nv",
                     "--output", str(out)])
        assert code == 0
        assert out.exists()
        obj = json.loads(out.read_text())
        assert obj["schema"] == "tm-report/1"
        printed = capsys.readouterr().out
        assert "per-layer means" in printed

    def test_conflicting_sources_exit_2(self, dump_file, model_file, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["measure", "--model", str(model_file), "--dump", str(dump_file),
                  "--output", str(tmp_path / "r.json")])
        assert exc.value.code == 2

    def test_no_source_exit_2(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["measure", "--output", str(tmp_path / "r.json")])
        assert exc.value.code == 2

    def test_unknown_flag_exit_2(self, dump_file, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["measure", "--dump", str(dump_file), "--output",
                  str(tmp_path / "r.json"), "--bogus"])
        assert exc.value.code == 2

    def test_model_synthetic_run_with_artifacts(self, model_file, tmp_path):
        out = tmp_path / "r.json"
        csv = tmp_path / "r.csv"
        svg = tmp_path / "r.svg"
        code = main([
            "measure", "--model", str(model_file), "--dataset", "synthetic",
            "--transforms", "rotation:4", "--samples", "6", "--batch", "8",
            "--measure", "nv,tv", "--output", str(out), "--csv", str(csv),
            "--heatmap", str(svg),
        ])
        assert code == 0
        obj = json.loads(out.read_text())
        assert obj["st_shape"] == {"n": 6, "m": 4, "k": obj["st_shape"]["k"]}
        assert csv.read_text().startswith("layer_index,layer_name,activation_name,measure,value")
        assert "<svg" in svg.read_text()

    def test_config_echo(self, model_file, tmp_path):
        out = tmp_path / "r.json"
        code = main([
            "measure", "--model", str(model_file), "--dataset", "synthetic",
            "--transforms", "rotation:5", "--samples", "7",
            "--output", str(out),
        ])
        assert code == 0
        obj = json.loads(out.read_text())
        assert obj["st_shape"]["n"] == 7 and obj["st_shape"]["m"] == 5
        assert obj["provenance"]["transformations"] == "rotation:5"

    def test_runtime_failure_exit_1(self, tmp_path):
        code = main(["measure", "--dump", str(tmp_path / "missing.stdump"),
                     "--output", str(tmp_path / "r.json")])
        assert code == 1


class TestDatasetResolution:
    def test_mnist_via_env_var(self, model_file, tmp_path, monkeypatch):
        import struct

        spec16 = (16, 16)
        rng = np.random.default_rng(3)
        images = rng.integers(0, 256, size=(8, *spec16), dtype=np.uint8)
        data_dir = tmp_path / "data"
        data_dir.mkdir()
        with open(data_dir / "t10k-images-idx3-ubyte", "wb") as f:
            f.write(struct.pack(">IIII", 0x00000803, 8, 16, 16))
            f.write(images.tobytes())
        with open(data_dir / "t10k-labels-idx1-ubyte", "wb") as f:
            f.write(struct.pack(">II", 0x00000801, 8))
            f.write(bytes(8))
        monkeypatch.setenv("TM_DATA_DIR", str(data_dir))
        out = tmp_path / "r.json"
        code = main(["measure", "--model", str(model_file), "--dataset", "mnist",
                     "--transforms", "rotation:3", "--samples", "4",
                     "--output", str(out)])
        assert code == 0
        obj = json.loads(out.read_text())
        assert obj["provenance"]["dataset"] == "mnist"
        assert obj["st_shape"]["n"] == 4


class TestConvergeCommand:
    def test_runs_and_prints_monotonicity(self, model_file, tmp_path, capsys):
        csv = tmp_path / "grid.csv"
        code = main([
            "converge", "--model", str(model_file), "--dataset", "synthetic",
            "--samples", "16", "--sample-grid", "4,8,16", "--transform-grid", "2,4",
            "--batch", "16", "--output-csv", str(csv),
            "--output-svg", str(tmp_path / "grid.svg"),
        ])
        assert code == 0
        printed = capsys.readouterr().out
        assert "reference cell: n=16 m=4" in printed
        assert "non-increasing along both axes" in printed
        assert len(csv.read_text().splitlines()) == 7

    def test_single_cell_grid_exit_2(self, model_file, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["converge", "--model", str(model_file), "--dataset", "synthetic",
                  "--sample-grid", "8", "--transform-grid", "4",
                  "--output-csv", str(tmp_path / "g.csv")])
        assert exc.value.code == 2

    def test_unsorted_grid_exit_2(self, model_file, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["converge", "--model", str(model_file), "--dataset", "synthetic",
                  "--sample-grid", "16,8", "--transform-grid", "2,4",
                  "--output-csv", str(tmp_path / "g.csv")])
        assert exc.value.code == 2


class TestStabilityCommand:
    def make_report(self, model_file, tmp_path, name, seed):
        out = tmp_path / name
        assert main([
            "measure", "--model", str(model_file), "--dataset", "synthetic",
            "--transforms", "rotation:4", "--samples", "8", "--seed", str(seed),
            "--output", str(out),
        ]) == 0
        return out

    def test_identical_reports_never_reject(self, model_file, tmp_path, capsys):
        r1 = self.make_report(model_file, tmp_path, "a.json", seed=0)
        r2 = tmp_path / "b.json"
        r2.write_text(r1.read_text())
        out = tmp_path / "stab.json"
        code = main(["stability", str(r1), str(r2), "--alpha", "0.01",
                     "--output", str(out)])
        assert code == 0
        payload = json.loads(out.read_text())
        assert all(row["reject"] in (False, None) for row in payload["layers"])

    def test_single_report_exit_2(self, model_file, tmp_path):
        r1 = self.make_report(model_file, tmp_path, "a.json", seed=0)
        with pytest.raises(SystemExit) as exc:
            main(["stability", str(r1)])
        assert exc.value.code == 2

    def test_mismatched_structure_exit_2(self, model_file, tmp_path):
        r1 = self.make_report(model_file, tmp_path, "a.json", seed=0)
        obj = json.loads(r1.read_text())
        obj["manifest"] = obj["manifest"][:-1]
        k = sum(int(np.prod(e["shape"])) for e in obj["manifest"])
        obj["st_shape"]["k"] = k
        r2 = tmp_path / "b.json"
        r2.write_text(json.dumps(obj))
        with pytest.raises(SystemExit) as exc:
            main(["stability", str(r1), str(r2)])
        assert exc.value.code == 2


class TestSelfcheckCommand:
    def test_default_run_passes(self, capsys):
        assert main(["selfcheck", "--suite", "variance-distance-identity"]) == 0
        assert "[PASS]" in capsys.readouterr().out

    def test_single_suite(self, capsys):
        assert main(["selfcheck", "--suite", "streaming-variance"]) == 0
        out = capsys.readouterr().out
        assert out.count("[PASS]") == 1

    def test_injected_fault_exit_1(self, monkeypatch, capsys):
        monkeypatch.setenv("TM_SELFCHECK_FAULT", "1")
        assert main(["selfcheck", "--suite", "streaming-variance"]) == 1
        assert "[FAIL]" in capsys.readouterr().out


class TestDumpTransformed:
    def test_writes_png_grid(self, tmp_path):
        out = tmp_path / "grid.png"
        code = main(["dump-transformed", "--transforms", "rotation:4",
                     "--size", "16x16x1", "--rows", "2", "--output", str(out)])
        assert code == 0
        from PIL import Image

        img = Image.open(out)
        assert img.size == (4 * 18 + 2, 2 * 18 + 2)
