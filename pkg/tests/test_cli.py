import csv
import json
import subprocess
import sys
import time

import numpy as np
import pytest

from ultract.cli import main
from ultract.io import load_image, load_sinogram, read_pgm
from ultract.learning import load_model

SMALL = """
[run]
seed = 3
[phantom]
nx = 64
fov = 256
[geometry]
n_views = 90
n_det = 64
det_spacing = 4.0
[patches]
patch_shape = 4,4
stride = 1,1
train_stride = 2,2
[training]
K = 2
iterations = 15
n_phantoms = 2
[solver]
beta = 2e6
gamma_hu = 40
T = 4
N = 2
M = 2
ep_iters = 10
ep_subsets = 6
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "small.cfg").write_text(SMALL)
    return d


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(workdir):
    """phantom -> simulate -> train -> reconstruct (ep, ultra) -> evaluate -> export."""
    d, cfg = workdir, workdir / "small.cfg"
    t0 = time.perf_counter()
    assert run("phantom", "--config", cfg, "--out", d / "truth.bin") == 0
    assert run("simulate", "--config", cfg, "--out", d / "sino.bin", "--I0", "1e4") == 0
    assert run("train", "--config", cfg, "--out", d / "model.ult") == 0
    assert run("reconstruct", "--method", "ep", "--sino", d / "sino.bin", "--config", cfg,
               "--out", d / "ep") == 0
    assert run("reconstruct", "--method", "ultra", "--sino", d / "sino.bin", "--model", d / "model.ult",
               "--init", d / "ep.bin", "--config", cfg, "--out", d / "ultra") == 0
    assert run("evaluate", "--recon", d / "ultra.bin", "--truth", d / "truth.bin",
               "--out", d / "eval.json") == 0
    assert run("export", "--image", d / "ultra.bin", "--out", d / "ultra.pgm") == 0
    assert run("export", "--image", d / "ultra_labels.bin", "--labels", "--out", d / "labels.png") == 0
    assert run("export", "--trace", d / "ultra_trace.csv", "--column", "cost", "--out", d / "cost.png") == 0
    return d, time.perf_counter() - t0


class TestPipeline:
    def test_runtime_and_artifacts(self, pipeline):
        d, seconds = pipeline
        assert seconds < 300
        for name in ["truth.bin", "truth.bin.json", "sino.bin", "sino.bin.json", "model.ult",
                     "ep.bin", "ultra.bin", "ultra_labels.bin", "ultra_trace.csv", "ultra.bin.cfg",
                     "eval.json", "ultra.pgm", "labels.png", "cost.png"]:
            assert (d / name).stat().st_size > 0, name

    def test_outputs_consistent(self, pipeline):
        d, _ = pipeline
        truth = load_image(d / "truth.bin")
        sino = load_sinogram(d / "sino.bin")
        model = load_model(d / "model.ult")
        assert truth.shape == (64, 64) and sino.values.shape == (90, 64)
        assert model.K == 2 and model.l == 16
        labels = load_image(d / "ultra_labels.bin").values
        assert set(np.unique(labels)) <= {0.0, 1.0}
        rows = list(csv.DictReader(open(d / "ultra_trace.csv")))
        assert len(rows) == 4 and rows[0].keys() == {"iteration", "cost", "rmse_hu"}
        res = json.loads((d / "eval.json").read_text())
        assert res["rmse_hu"] > 0 and -1 <= res["ssim"] <= 1

    def test_method_ordering(self, pipeline, workdir):
        d, _ = pipeline
        assert run("reconstruct", "--method", "fbp", "--sino", d / "sino.bin",
                   "--config", workdir / "small.cfg", "--out", d / "fbp") == 0
        err = {}
        for m in ("fbp", "ep", "ultra"):
            assert run("evaluate", "--recon", d / f"{m}.bin", "--truth", d / "truth.bin",
                       "--out", d / f"eval_{m}.json") == 0
            err[m] = json.loads((d / f"eval_{m}.json").read_text())["rmse_hu"]
        assert err["ultra"] < err["ep"] < err["fbp"]

    def test_export_gray_mapping(self, pipeline):
        d, _ = pipeline
        truth = load_image(d / "truth.bin")
        grid = truth.with_values(np.tile(np.linspace(700, 1300, 64), (64, 1)) / truth.hu_slope)
        from ultract.io import save_image
        save_image(d / "ramp.bin", grid)
        assert run("export", "--image", d / "ramp.bin", "--out", d / "ramp.pgm") == 0
        row = read_pgm(d / "ramp.pgm")[0].astype(float)
        hu = np.linspace(700, 1300, 64)
        expected = np.clip(np.rint((hu - 800) / 400 * 255), 0, 255)
        np.testing.assert_array_equal(row, expected)


class TestErrors:
    def test_unknown_config_key(self, workdir, capsys):
        bad = workdir / "bad.cfg"
        bad.write_text("[solver]\nbetta = 1\n")
        assert run("phantom", "--config", bad, "--out", workdir / "x.bin") == 1
        err = capsys.readouterr().err.strip()
        assert err.startswith("error code=1 kind=config") and "betta" in err

    def test_missing_input(self, workdir, capsys):
        assert run("reconstruct", "--method", "fbp", "--sino", workdir / "absent.bin",
                   "--config", workdir / "small.cfg", "--out", workdir / "y") == 2
        assert "kind=io" in capsys.readouterr().err

    def test_corrupt_model(self, pipeline, workdir, capsys):
        d, _ = pipeline
        (d / "junk.ult").write_bytes(b"not a model")
        assert run("reconstruct", "--method", "ultra", "--sino", d / "sino.bin", "--model", d / "junk.ult",
                   "--config", workdir / "small.cfg", "--out", d / "z") == 2

    def test_usage(self, capsys):
        assert run() == 1
        assert run("reconstruct", "--method", "magic", "--sino", "s", "--out", "o") == 1
        assert "kind=usage" in capsys.readouterr().err

    def test_st_needs_single_transform(self, pipeline, workdir, capsys):
        d, _ = pipeline
        assert run("reconstruct", "--method", "st", "--sino", d / "sino.bin", "--model", d / "model.ult",
                   "--config", workdir / "small.cfg", "--out", d / "st") == 1

    def test_subprocess_exit_code(self, workdir):
        bad = workdir / "bad2.cfg"
        bad.write_text("[training]\nK = lots\n")
        proc = subprocess.run([sys.executable, "-m", "ultract.cli", "train", "--config", str(bad),
                               "--out", str(workdir / "m.ult")], capture_output=True, text=True)
        assert proc.returncode == 1
        assert proc.stderr.startswith("error code=1 kind=config")
