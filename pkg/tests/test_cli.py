import subprocess
import sys

import numpy as np
import pytest

from prost import io as pio
from prost.cli import EXIT_IO, EXIT_OK, EXIT_USAGE, build_parser, main
from prost.phantoms import make_phantom
from prost.sampler import Volume

POSE0 = "0,0,0,0,0,0"


@pytest.fixture
def blob_volume(tmp_path):
    p = tmp_path / "v.vol"
    assert main(["phantom", "--dims", "12", "--spacing", "10", "--seed", "1", "--out", str(p)]) == EXIT_OK
    return p


def test_phantom_command_matches_library(blob_volume):
    vol = pio.load_volume(blob_volume)
    ref = make_phantom("gaussian-blobs", (12, 12, 12), seed=1, spacing=(10, 10, 10))
    assert np.allclose(vol.data, ref.data, atol=1e-6 * np.abs(ref.data).max())


def test_drr_constant_volume(tmp_path):
    vp = tmp_path / "c.vol"
    pio.save_volume(vp, Volume(np.full((8, 8, 8), 0.5), spacing=(4, 4, 4)))
    out = tmp_path / "img"
    assert main(["drr", "--volume", str(vp), "--pose", POSE0, "--det-size", "9", "--K", "6",
                 "--out", str(out)]) == EXIT_OK
    img = pio.read_image_csv(out.with_suffix(".csv"))
    assert img.shape == (9, 9)
    # central ray crosses the whole volume: K samples of 0.5
    assert img[4, 4] == 3.0
    assert out.with_suffix(".pgm").read_bytes().startswith(b"P5\n9 9\n65535\n")


def test_drr_outputs_byte_identical_across_runs_and_threads(tmp_path, blob_volume):
    outs = []
    for i, threads in enumerate(("1", "1", "3")):
        out = tmp_path / f"run{i}"
        main(["drr", "--volume", str(blob_volume), "--pose", "0.05,-0.02,0.1,3,-2,5",
              "--det-size", "16", "--K", "20", "--threads", threads, "--out", str(out)])
        outs.append((out.with_suffix(".csv").read_bytes(), out.with_suffix(".pgm").read_bytes()))
    assert outs[0] == outs[1] == outs[2]


def test_usage_errors(tmp_path, blob_volume, capsys):
    assert main(["drr", "--volume", str(blob_volume), "--pose", "1,2,3", "--out", str(tmp_path / "x")]) == EXIT_USAGE
    assert "error" in capsys.readouterr().err
    assert main(["register", "--volume", str(blob_volume), "--target", "t.csv", "--init-pose", POSE0,
                 "--method", "net", "--out", str(tmp_path / "r")]) == EXIT_USAGE
    cfg = tmp_path / "bench.txt"
    cfg.write_text("trials=0\n")
    assert main(["benchmark", "--config", str(cfg), "--out", str(tmp_path / "b")]) == EXIT_USAGE
    cfg.write_text("nonsense_key=1\n")
    assert main(["train-sim", "--config", str(cfg), "--out", str(tmp_path / "t")]) == EXIT_USAGE


def test_io_errors(tmp_path):
    assert main(["drr", "--volume", str(tmp_path / "missing.vol"), "--pose", POSE0,
                 "--out", str(tmp_path / "x")]) == EXIT_IO
    bad = tmp_path / "bad.vol"
    bad.write_bytes(b"garbage")
    assert main(["drr", "--volume", str(bad), "--pose", POSE0, "--out", str(tmp_path / "x")]) == EXIT_IO


def test_register_from_true_pose(tmp_path, blob_volume):
    img = tmp_path / "target"
    common = ["--det-size", "16", "--K", "24"]
    main(["drr", "--volume", str(blob_volume), "--pose", POSE0, "--out", str(img)] + common)
    out = tmp_path / "reg"
    code = main(["register", "--volume", str(blob_volume), "--target", str(img.with_suffix(".csv")),
                 "--init-pose", POSE0, "--truth", POSE0, "--out", str(out)] + common)
    assert code == EXIT_OK
    kv = pio.read_kv(out / "report.txt")
    assert kv["status"] == "ok" and kv["stage2_converged"] == "1"
    assert kv["final"] == "0.0,0.0,0.0,0.0,0.0,0.0"
    assert (out / "trace.csv").read_text().splitlines()[0] == "step,stage,loss,lr"


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--size", "4", "--trials", "1"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "checks passed" in out


def test_benchmark_without_perturbation(tmp_path):
    cfg = tmp_path / "bench.txt"
    cfg.write_text("dims=12\nspacing_mm=10\ndet_size=12\nK=16\nn_blobs=6\nblob_sigma_lo=0.15\n"
                   "blob_sigma_hi=0.3\nsigma_rot_deg=0\nsigma_trans_mm=0\nstage2_max_iters=20\n")
    out = tmp_path / "b"
    assert main(["benchmark", "--config", str(cfg), "--trials", "1", "--out", str(out)]) == EXIT_OK
    lines = (out / "trials.csv").read_text().splitlines()
    assert len(lines) == 2
    row = dict(zip(lines[0].split(","), lines[1].split(",")))
    assert float(row["init_trans_mm"]) == 0 and float(row["final_trans_mm"]) < 1e-6
    assert float(row["final_rot_deg"]) < 1e-6
    assert "success" in (out / "summary.txt").read_text()


def test_train_sim_zero_iterations(tmp_path):
    out = tmp_path / "t"
    assert main(["train-sim", "--iterations", "0", "--out", str(out)]) == EXIT_OK
    arrays, meta = pio.load_arrays(out / "checkpoint.txt")
    assert meta["iterations"] == "0" and meta["coord_channels"] == "1"
    assert (out / "history.csv").read_text() == "step,mdist,lr\n"


def test_help_lists_output_columns():
    parser = build_parser()
    sub = parser._subparsers._group_actions[0].choices
    assert "step,stage,loss,lr" in sub["register"].format_help()
    assert "final_trans_mm" in sub["benchmark"].format_help()
    assert "step,mdist,lr" in sub["train-sim"].format_help()
    assert {"drr", "register", "gradcheck", "benchmark", "train-sim"} <= set(sub)


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "prost.cli", "gradcheck", "--help"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "--size" in res.stdout
