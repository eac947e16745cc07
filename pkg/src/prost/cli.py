"""Command line interface.

Exit codes: 0 success, 2 usage or configuration error, 3 non-convergence
(or a benchmark expectation not met), 4 I/O error, 5 numerical failure.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import io as pio
from .errors import ConfigError, GeometryError, InvalidArgumentError, ProstError, VolumeFormatError
from .geometry import parse_pose

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NOT_CONVERGED = 3
EXIT_IO = 4
EXIT_NUMERICAL = 5

REGISTER_EPILOG = """\
outputs in --out:
  report.txt  one key=value per line (poses as comma-separated
              omega_x,omega_y,omega_z [rad],t_x,t_y,t_z [mm])
  trace.csv   columns step,stage,loss,lr (stage 1 = network, 2 = Grad-NCC)
"""

BENCHMARK_EPILOG = """\
outputs in --out:
  trials.csv   columns trial,method,init_trans_mm,init_rot_deg,final_tx,final_ty,
               final_tz,final_trans_mm,final_rx,final_ry,final_rz,final_rot_deg,
               stage1_iters,stage2_iters,converged,success,status
  summary.txt  per-method mean+-std and median of translation (mm) and
               rotation (deg) errors, and the success rate
"""

TRAIN_EPILOG = """\
outputs in --out:
  checkpoint.txt  encoder weights (PROSTCKPT1 text container)
  history.csv     columns step,mdist,lr
"""


def _out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _load_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return pio.read_pgm(path)
    return pio.read_image_csv(path)


def _geometry(args, vol):
    from .grid import Intrinsics, make_canonical_grid

    if args.intrinsics:
        intr, K = pio.load_intrinsics(args.intrinsics)
    else:
        intr, K = Intrinsics.cios(args.det_size), None
    if args.K is not None:
        K = args.K
    return make_canonical_grid(intr, vol.meta, K)


# -- commands --------------------------------------------------------------

def cmd_phantom(args) -> int:
    from .phantoms import make_phantom

    vol = make_phantom(args.kind, (args.dims,) * 3, seed=args.seed, spacing=(args.spacing,) * 3)
    pio.save_volume(args.out, vol)
    print(f"wrote {args.out}: {args.kind} {args.dims}^3, spacing {args.spacing} mm")
    return EXIT_OK


def cmd_drr(args) -> int:
    from .projector import project

    vol = pio.load_volume(args.volume)
    theta = parse_pose(args.pose)
    grid = _geometry(args, vol)
    img = project(vol, theta, grid, args.weight_by_length, args.threads)
    out = Path(args.out)
    pio.atomic_write(out.with_suffix(".pgm"), pio.image_to_pgm(img))
    pio.atomic_write(out.with_suffix(".csv"), pio.image_to_csv(img))
    print(f"min={float(img.min())!r} max={float(img.max())!r} mean={float(img.mean())!r}")
    return EXIT_OK


def _load_checkpoint(path):
    from .learned_similarity import EncoderParams

    arrays, meta = pio.load_arrays(path)
    coord = meta.get("coord_channels", "1") == "1"
    try:
        return EncoderParams.from_arrays(arrays, coord)
    except KeyError as exc:
        raise ConfigError(f"checkpoint lacks array {exc.args[0]}") from exc


def cmd_register(args) -> int:
    from .optimize import RegistrationConfig, register

    if args.method.startswith("net") and not args.checkpoint:
        raise ConfigError(f"method {args.method} needs --checkpoint")
    cfg = RegistrationConfig(use_gradncc=args.method != "net", n_threads=args.threads)
    if args.config:
        kv = pio.read_kv(args.config)
        for key in ("stage1_max_iters", "stage2_max_iters"):
            if key in kv:
                stage = cfg.stage1 if key.startswith("stage1") else cfg.stage2
                stage.max_iters = int(kv.pop(key))
        if "param_scale" in kv:
            cfg.param_scale = tuple(float(v) for v in kv.pop("param_scale").split(","))
        if kv:
            raise ConfigError(f"unknown register config keys {sorted(kv)}")
    vol = pio.load_volume(args.volume)
    grid = _geometry(args, vol)
    I_f = _load_image(args.target)
    params = _load_checkpoint(args.checkpoint) if args.method.startswith("net") else None
    truth = parse_pose(args.truth) if args.truth else None
    rep = register(vol, I_f, parse_pose(args.init_pose), grid, cfg, params=params, truth=truth)
    out = _out_dir(args.out)
    pio.atomic_write(out / "report.txt", rep.to_text())
    pio.atomic_write(out / "trace.csv", rep.trace_csv())
    print(rep.to_text(), end="")
    if rep.status != "ok":
        return EXIT_NUMERICAL
    return EXIT_OK if rep.converged else EXIT_NOT_CONVERGED


def cmd_gradcheck(args) -> int:
    from .gradcheck import format_table, run_all

    rows = run_all(args.size, args.trials, args.seed)
    print(format_table(rows), end="")
    failed = sum(not r.passed for r in rows)
    print(f"{len(rows) - failed}/{len(rows)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_NUMERICAL


def cmd_benchmark(args) -> int:
    from .benchmark import BenchmarkConfig, aggregate, check_expectations, format_table, rows_to_csv, run_benchmark

    cfg = pio.coerce_dataclass(BenchmarkConfig, pio.read_kv(args.config)) if args.config else BenchmarkConfig()
    if args.trials is not None:
        cfg.trials = args.trials
    cfg.validate()
    params = _load_checkpoint(cfg.checkpoint) if cfg.checkpoint else None
    rows = run_benchmark(cfg, params)
    stats = aggregate(rows, cfg.success_trans_mm, cfg.success_rot_deg)
    table = format_table(stats)
    checks = check_expectations(cfg, stats)
    lines = [f"{'PASS' if ok else 'FAIL'}  {name}  ({detail})" for name, ok, detail in checks]
    out = _out_dir(args.out)
    pio.atomic_write(out / "trials.csv", rows_to_csv(rows))
    pio.atomic_write(out / "summary.txt", table + "".join(line + "\n" for line in lines))
    print(table, end="")
    for line in lines:
        print(line)
    return EXIT_OK if all(ok for _, ok, _ in checks) else EXIT_NOT_CONVERGED


def cmd_train_sim(args) -> int:
    from .learned_similarity import TrainConfig, train

    cfg = pio.coerce_dataclass(TrainConfig, pio.read_kv(args.config)) if args.config else TrainConfig()
    if args.iterations is not None:
        cfg.iterations = args.iterations
    if cfg.iterations < 0:
        raise ConfigError("iterations must be >= 0")

    def progress(it, M, lr):
        if args.verbose and (it % 100 == 0 or it == cfg.iterations - 1):
            print(f"step {it} mdist {M:.4f} lr {lr:.3g}", file=sys.stderr)

    res = train(cfg, callback=progress)
    out = _out_dir(args.out)
    meta = {"coord_channels": int(res.params.coord_channels), "iterations": cfg.iterations,
            "skipped": res.skipped}
    pio.save_arrays(out / "checkpoint.txt", res.params.arrays(), meta)
    hist = "step,mdist,lr\n" + "".join(f"{s},{m!r},{lr!r}\n" for s, m, lr in res.history)
    pio.atomic_write(out / "history.csv", hist)
    if res.history:
        print(f"steps={len(res.history)} skipped={res.skipped} "
              f"first_mdist={res.history[0][1]!r} last_mdist={res.history[-1][1]!r}")
    else:
        print("steps=0 (initial checkpoint written)")
    return EXIT_OK


# -- parser ----------------------------------------------------------------

def _add_geometry(p):
    p.add_argument("--intrinsics", help="key=value file: det_rows, det_cols, pixel_pitch_mm, sdd_mm, iso_offset_mm[, K]")
    p.add_argument("--det-size", type=int, default=128, help="square detector size when no intrinsics file (default 128)")
    p.add_argument("--K", type=int, default=None, help="samples per ray (default: intrinsics file, else 2*max(dims))")
    p.add_argument("--threads", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="prost", description="Differentiable DRR rendering and 2D/3D registration.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="write a synthetic volume")
    p.add_argument("--kind", default="gaussian-blobs", choices=["gaussian-blobs", "box-frame", "spheres"])
    p.add_argument("--dims", type=int, default=32)
    p.add_argument("--spacing", type=float, default=4.0, help="voxel size in mm")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("drr", help="render a projection; writes <out>.pgm and <out>.csv")
    p.add_argument("--volume", required=True)
    p.add_argument("--pose", required=True, help="wx,wy,wz,tx,ty,tz (rad, mm)")
    p.add_argument("--out", required=True)
    p.add_argument("--weight-by-length", action="store_true")
    _add_geometry(p)
    p.set_defaults(func=cmd_drr)

    p = sub.add_parser("register", help="recover the pose of a target image", epilog=REGISTER_EPILOG,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--volume", required=True)
    p.add_argument("--target", required=True, help="target image (.csv raw values or .pgm)")
    p.add_argument("--init-pose", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--method", default="gradncc", choices=["gradncc", "net", "net+gradncc"])
    p.add_argument("--truth", help="ground-truth pose for error reporting")
    p.add_argument("--config", help="key=value overrides: stage1_max_iters, stage2_max_iters, param_scale")
    p.add_argument("--out", required=True, help="output directory")
    _add_geometry(p)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("gradcheck", help="finite-difference checks of all gradients")
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--trials", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("benchmark", help="seeded registration trials", epilog=BENCHMARK_EPILOG,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", help="key=value file with BenchmarkConfig fields")
    p.add_argument("--trials", type=int, default=None, help="override the trial count")
    p.add_argument("--out", default="benchmark_out")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("train-sim", help="train the toy learned similarity", epilog=TRAIN_EPILOG,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", help="key=value file with TrainConfig fields")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--out", default="train_out")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train_sim)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, InvalidArgumentError, GeometryError) as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (VolumeFormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ProstError, FloatingPointError, ValueError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
