"""Seeded registration trials and their summary table.

Every trial ``i`` owns the RNG stream ``seed + i``: it draws a target pose
``theta_t``, starts from ``theta_t`` plus an independent perturbation of the
same spread, renders the target image and runs each requested method.  The
aggregate table is computed from the exact values written to the per-trial
CSV, so re-reading the CSV reproduces it.
"""
from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields

import numpy as np

from .errors import ConfigError
from .geometry import sample_pose
from .grid import Intrinsics, make_canonical_grid
from .optimize import RegistrationConfig, StageConfig, evaluate, register
from .phantoms import gaussian_blobs, make_phantom
from .projector import project

METHODS = ("gradncc", "net", "net+gradncc")

CSV_COLUMNS = [
    "trial", "method", "init_trans_mm", "init_rot_deg",
    "final_tx", "final_ty", "final_tz", "final_trans_mm",
    "final_rx", "final_ry", "final_rz", "final_rot_deg",
    "stage1_iters", "stage2_iters", "converged", "success", "status",
]


@dataclass
class BenchmarkConfig:
    phantom: str = "gaussian-blobs"
    dims: int = 64
    spacing_mm: float = 4.0
    phantom_seed: int = 3
    n_blobs: int = 40
    blob_sigma_lo: float = 0.035
    blob_sigma_hi: float = 0.07
    blob_extent: float = 0.7
    det_size: int = 48
    K: int = 48
    trials: int = 50
    sigma_rot_deg: float = 3.0
    sigma_trans_mm: float = 5.0
    methods: str = "gradncc"
    seed: int = 0
    checkpoint: str = ""
    stage1_max_iters: int = 500
    stage2_max_iters: int = 1000
    success_trans_mm: float = 0.5
    success_rot_deg: float = 0.5
    # optional expectations checked by the CLI; negative disables
    expect_min_success: float = -1.0
    expect_min_median_ratio: float = -1.0
    workers: int = 1

    def method_list(self) -> list[str]:
        out = [m.strip() for m in self.methods.split(",") if m.strip()]
        bad = [m for m in out if m not in METHODS]
        if bad or not out:
            raise ConfigError(f"unknown method(s) {bad or self.methods!r}; choose from {METHODS}")
        return out

    def validate(self):
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if self.sigma_rot_deg < 0 or self.sigma_trans_mm < 0:
            raise ConfigError("sigmas must be >= 0")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        methods = self.method_list()
        if any(m.startswith("net") for m in methods) and not self.checkpoint:
            raise ConfigError("methods using the network need a checkpoint")


def build_scene(cfg: BenchmarkConfig):
    dims = (cfg.dims,) * 3
    spacing = (cfg.spacing_mm,) * 3
    if cfg.phantom == "gaussian-blobs":
        vol = gaussian_blobs(dims, n_blobs=cfg.n_blobs, seed=cfg.phantom_seed, spacing=spacing,
                             sigma_range=(cfg.blob_sigma_lo, cfg.blob_sigma_hi), extent=cfg.blob_extent)
    else:
        vol = make_phantom(cfg.phantom, dims, seed=cfg.phantom_seed, spacing=spacing)
    grid = make_canonical_grid(Intrinsics.cios(cfg.det_size), vol.meta, cfg.K)
    return vol, grid


def draw_trial(cfg: BenchmarkConfig, trial: int):
    """``(theta_t, theta0)`` for one trial from its own stream."""
    rng = np.random.default_rng(cfg.seed + trial)
    while True:
        theta_t = sample_pose(cfg.sigma_rot_deg, cfg.sigma_trans_mm, rng)
        theta0 = theta_t + sample_pose(cfg.sigma_rot_deg, cfg.sigma_trans_mm, rng)
        if np.linalg.norm(theta0[:3]) < math.pi * (1.0 - 1e-3):
            return theta_t, theta0


def _reg_config(cfg: BenchmarkConfig, method: str) -> RegistrationConfig:
    base = RegistrationConfig()
    s1 = StageConfig(**{f.name: getattr(base.stage1, f.name) for f in fields(StageConfig)})
    s2 = StageConfig(**{f.name: getattr(base.stage2, f.name) for f in fields(StageConfig)})
    s1.max_iters = cfg.stage1_max_iters
    s2.max_iters = cfg.stage2_max_iters
    return RegistrationConfig(stage1=s1, stage2=s2, use_gradncc=method != "net")


def run_trial(cfg: BenchmarkConfig, trial: int, vol, grid, params=None) -> list[dict]:
    theta_t, theta0 = draw_trial(cfg, trial)
    I_f = project(vol, theta_t, grid)
    init_t, init_r = evaluate(theta0, theta_t)
    rows = []
    for method in cfg.method_list():
        use_net = method.startswith("net")
        rep = register(vol, I_f, theta0, grid, _reg_config(cfg, method),
                       params=params if use_net else None, truth=theta_t)
        te, re_ = rep.trans_err, rep.rot_err
        rows.append({
            "trial": trial, "method": method,
            "init_trans_mm": init_t[3], "init_rot_deg": init_r[3],
            "final_tx": te[0], "final_ty": te[1], "final_tz": te[2], "final_trans_mm": te[3],
            "final_rx": re_[0], "final_ry": re_[1], "final_rz": re_[2], "final_rot_deg": re_[3],
            "stage1_iters": rep.stage_iters[0], "stage2_iters": rep.stage_iters[1],
            "converged": int(rep.converged),
            "success": int(te[3] < cfg.success_trans_mm and re_[3] < cfg.success_rot_deg),
            "status": rep.status.replace(",", ";"),
        })
    return rows


def run_benchmark(cfg: BenchmarkConfig, params=None, progress=None) -> list[dict]:
    """All trials, ordered by trial then method."""
    cfg.validate()
    vol, grid = build_scene(cfg)

    def one(i):
        rows = run_trial(cfg, i, vol, grid, params)
        if progress is not None:
            progress(i, rows)
        return rows

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            chunks = list(pool.map(one, range(cfg.trials)))
    else:
        chunks = [one(i) for i in range(cfg.trials)]
    return [r for chunk in chunks for r in chunk]


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    buf.write(",".join(CSV_COLUMNS) + "\n")
    for r in rows:
        buf.write(",".join(repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in CSV_COLUMNS) + "\n")
    return buf.getvalue()


def read_csv(text: str) -> list[dict]:
    out = []
    for r in csv.DictReader(io.StringIO(text)):
        row = dict(r)
        for c in CSV_COLUMNS:
            if c in ("method", "status"):
                continue
            row[c] = int(row[c]) if c in ("trial", "stage1_iters", "stage2_iters", "converged", "success") else float(row[c])
        out.append(row)
    return out


def aggregate(rows: list[dict], success_trans_mm: float = 0.5, success_rot_deg: float = 0.5) -> dict:
    """Per-method statistics, plus the shared initial error under ``"initial"``.

    The thresholds only affect the success rate of the ``"initial"`` row;
    method rows use the ``success`` column.
    """
    stats = {}

    def summary(values):
        v = np.asarray(values, dtype=float)
        return {"mean": float(v.mean()), "std": float(v.std()), "median": float(np.median(v))}

    methods = list(dict.fromkeys(r["method"] for r in rows))
    if rows:
        first = [r for r in rows if r["method"] == methods[0]]
        stats["initial"] = {
            "trans": summary([r["init_trans_mm"] for r in first]),
            "rot": summary([r["init_rot_deg"] for r in first]),
            "success": float(np.mean([r["init_trans_mm"] < success_trans_mm
                                      and r["init_rot_deg"] < success_rot_deg for r in first])),
            "n": len(first),
        }
    for m in methods:
        sel = [r for r in rows if r["method"] == m]
        stats[m] = {
            "trans": summary([r["final_trans_mm"] for r in sel]),
            "rot": summary([r["final_rot_deg"] for r in sel]),
            "success": float(np.mean([r["success"] for r in sel])),
            "n": len(sel),
        }
    return stats


def format_table(stats: dict) -> str:
    head = (f"{'method':<13} {'n':>4} {'trans mean+-std (mm)':>22} {'median':>9} "
            f"{'rot mean+-std (deg)':>22} {'median':>9} {'success':>8}")
    lines = [head]
    for name, s in stats.items():
        t, r = s["trans"], s["rot"]
        lines.append(
            f"{name:<13} {s['n']:>4} {t['mean']:>11.3f} +- {t['std']:<8.3f} {t['median']:>9.3f} "
            f"{r['mean']:>11.3f} +- {r['std']:<8.3f} {r['median']:>9.3f} {s['success']:>8.2f}"
        )
    return "\n".join(lines) + "\n"


def check_expectations(cfg: BenchmarkConfig, stats: dict) -> list[tuple[str, bool, str]]:
    """Optional pass/fail checks on the first method's results."""
    out = []
    m = cfg.method_list()[0]
    if cfg.expect_min_success >= 0:
        rate = stats[m]["success"]
        out.append((f"{m} success rate >= {cfg.expect_min_success}", rate >= cfg.expect_min_success,
                    f"{rate:.3f}"))
    if cfg.expect_min_median_ratio >= 0:
        # both error kinds must stay at least this fraction of their initial median
        ratios = [stats[m][k]["median"] / max(stats["initial"][k]["median"], 1e-300) for k in ("trans", "rot")]
        ok = all(r >= cfg.expect_min_median_ratio for r in ratios)
        out.append((f"{m} median final/initial >= {cfg.expect_min_median_ratio}", ok,
                    f"trans {ratios[0]:.3f}, rot {ratios[1]:.3f}"))
    return out
