"""Pose optimisation: momentum SGD, cyclic learning rate, STD stopping and
the two-stage registration pipeline (learned similarity, then Grad-NCC).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError, InvalidArgumentError
from .geometry import as_pose, exp_so3, format_pose, log_so3, parse_pose
from .projector import PoseLinearization
from .similarity import gradncc_loss


@dataclass
class OptState:
    theta: np.ndarray
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(6))
    step: int = 0
    loss_history: list = field(default_factory=list)


def sgd_step(state: OptState, grad, lr: float, momentum: float) -> OptState:
    """Classical momentum: ``v <- m v + g``, ``theta <- theta - lr v``."""
    grad = np.asarray(grad, dtype=float)
    v = momentum * state.velocity + grad
    return OptState(state.theta - lr * v, v, state.step + 1, state.loss_history)


def cyclic_lr(step: int, lo: float, hi: float, half_period: int) -> float:
    """Triangular schedule: ``lo`` at step 0, ``hi`` at ``half_period``, back to ``lo``."""
    if half_period < 1:
        raise InvalidArgumentError("half_period must be >= 1")
    pos = step % (2 * half_period)
    frac = pos / half_period if pos <= half_period else 2.0 - pos / half_period
    return lo + (hi - lo) * frac


def converged(history, window: int, threshold: float) -> bool:
    """Population std of the last ``window`` values below ``threshold``."""
    if window < 2:
        raise InvalidArgumentError("window must be >= 2")
    if len(history) < window:
        return False
    return bool(np.std(np.asarray(history[-window:], dtype=float)) < threshold)


def evaluate(final, truth):
    """Per-axis and aggregate pose errors.

    Returns ``(trans_err_mm, rot_err_deg)``, each ``(ex, ey, ez, aggregate)``.
    Rotation error comes from the Rodrigues vector of ``R_truth^T R_final``.
    """
    final, truth = as_pose(final), as_pose(truth)
    dt = np.abs(final[3:] - truth[3:])
    phi = np.rad2deg(log_so3(exp_so3(truth[:3]).T @ exp_so3(final[:3])))
    trans = (*map(float, dt), float(np.linalg.norm(final[3:] - truth[3:])))
    rot = (*map(float, np.abs(phi)), float(np.linalg.norm(phi)))
    return trans, rot


@dataclass
class StageConfig:
    lr_lo: float
    lr_hi: float
    half_period: int = 100
    momentum: float = 0.9
    window: int = 10
    threshold: float = 3e-3
    max_iters: int = 500


@dataclass
class RegistrationConfig:
    """Settings for :func:`register`.

    The optimiser runs on ``theta / param_scale``; a scale of ``(1, 1, 1, s,
    s, s)`` expresses translations in units of ``s`` mm while rotations stay
    in radians.  Depth is scaled hardest because the projection barely
    changes with it.
    """

    stage1: StageConfig = field(default_factory=lambda: StageConfig(0.01, 0.01, threshold=3e-3, max_iters=500))
    stage2: StageConfig = field(default_factory=lambda: StageConfig(1e-3, 3e-3, threshold=1e-5, max_iters=1000))
    param_scale: tuple = (1.0, 1.0, 1.0, 20.0, 20.0, 150.0)
    use_gradncc: bool = True
    normalize: bool = True
    weight_by_length: bool = False
    n_threads: int = 1


@dataclass
class RegistrationReport:
    initial: np.ndarray
    final: np.ndarray
    truth: np.ndarray | None = None
    stage_iters: list = field(default_factory=lambda: [0, 0])
    stage_converged: list = field(default_factory=lambda: [False, False])
    switch_step: int = 0
    trace: list = field(default_factory=list)  # (step, stage, loss, lr)
    trans_err: tuple | None = None
    rot_err: tuple | None = None
    status: str = "ok"

    @property
    def converged(self) -> bool:
        """Whether the last stage that ran stopped on the STD rule."""
        if self.status != "ok":
            return False
        return self.stage_converged[1] if self.stage_iters[1] else self.stage_converged[0]

    def to_text(self) -> str:
        lines = [
            f"status={self.status}",
            f"initial={format_pose(self.initial)}",
            f"final={format_pose(self.final)}",
            f"truth={format_pose(self.truth) if self.truth is not None else ''}",
            f"stage1_iters={self.stage_iters[0]}",
            f"stage2_iters={self.stage_iters[1]}",
            f"stage1_converged={int(self.stage_converged[0])}",
            f"stage2_converged={int(self.stage_converged[1])}",
            f"switch_step={self.switch_step}",
        ]
        if self.trans_err is not None:
            lines.append("trans_err_mm=" + ",".join(repr(v) for v in self.trans_err))
            lines.append("rot_err_deg=" + ",".join(repr(v) for v in self.rot_err))
        return "\n".join(lines) + "\n"

    def trace_csv(self) -> str:
        rows = ["step,stage,loss,lr"]
        rows += [f"{s},{st},{loss!r},{lr!r}" for s, st, loss, lr in self.trace]
        return "\n".join(rows) + "\n"

    @classmethod
    def from_text(cls, text: str, trace_csv: str | None = None) -> "RegistrationReport":
        kv = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
        rep = cls(parse_pose(kv["initial"]), parse_pose(kv["final"]))
        rep.truth = parse_pose(kv["truth"]) if kv.get("truth") else None
        rep.status = kv["status"]
        rep.stage_iters = [int(kv["stage1_iters"]), int(kv["stage2_iters"])]
        rep.stage_converged = [kv["stage1_converged"] == "1", kv["stage2_converged"] == "1"]
        rep.switch_step = int(kv["switch_step"])
        if "trans_err_mm" in kv:
            rep.trans_err = tuple(float(v) for v in kv["trans_err_mm"].split(","))
            rep.rot_err = tuple(float(v) for v in kv["rot_err_deg"].split(","))
        if trace_csv is not None:
            for row in trace_csv.splitlines()[1:]:
                s, st, loss, lr = row.split(",")
                rep.trace.append((int(s), int(st), float(loss), float(lr)))
        return rep


def _run_stage(theta, stage_id, cfg: StageConfig, loss_and_grad, scale, report, step0):
    state = OptState(theta / scale)
    history = []
    done = False
    for it in range(cfg.max_iters):
        theta_now = state.theta * scale
        if np.linalg.norm(theta_now[:3]) >= math.pi * (1.0 - 1e-6):
            raise DegenerateInputError("rotation left the canonical branch")
        loss, grad = loss_and_grad(theta_now)
        lr = cyclic_lr(it, cfg.lr_lo, cfg.lr_hi, cfg.half_period)
        history.append(loss)
        report.trace.append((step0 + it, stage_id, loss, lr))
        if converged(history, cfg.window, cfg.threshold):
            done = True
            break
        state = sgd_step(state, grad * scale, lr, cfg.momentum)
    return state.theta * scale, len(history), done


def register(vol, I_f, theta0, grid, cfg: RegistrationConfig | None = None, params=None,
             truth=None, fixed_for_net=None) -> RegistrationReport:
    """Recover the pose at which ``vol`` projects to ``I_f``.

    Stage 1 (only when encoder ``params`` are given) descends the learned
    similarity; stage 2 (unless ``cfg.use_gradncc`` is off) descends Grad-NCC.  Each stage stops on the STD rule
    or at its iteration cap.  Numerical failures end the run with
    ``status="failed"`` instead of raising.
    """
    from .learned_similarity import net_loss_image_grad

    cfg = cfg or RegistrationConfig()
    theta = as_pose(theta0).copy()
    scale = np.asarray(cfg.param_scale, dtype=float)
    report = RegistrationReport(theta.copy(), theta.copy(), None if truth is None else as_pose(truth))
    wbl = cfg.weight_by_length
    I_f = np.asarray(I_f, dtype=float)
    I_f_net = I_f if fixed_for_net is None else fixed_for_net

    def net_objective(th):
        lin = PoseLinearization(vol, th, grid, wbl, cfg.n_threads)
        loss, dI = net_loss_image_grad(params, lin.image(), I_f_net, cfg.normalize)
        return loss, lin.vjp_pose(dI)

    def gncc_objective(th):
        lin = PoseLinearization(vol, th, grid, wbl, cfg.n_threads)
        loss, dI = gradncc_loss(lin.image(), I_f)
        return loss, lin.vjp_pose(dI)

    if params is None and not cfg.use_gradncc:
        raise InvalidArgumentError("no stage to run: give encoder params or enable Grad-NCC")
    try:
        if params is not None:
            theta, n1, ok1 = _run_stage(theta, 1, cfg.stage1, net_objective, scale, report, 0)
            report.stage_iters[0] = n1
            report.stage_converged[0] = ok1
        report.switch_step = report.stage_iters[0]
        if cfg.use_gradncc:
            theta, n2, ok2 = _run_stage(theta, 2, cfg.stage2, gncc_objective, scale, report,
                                        report.switch_step)
            report.stage_iters[1] = n2
            report.stage_converged[1] = ok2
        report.final = theta
    except (DegenerateInputError, FloatingPointError, InvalidArgumentError) as exc:
        report.status = f"failed: {exc}"
        report.final = theta
        report.stage_converged[1] = False
        if not np.all(np.isfinite(report.final)) or np.linalg.norm(report.final[:3]) >= math.pi:
            report.final = report.initial.copy()
    if report.truth is not None:
        report.trans_err, report.rot_err = evaluate(report.final, report.truth)
    return report
