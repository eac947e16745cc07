"""Finite-difference checks of every analytic gradient in the package.

Each check returns :class:`CheckResult` rows; :func:`run_all` gathers the
table printed by ``prost gradcheck``.  A component passes when
``|a - f| <= atol`` or ``|a - f| / max(|a|, |f|) < rtol``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGradientError, InvalidArgumentError
from .geometry import sample_pose
from .grid import Intrinsics, make_canonical_grid
from .learned_similarity import init_params, linearize, net_loss_image_grad
from .phantoms import gaussian_blobs
from .projector import PoseLinearization, grad_volume, project
from .sampler import Volume, trilinear_backward, trilinear_sample
from .similarity import gradncc_loss, mse, ncc

POSE_RTOL = 1e-3
POSE_ATOL = 1e-8
POSE_STEP = 1e-8
PARAM_STEP = 1e-4
IMAGE_STEP = 1e-4
PARAM_RTOL = 5e-3
PHYSICAL_SIZE_MM = 128.0


@dataclass
class CheckResult:
    component: str
    trial: int
    max_rel_err: float
    max_abs_err: float
    passed: bool

    def row(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return f"{self.component:<22} {self.trial:>5} {self.max_rel_err:>11.3e} {self.max_abs_err:>11.3e}  {flag}"


def compare(analytic, fd, rtol, atol):
    """Elementwise pass rule; returns (max_rel, max_abs, all_pass)."""
    a = np.ravel(np.asarray(analytic, float))
    f = np.ravel(np.asarray(fd, float))
    diff = np.abs(a - f)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-300)
    rel = diff / denom
    ok = (diff <= atol) | (rel < rtol)
    rel_report = np.where(diff <= atol, 0.0, rel)
    return float(rel_report.max(initial=0.0)), float(diff.max(initial=0.0)), bool(ok.all())


def central_diff(fn, x, step):
    x = np.asarray(x, dtype=float)
    out = np.zeros(x.size)
    for i in range(x.size):
        e = np.zeros(x.size)
        e[i] = step
        e = e.reshape(x.shape)
        out[i] = (fn(x + e) - fn(x - e)) / (2.0 * step)
    return out.reshape(x.shape)


def smooth_setup(dims: int, det: int, K: int, seed: int):
    """Tapered blob phantom sized to the field of view, with its grid."""
    spacing = (PHYSICAL_SIZE_MM / dims,) * 3
    vol = gaussian_blobs((dims,) * 3, n_blobs=6, seed=seed, spacing=spacing)
    grid = make_canonical_grid(Intrinsics.cios(det), vol.meta, K)
    return vol, grid


def pose_gradient_trial(dims: int, det: int, K: int, seed: int, trial: int = 0,
                        step: float = POSE_STEP) -> CheckResult:
    """``grad_pose`` against central differences of a random linear functional."""
    rng = np.random.default_rng(seed)
    vol, grid = smooth_setup(dims, det, K, seed)
    theta = sample_pose(10.0, 10.0, rng)
    u = rng.normal(size=(det, det))
    lin = PoseLinearization(vol, theta, grid)
    analytic = lin.vjp_pose(u)
    fd = central_diff(lambda th: float(np.sum(u * project(vol, th, grid))), theta, step)
    rel, ab, ok = compare(analytic, fd, POSE_RTOL, POSE_ATOL)
    return CheckResult(f"projector[{dims}^3,{det}^2,K{K}]", trial, rel, ab, ok)


def sampler_trial(size: int, seed: int, trial: int = 0) -> list[CheckResult]:
    """Point gradient by differences; volume gradient by the adjoint identity."""
    rng = np.random.default_rng(seed)
    vol = Volume(rng.normal(size=(size, size, size)))
    pts = rng.uniform(-0.9, 0.9, size=(3, 20))
    up = rng.normal(size=20)
    dV, dP = trilinear_backward(vol, pts, up)
    step = 1e-7
    fd = np.zeros_like(pts)
    for c in range(3):
        e = np.zeros_like(pts)
        e[c] = step
        fd[c] = up * (trilinear_sample(vol, pts + e) - trilinear_sample(vol, pts - e)) / (2 * step)
    rows = [CheckResult(f"sampler.points[{size}]", trial, *compare(dP, fd, 1e-5, 1e-7))]
    dvol = rng.normal(size=vol.data.shape)
    lhs = float(up @ trilinear_sample(vol.with_data(dvol), pts))
    rhs = float(np.sum(dV * dvol))
    rows.append(CheckResult(f"sampler.adjoint[{size}]", trial, *compare(lhs, rhs, 1e-9, 1e-12)))
    return rows


def projector_adjoint_trial(dims: int, det: int, K: int, seed: int, trial: int = 0) -> CheckResult:
    """``<u, P dV> == <P^T u, dV>`` for random ``u`` and ``dV``."""
    rng = np.random.default_rng(seed)
    vol, grid = smooth_setup(dims, det, K, seed)
    theta = sample_pose(10.0, 10.0, rng)
    dV = rng.normal(size=vol.data.shape)
    u = rng.normal(size=(det, det))
    lhs = float(np.sum(u * project(vol.with_data(dV), theta, grid)))
    rhs = float(np.sum(grad_volume(vol, theta, grid, u) * dV))
    rel, ab, _ = compare(lhs, rhs, 1e-9, 0.0)
    return CheckResult(f"projector.adjoint[{dims}^3]", trial, rel, ab, ab <= 1e-9 * max(1.0, abs(lhs)))


def similarity_trials(size: int, seed: int, trial: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(size, size))
    b = a + 0.5 * rng.normal(size=(size, size))
    rows = []
    for name, fn in (("mse", mse), ("ncc", ncc), ("gradncc", gradncc_loss)):
        _, g = fn(a, b)
        fd = central_diff(lambda x: fn(x, b)[0], a, IMAGE_STEP)
        rows.append(CheckResult(f"similarity.{name}[{size}]", trial, *compare(g, fd, 1e-5, 1e-9)))
    return rows


def _toy(seed: int, det: int = 16):
    vol, grid = smooth_setup(16, det, 32, seed)
    return vol, grid


def net_image_grad_trial(seed: int, trial: int = 0, det: int = 16) -> CheckResult:
    rng = np.random.default_rng(seed)
    phi = init_params(seed)
    I_m = rng.normal(size=(det, det))
    I_f = rng.normal(size=(det, det))
    _, g = net_loss_image_grad(phi, I_m, I_f)
    fd = central_diff(lambda x: net_loss_image_grad(phi, x, I_f)[0], I_m, 1e-6)
    return CheckResult("net.image_grad", trial, *compare(g, fd, 1e-5, 1e-10))


def net_pose_grad_trial(seed: int, trial: int = 0, det: int = 16) -> CheckResult:
    """Network similarity chained through the projector, against pose differences."""
    from .learned_similarity import net_loss

    rng = np.random.default_rng(seed)
    vol, grid = _toy(seed, det)
    phi = init_params(seed)
    theta = sample_pose(10.0, 10.0, rng)
    I_f = project(vol, sample_pose(10.0, 10.0, rng), grid)
    lin = PoseLinearization(vol, theta, grid)
    _, dI = net_loss_image_grad(phi, lin.image(), I_f)
    analytic = lin.vjp_pose(dI)
    fd = central_diff(lambda th: net_loss(phi, project(vol, th, grid), I_f), theta, POSE_STEP)
    return CheckResult("net.pose_grad", trial, *compare(analytic, fd, POSE_RTOL, 1e-10))


def double_backward_trial(seed: int, trial: int = 0, n_coords: int = 10,
                          det: int = 16) -> CheckResult:
    """``dM_dist/dphi`` by forward-over-reverse against differences over the weights."""
    rng = np.random.default_rng(seed)
    vol, grid = _toy(seed, det)
    phi = init_params(seed)
    for _ in range(100):
        theta = sample_pose(20.0, 15.0, rng)
        theta_t = sample_pose(20.0, 15.0, rng)
        try:
            s = linearize(vol, theta, theta_t, project(vol, theta_t, grid), grid)
            _, grad, _ = s.mdist_and_param_grad(phi)
            break
        except (DegenerateGradientError, ValueError):
            continue
    else:
        raise InvalidArgumentError("no usable sample for the double-backward check")
    coords = rng.choice(phi.flat().size, size=n_coords, replace=False)
    fd = s.mdist_param_grad_fd(phi, PARAM_STEP, coords)
    return CheckResult("net.double_backward", trial, *compare(grad[coords], fd, PARAM_RTOL, 1e-8))


def run_all(size: int = 16, trials: int = 3, seed: int = 0) -> list[CheckResult]:
    """Every check, ``trials`` times, on seeds ``seed + trial``.

    ``size`` sets the volume side; the detector is ``max(4, 2*size)`` (rounded
    to a multiple of 4) and the sample count ``max(2, 2*size)``.
    """
    if size < 2:
        raise InvalidArgumentError("size must be >= 2")
    if trials < 1:
        raise InvalidArgumentError("trials must be >= 1")
    det = max(4, (2 * size + 3) // 4 * 4)
    K = max(2, 2 * size)
    rows: list[CheckResult] = []
    for t in range(trials):
        s = seed + t
        rows += sampler_trial(max(size, 2), s, t)
        rows.append(pose_gradient_trial(size, det, K, s, t))
        rows.append(projector_adjoint_trial(size, det, K, s, t))
        rows += similarity_trials(max(size, 3), s, t)
        rows.append(net_image_grad_trial(s, t))
        rows.append(net_pose_grad_trial(s, t))
        rows.append(double_backward_trial(s, t))
    return rows


def format_table(rows: list[CheckResult]) -> str:
    head = f"{'component':<22} {'trial':>5} {'max_rel':>11} {'max_abs':>11}  result"
    return "\n".join([head] + [r.row() for r in rows]) + "\n"

