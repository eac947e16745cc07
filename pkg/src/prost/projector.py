"""Differentiable cone-beam projection of a voxel volume.

``project`` moves the canonical control grid by the pose, samples the volume
trilinearly and sums along each ray.  Gradients follow the same chain
backwards: image -> samples -> transformed points -> transform -> pose.
All work is split into contiguous blocks of rays which may be run on a
thread pool; forward images are bitwise independent of the thread count and
reductions are summed in block order.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .errors import InvalidArgumentError
from .geometry import as_pose, pose_to_matrix, so3_derivatives
from .grid import ControlGrid
from .sampler import TrilinearStencil, Volume


def integration_weights(grid: ControlGrid, weight_by_length: bool = False) -> np.ndarray:
    """Per-sample quadrature weights, shape (M, N, K).

    Unweighted mode is the plain sum over samples.  Length weighting uses the
    trapezoid rule over each ray's chord, so a constant volume integrates to
    value times chord length exactly.  Rays that miss the volume get zero.
    """
    w = np.broadcast_to(grid.hit[..., None], (grid.M, grid.N, grid.K)).astype(float)
    if weight_by_length:
        trap = np.ones(grid.K)
        trap[[0, -1]] = 0.5
        w = w * grid.seg_len[..., None] * trap
    return w


def integrate(gs, grid: ControlGrid, weight_by_length: bool = False) -> np.ndarray:
    """Collapse sampled values (M, N, K) into an (M, N) image."""
    gs = np.asarray(gs, dtype=float)
    if gs.size != grid.M * grid.N * grid.K:
        raise InvalidArgumentError(
            f"samples have {gs.size} entries, grid expects {grid.M}x{grid.N}x{grid.K}"
        )
    gs = gs.reshape(grid.M, grid.N, grid.K)
    return (gs * integration_weights(grid, weight_by_length)).sum(axis=-1)


def _check(vol: Volume, grid: ControlGrid):
    if not np.allclose(vol.meta.half_extent, grid.half_extent, rtol=1e-12, atol=0):
        raise InvalidArgumentError("grid was built for a volume of different physical size")


def _blocks(grid: ControlGrid, n_threads: int) -> list[slice]:
    rays = grid.M * grid.N
    n = max(1, min(int(n_threads), rays))
    edges = np.linspace(0, rays, n + 1).astype(int) * grid.K
    return [slice(a, b) for a, b in zip(edges[:-1], edges[1:])]


def _map(fn, blocks, n_threads):
    if len(blocks) == 1 or n_threads <= 1:
        return [fn(b) for b in blocks]
    with ThreadPoolExecutor(max_workers=n_threads) as pool:
        return list(pool.map(fn, blocks))


class PoseLinearization:
    """One (volume, pose, grid) evaluation point.

    Cell lookups are cached per ray block, so rendering and then
    back-propagating through the same object samples the volume only once.
    """

    def __init__(self, vol: Volume, theta, grid: ControlGrid, weight_by_length: bool = False,
                 n_threads: int = 1):
        _check(vol, grid)
        self.theta = as_pose(theta)
        self.vol = vol
        self.grid = grid
        self.T = pose_to_matrix(self.theta, grid.half_extent)
        self.weights = integration_weights(grid, weight_by_length).reshape(-1)
        self.n_threads = max(1, int(n_threads))
        self.blocks = _blocks(grid, self.n_threads)
        self._stencils = {}

    def stencil(self, sl):
        key = (sl.start, sl.stop)
        st = self._stencils.get(key)
        if st is None:
            pts = self.T @ self.grid.points[:, sl]
            st = self._stencils[key] = TrilinearStencil(self.vol.data, pts)
        return st

    def image(self) -> np.ndarray:
        def run(sl):
            return self.stencil(sl).values() * self.weights[sl]

        gs = np.concatenate(_map(run, self.blocks, self.n_threads))
        return gs.reshape(self.grid.M, self.grid.N, self.grid.K).sum(axis=-1)

    def _upstream(self, dL_dI, sl):
        g = self.grid
        dL_dI = np.asarray(dL_dI, dtype=float)
        if dL_dI.shape != (g.M, g.N):
            raise InvalidArgumentError(f"image gradient must have shape {(g.M, g.N)}")
        return np.repeat(dL_dI.reshape(-1), g.K)[sl] * self.weights[sl]

    def vjp_pose(self, dL_dI) -> np.ndarray:
        dR = so3_derivatives(self.theta[:3])

        def run(sl):
            st = self.stencil(sl)
            dq = st.spatial_gradient() * self._upstream(dL_dI, sl)
            return dq @ self.grid.points[:3, sl].T, dq.sum(axis=1)

        G = np.zeros((3, 3))
        s = np.zeros(3)
        for Gb, sb in _map(run, self.blocks, self.n_threads):
            G += Gb
            s += sb
        grad = np.empty(6)
        grad[:3] = np.einsum("iab,ab->i", dR, G)
        grad[3:] = s / self.grid.half_extent
        return grad

    def vjp_volume(self, dL_dI) -> np.ndarray:
        def run(sl):
            return self.stencil(sl).vjp_volume(self._upstream(dL_dI, sl))

        parts = _map(run, self.blocks, self.n_threads)
        out = parts[0]
        for p in parts[1:]:
            out = out + p
        return out

    def point_tangents(self, sl) -> np.ndarray:
        """d(points)/d(theta) for the block, shape (6, 3, P)."""
        dR = so3_derivatives(self.theta[:3])
        g = self.grid.points[:3, sl]
        out = np.zeros((6, 3, g.shape[1]))
        for i in range(3):
            out[i] = dR[i] @ g
            out[3 + i, i] = 1.0 / self.grid.half_extent[i]
        return out

    def jacobian(self) -> tuple[np.ndarray, np.ndarray]:
        def run(sl):
            st = self.stencil(sl)
            grad = st.spatial_gradient()
            tang = self.point_tangents(sl)
            w = self.weights[sl]
            return st.values() * w, np.einsum("cp,icp->pi", grad, tang) * w[:, None]

        parts = _map(run, self.blocks, self.n_threads)
        g = self.grid
        gs = np.concatenate([p[0] for p in parts]).reshape(g.M, g.N, g.K)
        J = np.concatenate([p[1] for p in parts]).reshape(g.M, g.N, g.K, 6)
        return gs.sum(axis=2), J.sum(axis=2)


def project(vol: Volume, theta, grid: ControlGrid, weight_by_length: bool = False,
            n_threads: int = 1) -> np.ndarray:
    """Render the (M, N) projection of ``vol`` at pose ``theta``."""
    return PoseLinearization(vol, theta, grid, weight_by_length, n_threads).image()


def grad_pose(vol: Volume, theta, grid: ControlGrid, dL_dI, weight_by_length: bool = False,
              n_threads: int = 1) -> np.ndarray:
    """Back-propagate an image gradient to the 6 pose parameters."""
    return PoseLinearization(vol, theta, grid, weight_by_length, n_threads).vjp_pose(dL_dI)


def grad_volume(vol: Volume, theta, grid: ControlGrid, dL_dI, weight_by_length: bool = False,
                n_threads: int = 1) -> np.ndarray:
    """Back-project an image gradient onto the voxel grid (adjoint of ``project``)."""
    return PoseLinearization(vol, theta, grid, weight_by_length, n_threads).vjp_volume(dL_dI)


def pose_jacobian(vol: Volume, theta, grid: ControlGrid, weight_by_length: bool = False,
                  n_threads: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Projection and its full pose Jacobian, shapes (M, N) and (M, N, 6)."""
    return PoseLinearization(vol, theta, grid, weight_by_length, n_threads).jacobian()


def jvp_pose(vol: Volume, theta, grid: ControlGrid, direction, weight_by_length: bool = False,
             n_threads: int = 1) -> np.ndarray:
    """Directional derivative of the projection along a pose direction."""
    direction = np.asarray(direction, dtype=float).reshape(6)
    _, J = pose_jacobian(vol, theta, grid, weight_by_length, n_threads)
    return J @ direction
