"""Trilinear volume sampling with exact adjoints.

Normalised coordinates map onto voxel indices with the align-corners
convention: -1 is the first voxel centre, +1 the last.  Points outside the
cube (beyond a 1e-9 tolerance) read as zero and receive no gradient.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError
from .grid import VolumeMeta

BOUNDS_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class Volume:
    """Scalar voxel grid indexed ``data[d, w, h]`` with spacing in mm."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim != 3:
            raise InvalidArgumentError(f"volume must be 3-D, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise InvalidArgumentError("volume contains non-finite values")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        VolumeMeta(data.shape, self.spacing)  # validates dims and spacing

    @property
    def meta(self) -> VolumeMeta:
        return VolumeMeta(self.data.shape, self.spacing)

    def with_data(self, data) -> "Volume":
        return Volume(data, self.spacing)


class TrilinearStencil:
    """Cell lookup for a batch of points, shared by forward and backward passes.

    ``points`` is (3 or 4, P) in normalised (x, y, z) order; x indexes the
    volume's W axis, y its H axis and z its D axis.
    """

    def __init__(self, data: np.ndarray, points: np.ndarray):
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[0] not in (3, 4):
            raise InvalidArgumentError("points must have shape (3, P) or (4, P)")
        pts = pts[:3]
        if not np.all(np.isfinite(pts)):
            raise InvalidArgumentError("non-finite sample coordinates")
        self.data = data
        D, W, H = data.shape
        self.inside = np.all(np.abs(pts) <= 1.0 + BOUNDS_TOL, axis=0)
        # (coordinate row, axis length) in (d, w, h) order
        axes = ((pts[2], D), (pts[0], W), (pts[1], H))
        base = np.zeros(pts.shape[1], dtype=np.intp)
        frac = []
        self.scale = []
        for (c, n), stride in zip(axes, (W * H, H, 1)):
            u = np.clip((c + 1.0) * 0.5 * (n - 1), 0.0, n - 1)
            i0 = np.minimum(np.floor(u), n - 2).astype(np.intp)
            frac.append(u - i0)
            base += i0 * stride
            self.scale.append(0.5 * (n - 1))
        self.fd, self.fw, self.fh = frac
        self.offsets = [
            a * W * H + b * H + c for a in (0, 1) for b in (0, 1) for c in (0, 1)
        ]
        self.base = base
        self._corners = None

    def weights(self) -> list[np.ndarray]:
        """The 8 corner weights, ordered like ``offsets``; zero outside the cube."""
        fd, fw, fh = self.fd, self.fw, self.fh
        gd, gw, gh = 1.0 - fd, 1.0 - fw, 1.0 - fh
        m = self.inside
        return [
            (wd * ww * wh) * m
            for wd in (gd, fd)
            for ww in (gw, fw)
            for wh in (gh, fh)
        ]

    def corners(self) -> list[np.ndarray]:
        if self._corners is None:
            flat = self.data.ravel()
            self._corners = [flat[self.base + o] for o in self.offsets]
        return self._corners

    def values(self) -> np.ndarray:
        c000, c001, c010, c011, c100, c101, c110, c111 = self.corners()
        fd, fw, fh = self.fd, self.fw, self.fh
        c00 = c000 + (c001 - c000) * fh
        c01 = c010 + (c011 - c010) * fh
        c10 = c100 + (c101 - c100) * fh
        c11 = c110 + (c111 - c110) * fh
        c0 = c00 + (c01 - c00) * fw
        c1 = c10 + (c11 - c10) * fw
        return (c0 + (c1 - c0) * fd) * self.inside

    def spatial_gradient(self) -> np.ndarray:
        """Derivative of the interpolant w.r.t. normalised (x, y, z), shape (3, P)."""
        c000, c001, c010, c011, c100, c101, c110, c111 = self.corners()
        fd, fw, fh = self.fd, self.fw, self.fh
        gd, gw, gh = 1.0 - fd, 1.0 - fw, 1.0 - fh
        dd = (gw * gh * (c100 - c000) + gw * fh * (c101 - c001)
              + fw * gh * (c110 - c010) + fw * fh * (c111 - c011))
        dw = (gd * gh * (c010 - c000) + gd * fh * (c011 - c001)
              + fd * gh * (c110 - c100) + fd * fh * (c111 - c101))
        dh = (gd * gw * (c001 - c000) + gd * fw * (c011 - c010)
              + fd * gw * (c101 - c100) + fd * fw * (c111 - c110))
        sd, sw, sh = self.scale
        return np.stack([dw * sw, dh * sh, dd * sd]) * self.inside

    def vjp_volume(self, upstream: np.ndarray) -> np.ndarray:
        """Scatter ``upstream`` back onto the voxel grid (adjoint of ``values``)."""
        size = self.data.size
        out = np.zeros(size)
        for o, w in zip(self.offsets, self.weights()):
            out += np.bincount(self.base + o, weights=w * upstream, minlength=size)
        return out.reshape(self.data.shape)


def _check_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[0] not in (3, 4):
        raise InvalidArgumentError("points must have shape (3, P) or (4, P)")
    return pts


def trilinear_sample(vol: Volume, points) -> np.ndarray:
    """Interpolate ``vol`` at each column of ``points``."""
    return TrilinearStencil(vol.data, _check_points(points)).values()


def trilinear_backward(vol: Volume, points, upstream) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``sum(upstream * trilinear_sample(vol, points))``.

    Returns ``(dV, dPoints)`` with shapes ``vol.data.shape`` and (3, P).  On
    cell faces the derivative is taken from the cell on the positive side.
    """
    pts = _check_points(points)
    upstream = np.asarray(upstream, dtype=float).reshape(-1)
    if upstream.shape[0] != pts.shape[1]:
        raise InvalidArgumentError("upstream length does not match number of points")
    st = TrilinearStencil(vol.data, pts)
    return st.vjp_volume(upstream), st.spatial_gradient() * upstream
