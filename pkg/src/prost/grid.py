"""Canonical cone-beam control-point grid.

Coordinates are normalised so the volume occupies the cube [-1, 1]^3.
Axis convention: x spans the volume's W axis, y its H axis and z its D
(depth) axis.  The X-ray source sits on the +z side at ``(0, 0, src)``; the
detector plane is perpendicular to z at ``(0, 0, det)`` with ``det < -1``
in the usual geometry.  Detector index ``m`` runs along x and ``n`` along y.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import GeometryError, InvalidArgumentError

# Siemens CIOS Fusion C-arm, full resolution.
CIOS_PIXELS = 1536
CIOS_PITCH_MM = 0.194
CIOS_SDD_MM = 1020.0
CIOS_ISO_OFFSET_MM = 400.0


@dataclass(frozen=True)
class Intrinsics:
    det_rows: int
    det_cols: int
    pixel_pitch: float
    sdd: float
    iso_offset: float

    def __post_init__(self):
        if self.det_rows < 1 or self.det_cols < 1:
            raise InvalidArgumentError("detector must have at least one pixel")
        if min(self.pixel_pitch, self.sdd, self.iso_offset) <= 0:
            raise InvalidArgumentError("pitch, sdd and iso_offset must be positive")
        if self.sdd <= self.iso_offset:
            raise InvalidArgumentError("sdd must exceed iso_offset")

    @classmethod
    def cios(cls, size: int = 128) -> "Intrinsics":
        """CIOS Fusion geometry with the detector downsampled to ``size`` pixels."""
        pitch = CIOS_PITCH_MM * CIOS_PIXELS / size
        return cls(size, size, pitch, CIOS_SDD_MM, CIOS_ISO_OFFSET_MM)


@dataclass(frozen=True)
class VolumeMeta:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        if len(dims) != 3 or len(spacing) != 3:
            raise InvalidArgumentError("dims and spacing must have 3 entries")
        if min(dims) < 2:
            raise InvalidArgumentError(f"every dimension must be >= 2, got {dims}")
        if min(spacing) <= 0 or not np.all(np.isfinite(spacing)):
            raise InvalidArgumentError("spacing must be positive")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)

    @property
    def half_extent(self) -> np.ndarray:
        """Half size in mm along (x, y, z), i.e. the (W, H, D) axes."""
        D, W, H = self.dims
        vd, vw, vh = self.spacing
        return 0.5 * np.array([W * vw, H * vh, D * vd])


@dataclass(frozen=True, eq=False)
class ControlGrid:
    """Precomputed pose-independent sampling structure.

    ``points`` has shape (4, M*N*K) and is ordered (m, n, k) in C order, so
    ``points.reshape(4, M, N, K)`` recovers the ray layout.
    """

    points: np.ndarray
    t_near: np.ndarray
    t_far: np.ndarray
    seg_len: np.ndarray
    hit: np.ndarray
    src_h: np.ndarray
    det_center_h: np.ndarray
    M: int
    N: int
    K: int
    half_extent: np.ndarray = field(repr=False)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.M, self.N)

    @property
    def chord_len(self) -> np.ndarray:
        """Physical length (mm) of each ray inside the volume."""
        return self.seg_len * (self.K - 1)


def default_k(meta: VolumeMeta) -> int:
    return 2 * max(meta.dims)


def ray_box_intersect(origin, directions, lo=-1.0, hi=1.0):
    """Slab-method intersection of rays ``origin + t * dir`` with an axis-aligned box.

    Returns ``(t_near, t_far)``; rays that miss have ``t_near > t_far``.
    """
    origin = np.asarray(origin, dtype=float)
    d = np.asarray(directions, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (lo - origin) * inv
        t2 = (hi - origin) * inv
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    # Axis-parallel rays: inside the slab -> unbounded, outside -> miss.
    parallel = d == 0
    inside = (origin >= lo) & (origin <= hi)
    tmin = np.where(parallel, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(parallel, np.where(inside, np.inf, -np.inf), tmax)
    return tmin.max(axis=-1), tmax.min(axis=-1)


def make_canonical_grid(intr: Intrinsics, meta: VolumeMeta, K: int | None = None) -> ControlGrid:
    """Build the cone-cut control grid for one (geometry, volume, K) triple."""
    if K is None:
        K = default_k(meta)
    if K < 2:
        raise InvalidArgumentError("K must be >= 2")
    half = meta.half_extent
    src_n = (intr.sdd - intr.iso_offset) / half[2]
    det_n = -intr.iso_offset / half[2]
    if src_n <= 1.0:
        raise GeometryError("source lies inside the volume")

    M, N = intr.det_rows, intr.det_cols
    xm = (np.arange(M) - 0.5 * (M - 1)) * intr.pixel_pitch / half[0]
    yn = (np.arange(N) - 0.5 * (N - 1)) * intr.pixel_pitch / half[1]
    pix = np.empty((M, N, 3))
    pix[..., 0] = xm[:, None]
    pix[..., 1] = yn[None, :]
    pix[..., 2] = det_n

    src = np.array([0.0, 0.0, src_n])
    dirs = pix - src
    t_near, t_far = ray_box_intersect(src, dirs)
    t_near = np.clip(t_near, 0.0, 1.0)
    t_far = np.clip(t_far, 0.0, 1.0)
    hit = t_far > t_near
    t_far = np.where(hit, t_far, t_near)

    s = np.linspace(0.0, 1.0, K)
    t = t_near[..., None] + (t_far - t_near)[..., None] * s
    pts = src + t[..., None] * dirs[:, :, None, :]
    pts = np.clip(pts, -1.0, 1.0)
    pts[~hit] = 0.0

    phys_dir_len = np.linalg.norm(dirs * half, axis=-1)
    seg_len = np.where(hit, (t_far - t_near) * phys_dir_len / (K - 1), 0.0)

    points = np.ones((4, M * N * K))
    points[:3] = pts.reshape(-1, 3).T
    for arr in (points, t_near, t_far, seg_len, hit):
        arr.setflags(write=False)
    return ControlGrid(
        points=points,
        t_near=t_near,
        t_far=t_far,
        seg_len=seg_len,
        hit=hit,
        src_h=np.append(src, 1.0),
        det_center_h=np.array([0.0, 0.0, det_n, 1.0]),
        M=M,
        N=N,
        K=K,
        half_extent=half,
    )


def transform_grid(grid: ControlGrid, T) -> np.ndarray:
    """Apply a 4x4 transform to every control point."""
    return np.asarray(T, dtype=float) @ grid.points


def transform_landmarks(grid: ControlGrid, T) -> tuple[np.ndarray, np.ndarray]:
    """Transformed homogeneous source point and detector centre."""
    T = np.asarray(T, dtype=float)
    return T @ grid.src_h, T @ grid.det_center_h

