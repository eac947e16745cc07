"""Synthetic test volumes standing in for CT data."""
from __future__ import annotations

import numpy as np

from .errors import InvalidArgumentError
from .sampler import Volume

KINDS = ("gaussian-blobs", "box-frame", "spheres")


def _voxel_coords(dims):
    """Normalised (x, y, z) coordinates of every voxel centre, each shaped ``dims``."""
    D, W, H = dims
    z = np.linspace(-1.0, 1.0, D)[:, None, None]
    x = np.linspace(-1.0, 1.0, W)[None, :, None]
    y = np.linspace(-1.0, 1.0, H)[None, None, :]
    return np.broadcast_arrays(x, y, z)


def _taper(c, start=0.7):
    """1 for |c| <= start, falling to 0 at |c| = 1 with zero first and second derivative."""
    s = np.clip((np.abs(c) - start) / (1.0 - start), 0.0, 1.0)
    return 1.0 - s**3 * (10.0 - 15.0 * s + 6.0 * s**2)


def gaussian_blobs(dims, n_blobs=6, seed=0, spacing=(1.0, 1.0, 1.0),
                   sigma_range=(0.12, 0.3), extent=0.5, taper=True) -> Volume:
    """Sum of isotropic Gaussians with random centres inside ``[-extent, extent]^3``.

    With ``taper`` the sum is multiplied by a C2 window that vanishes on the
    cube faces, so sampling never sees the jump to zero padding.
    """
    rng = np.random.default_rng(seed)
    x, y, z = _voxel_coords(dims)
    data = np.zeros(tuple(dims))
    for _ in range(n_blobs):
        c = rng.uniform(-extent, extent, size=3)
        s = rng.uniform(*sigma_range)
        a = rng.uniform(0.5, 1.5)
        r2 = (x - c[0]) ** 2 + (y - c[1]) ** 2 + (z - c[2]) ** 2
        data += a * np.exp(-0.5 * r2 / s**2)
    if taper:
        data *= _taper(x) * _taper(y) * _taper(z)
    return Volume(data, spacing)


def spheres(dims, n_spheres=4, seed=0, spacing=(1.0, 1.0, 1.0), radius=None) -> Volume:
    """Union-sum of solid balls; a single ball of ``radius`` at the centre if given."""
    x, y, z = _voxel_coords(dims)
    data = np.zeros(tuple(dims))
    if radius is not None:
        data[x**2 + y**2 + z**2 <= radius**2] = 1.0
        return Volume(data, spacing)
    rng = np.random.default_rng(seed)
    for _ in range(n_spheres):
        c = rng.uniform(-0.5, 0.5, size=3)
        r = rng.uniform(0.15, 0.4)
        data[(x - c[0]) ** 2 + (y - c[1]) ** 2 + (z - c[2]) ** 2 <= r**2] += rng.uniform(0.5, 1.5)
    return Volume(data, spacing)


def box_frame(dims, seed=0, spacing=(1.0, 1.0, 1.0), half=0.6, thickness=0.12) -> Volume:
    """Hollow box edges: high-contrast lines for edge-based metrics.

    ``seed`` jitters the box half-widths per axis.
    """
    rng = np.random.default_rng(seed)
    h = half * (1.0 + 0.2 * rng.uniform(-1.0, 1.0, size=3))
    x, y, z = _voxel_coords(dims)
    near = [np.abs(np.abs(c) - hc) <= thickness for c, hc in zip((x, y, z), h)]
    within = [np.abs(c) <= hc + thickness for c, hc in zip((x, y, z), h)]
    inside_all = within[0] & within[1] & within[2]
    edges = (near[0] & near[1]) | (near[1] & near[2]) | (near[0] & near[2])
    return Volume((edges & inside_all).astype(float), spacing)


def make_phantom(kind: str, dims, seed: int = 0, spacing=(1.0, 1.0, 1.0), **kwargs) -> Volume:
    if kind == "gaussian-blobs":
        return gaussian_blobs(dims, seed=seed, spacing=spacing, **kwargs)
    if kind == "spheres":
        return spheres(dims, seed=seed, spacing=spacing, **kwargs)
    if kind == "box-frame":
        return box_frame(dims, seed=seed, spacing=spacing, **kwargs)
    raise InvalidArgumentError(f"unknown phantom kind {kind!r}; expected one of {KINDS}")
