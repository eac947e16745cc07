"""Image similarity metrics with gradients w.r.t. the moving image.

Every metric returns ``(value, d_value/d_first_argument)``.
"""
from __future__ import annotations

import numpy as np

from .errors import DegenerateInputError, InvalidArgumentError

VARIANCE_FLOOR = 1e-12

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()


def _pair(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b):
    a, b = _pair(a, b)
    diff = a - b
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


def ncc(a, b):
    """Pearson correlation of the flattened images and its gradient in ``a``."""
    a, b = _pair(a, b)
    if a.std() <= VARIANCE_FLOOR or b.std() <= VARIANCE_FLOOR:
        raise DegenerateInputError("ncc of a zero-variance image")
    ac = a - a.mean()
    bc = b - b.mean()
    na = np.sqrt(np.sum(ac * ac))
    nb = np.sqrt(np.sum(bc * bc))
    score = float(np.sum(ac * bc) / (na * nb))
    grad = bc / (na * nb) - score * ac / (na * na)
    return score, grad


def _correlate3(a, kernel):
    # 3x3 cross-correlation with replicate padding
    p = np.pad(a, 1, mode="edge")
    M, N = a.shape
    out = np.zeros_like(a)
    for i in range(3):
        for j in range(3):
            if kernel[i, j] != 0.0:
                out += kernel[i, j] * p[i:i + M, j:j + N]
    return out


def _correlate3_adjoint(u, kernel):
    M, N = u.shape
    p = np.zeros((M + 2, N + 2))
    for i in range(3):
        for j in range(3):
            if kernel[i, j] != 0.0:
                p[i:i + M, j:j + N] += kernel[i, j] * u
    # fold the replicated border back onto the edge pixels
    p[1, :] += p[0, :]
    p[-2, :] += p[-1, :]
    p[:, 1] += p[:, 0]
    p[:, -2] += p[:, -1]
    return p[1:-1, 1:-1]


def sobel(a):
    """Sobel derivative images ``(gx, gy)``; gx differentiates along columns."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or min(a.shape) < 3:
        raise InvalidArgumentError("sobel needs a 2-D image of at least 3x3")
    return _correlate3(a, SOBEL_X), _correlate3(a, SOBEL_Y)


def sobel_adjoint(ux, uy):
    """Adjoint of :func:`sobel`: maps gradients on (gx, gy) back to the image."""
    return _correlate3_adjoint(np.asarray(ux, float), SOBEL_X) + _correlate3_adjoint(
        np.asarray(uy, float), SOBEL_Y
    )


def gradncc_loss(moving, fixed):
    """``1 - (ncc(gx_m, gx_f) + ncc(gy_m, gy_f)) / 2``; zero for a perfect match."""
    moving, fixed = _pair(moving, fixed)
    gxm, gym = sobel(moving)
    gxf, gyf = sobel(fixed)
    sx, dx = ncc(gxm, gxf)
    sy, dy = ncc(gym, gyf)
    loss = 1.0 - 0.5 * (sx + sy)
    return loss, sobel_adjoint(-0.5 * dx, -0.5 * dy)


def normalize_image(img):
    """Zero-mean, unit-std copy of ``img``."""
    img = np.asarray(img, dtype=float)
    sd = img.std()
    if sd <= VARIANCE_FLOOR:
        raise DegenerateInputError("cannot normalise a zero-variance image")
    return (img - img.mean()) / sd


def normalize_jvp(img, tangent):
    """Directional derivative of :func:`normalize_image` at ``img``."""
    img = np.asarray(img, dtype=float)
    z = normalize_image(img)
    sd = img.std()
    tc = tangent - np.mean(tangent)
    return (tc - z * np.mean(z * tc)) / sd


def normalize_vjp(img, upstream):
    """Pull a gradient on the normalised image back to ``img``.

    The Jacobian is symmetric, so this is the same map as the JVP.
    """
    return normalize_jvp(img, upstream)
