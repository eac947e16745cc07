"""Learned similarity trained by gradient-direction matching.

Two encoders of identical structure (weights not shared) embed the moving
and the fixed image; the similarity ``L_N`` is the mean squared difference of
the embeddings.  Training does not minimise ``L_N``.  It minimises the
directional mismatch between ``dL_N/dtheta`` (through the projector) and the
geodesic gradient ``dL_G/dtheta``, which needs the mixed second derivative
``d/dphi (dL_N/dtheta)``.

The encoder is deliberately tiny: two 3x3 stride-2 convolutions with tanh
activations and a spatial mean, giving a 4-vector.  By default two constant
coordinate ramps are stacked onto the image before the first convolution so
that spatially pooled features can still respond to in-plane shifts.

Second derivatives are computed forward-over-reverse by hand: the encoder
is run with a tangent along the image direction ``w = dI/dtheta . u`` and the
resulting scalar ``<w, dL_N/dI>`` is back-propagated to the weights.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateGradientError, DegenerateInputError, InvalidArgumentError
from .geometry import geodesic_grad, sample_pose
from .projector import pose_jacobian, project
from .similarity import normalize_image, normalize_jvp

CHANNELS = 4
EMBED_DIM = CHANNELS
BLOCK_EPS = 1e-12

ROT = slice(0, 3)
TRANS = slice(3, 6)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

@dataclass
class EncoderParams:
    """Weights of the moving (``m``) and fixed (``f``) encoder branches.

    Each branch maps ``w1`` (4, C_in, 3, 3), ``b1`` (4,), ``w2`` (4, 4, 3, 3)
    and ``b2`` (4,).
    """

    m: dict
    f: dict
    coord_channels: bool = True

    NAMES = ("w1", "b1", "w2", "b2")

    def flat(self) -> np.ndarray:
        return np.concatenate(
            [self.m[k].ravel() for k in self.NAMES] + [self.f[k].ravel() for k in self.NAMES]
        )

    def with_flat(self, vec) -> "EncoderParams":
        vec = np.asarray(vec, dtype=float).reshape(-1)
        if vec.size != self.flat().size:
            raise InvalidArgumentError("flat parameter vector has the wrong length")
        out = {}
        pos = 0
        for branch in ("m", "f"):
            src = getattr(self, branch)
            out[branch] = {}
            for k in self.NAMES:
                n = src[k].size
                out[branch][k] = vec[pos:pos + n].reshape(src[k].shape).copy()
                pos += n
        return EncoderParams(out["m"], out["f"], self.coord_channels)

    def arrays(self) -> dict:
        """Named arrays, e.g. ``{"m.w1": ...}``, for checkpointing."""
        d = {f"m.{k}": self.m[k] for k in self.NAMES}
        d.update({f"f.{k}": self.f[k] for k in self.NAMES})
        return d

    @classmethod
    def from_arrays(cls, arrays: dict, coord_channels: bool = True) -> "EncoderParams":
        m = {k: np.asarray(arrays[f"m.{k}"], float) for k in cls.NAMES}
        f = {k: np.asarray(arrays[f"f.{k}"], float) for k in cls.NAMES}
        return cls(m, f, coord_channels)


def init_params(seed: int = 0, coord_channels: bool = True, scale: float = 1.0) -> EncoderParams:
    rng = np.random.default_rng(seed)
    cin = 3 if coord_channels else 1

    def branch():
        return {
            "w1": rng.normal(0.0, scale / np.sqrt(9 * cin), size=(CHANNELS, cin, 3, 3)),
            "b1": rng.normal(0.0, 0.1 * scale, size=CHANNELS),
            "w2": rng.normal(0.0, scale / np.sqrt(9 * CHANNELS), size=(CHANNELS, CHANNELS, 3, 3)),
            "b2": rng.normal(0.0, 0.1 * scale, size=CHANNELS),
        }

    return EncoderParams(branch(), branch(), coord_channels)


# ---------------------------------------------------------------------------
# Convolution plumbing (3x3, stride 2, zero padding 1)
# ---------------------------------------------------------------------------

def _im2col(x):
    C, H, W = x.shape
    Ho, Wo = H // 2, W // 2
    p = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    cols = np.empty((C, 3, 3, Ho, Wo))
    for i in range(3):
        for j in range(3):
            cols[:, i, j] = p[:, i:i + 2 * Ho:2, j:j + 2 * Wo:2]
    return cols.reshape(C * 9, Ho * Wo)


def _col2im(cols, shape):
    C, H, W = shape
    Ho, Wo = H // 2, W // 2
    cols = cols.reshape(C, 3, 3, Ho, Wo)
    p = np.zeros((C, H + 2, W + 2))
    for i in range(3):
        for j in range(3):
            p[:, i:i + 2 * Ho:2, j:j + 2 * Wo:2] += cols[:, i, j]
    return p[:, 1:-1, 1:-1]


def _act(a):
    return np.tanh(a)


def _act_d1(h):
    # derivative of tanh written in terms of its output
    return 1.0 - h * h


def _act_d2(h):
    return -2.0 * h * (1.0 - h * h)


def _coords(H, W):
    r = np.linspace(-1.0, 1.0, H)[:, None] * np.ones((1, W))
    c = np.ones((H, 1)) * np.linspace(-1.0, 1.0, W)[None, :]
    return r, c


def _input_stack(img, coord_channels):
    if coord_channels:
        r, c = _coords(*img.shape)
        return np.stack([img, r, c])
    return img[None]


def _tangent_stack(tangent, coord_channels):
    out = np.zeros((3 if coord_channels else 1,) + tangent.shape)
    out[0] = tangent
    return out


class _Pass:
    """Forward pass through one branch, keeping what the backward passes need."""

    def __init__(self, br: dict, img: np.ndarray, coord_channels: bool):
        img = np.asarray(img, dtype=float)
        if img.ndim != 2 or img.shape[0] % 4 or img.shape[1] % 4:
            raise InvalidArgumentError(f"encoder input must be 2-D with sides divisible by 4, got {img.shape}")
        if br["w1"].shape[1] != (3 if coord_channels else 1):
            raise InvalidArgumentError("first-layer weights do not match the input channel count")
        self.br = br
        self.coord_channels = coord_channels
        self.inp = _input_stack(img, coord_channels)
        H, W = img.shape
        self.shape1 = (CHANNELS, H // 2, W // 2)
        self.c1 = _im2col(self.inp)
        self.h1 = _act(br["w1"].reshape(CHANNELS, -1) @ self.c1 + br["b1"][:, None])
        self.c2 = _im2col(self.h1.reshape(self.shape1))
        self.h2 = _act(br["w2"].reshape(CHANNELS, -1) @ self.c2 + br["b2"][:, None])
        self.e = self.h2.mean(axis=1)

    def backward(self, e_bar, need_input=True):
        """Gradients of ``e_bar . e`` w.r.t. the parameters and the image."""
        br = self.br
        W1 = br["w1"].reshape(CHANNELS, -1)
        W2 = br["w2"].reshape(CHANNELS, -1)
        h2_bar = np.repeat(e_bar[:, None] / self.h2.shape[1], self.h2.shape[1], axis=1)
        a2_bar = _act_d1(self.h2) * h2_bar
        h1_bar = _col2im(W2.T @ a2_bar, self.shape1).reshape(CHANNELS, -1)
        a1_bar = _act_d1(self.h1) * h1_bar
        grads = {
            "w1": (a1_bar @ self.c1.T).reshape(br["w1"].shape),
            "b1": a1_bar.sum(axis=1),
            "w2": (a2_bar @ self.c2.T).reshape(br["w2"].shape),
            "b2": a2_bar.sum(axis=1),
        }
        img_bar = None
        if need_input:
            img_bar = _col2im(W1.T @ a1_bar, self.inp.shape)[0]
        return grads, img_bar

    def tangent(self, x_dot):
        """Propagate an image tangent; returns the embedding tangent."""
        br = self.br
        self.c1_dot = _im2col(_tangent_stack(x_dot, self.coord_channels))
        self.h1_dot = _act_d1(self.h1) * (br["w1"].reshape(CHANNELS, -1) @ self.c1_dot)
        self.c2_dot = _im2col(self.h1_dot.reshape(self.shape1))
        self.a2_dot = br["w2"].reshape(CHANNELS, -1) @ self.c2_dot
        self.h2_dot = _act_d1(self.h2) * self.a2_dot
        self.a1_dot = br["w1"].reshape(CHANNELS, -1) @ self.c1_dot
        self.e_dot = self.h2_dot.mean(axis=1)
        return self.e_dot

    def dual_backward(self, e_bar, e_dot_bar):
        """Parameter gradient of ``e_bar . e + e_dot_bar . e_dot`` (after :meth:`tangent`)."""
        br = self.br
        W2 = br["w2"].reshape(CHANNELS, -1)
        P2 = self.h2.shape[1]
        h2_bar = np.repeat(e_bar[:, None] / P2, P2, axis=1)
        h2_dot_bar = np.repeat(e_dot_bar[:, None] / P2, P2, axis=1)
        a2_dot_bar = _act_d1(self.h2) * h2_dot_bar
        a2_bar = _act_d2(self.h2) * self.a2_dot * h2_dot_bar + _act_d1(self.h2) * h2_bar
        h1_dot_bar = _col2im(W2.T @ a2_dot_bar, self.shape1).reshape(CHANNELS, -1)
        h1_bar = _col2im(W2.T @ a2_bar, self.shape1).reshape(CHANNELS, -1)
        a1_dot_bar = _act_d1(self.h1) * h1_dot_bar
        a1_bar = _act_d2(self.h1) * self.a1_dot * h1_dot_bar + _act_d1(self.h1) * h1_bar
        return {
            "w1": (a1_dot_bar @ self.c1_dot.T + a1_bar @ self.c1.T).reshape(br["w1"].shape),
            "b1": a1_bar.sum(axis=1),
            "w2": (a2_dot_bar @ self.c2_dot.T + a2_bar @ self.c2.T).reshape(br["w2"].shape),
            "b2": a2_bar.sum(axis=1),
        }


# ---------------------------------------------------------------------------
# Similarity and its gradients
# ---------------------------------------------------------------------------

def _prep(img, normalize):
    return normalize_image(img) if normalize else np.asarray(img, dtype=float)


def encode(branch: dict, img, coord_channels: bool = True) -> np.ndarray:
    """Embed one image with one encoder branch."""
    return _Pass(branch, img, coord_channels).e


def net_loss(phi: EncoderParams, I_m, I_f, normalize: bool = True) -> float:
    """Mean squared difference between the moving and fixed embeddings."""
    em = encode(phi.m, _prep(I_m, normalize), phi.coord_channels)
    ef = encode(phi.f, _prep(I_f, normalize), phi.coord_channels)
    return float(np.mean((em - ef) ** 2))


def net_loss_image_grad(phi: EncoderParams, I_m, I_f, normalize: bool = True):
    """``(L_N, dL_N/dI_m)``."""
    xm = _prep(I_m, normalize)
    pm = _Pass(phi.m, xm, phi.coord_channels)
    pf = _Pass(phi.f, _prep(I_f, normalize), phi.coord_channels)
    diff = pm.e - pf.e
    _, gx = pm.backward(2.0 * diff / EMBED_DIM)
    if normalize:
        gx = normalize_jvp(I_m, gx)
    return float(np.mean(diff**2)), gx


def net_pose_grad(phi: EncoderParams, vol, theta, I_f, grid, normalize: bool = True,
                  weight_by_length: bool = False) -> np.ndarray:
    """``dL_N/dtheta``: encoder backward chained into the projector."""
    from .projector import grad_pose

    I_m = project(vol, theta, grid, weight_by_length)
    _, dI = net_loss_image_grad(phi, I_m, I_f, normalize)
    return grad_pose(vol, theta, grid, dI, weight_by_length)


def _unit_blocks(g):
    g = np.asarray(g, dtype=float)
    out = []
    for blk in (TRANS, ROT):
        v = g[blk]
        n = np.linalg.norm(v)
        if n <= BLOCK_EPS:
            raise DegenerateGradientError("gradient block norm below threshold")
        out.append((v / n, n))
    return out


def mdist(g_net, g_geo) -> float:
    """Sum over translation and rotation blocks of ``||u/|u| - v/|v|||^2``."""
    total = 0.0
    for (a, _), (b, _) in zip(_unit_blocks(g_net), _unit_blocks(g_geo)):
        total += float(np.sum((a - b) ** 2))
    return total


def mdist_grad(g_net, g_geo) -> np.ndarray:
    """Gradient of :func:`mdist` w.r.t. its first argument."""
    out = np.zeros(6)
    for blk, (a, na), (b, _) in zip((TRANS, ROT), _unit_blocks(g_net), _unit_blocks(g_geo)):
        out[blk] = -2.0 * (b - (a @ b) * a) / na
    return out


def cosine(u, v) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu <= BLOCK_EPS or nv <= BLOCK_EPS:
        return 0.0
    return float(u @ v / (nu * nv))


@dataclass
class Linearized:
    """Everything about one training sample that does not depend on the weights."""

    I_m: np.ndarray
    J: np.ndarray
    I_f: np.ndarray
    g_geo: np.ndarray
    normalize: bool = True

    def pose_grad(self, phi: EncoderParams) -> np.ndarray:
        _, dI = net_loss_image_grad(phi, self.I_m, self.I_f, self.normalize)
        return np.tensordot(dI, self.J, axes=([0, 1], [0, 1]))

    def mdist(self, phi: EncoderParams) -> float:
        return mdist(self.pose_grad(phi), self.g_geo)

    def mdist_and_param_grad(self, phi: EncoderParams) -> tuple[float, np.ndarray, np.ndarray]:
        """``(M, dM/dphi flat, g_net)`` by forward-over-reverse differentiation."""
        xm = _prep(self.I_m, self.normalize)
        xf = _prep(self.I_f, self.normalize)
        pm = _Pass(phi.m, xm, phi.coord_channels)
        pf = _Pass(phi.f, xf, phi.coord_channels)
        diff = pm.e - pf.e
        _, gx = pm.backward(2.0 * diff / EMBED_DIM)
        if self.normalize:
            gx = normalize_jvp(self.I_m, gx)
        g_net = np.tensordot(gx, self.J, axes=([0, 1], [0, 1]))
        M = mdist(g_net, self.g_geo)
        u = mdist_grad(g_net, self.g_geo)
        w = self.J @ u
        if self.normalize:
            w = normalize_jvp(self.I_m, w)
        e_dot = pm.tangent(w)
        # s = <w, dL/dx> = (2/E) diff . e_dot
        scale = 2.0 / EMBED_DIM
        gm = pm.dual_backward(scale * e_dot, scale * diff)
        gf, _ = pf.backward(-scale * e_dot, need_input=False)
        flat = np.concatenate([gm[k].ravel() for k in EncoderParams.NAMES]
                              + [gf[k].ravel() for k in EncoderParams.NAMES])
        return M, flat, g_net

    def mdist_param_grad_fd(self, phi: EncoderParams, step: float = 1e-4, coords=None) -> np.ndarray:
        """Central differences of M over the flat weights (all or selected ``coords``)."""
        base = phi.flat()
        idx = range(base.size) if coords is None else coords
        out = np.zeros(base.size)
        for i in idx:
            e = np.zeros(base.size)
            e[i] = step
            out[i] = (self.mdist(phi.with_flat(base + e)) - self.mdist(phi.with_flat(base - e))) / (2 * step)
        return out if coords is None else out[list(coords)]


def linearize(vol, theta, theta_t, I_f, grid, normalize=True, weight_by_length=False,
              trans_scale: float = 1.0) -> Linearized:
    I_m, J = pose_jacobian(vol, theta, grid, weight_by_length)
    g_geo = geodesic_grad(theta, theta_t, trans_scale=trans_scale)
    if normalize:
        # fail early on blank renders rather than inside the training step
        normalize_image(I_m)
        normalize_image(I_f)
    return Linearized(I_m, J, np.asarray(I_f, float), g_geo, normalize)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    params: EncoderParams
    velocity: np.ndarray
    step: int = 0


def _sample_grad(sample: Linearized, phi: EncoderParams, grad_mode: str):
    if grad_mode == "analytic":
        M, grad, _ = sample.mdist_and_param_grad(phi)
    elif grad_mode == "fd":
        M = sample.mdist(phi)
        grad = sample.mdist_param_grad_fd(phi)
    else:
        raise InvalidArgumentError(f"unknown grad_mode {grad_mode!r}")
    return M, grad


def train_step(state: TrainState, sample, lr: float, momentum: float,
               grad_mode: str = "analytic", clip_norm: float | None = None) -> tuple[TrainState, float]:
    """One SGD-with-momentum update of the encoder weights on ``M_dist``.

    ``sample`` is one :class:`Linearized` pair or a list of them; with a list
    the loss and weight gradient are averaged over the non-degenerate pairs.
    ``clip_norm`` rescales the weight gradient to at most that norm.  The
    gradient is heavy-tailed because ``M_dist`` divides by the network
    gradient's block norms.

    Raises :class:`DegenerateGradientError` if every pair has a vanishing
    gradient block; the caller decides to skip the step.
    """
    if grad_mode not in ("analytic", "fd"):
        raise InvalidArgumentError(f"unknown grad_mode {grad_mode!r}")
    samples = [sample] if isinstance(sample, Linearized) else list(sample)
    Ms, grads = [], []
    for smp in samples:
        try:
            M, g = _sample_grad(smp, state.params, grad_mode)
        except DegenerateGradientError:
            continue
        Ms.append(M)
        grads.append(g)
    if not Ms:
        raise DegenerateGradientError("every sample in the step had a degenerate gradient")
    M = float(np.mean(Ms))
    grad = np.mean(grads, axis=0)
    if clip_norm is not None:
        n = np.linalg.norm(grad)
        if n > clip_norm:
            grad = grad * (clip_norm / n)
    v = momentum * state.velocity + grad
    params = state.params.with_flat(state.params.flat() - lr * v)
    return TrainState(params, v, state.step + 1), M


@dataclass
class TrainConfig:
    """Toy training run.

    Translations are drawn at 15 mm rather than 37.5 mm because the phantom is
    only 128 mm across; the smaller spread keeps the ratio of shift to object
    size close to that of a pelvis CT.  Each step averages ``batch_size``
    pose pairs.
    """

    phantom: str = "gaussian-blobs"
    dims: int = 16
    spacing_mm: float = 8.0
    phantom_seed: int = 7
    n_blobs: int = 6
    target_phantom_seed: int | None = None
    det_size: int = 32
    K: int = 32
    iterations: int = 2000
    lr_lo: float = 1e-3
    lr_hi: float = 1e-2
    half_period: int = 100
    momentum: float = 0.9
    clip_norm: float = 1.0
    batch_size: int = 4
    init_scale: float = 1.0
    sigma_rot_deg: float = 20.0
    sigma_trans_mm: float = 15.0
    seed: int = 0
    init_seed: int = 0
    coord_channels: bool = True
    normalize: bool = True
    grad_mode: str = "analytic"
    eval_poses: int = 50
    eval_seed: int = 12345

    def as_kv(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class TrainResult:
    params: EncoderParams
    history: list = field(default_factory=list)  # (step, mdist, lr)
    skipped: int = 0


def _toy_setup(cfg: TrainConfig):
    from .grid import Intrinsics, make_canonical_grid
    from .phantoms import make_phantom

    dims = (cfg.dims,) * 3
    spacing = (cfg.spacing_mm,) * 3
    kw = {"n_blobs": cfg.n_blobs} if cfg.phantom == "gaussian-blobs" else {}
    vol = make_phantom(cfg.phantom, dims, seed=cfg.phantom_seed, spacing=spacing, **kw)
    target = vol
    if cfg.target_phantom_seed is not None:
        target = make_phantom(cfg.phantom, dims, seed=cfg.target_phantom_seed, spacing=spacing, **kw)
    grid = make_canonical_grid(Intrinsics.cios(cfg.det_size), vol.meta, cfg.K)
    return vol, target, grid


def draw_sample(vol, target, grid, rng, cfg: TrainConfig) -> tuple[Linearized, np.ndarray, np.ndarray]:
    """Random training pair; pairs whose renders are blank are redrawn."""
    for _ in range(100):
        theta = sample_pose(cfg.sigma_rot_deg, cfg.sigma_trans_mm, rng)
        theta_t = sample_pose(cfg.sigma_rot_deg, cfg.sigma_trans_mm, rng)
        I_t = project(target, theta_t, grid)
        try:
            return linearize(vol, theta, theta_t, I_t, grid, cfg.normalize), theta, theta_t
        except DegenerateInputError:
            continue
    raise DegenerateInputError("could not draw a pose pair with visible projections")


def train(cfg: TrainConfig, params: EncoderParams | None = None, callback=None) -> TrainResult:
    """Gradient-direction-matching training on a synthetic phantom.

    Each iteration draws ``batch_size`` fresh ``(theta, theta_t)`` pairs,
    renders the targets at ``theta_t`` and takes one :func:`train_step`.
    """
    from .optimize import cyclic_lr

    vol, target, grid = _toy_setup(cfg)
    if params is None:
        params = init_params(cfg.init_seed, cfg.coord_channels, cfg.init_scale)
    state = TrainState(params, np.zeros(params.flat().size))
    rng = np.random.default_rng(cfg.seed)
    result = TrainResult(params)
    for it in range(cfg.iterations):
        batch = [draw_sample(vol, target, grid, rng, cfg)[0] for _ in range(cfg.batch_size)]
        lr = cyclic_lr(it, cfg.lr_lo, cfg.lr_hi, cfg.half_period)
        try:
            state, M = train_step(state, batch, lr, cfg.momentum, cfg.grad_mode, cfg.clip_norm)
        except DegenerateGradientError:
            result.skipped += 1
            continue
        result.history.append((it, M, lr))
        if callback is not None:
            callback(it, M, lr)
    result.params = state.params
    return result


def evaluate_alignment(params: EncoderParams, cfg: TrainConfig, n_poses: int | None = None,
                       seed: int | None = None) -> dict:
    """Mean cosine between network and geodesic pose gradients on fresh poses."""
    vol, target, grid = _toy_setup(cfg)
    rng = np.random.default_rng(cfg.eval_seed if seed is None else seed)
    n = cfg.eval_poses if n_poses is None else n_poses
    cos_t, cos_r, md = [], [], []
    for _ in range(n):
        sample, _, _ = draw_sample(vol, target, grid, rng, cfg)
        g = sample.pose_grad(params)
        cos_t.append(cosine(g[TRANS], sample.g_geo[TRANS]))
        cos_r.append(cosine(g[ROT], sample.g_geo[ROT]))
        try:
            md.append(mdist(g, sample.g_geo))
        except DegenerateGradientError:
            pass
    return {
        "cos_trans": float(np.mean(cos_t)),
        "cos_rot": float(np.mean(cos_r)),
        "mdist": float(np.mean(md)) if md else float("nan"),
    }


def moving_average(values, window: int) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    c = np.cumsum(np.insert(values, 0, 0.0))
    out = np.empty(values.size)
    for i in range(values.size):
        lo = max(0, i + 1 - window)
        out[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
    return out
