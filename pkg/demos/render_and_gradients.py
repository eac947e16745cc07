"""
Rendering a DRR and differentiating it with respect to pose
===========================================================

Build a smooth phantom, render it from two poses, and compare the analytic
pose gradient of a similarity with central differences.
"""
import numpy as np

from prost.geometry import sample_pose
from prost.grid import Intrinsics, make_canonical_grid
from prost.io import image_to_pgm
from prost.phantoms import gaussian_blobs
from prost.projector import PoseLinearization, project
from prost.similarity import gradncc_loss

# a 32^3 phantom, 128 mm across, and a 64x64 C-arm style detector
vol = gaussian_blobs((32, 32, 32), n_blobs=8, seed=0, spacing=(4.0, 4.0, 4.0))
grid = make_canonical_grid(Intrinsics.cios(64), vol.meta, 64)
print("grid", grid.shape, "rays hitting the volume:", int(grid.hit.sum()))

# target pose and a perturbed starting pose (radians, mm)
rng = np.random.default_rng(0)
theta_t = sample_pose(10.0, 10.0, rng)
theta = theta_t + sample_pose(3.0, 5.0, rng)
I_t = project(vol, theta_t, grid)
with open("drr_target.pgm", "wb") as f:
    f.write(image_to_pgm(I_t))

# one forward pass caches everything the backward pass needs
lin = PoseLinearization(vol, theta, grid)
loss, dI = gradncc_loss(lin.image(), I_t)
g = lin.vjp_pose(dI)
print("Grad-NCC loss", round(loss, 5))

# central differences, one pose coordinate at a time
h = 1e-8
fd = np.zeros(6)
for i in range(6):
    e = np.zeros(6)
    e[i] = h
    fd[i] = (gradncc_loss(project(vol, theta + e, grid), I_t)[0]
             - gradncc_loss(project(vol, theta - e, grid), I_t)[0]) / (2 * h)
for name, a, b in zip(["wx", "wy", "wz", "tx", "ty", "tz"], g, fd):
    print(f"{name}: analytic {a: .6e}  finite diff {b: .6e}")
