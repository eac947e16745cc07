"""Differentiable cone-beam projection of voxel volumes and pose registration."""
from .geometry import exp_so3, geodesic_grad, geodesic_loss, log_so3, pose_to_matrix, sample_pose
from .grid import ControlGrid, Intrinsics, VolumeMeta, make_canonical_grid
from .optimize import RegistrationConfig, register
from .phantoms import make_phantom
from .projector import PoseLinearization, grad_pose, grad_volume, pose_jacobian, project
from .sampler import Volume, trilinear_backward, trilinear_sample
from .similarity import gradncc_loss, ncc

__version__ = "0.1.0"
