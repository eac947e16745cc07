import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.ndimage import map_coordinates

from prost.errors import InvalidArgumentError
from prost.sampler import TrilinearStencil, Volume, trilinear_backward, trilinear_sample


def to_index(vol, pts):
    """Normalised (x, y, z) to fractional (d, w, h) voxel indices."""
    D, W, H = vol.data.shape
    x, y, z = pts[:3]
    return np.stack([(z + 1) * 0.5 * (D - 1), (x + 1) * 0.5 * (W - 1), (y + 1) * 0.5 * (H - 1)])


def test_constant_and_nodal_values(rng):
    vol = Volume(np.full((4, 5, 6), 2.5))
    pts = rng.uniform(-1, 1, size=(3, 30))
    assert np.allclose(trilinear_sample(vol, pts), 2.5, atol=1e-14)
    data = rng.normal(size=(4, 5, 6))
    vol = Volume(data)
    d, w, h = 2, 3, 1
    node = np.array([[2 * w / 4 - 1], [2 * h / 5 - 1], [2 * d / 3 - 1]])
    assert trilinear_sample(vol, node)[0] == data[d, w, h]


def test_cube_center_of_2x2x2():
    vol = Volume(np.arange(8.0).reshape(2, 2, 2))
    assert trilinear_sample(vol, np.zeros((3, 1)))[0] == 3.5


def test_matches_scipy_interpolation(rng):
    vol = Volume(rng.normal(size=(6, 7, 5)))
    pts = rng.uniform(-1, 1, size=(3, 200))
    ref = map_coordinates(vol.data, to_index(vol, pts), order=1)
    assert np.allclose(trilinear_sample(vol, pts), ref, atol=1e-12)


def test_homogeneous_points_accepted(rng):
    vol = Volume(rng.normal(size=(4, 4, 4)))
    pts = rng.uniform(-1, 1, size=(3, 10))
    assert np.array_equal(trilinear_sample(vol, pts), trilinear_sample(vol, np.vstack([pts, np.ones(10)])))


def test_zero_padding(rng):
    vol = Volume(rng.normal(size=(4, 4, 4)) + 5)
    pts = np.array([[1 + 2e-9, 0, 0], [0, -1.5, 0], [0, 0, 3]]).T
    dV, dP = trilinear_backward(vol, pts, np.ones(3))
    assert np.array_equal(trilinear_sample(vol, pts), np.zeros(3))
    assert not dV.any() and not dP.any()
    # faces themselves are inside
    assert trilinear_sample(vol, np.array([[1.0], [1.0], [1.0]]))[0] == vol.data[-1, -1, -1]


def test_backward_trivial_cases(rng):
    vol = Volume(rng.normal(size=(4, 5, 6)))
    pts = rng.uniform(-1, 1, size=(3, 7))
    dV, dP = trilinear_backward(vol, pts, np.zeros(7))
    assert not dV.any() and not dP.any()
    node = np.array([[2 * 1 / 4 - 1], [2 * 2 / 5 - 1], [2 * 1 / 3 - 1]])
    dV, _ = trilinear_backward(vol, node, [1.0])
    want = np.zeros(vol.data.shape)
    want[1, 1, 2] = 1.0
    assert np.array_equal(dV, want)


def test_point_gradient_finite_differences():
    rng = np.random.default_rng(5)
    vol = Volume(rng.normal(size=(8, 8, 8)))
    # off-lattice interior points: keep each coordinate away from cell faces
    idx = rng.integers(0, 7, size=(3, 50)) + rng.uniform(0.1, 0.9, size=(3, 50))
    pts = idx / 7 * 2 - 1
    up = rng.normal(size=50)
    _, dP = trilinear_backward(vol, pts, up)
    h = 1e-5
    for c in range(3):
        e = np.zeros_like(pts)
        e[c] = h
        fd = up * (trilinear_sample(vol, pts + e) - trilinear_sample(vol, pts - e)) / (2 * h)
        assert np.allclose(dP[c], fd, rtol=1e-4, atol=1e-9)


def test_right_sided_derivative_on_faces():
    data = np.zeros((3, 3, 3))
    data[1, 2, 1] = 1.0  # rises only on the positive side of w = 1
    vol = Volume(data)
    face = np.array([[0.0], [0.0], [0.0]])
    _, dP = trilinear_backward(vol, face, [1.0])
    assert dP[0, 0] == 1.0  # slope of the cell to the right: 1 per index = 1 per normalised unit


def test_partition_of_unity(rng):
    pts = rng.uniform(-1, 1, size=(3, 100))
    st_ = TrilinearStencil(np.zeros((5, 6, 7)), pts)
    assert np.allclose(sum(st_.weights()), 1.0, atol=1e-14)


def test_errors():
    vol = Volume(np.zeros((2, 2, 2)))
    with pytest.raises(InvalidArgumentError):
        trilinear_sample(vol, np.array([[np.nan], [0], [0]]))
    with pytest.raises(InvalidArgumentError):
        trilinear_sample(vol, np.zeros((2, 4)))
    with pytest.raises(InvalidArgumentError):
        trilinear_backward(vol, np.zeros((3, 4)), np.zeros(3))
    with pytest.raises(InvalidArgumentError):
        Volume(np.zeros((2, 2)))
    with pytest.raises(InvalidArgumentError):
        Volume(np.full((2, 2, 2), np.inf))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(-3, 3), st.floats(-3, 3))
def test_linearity_in_volume(seed, a, b):
    rng = np.random.default_rng(seed)
    V1, V2 = rng.normal(size=(2, 4, 5, 3))
    pts = rng.uniform(-1.1, 1.1, size=(3, 40))
    lhs = trilinear_sample(Volume(a * V1 + b * V2), pts)
    rhs = a * trilinear_sample(Volume(V1), pts) + b * trilinear_sample(Volume(V2), pts)
    assert np.max(np.abs(lhs - rhs)) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_adjoint_identity(seed):
    rng = np.random.default_rng(seed)
    vol = Volume(rng.normal(size=(5, 4, 6)))
    pts = rng.uniform(-1.2, 1.2, size=(3, 60))
    u = rng.normal(size=60)
    dV, _ = trilinear_backward(vol, pts, u)
    dvol = rng.normal(size=vol.data.shape)
    lhs = u @ trilinear_sample(vol.with_data(dvol), pts)
    assert abs(lhs - np.sum(dV * dvol)) < 1e-10
