import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prost.errors import DegenerateGradientError, InvalidArgumentError
from prost.geometry import sample_pose
from prost.gradcheck import (
    POSE_STEP, central_diff, double_backward_trial, net_image_grad_trial, smooth_setup,
)
from prost.learned_similarity import (
    CHANNELS, EncoderParams, Linearized, TrainConfig, TrainState, cosine, draw_sample, encode,
    evaluate_alignment, init_params, linearize, mdist, mdist_grad, moving_average, net_loss,
    net_loss_image_grad, net_pose_grad, train, train_step, _Pass,
)
from prost.projector import project


@pytest.fixture(scope="module")
def toy():
    return smooth_setup(16, 16, 32, 0)


def naive_encode(br, img, coord_channels=True):
    """Direct loop convolution: 3x3, stride 2, zero padding 1, tanh, mean."""
    H, W = img.shape
    chans = [img]
    if coord_channels:
        chans += [np.repeat(np.linspace(-1, 1, H)[:, None], W, 1), np.repeat(np.linspace(-1, 1, W)[None], H, 0)]
    x = np.stack(chans)
    for w, b in ((br["w1"], br["b1"]), (br["w2"], br["b2"])):
        C, h, wd = x.shape
        p = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        out = np.zeros((w.shape[0], h // 2, wd // 2))
        for o in range(w.shape[0]):
            for i in range(h // 2):
                for j in range(wd // 2):
                    out[o, i, j] = np.sum(w[o] * p[:, 2 * i:2 * i + 3, 2 * j:2 * j + 3]) + b[o]
        x = np.tanh(out)
    return x.mean(axis=(1, 2))


# -- encoder -----------------------------------------------------------------

@pytest.mark.parametrize("coord", [True, False])
def test_encode_matches_direct_convolution(coord):
    phi = init_params(3, coord)
    img = np.random.default_rng(3).normal(size=(12, 8))
    assert np.allclose(encode(phi.m, img, coord), naive_encode(phi.m, img, coord), atol=1e-13)


def test_zero_image_zero_biases_gives_zero_embedding():
    phi = init_params(1, coord_channels=False)
    br = dict(phi.m, b1=np.zeros(CHANNELS), b2=np.zeros(CHANNELS))
    assert not encode(br, np.zeros((8, 8)), False).any()


def test_first_layer_preactivation_is_linear():
    phi = init_params(2, coord_channels=False)
    br = dict(phi.m, b1=np.zeros(CHANNELS))
    img = 0.1 * np.random.default_rng(2).normal(size=(8, 8))
    a = np.arctanh(_Pass(br, img, False).h1)
    b = np.arctanh(_Pass(br, 2.0 * img, False).h1)
    assert np.allclose(b, 2.0 * a, atol=1e-10)


def test_encode_golden():
    phi = init_params(0)
    img = np.random.default_rng(1).normal(size=(16, 16))
    want = [-0.2557709365914714, 0.09618634311699684, 0.07173484305262383, 0.11323103496956524]
    assert np.allclose(encode(phi.m, img), want, rtol=1e-10, atol=0)


def test_encode_input_checks():
    phi = init_params(0)
    with pytest.raises(InvalidArgumentError):
        encode(phi.m, np.zeros((10, 8)))
    with pytest.raises(InvalidArgumentError):
        encode(phi.m, np.zeros((8, 8)), coord_channels=False)


# -- network loss ------------------------------------------------------------

def test_net_loss_examples():
    phi = init_params(0)
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(2, 16, 16))
    shared = EncoderParams(phi.m, phi.m)
    assert net_loss(shared, a, a) == 0.0
    swapped = EncoderParams(phi.f, phi.m)
    assert net_loss(phi, a, b) == net_loss(swapped, b, a)
    assert abs(net_loss(phi, a, np.random.default_rng(2).normal(size=(16, 16))) - 0.09145609471008238) < 1e-12


def test_net_loss_normalisation_invariance():
    phi = init_params(0)
    a, b = np.random.default_rng(4).normal(size=(2, 16, 16))
    assert abs(net_loss(phi, 3 * a + 1, b) - net_loss(phi, a, b)) < 1e-12


@pytest.mark.parametrize("seed", range(3))
def test_image_gradient_finite_differences(seed):
    res = net_image_grad_trial(seed)
    assert res.passed, res.row()


def test_image_gradient_without_normalisation():
    phi = init_params(5)
    a, b = np.random.default_rng(5).normal(size=(2, 8, 8))
    _, g = net_loss_image_grad(phi, a, b, normalize=False)
    fd = central_diff(lambda x: net_loss(phi, x, b, normalize=False), a, 1e-6)
    assert np.allclose(g, fd, rtol=1e-5, atol=1e-10)


# -- pose gradient -----------------------------------------------------------

def test_pose_gradient_zero_when_image_gradient_zero(toy):
    vol, grid = toy
    phi = init_params(0)
    shared = EncoderParams(phi.m, phi.m)
    theta = sample_pose(10, 10, np.random.default_rng(0))
    I_f = project(vol, theta, grid)
    assert not net_pose_grad(shared, vol, theta, I_f, grid).any()


def _pose_fd_check(phi, vol, grid, seed):
    rng = np.random.default_rng(seed)
    theta = sample_pose(10, 10, rng)
    I_f = project(vol, sample_pose(10, 10, rng), grid)
    g = net_pose_grad(phi, vol, theta, I_f, grid)
    fd = central_diff(lambda th: net_loss(phi, project(vol, th, grid), I_f), theta, POSE_STEP)
    return np.all((np.abs(g - fd) <= 1e-10) | (np.abs(g - fd) < 1e-3 * np.abs(fd))), g, fd


def test_pose_gradient_fd_and_repeatable(toy):
    vol, grid = toy
    phi = init_params(0)
    ok, g, fd = _pose_fd_check(phi, vol, grid, 0)
    assert ok, (g, fd)
    _, g2, _ = _pose_fd_check(phi, vol, grid, 0)
    assert np.array_equal(g, g2)


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.3, 3.0))
def test_pose_gradient_fd_at_random_weights(seed, scale):
    vol, grid = smooth_setup(16, 16, 32, 0)
    phi = init_params(seed, scale=scale)
    ok, g, fd = _pose_fd_check(phi, vol, grid, seed)
    assert ok, (g, fd)


def test_linearized_pose_grad_matches_direct(toy):
    vol, grid = toy
    phi = init_params(1)
    rng = np.random.default_rng(1)
    theta, theta_t = sample_pose(10, 10, rng), sample_pose(10, 10, rng)
    I_f = project(vol, theta_t, grid)
    s = linearize(vol, theta, theta_t, I_f, grid)
    assert np.allclose(s.pose_grad(phi), net_pose_grad(phi, vol, theta, I_f, grid), rtol=1e-10, atol=1e-14)


def _remainders(phi, vol, grid, seed, hs):
    """Second-order remainders of L_N along a random image and pose direction."""
    rng = np.random.default_rng(seed)
    theta = sample_pose(10, 10, rng)
    I_f = project(vol, sample_pose(10, 10, rng), grid)
    I_m = project(vol, theta, grid)
    D = rng.normal(size=I_m.shape) * I_m.std()
    L, gi = net_loss_image_grad(phi, I_m, I_f)
    img = [net_loss(phi, I_m + h * D, I_f) - L - h * np.sum(gi * D) for h in hs]
    d = rng.normal(size=6)
    d /= np.linalg.norm(d)
    g = net_pose_grad(phi, vol, theta, I_f, grid)
    pose = [net_loss(phi, project(vol, theta + h * d, grid), I_f) - L - h * g @ d for h in hs]
    second = [(net_loss(phi, project(vol, theta + h * d, grid), I_f) - 2 * L
               + net_loss(phi, project(vol, theta - h * d, grid), I_f)) / h**2 for h in hs]
    return np.array(img), np.array(pose), np.array(second)


def ratios(rem):
    return rem[1:] / rem[:-1]


HALVINGS = 0.1 / 2.0 ** np.arange(4)


@pytest.mark.parametrize("seed", range(3))
def test_loss_is_smooth_in_image(toy, seed):
    vol, grid = toy
    img, _, _ = _remainders(init_params(seed), vol, grid, seed, HALVINGS)
    # the remainder of a first-order expansion shrinks 4x per halving
    assert np.all(np.abs(ratios(img) - 0.25) < 0.05), ratios(img)


@pytest.mark.parametrize("seed", range(3))
def test_pose_second_differences_finite_and_bounded(toy, seed):
    vol, grid = toy
    _, pose, second = _remainders(init_params(seed), vol, grid, seed, 0.1 / 2.0 ** np.arange(7))
    assert np.all(np.isfinite(pose)) and np.all(np.isfinite(second))
    # bounded by the loss curvature scale, no blow-up as h shrinks
    assert np.max(np.abs(second)) < 10.0


@pytest.mark.xfail(strict=True, reason="trilinear interpolation makes the projection only piecewise "
                                       "smooth in pose, so remainder ratios are dominated by kinks")
def test_pose_remainder_quarter_trend():
    vol, grid = smooth_setup(64, 32, 128, 0)
    for seed in range(4):
        _, pose, _ = _remainders(init_params(0), vol, grid, seed, 0.1 / 2.0 ** np.arange(7))
        assert np.all(np.abs(ratios(pose) - 0.25) < 0.15), ratios(pose)


# -- M_dist ------------------------------------------------------------------

def test_mdist_examples():
    g = np.array([0.1, -0.4, 0.2, 3.0, -1.0, 2.0])
    assert mdist(g, g) == 0.0
    assert mdist(5 * g, g) < 1e-28
    assert abs(mdist(-g, g) - 8.0) < 1e-12
    flipped = g.copy()
    flipped[3:] *= -1
    assert abs(mdist(flipped, g) - 4.0) < 1e-12
    with pytest.raises(DegenerateGradientError):
        mdist(np.r_[g[:3], 0, 0, 0], g)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31), st.integers(-8, 8), st.integers(-8, 8))
def test_mdist_scale_invariance(seed, ea, eb):
    rng = np.random.default_rng(seed)
    g1, g2 = rng.normal(size=(2, 6))
    # powers of two rescale without rounding, so the equality is exact
    assert mdist(2.0**ea * g1, 2.0**eb * g2) == mdist(g1, g2)
    a, b = rng.uniform(0.01, 100, size=2)
    assert abs(mdist(a * g1, b * g2) - mdist(g1, g2)) < 1e-12
    assert 0.0 <= mdist(g1, g2) <= 8.0


def test_mdist_grad_finite_differences():
    rng = np.random.default_rng(0)
    for _ in range(10):
        g1, g2 = rng.normal(size=(2, 6))
        fd = central_diff(lambda x: mdist(x, g2), g1, 1e-6)
        assert np.allclose(mdist_grad(g1, g2), fd, atol=1e-8)


def test_cosine():
    assert cosine(np.array([1.0, 0, 0]), np.array([2.0, 0, 0])) == 1.0
    assert cosine(np.zeros(3), np.ones(3)) == 0.0


# -- double backward and training steps -------------------------------------

@pytest.mark.parametrize("seed", range(3))
def test_double_backward_matches_differences(seed):
    res = double_backward_trial(seed)
    assert res.passed, res.row()


@pytest.fixture(scope="module")
def sample(toy):
    vol, grid = toy
    rng = np.random.default_rng(3)
    cfg = TrainConfig(det_size=16)
    return draw_sample(vol, vol, grid, rng, cfg)[0]


def test_zero_learning_rate_keeps_weights(sample):
    phi = init_params(0)
    state = TrainState(phi, np.ones(phi.flat().size))
    new, M = train_step(state, sample, 0.0, 0.9)
    assert np.array_equal(new.params.flat(), phi.flat())
    assert M == sample.mdist(phi) and new.step == 1


def test_fd_fallback_step_matches_analytic_step(sample):
    phi = init_params(0)
    state = TrainState(phi, np.zeros(phi.flat().size))
    a, Ma = train_step(state, sample, 1e-2, 0.0, "analytic")
    b, Mb = train_step(state, sample, 1e-2, 0.0, "fd")
    da = a.params.flat() - phi.flat()
    db = b.params.flat() - phi.flat()
    assert Ma == Mb
    assert np.linalg.norm(da - db) < 5e-3 * np.linalg.norm(da)


def test_train_step_batch_and_clip(sample):
    phi = init_params(0)
    state = TrainState(phi, np.zeros(phi.flat().size))
    single, M1 = train_step(state, sample, 1.0, 0.0)
    pair_, M2 = train_step(state, [sample, sample], 1.0, 0.0)
    assert M1 == M2 and np.allclose(single.params.flat(), pair_.params.flat(), atol=1e-15)
    clipped, _ = train_step(state, sample, 1.0, 0.0, clip_norm=1e-3)
    assert abs(np.linalg.norm(clipped.params.flat() - phi.flat()) - 1e-3) < 1e-12
    with pytest.raises(InvalidArgumentError):
        train_step(state, sample, 1.0, 0.0, grad_mode="bogus")


def test_train_step_skips_degenerate_samples(sample):
    phi = init_params(0)
    state = TrainState(phi, np.zeros(phi.flat().size))
    bad = Linearized(sample.I_m, sample.J, sample.I_f, np.zeros(6))
    with pytest.raises(DegenerateGradientError):
        train_step(state, bad, 1.0, 0.9)
    _, M = train_step(state, [bad, sample], 1.0, 0.9)
    assert M == sample.mdist(phi)


# -- training loop -----------------------------------------------------------

def test_zero_iterations_returns_initial_weights():
    res = train(TrainConfig(iterations=0))
    assert np.array_equal(res.params.flat(), init_params(0).flat())
    assert res.history == []


def test_training_is_deterministic():
    cfg = TrainConfig(iterations=3, batch_size=2)
    a, b = train(cfg), train(cfg)
    assert a.history == b.history
    assert np.array_equal(a.params.flat(), b.params.flat())


def test_two_hundred_steps_reduce_mdist():
    res = train(TrainConfig(iterations=200))
    M = np.array([m for _, m, _ in res.history])
    assert res.skipped == 0 and M.size == 200
    # golden values of the seeded run
    assert abs(M[0] - 3.780404555511857) < 1e-9
    assert abs(M[-1] - 2.1657446087565364) < 1e-6
    ma = moving_average(M, 50)
    assert ma[-1] < ma[49]


def test_evaluate_alignment_keys():
    out = evaluate_alignment(init_params(0), TrainConfig(det_size=16), n_poses=3)
    assert set(out) == {"cos_trans", "cos_rot", "mdist"}
    assert all(-1 <= out[k] <= 1 for k in ("cos_trans", "cos_rot"))


def test_moving_average():
    assert np.allclose(moving_average([1, 2, 3, 4], 2), [1, 1.5, 2.5, 3.5])
    assert np.allclose(moving_average(np.arange(10.0), 50), np.arange(10.0).cumsum() / np.arange(1, 11))


def test_param_flattening_round_trip():
    phi = init_params(4)
    again = phi.with_flat(phi.flat())
    assert np.array_equal(again.flat(), phi.flat())
    assert np.array_equal(EncoderParams.from_arrays(phi.arrays()).flat(), phi.flat())
    with pytest.raises(InvalidArgumentError):
        phi.with_flat(np.zeros(3))
