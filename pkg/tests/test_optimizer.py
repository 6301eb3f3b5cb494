import warnings

import numpy as np
import pytest
import torch

from helpers import ground_plane, random_motion, static_motion, synced_imu, toy_body, world_view
from lidarmocap.body_model import forward_batch, head_rotation
from lidarmocap.calib_sync import imu_to_world_transform
from lidarmocap.errors import ConfigError, OptimizationError
from lidarmocap.geometry.raycast import LidarSpec
from lidarmocap.localization import imu_to_world, localize_first_person
from lidarmocap.losses import LossWeights, WindowContext, total_loss
from lidarmocap.optimizer import (
    SequenceInputs,
    Stage,
    StagePlan,
    WindowPlan,
    optimize_sequence,
    optimize_window,
)

TOY = toy_body()
SHORT = StagePlan([Stage(("T",), 4), Stage(("T", "R"), 4), Stage(("T", "R", "theta"), 6)])


def toy_window(seed=0, k=6, **kwargs):
    m = random_motion(TOY, k, seed, pose_scale=0.1)
    m.T[:, 2] = np.abs(m.T[:, 2]) * 0.1
    return WindowContext.from_motion(TOY, m, scene=ground_plane(), **kwargs)


# ---------------------------------------------------------------- plans


def test_default_plan():
    plan = StagePlan()
    assert [(s.variables, s.iterations) for s in plan.stages] == [
        (("T",), 50), (("T", "R"), 40), (("T", "R", "theta"), 110)]
    assert plan.learning_rate == 0.001 and plan.betas == (0.9, 0.999)
    assert plan.total_iterations == 200
    wp = WindowPlan()
    assert (wp.window_size, wp.overlap, wp.boundary_mode) == (500, 50, "pin_first_frame")


def test_plan_validation():
    with pytest.raises(ConfigError):
        StagePlan([])
    with pytest.raises(ConfigError):
        StagePlan([Stage(("T", "R"), 5), Stage(("T",), 5)])
    with pytest.raises(ConfigError):
        StagePlan([Stage(("beta",), 5)])
    with pytest.raises(ConfigError):
        StagePlan(learning_rate=float("nan"))
    with pytest.raises(ConfigError):
        WindowPlan(window_size=10, overlap=10)
    with pytest.raises(ConfigError):
        WindowPlan(boundary_mode="glue")


@pytest.mark.parametrize("n,k,overlap", [(10, 500, 50), (1200, 500, 50), (500, 500, 50), (7, 3, 1), (9, 4, 0)])
def test_window_partition(n, k, overlap):
    wins = WindowPlan(k, overlap).windows(n)
    assert wins[0][0] == 0 and wins[-1][1] == n
    assert all(b - a <= k for a, b in wins)
    for (a0, b0), (a1, b1) in zip(wins, wins[1:]):
        assert b0 - a1 == overlap and b1 > b0


# ---------------------------------------------------------------- window optimization


def test_zero_weights_leave_variables_unchanged():
    ctx = toy_window()
    T, R, th = ctx.T.clone(), ctx.R.clone(), ctx.theta.clone()
    res = optimize_window(ctx, SHORT, LossWeights.only())
    assert torch.equal(torch.as_tensor(res.T), T) and torch.equal(torch.as_tensor(res.R), R)
    assert torch.equal(torch.as_tensor(res.theta), th)


def test_zero_learning_rate_changes_nothing():
    ctx = toy_window(1)
    T, R, th = ctx.T.numpy().copy(), ctx.R.numpy().copy(), ctx.theta.numpy().copy()
    plan = StagePlan(SHORT.stages, learning_rate=0.0)
    res = optimize_window(ctx, plan)
    np.testing.assert_array_equal(res.T, T)
    np.testing.assert_array_equal(res.R, R)
    np.testing.assert_array_equal(res.theta, th)


def test_stage_masking_is_bitwise():
    ctx = toy_window(2)
    R, th = ctx.R.numpy().copy(), ctx.theta.numpy().copy()
    one = optimize_window(ctx, StagePlan([Stage(("T",), 5)]))
    np.testing.assert_array_equal(one.R, R)
    np.testing.assert_array_equal(one.theta, th)
    assert not np.array_equal(one.T, toy_window(2).T.numpy())
    ctx = toy_window(2)
    two = optimize_window(ctx, StagePlan([Stage(("T",), 5), Stage(("T", "R"), 5)]))
    np.testing.assert_array_equal(two.theta, th)
    assert not np.array_equal(two.R, R)


def test_iteration_counter_runs_across_stages():
    res = optimize_window(toy_window(3), SHORT)
    assert [r["iteration"] for r in res.trace] == list(range(1, 15))
    assert [r["stage"] for r in res.trace] == [0] * 4 + [1] * 4 + [2] * 6


def planted_offset_window():
    """Only error: a constant 0.3 m translation against the head constraint."""
    m = random_motion(TOY, 8, 4, pose_scale=0.1)
    t_hl = np.array([0.0, 0.05, 0.1])
    _, joints = forward_batch(TOY, m.T, m.R, m.theta, m.beta)
    lidar = joints[:, TOY.head_joint] - np.einsum("fab,b->fa", head_rotation(TOY, m.R, m.theta), t_hl)
    start = m.copy()
    start.T = start.T + [0.3, 0.0, 0.0]
    return m, WindowContext.from_motion(TOY, start, lidar_positions=lidar, t_hl=t_hl, use_l2h=True)


@pytest.mark.xfail(strict=True, reason="Adam at the default rate 1e-3 moves about 1e-3 per step: 50 steps cover 5 cm")
def test_planted_head_offset_is_removed():
    truth, ctx = planted_offset_window()
    res = optimize_window(ctx, StagePlan([Stage(("T",), 50)]), LossWeights.only("l2h"))
    assert np.abs(res.T - truth.T).max() < 0.005


def test_planted_head_offset_shrinks_at_adam_speed():
    truth, ctx = planted_offset_window()
    res = optimize_window(ctx, StagePlan([Stage(("T",), 50)]), LossWeights.only("l2h"))
    err = res.T - truth.T
    # constant-sign gradients: every step moves the full learning rate towards the target
    np.testing.assert_allclose(err[:, 0], 0.3 - 50 * 0.001, atol=1e-6)
    # rounding-level gradients on y and z get normalised by Adam but flip sign, so they stay small
    assert np.abs(err[:, 1:]).max() < 1e-4


def test_non_finite_loss_aborts_window():
    ctx = toy_window(4)
    ctx.theta_prior[0, 0, 0] = np.nan
    T = ctx.T.numpy().copy()
    res = optimize_window(ctx, SHORT)
    assert res.aborted and "prior" in res.diagnostic
    np.testing.assert_array_equal(res.T, T)


def test_determinism():
    a = optimize_window(toy_window(5), SHORT)
    b = optimize_window(toy_window(5), SHORT)
    assert a.trace == b.trace
    np.testing.assert_array_equal(a.theta, b.theta)


def test_stage_loss_trend_smoothed():
    res = optimize_window(toy_window(6, k=8), StagePlan([Stage(("T",), 20), Stage(("T", "R"), 20),
                                                         Stage(("T", "R", "theta"), 30)], learning_rate=0.003))
    for s in range(3):
        totals = [r["total"] for r in res.trace if r["stage"] == s]
        smooth = totals[0]
        for x in totals[1:]:
            smooth = 0.9 * smooth + 0.1 * x
        assert smooth <= totals[0]


# ---------------------------------------------------------------- synthetic wearer windows


@pytest.fixture(scope="module")
def wearer(capsule, small_bundle):
    pos, rots, _, _ = world_view(small_bundle)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        loc = localize_first_person(capsule, synced_imu(small_bundle, "wearer"), pos, imu_to_world_transform())
    inputs = SequenceInputs(capsule, scene=small_bundle.scene_world, lidar_positions=pos, lidar_rotations=rots,
                            t_hl=loc.t_hl, sensor=LidarSpec(n_beams=64, n_columns=512), use_l2h=True)
    inputs.theta_prior = loc.motion.theta.copy()
    inputs.beta = loc.motion.beta.copy()
    return loc.motion, inputs


@pytest.mark.xfail(strict=True, reason="the IMU pose-noise smoothness term dominates the final loss and "
                                       "improves with theta steps: 200 single-stage steps beat 110")
def test_multi_stage_not_worse_than_single_stage(capsule, small_bundle, wearer):
    init, inputs = wearer
    raw = imu_to_world(synced_imu(small_bundle, "wearer"), imu_to_world_transform())
    for seed in range(5):
        start = int(np.random.default_rng(seed).integers(0, init.n_frames - 30))
        finals = []
        for plan in (StagePlan(), StagePlan.single_stage(200)):
            m = init.slice(start, start + 30)
            # drifted start: the raw IMU translation, aligned at the window's first frame
            m.T = raw.T[start:start + 30] - raw.T[start] + init.T[start]
            ctx = inputs.context(start, start + 30, m.T, m.R, m.theta)
            res = optimize_window(ctx, plan)
            end = inputs.context(start, start + 30, res.T, res.R, res.theta)
            end.iteration = plan.total_iterations
            with torch.no_grad():
                finals.append(float(total_loss(end)[0]))
        assert finals[0] <= finals[1], (seed, finals)


def test_short_sequence_is_one_window(wearer):
    init, inputs = wearer
    m = init.slice(0, 12)
    out, trace = optimize_sequence(m, inputs, SHORT, WindowPlan(500, 50))
    ctx = inputs.context(0, 12, m.T, m.R, m.theta)
    res = optimize_window(ctx, SHORT)
    np.testing.assert_array_equal(out.T, res.T)
    np.testing.assert_array_equal(out.theta, res.theta)
    assert trace == res.trace


def test_window_stitching_is_continuous(wearer):
    """k=100, overlap=10 over 400 frames: the same geometry as k=500, overlap=50 over 2000 frames, scaled down."""
    init, inputs = wearer
    m = init.slice(0, 400)
    out, _ = optimize_sequence(m, inputs, SHORT, WindowPlan(100, 10))
    steps = np.linalg.norm(np.diff(out.T, axis=0), axis=1)
    boundaries = [b - 1 for _, b in WindowPlan(100, 10).windows(400)[:-1]]
    for b in boundaries:
        assert steps[b - 10:b + 1].max() <= 2 * np.median(steps)


def test_identical_static_windows_give_identical_outputs():
    m = static_motion(TOY, 20)
    inputs = SequenceInputs(TOY, scene=ground_plane())
    out, _ = optimize_sequence(m, inputs, SHORT, WindowPlan(10, 0))
    np.testing.assert_array_equal(out.T[:10], out.T[10:])
    np.testing.assert_array_equal(out.theta[:10], out.theta[10:])


def test_window_errors_carry_the_index():
    m = random_motion(TOY, 20, 0, pose_scale=0.1)
    prior = m.theta.copy()
    prior[15] = np.nan
    inputs = SequenceInputs(TOY, theta_prior=prior)
    with pytest.raises(OptimizationError) as err:
        optimize_sequence(m, inputs, SHORT, WindowPlan(10, 2))
    assert err.value.window == 1
