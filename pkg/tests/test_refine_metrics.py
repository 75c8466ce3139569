import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import trapezoid

from selfpose.evaluate import NO_SUPPORT, GateConfig, depth_error, evaluate_estimate, evaluate_pose
from selfpose.geometry import Pose, axis_angle_to_quat, quat_multiply
from selfpose.metrics import accuracy_curve, add_metric, adds_metric, auc, f1_details, f1_segmentation
from selfpose.refine import (MIN_SUPPORT, RefineConfig, object_mask, objective, objective_gradient, refine_pose,
                             visibility_mask)

# -- masks -----------------------------------------------------------------


def test_visibility_and_object_masks():
    D = np.array([[0.5, 0.5, 0.0], [0.5, 0.9, 0.5]])
    Dr = np.array([[0.51, 0.0, 0.5], [0.6, 0.5, 0.49]])
    vis = visibility_mask(D, Dr, 0.02)
    assert vis.tolist() == [[True, False, False], [False, False, True]]
    pred = np.ones_like(vis)
    assert np.array_equal(object_mask(pred, Dr > 0, vis), vis)
    with pytest.raises(ValueError):
        visibility_mask(D, np.zeros((3, 3)), 0.02)
    with pytest.raises(ValueError):
        object_mask(pred, np.ones((3, 3), bool), vis)


def test_refine_config_validation():
    with pytest.raises(ValueError):
        RefineConfig(margin=0)
    with pytest.raises(ValueError):
        RefineConfig(lam=-1)
    assert (RefineConfig().margin, RefineConfig().lam) == (0.02, 0.001)


# -- objective -------------------------------------------------------------

@pytest.fixture(scope="module")
def bracket_sdf(assets):
    return assets["bracket"].sdf


@pytest.fixture(scope="module")
def bracket_cloud(assets):
    from selfpose.mesh import sample_surface
    return sample_surface(assets["bracket"].mesh, 300, seed=5).points


def test_objective_zero_at_truth(bracket_sdf, bracket_cloud):
    gt = Pose.from_rotvec([0.4, -0.3, 1.0], (0.02, 0.01, 0.5))
    pts = gt.apply(bracket_cloud)
    assert objective(pts, bracket_sdf, gt) < bracket_sdf.voxel_size / 4
    off = Pose(gt.rotation, gt.translation + [0.01, 0, 0])
    assert objective(pts, bracket_sdf, off) > 0.003


def test_gradient_matches_finite_differences(bracket_sdf, bracket_cloud):
    gt = Pose.from_rotvec([0.4, -0.3, 1.0], (0.02, 0.01, 0.5))
    pts = gt.apply(bracket_cloud)
    q = quat_multiply(axis_angle_to_quat([0.05, 0.02, -0.03]), gt.rotation)
    pose = Pose(q, gt.translation + [0.006, -0.004, 0.003])
    t_bar = gt.translation + [0.01, 0, 0]
    lam = 0.5
    f, g_t, g_w = objective_gradient(pts, bracket_sdf, pose, t_bar, lam)
    h = 1e-6
    for i in range(3):
        e = np.eye(3)[i] * h
        fp = objective(pts, bracket_sdf, Pose(pose.rotation, pose.translation + e), t_bar, lam)
        fm = objective(pts, bracket_sdf, Pose(pose.rotation, pose.translation - e), t_bar, lam)
        assert g_t[i] == pytest.approx((fp - fm) / (2 * h), rel=0.05, abs=1e-3)
        rp = Pose(quat_multiply(axis_angle_to_quat(e), pose.rotation), pose.translation)
        rm = Pose(quat_multiply(axis_angle_to_quat(-e), pose.rotation), pose.translation)
        num = (objective(pts, bracket_sdf, rp, t_bar, lam) - objective(pts, bracket_sdf, rm, t_bar, lam)) / (2 * h)
        assert g_w[i] == pytest.approx(num, rel=0.05, abs=1e-4)
    assert f == pytest.approx(objective(pts, bracket_sdf, pose, t_bar, lam))


def test_refine_recovers_small_perturbation(bracket_sdf, bracket_cloud, assets):
    gt = Pose.from_rotvec([1.0, 0.2, -0.5], (-0.03, 0.02, 0.55))
    pts = gt.apply(bracket_cloud)
    q = quat_multiply(axis_angle_to_quat([0.08, -0.05, 0.06]), gt.rotation)
    init = Pose(q, gt.translation + [0.01, 0.008, -0.006])
    res = refine_pose(pts, bracket_sdf, init)
    assert add_metric(assets["bracket"].points, res.pose, gt) < 0.002
    assert np.all(np.diff(res.history) <= 0)
    assert res.objective == pytest.approx(res.history[-1])
    assert not res.insufficient_support


def test_refine_flags_insufficient_support(bracket_sdf):
    init = Pose(translation=(0, 0, 0.5))
    res = refine_pose(np.zeros((MIN_SUPPORT - 1, 3)), bracket_sdf, init)
    assert res.insufficient_support and res.pose is init and res.iterations == 0


# -- metrics ---------------------------------------------------------------

def _random_pose(rng):
    return Pose.from_rotvec(rng.normal(size=3), rng.normal(size=3) * 0.1)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_adds_never_exceeds_add(seed):
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(60, 3)) * 0.05
    a, b = _random_pose(rng), _random_pose(rng)
    assert adds_metric(M, a, b) <= add_metric(M, a, b) + 1e-12


def test_add_translation_offset_is_exact():
    M = np.random.default_rng(0).normal(size=(100, 3))
    gt = Pose.from_rotvec([0.3, 0.1, 0.2], (0.1, 0.2, 0.3))
    est = Pose(gt.rotation, gt.translation + [0.01, 0, 0])
    assert add_metric(M, est, gt) == pytest.approx(0.01, abs=1e-15)
    assert add_metric(M, gt, gt) == 0.0 and adds_metric(M, gt, gt) == 0.0
    with pytest.raises(ValueError):
        add_metric(np.zeros((0, 3)), gt, gt)


def test_adds_on_sphere_is_rotation_invariant():
    from selfpose.mesh import icosphere
    m = icosphere(0.035, subdivisions=3)
    gt = Pose(translation=(0, 0, 0.5))
    est = Pose(axis_angle_to_quat([0.7, -0.2, 1.1]), gt.translation)
    assert adds_metric(m.vertices, est, gt) < 0.004   # vertex spacing bound
    assert add_metric(m.vertices, est, gt) > 0.02


@pytest.mark.parametrize("pred,gt,expected", [
    ([1, 1, 0, 0], [1, 1, 0, 0], (1.0, 1.0, 1.0, False)),
    ([1, 0, 0, 0], [0, 0, 1, 0], (0.0, 0.0, 0.0, False)),
    ([1, 0, 0, 0], [1, 1, 0, 0], (2 / 3, 1.0, 0.5, False)),
    ([0, 0, 0, 0], [0, 0, 0, 0], (1.0, 1.0, 1.0, True)),
])
def test_f1_cases(pred, gt, expected):
    got = f1_details(np.array(pred), np.array(gt))
    assert got[3] == expected[3]
    assert np.allclose(got[:3], expected[:3])


def test_f1_object_id_and_shape():
    pred = np.array([[2, 2], [3, 0]])
    gt = np.array([[2, 3], [3, 0]])
    assert f1_segmentation(pred, gt, 2) == pytest.approx(2 / 3)
    assert f1_segmentation(pred, gt, 3) == pytest.approx(2 / 3)
    with pytest.raises(ValueError):
        f1_segmentation(pred, np.zeros((3, 3)))


def test_auc():
    assert auc([0.0]) == pytest.approx(1.0)
    assert auc([1.0]) == 0.0
    assert auc([]) == 0.0
    thr, acc = accuracy_curve([0.05], 0.1, 11)
    assert acc.tolist() == [0] * 5 + [1] * 6
    # the step interval contributes half a bin
    assert auc([0.05], 0.1, 11) == pytest.approx(0.55)
    errs = np.random.default_rng(1).uniform(0, 0.15, 40)
    thr, acc = accuracy_curve(errs)
    assert auc(errs) == pytest.approx(trapezoid(acc, thr) / 0.1)


# -- evaluation ------------------------------------------------------------

def test_gate_config():
    g = GateConfig()
    assert (g.s_star, g.e_star) == (0.5, 0.03)
    assert g.accepts(0.5, 0.03) and not g.accepts(0.49, 0.0) and not g.accepts(0.9, 0.031)
    with pytest.raises(ValueError):
        GateConfig(s_star=1.5)
    with pytest.raises(ValueError):
        GateConfig(e_star=0)


def test_depth_error_empty_support():
    assert depth_error(np.ones((2, 2)), np.ones((2, 2)), np.zeros((2, 2), bool)) == np.inf
    assert depth_error(np.ones((2, 2)), np.zeros((2, 2)) + 0.5, np.ones((2, 2), bool)) == pytest.approx(0.5)


def test_evaluate_pose_without_support(K):
    rgb = np.zeros((K.height, K.width, 3))
    D = np.zeros((K.height, K.width))
    v = evaluate_pose(rgb, D, rgb, D, np.zeros_like(D, bool), Pose(translation=(0, 0, 0.5)), 0.1, K)
    assert not v.accepted and v.reason == NO_SUPPORT


def test_evaluate_estimate_truth_and_offset(K, assets):
    from selfpose.render import render_object
    a = assets["bracket"]
    gt = Pose.from_rotvec([0.5, 0.2, 0.9], (0.01, 0.0, 0.5))
    rgb, D, mask = render_object(a.mesh, gt, K)
    ev = evaluate_estimate(a.mesh, gt, rgb, D, mask > 0, K)
    assert ev.verdict.accepted and ev.verdict.s > 0.99 and ev.verdict.e < 1e-6
    assert ev.omega.sum() == (mask > 0).sum()
    far = Pose(gt.rotation, gt.translation + [0, 0, 0.05])
    bad = evaluate_estimate(a.mesh, far, rgb, D, mask > 0, K)
    assert not bad.verdict.accepted and bad.verdict.e > 0.03
    assert bad.verdict.to_dict()["reason"] == "depth error"
