import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from selfpose.geometry import Pose, compose, invert
from selfpose.render import CameraIntrinsics
from selfpose.simulator import (DEFAULT_OBJECTS, NoiseModel, SceneObject, SegmenterModel, SimulatorError, Workspace,
                                clearance, default_noise, domain_shift_noise, generate_scene, grasp_place, look_at,
                                make_trajectory, noisy_delta, observe, oracle_segment, push, resting_pose,
                                scene_valid, true_delta)


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 10 ** 6), st.booleans())
def test_generated_scenes_are_valid(seed, upright):
    scene = generate_scene(seed=seed, upright=upright)
    assert [o.name for o in scene.objects] == list(DEFAULT_OBJECTS)
    assert scene_valid(scene)
    for o in scene.objects:
        # resting on the table
        assert o.pose.apply(o.mesh.vertices)[:, 2].min() == pytest.approx(0.0, abs=1e-9)


def test_scene_generation_is_deterministic_and_bounded():
    a, b = generate_scene(seed=7), generate_scene(seed=7)
    for x, y in zip(a.objects, b.objects):
        assert np.allclose(x.pose.matrix(), y.pose.matrix())
    with pytest.raises(SimulatorError):
        generate_scene(names=("box",) * 40, workspace=Workspace((0, 0), (0.15, 0.15)))


def test_clearance_detects_overlap():
    scene = generate_scene(seed=1)
    a = scene.objects[0]
    clone = SceneObject(99, a.name, Pose(a.pose.rotation, a.pose.translation + [0.01, 0.0, 0.0]))
    assert clearance(a, clone) < -0.005
    far = SceneObject(99, a.name, Pose(a.pose.rotation, a.pose.translation + [1.0, 0.0, 0.0]))
    assert clearance(a, far) > 0.5
    assert not scene_valid(scene.with_pose(scene.objects[1].oid, a.pose))


def test_look_at_frame():
    cam = look_at((0.3, 0.0, 0.4), (0.0, 0.0, 0.0))
    R = cam.R
    assert np.allclose(R.T @ R, np.eye(3)) and np.linalg.det(R) == pytest.approx(1.0)
    # the target sits on the optical axis in front of the camera
    p = invert(cam).apply(np.zeros(3))
    assert np.allclose(p[:2], 0.0, atol=1e-12) and p[2] == pytest.approx(0.5)
    # image "down" points toward the table
    assert R[:, 1][2] < 0


def test_trajectory_geometry():
    scene = generate_scene(seed=3)
    traj = make_trajectory(scene, n=10, seed=3)
    assert len(traj) == 10
    for k, cam in enumerate(traj):
        rel = cam.translation - traj.target
        assert np.linalg.norm(rel) == pytest.approx(0.5)
        el = np.degrees(np.arcsin(rel[2] / np.linalg.norm(rel)))
        assert el == pytest.approx(55.0 - 20.0 * k / 9)
    with pytest.raises(ValueError):
        make_trajectory(scene, n=0)


def test_true_and_noisy_delta():
    scene = generate_scene(seed=4)
    traj = make_trajectory(scene, n=4, seed=4)
    d = true_delta(traj[0], traj[1])
    # a world point expressed in each camera frame is related by the delta
    x = np.array([0.05, -0.02, 0.03])
    assert np.allclose(d.apply(invert(traj[0]).apply(x)), invert(traj[1]).apply(x))
    rng = np.random.default_rng(0)
    assert np.allclose(noisy_delta(d, NoiseModel(), rng).matrix(), d.matrix())
    bias = Pose.from_rotvec([0.0, 0.0, 0.02], (0.003, 0, 0))
    biased = noisy_delta(d, NoiseModel(calib_bias=bias), rng)
    assert np.allclose(biased.matrix(), compose(invert(bias), compose(d, bias)).matrix())


def test_noise_model_validation_and_domain_shift():
    with pytest.raises(ValueError):
        NoiseModel(depth_sigma=-1)
    with pytest.raises(ValueError):
        NoiseModel(dropout=2)
    assert not default_noise().domain_shifted
    ds = domain_shift_noise()
    assert ds.domain_shifted and not ds.without_domain_shift().domain_shifted


def test_observe_noise_free_matches_ground_truth():
    K = CameraIntrinsics()
    scene = generate_scene(seed=5)
    traj = make_trajectory(scene, n=3, seed=5)
    obs = observe(scene, traj[1], traj[0], NoiseModel(), seed=0, K=K)
    assert obs.rgb.shape == (K.height, K.width, 3) and obs.depth.shape == (K.height, K.width)
    assert np.allclose(obs.delta.matrix(), obs.true_delta.matrix())
    for o in scene.objects:
        assert np.allclose(obs.gt_poses[o.oid].matrix(), compose(invert(traj[1]), o.pose).matrix())
    assert set(np.unique(obs.labels)) <= {0} | set(scene.ids)
    assert (obs.depth[obs.labels > 0] > 0).all()

    noisy = observe(scene, traj[1], traj[0], NoiseModel(dropout=1.0), seed=0, K=K)
    assert (noisy.depth == 0).all()


def test_oracle_segmenter():
    scene = generate_scene(seed=6)
    traj = make_trajectory(scene, n=1, seed=6)
    obs = observe(scene, traj[0], None, NoiseModel(), seed=0)
    assert np.array_equal(oracle_segment(obs), obs.labels)
    oid = scene.ids[0]
    missed = oracle_segment(obs, SegmenterModel(miss={oid: 1.0}))
    assert not (missed == oid).any()
    grown = oracle_segment(obs, SegmenterModel(boundary=2))
    assert (grown[obs.labels > 0] == obs.labels[obs.labels > 0]).all()
    assert (grown > 0).sum() >= (obs.labels > 0).sum()
    shrunk = oracle_segment(obs, SegmenterModel(boundary=-2))
    assert ((shrunk > 0) <= (obs.labels > 0)).all()
    with pytest.raises(ValueError):
        SegmenterModel(flip_rate=1.5)


@pytest.mark.parametrize("seed", range(4))
def test_interactions_keep_scenes_valid(seed):
    scene = generate_scene(seed=seed)
    oid = scene.ids[seed % len(scene.ids)]
    for act in (push, grasp_place):
        res = act(scene, oid, seed=seed)
        assert res.oid == oid and res.kind in ("push", "grasp_place")
        assert scene_valid(res.scene)
        # only the manipulated object moves
        for o in scene.objects:
            if o.oid != oid:
                assert np.allclose(res.scene.get(o.oid).pose.matrix(), o.pose.matrix())
        if res.ok and not res.note:
            assert not np.allclose(res.scene.get(oid).pose.matrix(), scene.get(oid).pose.matrix())


def test_resting_pose_places_on_table():
    from selfpose.simulator import mesh_for
    m = mesh_for("mug")
    for rest in range(6):
        p = resting_pose(m, rest, 0.7, (0.1, 0.2))
        z = p.apply(m.vertices)[:, 2]
        assert z.min() == pytest.approx(0.0, abs=1e-12)
        assert np.allclose(p.translation[:2], (0.1, 0.2))


def test_fk_pivot_fixes_the_error_seen_at_that_depth():
    rng = np.random.default_rng(3)
    noise = NoiseModel(fk_rot_sigma=0.05, fk_pivot=0.5)
    p = np.array([0.0, 0.0, 0.5])
    for _ in range(5):
        jitter = noisy_delta(Pose(), noise, rng)
        # a point at the pivot stays put, only its orientation changes
        assert np.allclose(jitter.apply(p), p, atol=1e-12)
    with pytest.raises(ValueError):
        NoiseModel(fk_pivot=-0.1)


def test_target_jitter_pans_the_camera():
    scene = generate_scene(seed=8)
    plain = make_trajectory(scene, n=6, seed=8)
    panned = make_trajectory(scene, n=6, seed=8, target_jitter=0.06)
    assert np.allclose(panned[0].matrix(), plain[0].matrix())
    for a, b in zip(plain.waypoints[1:], panned.waypoints[1:]):
        # same eye positions, different viewing directions
        assert np.allclose(a.translation, b.translation)
        assert not np.allclose(a.R, b.R)
        axis = b.R[:, 2]
        # the look-at point lies on the table within the jitter radius of the target
        s = (plain.target[2] - b.translation[2]) / axis[2]
        assert np.linalg.norm(b.translation + s * axis - plain.target) <= 0.06 + 1e-9
    with pytest.raises(ValueError):
        make_trajectory(scene, target_jitter=-1.0)
