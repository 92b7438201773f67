import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stereoinject.alignment import (HexapodLimits, euler_angles, insertion_trajectory,
                                    plan_alignment, twist_angle)
from stereoinject.calibration import (euler_rotation, needle_observations, solve_needle,
                                      solve_needle_axis)
from stereoinject.errors import UnreachablePose
from stereoinject.geometry import Line3D, RigidTransform, exp_so3, rotation_between
from stereoinject.harness import simulator as sim
from stereoinject.harness.config import RigConfig

Q = np.array([20.0, -1.5, 12.0])
X = np.array([1.0, 0.0, 0.0])


def plan_for(vein, q=Q, d=X, home=RigidTransform.identity(), **kw):
    return plan_alignment(Line3D(home.apply(q), home.rotation @ d), home.apply(q),
                          vein, q, home, **kw)


def unit(v):
    v = np.asarray(v, float)
    return v / np.linalg.norm(v)


def test_collinear_needle_stays_home(home):
    plan = plan_for(Line3D(Q + X, X), puncture=Q + X)
    assert plan.target_pose.allclose(home, atol=1e-12)
    assert plan.angular_error < 1e-12 and plan.lateral_error < 1e-12


def test_lateral_offset_is_pure_translation():
    plan = plan_for(Line3D(Q + [1.0, 0.5, 0.0], X), puncture=Q + [1.0, 0.5, 0.0])
    assert np.allclose(plan.target_pose.rotation, np.eye(3), atol=1e-15)
    assert np.allclose(plan.target_pose.translation, [0.0, 0.5, 0.0], atol=1e-12)


def test_vein_direction_sign_does_not_matter():
    a = plan_for(Line3D(Q + X, X), puncture=Q + X)
    b = plan_for(Line3D(Q + X, -X), puncture=Q + X)
    assert a.target_pose.allclose(b.target_pose, atol=1e-12)


def test_tilted_vein_gives_yaw_and_checks_out_in_simulation():
    cfg = RigConfig()
    v = exp_so3(np.radians(3.0) * np.array([0, 0, 1.0])) @ X
    vein = Line3D(Q + 2 * X, v)
    plan = plan_for(vein, puncture=Q + 2 * X)
    rx, ry, rz = np.degrees(euler_angles(plan.target_pose.rotation))
    assert rz == pytest.approx(3.0, abs=1e-9)
    assert abs(rx) < 1e-9 and abs(ry) < 1e-9

    # re-measure the moved needle with the stereo pair and compare with the vein
    cams = cfg.true_cameras()
    needle = sim.Needle(Q, X)
    pose = plan.target_pose
    obs = needle_observations(needle.tip(pose), needle.axis(pose), cams)
    tip = pose.apply(solve_needle(*obs, *cams, pose))
    d = pose.rotation @ solve_needle_axis(*obs, *cams, pose)
    assert vein.distance(tip) < 1e-6
    assert abs(abs(d @ v) - 1.0) < 1e-12
    assert np.linalg.norm(tip - (plan.puncture - plan.standoff * v)) < 1e-6


def test_puncture_projected_onto_vein():
    vein = Line3D(Q, unit([1.0, 0.1, 0.0]))
    plan = plan_for(vein, puncture=Q + [2.0, 0.5, 0.3])
    assert vein.distance(plan.puncture) < 1e-12
    assert np.linalg.norm(np.cross(plan.puncture - Q, vein.direction)) < 1e-12


vec = st.tuples(*[st.floats(-1, 1)] * 3).map(np.array).filter(lambda v: np.linalg.norm(v) > 0.1)


@settings(max_examples=200, deadline=None)
@given(vec, st.tuples(*[st.floats(-0.1, 0.1)] * 3), st.tuples(*[st.floats(-3, 3)] * 3),
       st.tuples(*[st.floats(-0.2, 0.2)] * 3), st.tuples(*[st.floats(-2, 2)] * 3),
       st.floats(0.0, 3.0))
def test_plan_invariants(q_dir, tilt, shift, home_rot, home_t, standoff):
    home = RigidTransform(exp_so3(home_rot), home_t)
    q = Q + 0.1 * q_dir
    d = exp_so3(tilt) @ X
    v = exp_so3(np.array(tilt)[::-1]) @ unit(X + 0.05 * np.array(shift))
    vein = Line3D(home.apply(q) + shift, v)
    plan = plan_for(vein, q=q, d=d, home=home, standoff=standoff, limits=None)
    move = plan.target_pose @ home.inverse()
    tip = plan.target_pose.apply(q)
    axis = plan.target_pose.rotation @ d
    # collinear: moved tip on the vein, moved axis parallel to it
    assert vein.distance(tip) < 1e-9
    assert axis @ plan.approach_axis > 1 - 1e-12
    assert np.linalg.norm(tip + standoff * plan.approach_axis - plan.puncture) < 1e-9
    # twist-free: no rotation about the needle's own axis
    assert abs(twist_angle(move.rotation, home.rotation @ d)) < 1e-9
    assert plan.angular_error < 1e-7 and plan.lateral_error < 1e-9


def test_unreachable_pose_raised():
    far = Line3D(Q + [1.0, 80.0, 0.0], X)
    with pytest.raises(UnreachablePose):
        plan_for(far, puncture=Q + [1.0, 80.0, 0.0])
    steep = Line3D(Q + X, unit([1.0, 0.0, 0.5]))
    with pytest.raises(UnreachablePose):
        plan_for(steep, puncture=Q + X)
    assert plan_for(steep, puncture=Q + X, limits=None).target_pose is not None


def test_limits_check():
    lim = HexapodLimits(travel_xy=1.0, travel_z=1.0, tilt_deg=1.0, yaw_deg=2.0)
    lim.check(RigidTransform(euler_rotation(0.0, 0.0, math.radians(1.9)), [0.9, -0.9, 0.9]))
    for pose in (RigidTransform(np.eye(3), [0.0, 0.0, 1.1]),
                 RigidTransform(euler_rotation(math.radians(1.1), 0.0, 0.0)),
                 RigidTransform(euler_rotation(0.0, 0.0, math.radians(2.1)))):
        with pytest.raises(UnreachablePose):
            lim.check(pose)


# -- trajectory ----------------------------------------------------------------------

@pytest.fixture
def tilted_plan():
    return plan_for(Line3D(Q + X, unit([1.0, 0.03, -0.02])), puncture=Q + X)


def test_default_trajectory_has_seven_equal_steps(tilted_plan):
    traj = insertion_trajectory(tilted_plan)
    assert len(traj.waypoints) == 7
    tips = np.array([p.apply(Q) for p in traj.waypoints])
    assert np.allclose(np.linalg.norm(np.diff(tips, axis=0), axis=1), 0.5, atol=1e-12)
    assert np.linalg.norm(tips[-1] - tips[0]) == pytest.approx(3.0, abs=1e-12)
    assert np.linalg.norm(tips[2] - tilted_plan.puncture) < 1e-12


def test_trajectory_orientation_frozen_and_advance_monotone(tilted_plan):
    traj = insertion_trajectory(tilted_plan, overlap=1.7, step=0.4)
    R = tilted_plan.target_pose.rotation
    assert all(np.array_equal(p.rotation, R) for p in traj.waypoints)
    s = [(p.apply(Q) - tilted_plan.puncture) @ tilted_plan.approach_axis
         for p in traj.waypoints]
    assert np.all(np.diff(s) > 0)
    assert s[0] == pytest.approx(-1.0, abs=1e-12) and s[-1] == pytest.approx(1.7, abs=1e-12)
    assert np.max(np.diff(s)) <= 0.4 + 1e-12


def test_null_trajectory_is_single_waypoint(tilted_plan):
    traj = insertion_trajectory(tilted_plan, approach=0.0, overlap=0.0)
    assert len(traj.waypoints) == 1
    assert traj.waypoints[0] is tilted_plan.target_pose


def test_trajectory_rejects_bad_step(tilted_plan):
    with pytest.raises(ValueError):
        insertion_trajectory(tilted_plan, step=0.0)


# -- angles --------------------------------------------------------------------------

@settings(max_examples=200, deadline=None)
@given(st.floats(-1.5, 1.5), st.floats(-1.5, 1.5), st.floats(-3.1, 3.1))
def test_euler_angles_round_trip(rx, ry, rz):
    assert np.allclose(euler_angles(euler_rotation(rx, ry, rz)), [rx, ry, rz], atol=1e-9)


def test_twist_angle_examples():
    z = np.array([0.0, 0.0, 1.0])
    assert twist_angle(exp_so3([0, 0, 0.3]), z) == pytest.approx(0.3, abs=1e-12)
    assert twist_angle(exp_so3([0.3, 0, 0]), z) == pytest.approx(0.0, abs=1e-12)
    assert abs(twist_angle(rotation_between([1, 0, 0], unit([1, 1, 0.2])), X)) < 1e-12
