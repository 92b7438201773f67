"""Needle-to-vein alignment and the constant-orientation insertion path.

The hexapod has six axes but the needle is rotationally symmetric, so the
plan holds the rotation about the needle's own axis at its home value and
solves only the remaining five degrees of freedom: a minimal (twist-free)
rotation that makes the needle parallel to the vein, then a translation that
puts the tip on the vein line, ``standoff`` short of the puncture point.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import UnreachablePose
from .geometry import Line3D, RigidTransform, rotation_between

FIXED_DOF = "roll-about-needle-axis"


@dataclass(frozen=True)
class HexapodLimits:
    """Travel range of an H-840-class hexapod around its zero pose."""

    travel_xy: float = 50.0
    travel_z: float = 25.0
    tilt_deg: float = 15.0
    yaw_deg: float = 30.0

    def check(self, pose: RigidTransform) -> None:
        t = pose.translation
        if abs(t[0]) > self.travel_xy or abs(t[1]) > self.travel_xy:
            raise UnreachablePose(f"translation {t} exceeds +/-{self.travel_xy} mm in x/y")
        if abs(t[2]) > self.travel_z:
            raise UnreachablePose(f"translation {t} exceeds +/-{self.travel_z} mm in z")
        rx, ry, rz = np.degrees(euler_angles(pose.rotation))
        if max(abs(rx), abs(ry)) > self.tilt_deg or abs(rz) > self.yaw_deg:
            raise UnreachablePose(
                f"rotation ({rx:.2f}, {ry:.2f}, {rz:.2f}) deg outside limits")


def euler_angles(R) -> np.ndarray:
    """Angles ``(rx, ry, rz)`` with ``R = Rz @ Ry @ Rx``."""
    ry = -math.asin(max(-1.0, min(1.0, R[2, 0])))
    rx = math.atan2(R[2, 1], R[2, 2])
    rz = math.atan2(R[1, 0], R[0, 0])
    return np.array([rx, ry, rz])


def twist_angle(R, axis) -> float:
    """Rotation of ``R`` about ``axis`` in a swing-twist decomposition."""
    axis = np.asarray(axis, float) / np.linalg.norm(axis)
    w = math.sqrt(max(0.0, 1.0 + np.trace(R))) / 2.0
    if w < 1e-12:
        return math.pi
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / (4.0 * w)
    return 2.0 * math.atan2(float(v @ axis), w)


@dataclass(frozen=True, eq=False)
class AlignmentPlan:
    target_pose: RigidTransform
    approach_axis: np.ndarray
    puncture: np.ndarray
    standoff: float
    angular_error: float
    lateral_error: float
    fixed_dof: str = FIXED_DOF


@dataclass(frozen=True, eq=False)
class InsertionTrajectory:
    waypoints: tuple
    step: float
    overlap: float


def plan_alignment(needle_axis: Line3D, needle_tip, vein_axis: Line3D, q,
                   home: RigidTransform, puncture=None, standoff: float = 1.0,
                   limits: HexapodLimits | None = HexapodLimits()) -> AlignmentPlan:
    """Hexapod pose that makes the needle collinear with ``vein_axis``.

    ``needle_axis`` and ``needle_tip`` describe the needle at the ``home``
    pose in world coordinates; the axis direction must point toward the
    tip. ``puncture`` is projected onto the vein line (default: the vein
    line's anchor point). The tip ends up ``standoff`` mm before it.
    """
    q = np.asarray(q, float)
    d = needle_axis.direction
    v = vein_axis.direction if vein_axis.direction @ d >= 0 else -vein_axis.direction
    R_align = rotation_between(d, v)
    R_target = R_align @ home.rotation
    anchor = vein_axis.point if puncture is None else np.asarray(puncture, float)
    puncture_pt = vein_axis.closest_point(anchor)
    tip_target = puncture_pt - standoff * v
    target = RigidTransform(R_target, tip_target - R_target @ q)

    # diagnostics: carry the observed home-pose needle through the move
    move = target @ home.inverse()
    moved_dir = move.rotation @ d
    ang = math.acos(max(-1.0, min(1.0, float(moved_dir @ v))))
    lateral = float(vein_axis.distance(move.apply(needle_tip)))
    if limits is not None:
        limits.check(target)
    return AlignmentPlan(target, v, puncture_pt, float(standoff), ang, lateral)


def insertion_trajectory(plan: AlignmentPlan, approach: float | None = None,
                         overlap: float = 2.0, step: float = 0.5) -> InsertionTrajectory:
    """Equally spaced waypoints advancing the tip along the needle axis from
    the standoff point, through the puncture point, to ``overlap`` past it.
    Orientation is frozen at the plan's rotation."""
    if not step > 0:
        raise ValueError("step must be positive")
    approach = plan.standoff if approach is None else float(approach)
    total = approach + overlap
    n = max(int(math.ceil(total / step - 1e-9)), 0)
    pose = plan.target_pose
    if n == 0:
        return InsertionTrajectory((pose,), step, overlap)
    waypoints = tuple(
        RigidTransform(pose.rotation, pose.translation + (k * total / n) * plan.approach_axis)
        for k in range(n + 1))
    return InsertionTrajectory(waypoints, step, overlap)
