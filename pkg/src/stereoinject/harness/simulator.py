"""Synthetic world: needles, tails and the observations the cameras make.

Everything here has access to ground truth. The estimation code in
:mod:`stereoinject.calibration`, :mod:`stereoinject.detection` and
:mod:`stereoinject.alignment` only ever sees what these helpers hand out.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..calibration import CalibrationDataset, CalibrationSample, generate_grid_poses
from ..detection import AoI, NeedleObservation
from ..geometry import (CameraModel, Line3D, RigidTransform, exp_so3,
                        image_angle, project, rotation_between)
from ..imaging import ArtifactSpec, NeedleScene, TailScene, projected_vein_line
from .config import RigConfig

UP = np.array([0.0, 0.0, 1.0])  # toward the cameras and the skin surface


@dataclass(frozen=True, eq=False)
class Needle:
    """Needle geometry in the hexapod moving frame."""

    offset: np.ndarray     # tip position
    direction: np.ndarray  # unit, mount -> tip

    def tip(self, pose: RigidTransform) -> np.ndarray:
        return pose.apply(self.offset)

    def axis(self, pose: RigidTransform) -> np.ndarray:
        return pose.rotation @ self.direction


def master_needle(cfg: RigConfig) -> Needle:
    return Needle(cfg.master_offset, cfg.master_direction)


def perturb_needle(cfg: RigConfig, rng: np.random.Generator, master: Needle | None = None) -> Needle:
    """A freshly mounted injector.

    The needle pivots about a common point at the mount, ``needle_pivot_mm``
    behind the master tip, by a small random tilt; the tip additionally
    jitters by ``needle_jitter_mm`` per axis.
    """
    master = master or master_needle(cfg)
    d0 = master.direction
    # tilt axes perpendicular to the needle
    e1 = np.cross(d0, UP)
    if np.linalg.norm(e1) < 1e-6:
        e1 = np.cross(d0, [0.0, 1.0, 0.0])
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(d0, e1)
    tilt = np.radians(cfg.needle_tilt_deg) * rng.standard_normal(2)
    R = exp_so3(tilt[0] * e1 + tilt[1] * e2)
    pivot = master.offset - cfg.needle_pivot_mm * d0
    jitter = cfg.needle_jitter_mm * rng.standard_normal(3)
    return Needle(pivot + R @ (master.offset - pivot) + jitter, R @ d0)


def observe_needle(needle: Needle, pose: RigidTransform, cameras, rng=None,
                   noise_px: float = 0.0, angle_noise_deg: float = 0.0) -> tuple:
    """Analytic detector output (tip + angle) with optional Gaussian noise."""
    tip = needle.tip(pose)
    axis = needle.axis(pose)
    out = []
    for c in cameras:
        uv = project(tip, c)
        theta = image_angle(tip, axis, c)
        if rng is not None:
            uv = uv + noise_px * rng.standard_normal(2)
            theta = theta + angle_noise_deg * rng.standard_normal()
        out.append(NeedleObservation(uv, theta))
    return tuple(out)


def needle_scene(cfg: RigConfig, needle: Needle, pose: RigidTransform) -> NeedleScene:
    return NeedleScene(needle.tip(pose), needle.axis(pose), shaft_width=cfg.needle_width_mm)


def calibration_poses(cfg: RigConfig) -> list:
    return generate_grid_poses(cfg.workspace_mm, cfg.grid_divisions,
                               cfg.rot_range_deg, seed=cfg.seed)


def synthesize_dataset(cfg: RigConfig, cameras, needle: Needle, poses,
                       rng: np.random.Generator, noise_px: float) -> CalibrationDataset:
    """Tip observations for each pose; points outside a frame are dropped."""
    samples = []
    for H in poses:
        tip = needle.tip(H)
        obs = []
        for c in cameras:
            uv = project(tip, c) + noise_px * rng.standard_normal(2)
            obs.append(uv if c.contains(uv) else None)
        if any(o is not None for o in obs):
            samples.append(CalibrationSample(H, tuple(obs)))
    return CalibrationDataset(tuple(samples), cfg.workspace_mm, cfg.grid_divisions)


# -- tail / vein --------------------------------------------------------------

def puncture_nominal(cfg: RigConfig) -> np.ndarray:
    """Configured puncture location in the world frame (the home needle tip
    plus ``puncture_offset_mm``)."""
    return cfg.master_offset + np.asarray(cfg.puncture_offset_mm, float)


def random_vein(cfg: RigConfig, rng: np.random.Generator) -> Line3D:
    """Straight vein near the puncture location, roughly along the needle."""
    d0 = cfg.master_direction
    e1 = np.cross(d0, UP)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(d0, e1)
    tilt = np.radians(cfg.vein_tilt_deg) * rng.uniform(-1.0, 1.0, 2)
    direction = exp_so3(tilt[0] * e1 + tilt[1] * e2) @ d0
    shift = cfg.vein_offset_mm * rng.uniform(-1.0, 1.0, 2)
    point = puncture_nominal(cfg) + shift[0] * e1 + shift[1] * e2
    return Line3D(point, direction)


def tail_scene(cfg: RigConfig, vein: Line3D, artifacts=(), artifact_seed=0) -> TailScene:
    tail_axis = Line3D(vein.point - cfg.vein_depth_mm * UP, vein.direction)
    return TailScene(vein, vein_radius=cfg.vein_radius_mm,
                     tail_radius=cfg.tail_radius_mm, tail_axis=tail_axis,
                     artifacts=tuple(artifacts), artifact_seed=artifact_seed)


def vein_aoi(scene: TailScene, c: CameraModel, margin_mm: float = 0.6) -> AoI:
    """Area of interest around the true projected vein.

    Real systems place the AoI by hand or from the jig geometry; the
    simulator derives it from ground truth.
    """
    a, b = projected_vein_line(scene, c)
    w, h = c.image_size
    x0, x1 = int(0.05 * w), int(0.95 * w) - 1
    margin = margin_mm * c.focal_length / c.pose.apply(scene.vein_axis.point)[2]
    ys = [a * x0 + b, a * x1 + b]
    return AoI(x0, x1, int(np.floor(min(ys) - margin)),
               int(np.ceil(max(ys) + margin))).clipped(w, h)


def random_artifacts(cfg: RigConfig, aoi: AoI, rng: np.random.Generator, scale: float) -> list:
    """Dirt blobs and hair strokes scattered over the area of interest."""
    arts = []
    for _ in range(cfg.artifacts_per_image):
        kind = "hair" if rng.random() < 0.5 else "dirt"
        center = (float(rng.uniform(aoi.x_min, aoi.x_max)),
                  float(rng.uniform(aoi.y_min, aoi.y_max)))
        extent = float(rng.uniform(0.2, 0.6) if kind == "hair" else rng.uniform(0.05, 0.15))
        arts.append(ArtifactSpec(kind, center, max(extent * scale, 2.0),
                                 darkness=float(rng.uniform(0.0, 0.1)),
                                 width=2.0))
    return arts


def corrective_pose(q_est, d_est, q_ref, d_ref, home: RigidTransform) -> RigidTransform:
    """Pose putting an estimated needle where the reference needle sits at
    ``home``: twist-free rotation of ``d_est`` onto ``d_ref``, then the
    translation that moves the tip onto the reference tip."""
    R = home.rotation @ rotation_between(d_est, d_ref)
    return RigidTransform(R, home.apply(q_ref) - R @ np.asarray(q_est, float))
