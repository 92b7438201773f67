"""Nominal stereo rig geometry and scale constants.

The two cameras sit in the world y-z plane at +/- ``vergence`` from the
vertical and converge on a target point, so the world x axis (the needle and
vein direction) runs left to right in both images. Focal length is chosen so
that one pixel covers ``pixel_pitch`` millimetres at the target depth.
"""
from __future__ import annotations

import numpy as np

from .geometry import CameraModel

PIXEL_PITCH_MM = 0.007
FULL_RESOLUTION = (3088, 2076)
WORKING_DISTANCE_MM = 80.0
VERGENCE_DEG = 30.0
VEIN_DIAMETER_MM = 0.3


def focal_for_pitch(working_distance: float, pixel_pitch: float) -> float:
    return working_distance / pixel_pitch


def rig_camera(target, side: int, working_distance=WORKING_DISTANCE_MM,
               vergence_deg=VERGENCE_DEG, pixel_pitch=PIXEL_PITCH_MM,
               image_size=FULL_RESOLUTION) -> CameraModel:
    """One rig camera; ``side`` is +1 (camera 1, "upper") or -1 ("lower")."""
    a = np.radians(vergence_deg)
    offset = working_distance * np.array([0.0, side * np.sin(a), np.cos(a)])
    center = np.asarray(target, float) + offset
    optical = -offset / working_distance
    up = np.cross([1.0, 0.0, 0.0], optical)
    return CameraModel.look_at(center, target, up,
                               focal_for_pitch(working_distance, pixel_pitch),
                               image_size)


def stereo_rig(target=(0.0, 0.0, 0.0), **kw) -> tuple[CameraModel, CameraModel]:
    return rig_camera(target, +1, **kw), rig_camera(target, -1, **kw)
