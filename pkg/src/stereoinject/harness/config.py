"""Rig configuration and its plain-text ``key = value`` file format.

Vectors are written as whitespace-separated numbers. Lines starting with
``#`` and trailing ``# ...`` comments are ignored. Unknown keys are errors.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

import numpy as np

from ..alignment import HexapodLimits
from ..calibration import CalibrationResult
from ..errors import ConfigError
from ..geometry import CameraModel, exp_so3
from ..rig import FULL_RESOLUTION, rig_camera


@dataclass(frozen=True)
class RigConfig:
    seed: int = 0

    # cameras
    image_size: tuple = FULL_RESOLUTION
    pixel_pitch_um: float = 7.0
    working_distance_mm: float = 80.0
    vergence_deg: float = 30.0
    # ground truth deviates from the nominal (CAD) rig by these amounts
    camera_rotation_error_deg: float = 0.5
    camera_translation_error_mm: float = 1.0
    camera_focal_error: float = 0.01

    # master needle, in the hexapod moving frame
    needle_offset_mm: tuple = (20.0, -1.5, 12.0)
    needle_direction: tuple = (1.0, 0.0, 0.0)
    needle_pivot_mm: float = 15.0
    needle_width_mm: float = 0.3

    # initial calibration sweep
    workspace_mm: tuple = (10.0, 2.5, 2.5)
    grid_divisions: tuple = (5, 5, 5)
    rot_range_deg: float = 2.0
    calibration_noise_px: float = 0.9
    render_validation_samples: int = 2

    # needle swap
    detection_noise_px: float = 0.5
    angle_noise_deg: float = 0.02
    needle_tilt_deg: float = 0.35
    needle_jitter_mm: float = 0.08

    # tail and vein
    vein_radius_mm: float = 0.15
    tail_radius_mm: float = 1.2
    vein_depth_mm: float = 0.6
    vein_tilt_deg: float = 3.0
    vein_offset_mm: float = 0.3
    puncture_offset_mm: tuple = (2.0, 0.0, 0.0)
    vein_binning: int = 4
    artifacts_per_image: int = 2
    ransac_iterations: int = 200
    ransac_threshold_px: float = 3.0
    ransac_min_inlier_fraction: float = 0.5

    # insertion
    standoff_mm: float = 1.0
    overlap_mm: float = 2.0
    step_mm: float = 0.5
    max_attempts: int = 3
    hexapod_resolution_mm: float = 0.0005
    hexapod_travel_xy_mm: float = 50.0
    hexapod_travel_z_mm: float = 25.0
    hexapod_tilt_deg: float = 15.0
    hexapod_yaw_deg: float = 30.0

    # -- derived ------------------------------------------------------------

    @property
    def pixel_pitch_mm(self) -> float:
        return self.pixel_pitch_um / 1000.0

    @property
    def master_offset(self) -> np.ndarray:
        return np.asarray(self.needle_offset_mm, float)

    @property
    def master_direction(self) -> np.ndarray:
        d = np.asarray(self.needle_direction, float)
        return d / np.linalg.norm(d)

    @property
    def limits(self) -> HexapodLimits:
        return HexapodLimits(self.hexapod_travel_xy_mm, self.hexapod_travel_z_mm,
                             self.hexapod_tilt_deg, self.hexapod_yaw_deg)

    def nominal_cameras(self) -> tuple[CameraModel, CameraModel]:
        kw = dict(working_distance=self.working_distance_mm,
                  vergence_deg=self.vergence_deg,
                  pixel_pitch=self.pixel_pitch_mm,
                  image_size=tuple(int(v) for v in self.image_size))
        target = self.master_offset
        return rig_camera(target, +1, **kw), rig_camera(target, -1, **kw)

    def true_cameras(self) -> tuple[CameraModel, CameraModel]:
        """Ground-truth rig: the nominal rig with seeded mounting errors."""
        rng = np.random.default_rng([self.seed, 0xCA1])
        out = []
        for c in self.nominal_cameras():
            dr = rng.normal(0.0, np.radians(self.camera_rotation_error_deg), 3)
            dt = rng.normal(0.0, self.camera_translation_error_mm, 3)
            df = rng.normal(0.0, self.camera_focal_error)
            out.append(c.replace(focal_length=c.focal_length * (1.0 + df),
                                 rotation=exp_so3(dr) @ c.rotation,
                                 translation=c.translation + dt))
        return tuple(out)

    def initial_guess(self) -> CalibrationResult:
        return CalibrationResult(np.zeros(3), self.nominal_cameras())

    def replace(self, **changes) -> RigConfig:
        return dataclasses.replace(self, **changes)

    # -- text format --------------------------------------------------------

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = " ".join(_fmt(x) for x in v)
            else:
                v = _fmt(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> RigConfig:
        types = {f.name: f for f in fields(cls)}
        defaults = cls()
        kw = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            default = getattr(defaults, key)
            try:
                if isinstance(default, tuple):
                    conv = int if all(isinstance(x, int) for x in default) else float
                    kw[key] = tuple(conv(x) for x in value.split())
                    if len(kw[key]) != len(default):
                        raise ValueError(f"expected {len(default)} values")
                elif isinstance(default, bool):
                    kw[key] = value.lower() in ("1", "true", "yes")
                elif isinstance(default, int):
                    kw[key] = int(value)
                else:
                    kw[key] = float(value)
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
        return cls(**kw)

    @classmethod
    def load(cls, path) -> RigConfig:
        with open(path) as fh:
            return cls.loads(fh.read())


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)

