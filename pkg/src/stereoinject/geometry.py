"""Rigid transforms, pinhole projection and two-view triangulation.

Conventions
-----------
* Points are plain numpy arrays: ``(3,)`` world points in millimetres and
  ``(2,)`` image points ``(u, v)`` in pixels. Pixel centres sit on integer
  coordinates, ``u`` grows rightward and ``v`` downward.
* The world frame is the hexapod base frame.
* A camera maps world to camera coordinates with ``x_c = R x + t`` and
  looks down its own +z axis. There is no distortion term.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import DegeneratePlanes, DegenerateRays, NonPositiveDepth

MIN_DEPTH = 1e-9
MIN_RAY_ANGLE = 1e-4
MIN_DIHEDRAL = 1e-3


def _frozen(a, shape=None) -> np.ndarray:
    arr = np.array(a, dtype=float)
    if shape is not None and arr.shape != shape:
        raise ValueError(f"expected shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite component")
    arr.setflags(write=False)
    return arr


def skew(w) -> np.ndarray:
    x, y, z = w
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def exp_so3(w) -> np.ndarray:
    """Rotation matrix for the axis-angle vector ``w`` (Rodrigues)."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    K = skew(w)
    if theta < 1e-8:
        # second-order series keeps orthonormality to ~1e-16 here
        return np.eye(3) + K + 0.5 * K @ K
    return (np.eye(3) + np.sin(theta) / theta * K
            + (1.0 - np.cos(theta)) / theta**2 * K @ K)


def log_so3(R) -> np.ndarray:
    """Axis-angle vector of a rotation matrix, angle in [0, pi]."""
    R = np.asarray(R, dtype=float)
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-6:
        return 0.5 * v
    if np.pi - theta < 1e-6:
        # near pi the antisymmetric part vanishes; take the axis from R + I
        B = (R + np.eye(3)) / 2.0
        k = int(np.argmax(np.diag(B)))
        axis = B[:, k] / np.sqrt(B[k, k])
        return theta * axis / np.linalg.norm(axis)
    return theta / (2.0 * np.sin(theta)) * v


def rotation_between(a, b) -> np.ndarray:
    """Minimal rotation taking unit vector ``a`` onto unit vector ``b``."""
    a = np.asarray(a, float) / np.linalg.norm(a)
    b = np.asarray(b, float) / np.linalg.norm(b)
    axis = np.cross(a, b)
    s = np.linalg.norm(axis)
    c = float(np.dot(a, b))
    if s < 1e-15:
        if c > 0:
            return np.eye(3)
        # antiparallel: rotate by pi about any axis normal to a
        perp = np.cross(a, [1.0, 0.0, 0.0])
        if np.linalg.norm(perp) < 1e-6:
            perp = np.cross(a, [0.0, 1.0, 0.0])
        return exp_so3(np.pi * perp / np.linalg.norm(perp))
    return exp_so3(axis / s * np.arctan2(s, c))


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """A 6-DoF pose ``p -> R p + t``; used for hexapod poses and scene frames."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = _frozen(self.rotation, (3, 3))
        if (np.abs(R @ R.T - np.eye(3)).max() > 1e-9
                or abs(np.linalg.det(R) - 1.0) > 1e-9):
            raise ValueError("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation",
                           _frozen(self.translation, (3,)))

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls()

    @classmethod
    def from_axis_angle(cls, rvec, translation=(0.0, 0.0, 0.0)) -> RigidTransform:
        H = cls(exp_so3(rvec), translation)
        # keep the generating vector so text records round-trip exactly
        object.__setattr__(H, "_rvec", _frozen(rvec, (3,)))
        return H

    @property
    def axis_angle(self) -> np.ndarray:
        rvec = self.__dict__.get("_rvec")
        return log_so3(self.rotation) if rvec is None else rvec.copy()

    def apply(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        return p @ self.rotation.T + self.translation

    def __matmul__(self, other: RigidTransform) -> RigidTransform:
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def inverse(self) -> RigidTransform:
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def as_matrix(self) -> np.ndarray:
        H = np.eye(4)
        H[:3, :3] = self.rotation
        H[:3, 3] = self.translation
        return H

    def allclose(self, other: RigidTransform, atol=1e-9) -> bool:
        return (np.allclose(self.rotation, other.rotation, atol=atol, rtol=0)
                and np.allclose(self.translation, other.translation, atol=atol, rtol=0))

    def __repr__(self):
        r = np.array2string(self.axis_angle, precision=6)
        t = np.array2string(self.translation, precision=6)
        return f"RigidTransform(axis_angle={r}, translation={t})"


def apply_transform(H: RigidTransform, p) -> np.ndarray:
    return H.apply(p)


@dataclass(frozen=True, eq=False)
class CameraModel:
    """Pinhole camera with a fixed principal point.

    ``rotation``/``translation`` map world points into the camera frame.
    ``image_size`` is ``(width, height)`` in pixels. When ``principal_point``
    is omitted it is placed at the image centre, ``((w-1)/2, (h-1)/2)``.
    """

    focal_length: float
    rotation: np.ndarray
    translation: np.ndarray
    image_size: tuple[int, int]
    principal_point: np.ndarray | None = None

    def __post_init__(self):
        if not (np.isfinite(self.focal_length) and self.focal_length > 0):
            raise ValueError("focal_length must be positive")
        object.__setattr__(self, "focal_length", float(self.focal_length))
        R = _frozen(self.rotation, (3, 3))
        if (np.abs(R @ R.T - np.eye(3)).max() > 1e-9
                or abs(np.linalg.det(R) - 1.0) > 1e-9):
            raise ValueError("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", _frozen(self.translation, (3,)))
        w, h = (int(s) for s in self.image_size)
        if w < 1 or h < 1:
            raise ValueError("image size must be positive")
        object.__setattr__(self, "image_size", (w, h))
        if self.principal_point is None:
            pp = ((w - 1) / 2.0, (h - 1) / 2.0)
        else:
            pp = self.principal_point
        object.__setattr__(self, "principal_point", _frozen(pp, (2,)))

    @classmethod
    def look_at(cls, center, target, up, focal_length, image_size) -> CameraModel:
        """Camera at ``center`` whose optical axis passes through ``target``.

        The image ``v`` axis points along ``-up`` projected into the image
        plane, so ``up`` appears upward in the picture.
        """
        center = np.asarray(center, float)
        z = np.asarray(target, float) - center
        z /= np.linalg.norm(z)
        y = -(np.asarray(up, float) - np.dot(up, z) * z)
        y /= np.linalg.norm(y)
        x = np.cross(y, z)
        R = np.vstack([x, y, z])
        return cls(focal_length, R, -R @ center, image_size)

    @property
    def center(self) -> np.ndarray:
        """Optical centre in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def pose(self) -> RigidTransform:
        """World-to-camera transform."""
        return RigidTransform(self.rotation, self.translation)

    @property
    def K(self) -> np.ndarray:
        f = self.focal_length
        cx, cy = self.principal_point
        return np.array([[f, 0.0, cx], [0.0, f, cy], [0.0, 0.0, 1.0]])

    def replace(self, **changes) -> CameraModel:
        kw = dict(focal_length=self.focal_length, rotation=self.rotation,
                  translation=self.translation, image_size=self.image_size,
                  principal_point=self.principal_point)
        if "image_size" in changes and "principal_point" not in changes:
            kw["principal_point"] = None
        kw.update(changes)
        return CameraModel(**kw)

    def binned(self, factor: int) -> CameraModel:
        """The same camera read out with ``factor`` x ``factor`` pixel binning."""
        w, h = self.image_size
        cx, cy = self.principal_point
        # bin k covers full-res pixels k*factor .. k*factor+factor-1
        shift = (factor - 1) / 2.0
        return self.replace(
            focal_length=self.focal_length / factor,
            image_size=(w // factor, h // factor),
            principal_point=((cx - shift) / factor, (cy - shift) / factor))

    def contains(self, uv, margin=0.0) -> bool:
        u, v = uv
        w, h = self.image_size
        return (margin - 0.5 <= u <= w - 0.5 - margin
                and margin - 0.5 <= v <= h - 0.5 - margin)


def to_camera(p, c: CameraModel) -> np.ndarray:
    return np.asarray(p, float) @ c.rotation.T + c.translation


def project(p, c: CameraModel) -> np.ndarray:
    """Project world point(s) ``p`` (shape ``(..., 3)``) to pixels."""
    pc = to_camera(p, c)
    z = pc[..., 2]
    if np.any(z <= MIN_DEPTH):
        raise NonPositiveDepth(f"camera-frame depth {np.min(z):.3g} mm <= 0")
    uv = c.focal_length * pc[..., :2] / z[..., None]
    return uv + c.principal_point


def backproject(uv, c: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    """Ray ``(origin, unit direction)`` in world coordinates through pixel ``uv``."""
    u, v = np.asarray(uv, float) - c.principal_point
    d_cam = np.array([u / c.focal_length, v / c.focal_length, 1.0])
    d = c.rotation.T @ d_cam
    return c.center, d / np.linalg.norm(d)


def triangulate_point(p1, c1: CameraModel, p2, c2: CameraModel) -> np.ndarray:
    """Midpoint of the common perpendicular between the two viewing rays."""
    o1, d1 = backproject(p1, c1)
    o2, d2 = backproject(p2, c2)
    cross = np.cross(d1, d2)
    sin_angle = np.linalg.norm(cross)
    if np.arcsin(min(sin_angle, 1.0)) < MIN_RAY_ANGLE:
        raise DegenerateRays(f"rays meet at {sin_angle:.2e} rad")
    # solve o1 + s d1 - (o2 + t d2) orthogonal to both directions
    w = o1 - o2
    b = np.dot(d1, d2)
    denom = 1.0 - b * b
    s = (b * np.dot(d2, w) - np.dot(d1, w)) / denom
    t = (np.dot(d2, w) - b * np.dot(d1, w)) / denom
    return 0.5 * ((o1 + s * d1) + (o2 + t * d2))


@dataclass(frozen=True, eq=False)
class Line3D:
    point: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.direction, float)
        n = np.linalg.norm(d)
        if not n > 0:
            raise ValueError("zero direction")
        object.__setattr__(self, "point", _frozen(self.point, (3,)))
        object.__setattr__(self, "direction", _frozen(d / n, (3,)))

    def at(self, s) -> np.ndarray:
        return self.point + np.multiply.outer(s, self.direction)

    def closest_point(self, p) -> np.ndarray:
        p = np.asarray(p, float)
        s = (p - self.point) @ self.direction
        return self.point + np.multiply.outer(s, self.direction)

    def distance(self, p) -> np.ndarray:
        p = np.asarray(p, float)
        return np.linalg.norm(p - self.closest_point(p), axis=-1)

    def transformed(self, H: RigidTransform) -> Line3D:
        return Line3D(H.apply(self.point), H.rotation @ self.direction)


def backprojection_plane(line, c: CameraModel) -> tuple[np.ndarray, float]:
    """World plane ``n . x = d`` (unit ``n``) through the camera centre and the
    image line ``v = a u + b``."""
    l_img = np.array([line.a, -1.0, line.b])
    n_cam = c.K.T @ l_img
    n = c.rotation.T @ n_cam
    d = -float(n_cam @ c.translation)
    scale = np.linalg.norm(n)
    return n / scale, d / scale


def triangulate_line(l1, c1: CameraModel, l2, c2: CameraModel) -> Line3D:
    """Intersect the back-projection planes of two image lines.

    ``l1``/``l2`` are any objects with slope ``a`` and intercept ``b`` of
    ``v = a u + b``. The returned direction is signed so that its image in
    the first camera runs toward increasing ``u``; the anchor point is the
    one closest to the midpoint of the two camera centres.
    """
    n1, d1 = backprojection_plane(l1, c1)
    n2, d2 = backprojection_plane(l2, c2)
    direction = np.cross(n1, n2)
    s = np.linalg.norm(direction)
    if np.arcsin(min(s, 1.0)) < MIN_DIHEDRAL:
        raise DegeneratePlanes(f"planes meet at {s:.2e} rad")
    direction /= s
    ref = 0.5 * (c1.center + c2.center)
    A = np.vstack([n1, n2, direction])
    point = np.linalg.solve(A, [d1, d2, direction @ ref])
    # orientation: image of the direction in camera 1 heads toward +u
    pc = c1.rotation @ point + c1.translation
    dc = c1.rotation @ direction
    du = (dc[0] * pc[2] - pc[0] * dc[2])
    if du < 0:
        direction = -direction
    return Line3D(point, direction)


class ImageLine(NamedTuple):
    """Image line ``v = a u + b``."""

    a: float
    b: float

    @classmethod
    def through(cls, uv, theta_deg) -> ImageLine:
        a = float(np.tan(np.radians(theta_deg)))
        return cls(a, float(uv[1] - a * uv[0]))


def wrap_angle(theta_deg: float) -> float:
    """Fold a line angle into (-90, 90] degrees."""
    theta = float(theta_deg) % 180.0
    return theta - 180.0 if theta > 90.0 else theta


def image_angle(p, direction, c: CameraModel) -> float:
    """Image-plane angle in degrees of a 3D direction through ``p``."""
    pc = to_camera(p, c)
    dc = c.rotation @ np.asarray(direction, float)
    du = dc[0] * pc[2] - pc[0] * dc[2]
    dv = dc[1] * pc[2] - pc[1] * dc[2]
    return wrap_angle(np.degrees(np.arctan2(dv, du)))
