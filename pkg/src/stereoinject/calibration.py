"""Two-stage visuomotor calibration.

Initial calibration jointly estimates the needle-tip offset ``q`` (in the
hexapod's moving frame) and both cameras from a grid sweep, minimising

    sum_i sum_j || p_ij - project(H_i q | c_j) ||^2

with Levenberg-Marquardt. Camera rotations are updated through left-multiplied
axis-angle increments. Needle calibration then re-estimates ``q`` for a new
injector from one stereo observation at the home pose with the cameras frozen.
"""
from __future__ import annotations

import io
import itertools
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .detection import NeedleObservation
from .errors import DegenerateDataset, NotConverged
from .geometry import (CameraModel, ImageLine, RigidTransform, exp_so3, image_angle,
                       project, skew, to_camera, triangulate_line,
                       triangulate_point)

NEEDLE_OFFSET_BOUND_MM = 100.0
PARAMS_PER_CAMERA = 7  # focal length, rotation increment, translation


def check_needle_offset(q, bound=NEEDLE_OFFSET_BOUND_MM) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape != (3,) or not np.all(np.isfinite(q)):
        raise ValueError(f"needle offset must be three finite values, got {q}")
    if np.linalg.norm(q) >= bound:
        raise ValueError(f"needle offset |q| = {np.linalg.norm(q):.1f} mm exceeds {bound} mm")
    return q


@dataclass(frozen=True, eq=False)
class CalibrationSample:
    hexapod_pose: RigidTransform
    observations: tuple  # (Point2 | None, Point2 | None)

    def __post_init__(self):
        obs = tuple(None if o is None else np.asarray(o, float)
                    for o in self.observations)
        if len(obs) != 2:
            raise ValueError("expected one observation slot per camera")
        if all(o is None for o in obs):
            raise ValueError("sample without any observation")
        object.__setattr__(self, "observations", obs)


@dataclass(frozen=True, eq=False)
class CalibrationDataset:
    samples: tuple
    workspace: tuple = (10.0, 2.5, 2.5)
    grid_divisions: tuple = (5, 5, 5)

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        keys = {(tuple(np.round(s.hexapod_pose.translation, 12)),
                 tuple(np.round(s.hexapod_pose.rotation.ravel(), 12)))
                for s in self.samples}
        if len(keys) != len(self.samples):
            raise ValueError("dataset contains repeated hexapod poses")

    def __len__(self):
        return len(self.samples)

    def observation_arrays(self):
        """Flattened observations: sample index, camera index, pixel."""
        idx, cam, uv = [], [], []
        for i, s in enumerate(self.samples):
            for j, o in enumerate(s.observations):
                if o is not None:
                    idx.append(i)
                    cam.append(j)
                    uv.append(o)
        return np.array(idx, int), np.array(cam, int), np.array(uv, float).reshape(-1, 2)

    def dumps(self) -> str:
        out = io.StringIO()
        out.write("# stereoinject calibration dataset v1\n")
        out.write("# workspace_mm %s\n" % " ".join(repr(float(v)) for v in self.workspace))
        out.write("# grid_divisions %s\n" % " ".join(str(int(v)) for v in self.grid_divisions))
        out.write("# fields: index tx ty tz rx ry rz u1 v1 u2 v2"
                  " (mm, axis-angle rad, px; nan = not observed)\n")
        for i, s in enumerate(self.samples):
            H = s.hexapod_pose
            vals = list(H.translation) + list(H.axis_angle)
            for o in s.observations:
                vals += [math.nan, math.nan] if o is None else list(o)
            out.write(f"{i} " + " ".join(repr(float(v)) for v in vals) + "\n")
        return out.getvalue()

    @classmethod
    def loads(cls, text: str) -> CalibrationDataset:
        workspace, divisions, samples = (10.0, 2.5, 2.5), (5, 5, 5), []
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if parts and parts[0] == "workspace_mm":
                    workspace = tuple(float(v) for v in parts[1:4])
                elif parts and parts[0] == "grid_divisions":
                    divisions = tuple(int(v) for v in parts[1:4])
                continue
            vals = [float(v) for v in line.split()[1:]]
            if len(vals) != 10:
                raise ValueError(f"malformed dataset record: {line!r}")
            pose = RigidTransform.from_axis_angle(vals[3:6], vals[0:3])
            obs = []
            for k in (6, 8):
                uv = vals[k:k + 2]
                obs.append(None if any(math.isnan(v) for v in uv) else np.array(uv))
            samples.append(CalibrationSample(pose, tuple(obs)))
        return cls(tuple(samples), workspace, divisions)


@dataclass(frozen=True)
class ResidualStats:
    mean: float
    rms: float
    max: float
    per_camera_mean: tuple
    count: int = 0


@dataclass(frozen=True, eq=False)
class CalibrationResult:
    needle_offset: np.ndarray
    cameras: tuple
    residual_stats: ResidualStats | None = None
    iterations: int = 0
    converged: bool = False
    gradient_norm: float = math.nan
    cost_history: tuple = field(default=(), repr=False)

    def dumps(self) -> str:
        lines = ["# stereoinject calibration result v1"]
        q = self.needle_offset
        lines.append("needle_offset = " + " ".join(repr(float(v)) for v in q))
        for j, c in enumerate(self.cameras, start=1):
            lines.append(f"camera{j}.focal_length = {c.focal_length!r}")
            lines.append(f"camera{j}.principal_point = "
                         + " ".join(repr(float(v)) for v in c.principal_point))
            lines.append(f"camera{j}.rotation = "
                         + " ".join(repr(float(v)) for v in c.rotation.ravel()))
            lines.append(f"camera{j}.translation = "
                         + " ".join(repr(float(v)) for v in c.translation))
            lines.append(f"camera{j}.image_size = {c.image_size[0]} {c.image_size[1]}")
        lines.append(f"iterations = {self.iterations}")
        lines.append(f"converged = {str(self.converged).lower()}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> CalibrationResult:
        kv = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                k, v = (s.strip() for s in line.split("=", 1))
                kv[k] = v

        def floats(key):
            return np.array([float(x) for x in kv[key].split()])

        cams = []
        for j in (1, 2):
            w, h = (int(x) for x in kv[f"camera{j}.image_size"].split())
            cams.append(CameraModel(float(kv[f"camera{j}.focal_length"]),
                                    floats(f"camera{j}.rotation").reshape(3, 3),
                                    floats(f"camera{j}.translation"), (w, h),
                                    floats(f"camera{j}.principal_point")))
        return cls(floats("needle_offset"), tuple(cams),
                   iterations=int(kv.get("iterations", 0)),
                   converged=kv.get("converged", "false") == "true")


def euler_rotation(rx, ry, rz) -> np.ndarray:
    """``Rz @ Ry @ Rx`` for angles in radians."""
    return (exp_so3([0.0, 0.0, rz]) @ exp_so3([0.0, ry, 0.0])
            @ exp_so3([rx, 0.0, 0.0]))


def generate_grid_poses(workspace=(10.0, 2.5, 2.5), divisions=(5, 5, 5),
                        rot_range=2.0, seed=0, center=(0.0, 0.0, 0.0)) -> list:
    """Hexapod poses on a regular grid with seeded random small rotations.

    Translations are the grid nodes of a box of size ``workspace`` centred on
    ``center`` (x index slowest). Each node gets rotation angles about x, y,
    z drawn uniformly from +/- ``rot_range`` degrees.
    """
    if any(int(d) < 2 for d in divisions):
        raise ValueError("need at least two divisions per axis")
    if rot_range < 0:
        raise ValueError("rot_range must be non-negative")
    axes = [np.linspace(-w / 2.0, w / 2.0, int(n)) + c
            for w, n, c in zip(workspace, divisions, center)]
    nodes = list(itertools.product(*axes))
    rng = np.random.default_rng(seed)
    angles = np.radians(rng.uniform(-rot_range, rot_range, size=(len(nodes), 3)))
    poses = []
    for node, ang in zip(nodes, angles):
        R = euler_rotation(*ang) if rot_range > 0 else np.eye(3)
        poses.append(RigidTransform(R, node))
    return poses


# -- least-squares model -----------------------------------------------------

class _Problem:
    """Residuals and analytic Jacobian of the joint calibration cost."""

    def __init__(self, dataset: CalibrationDataset, optimize_cameras=True):
        self.idx, self.cam, self.uv = dataset.observation_arrays()
        self.R_hex = np.array([s.hexapod_pose.rotation for s in dataset.samples])[self.idx]
        self.t_hex = np.array([s.hexapod_pose.translation for s in dataset.samples])[self.idx]
        self.optimize_cameras = optimize_cameras
        self.n_params = 3 + (2 * PARAMS_PER_CAMERA if optimize_cameras else 0)

    def residuals(self, q, cameras) -> np.ndarray:
        X = np.einsum("nij,j->ni", self.R_hex, q) + self.t_hex
        pred = np.empty_like(self.uv)
        for j, c in enumerate(cameras):
            m = self.cam == j
            if m.any():
                pred[m] = project(X[m], c)
        return (pred - self.uv).ravel()

    def jacobian(self, q, cameras) -> np.ndarray:
        n = len(self.uv)
        J = np.zeros((2 * n, self.n_params))
        X = np.einsum("nij,j->ni", self.R_hex, q) + self.t_hex
        for j, c in enumerate(cameras):
            m = np.flatnonzero(self.cam == j)
            if len(m) == 0:
                continue
            RX = X[m] @ c.rotation.T
            pc = RX + c.translation
            x, y, z = pc.T
            f = c.focal_length
            P = np.zeros((len(m), 2, 3))
            P[:, 0, 0] = f / z
            P[:, 1, 1] = f / z
            P[:, 0, 2] = -f * x / z**2
            P[:, 1, 2] = -f * y / z**2
            rows = np.stack([2 * m, 2 * m + 1], axis=1)
            dq = P @ c.rotation @ self.R_hex[m]
            J[rows, 0:3] = dq
            if self.optimize_cameras:
                base = 3 + PARAMS_PER_CAMERA * j
                J[rows, base] = np.stack([x / z, y / z], axis=1)
                S = np.array([-skew(v) for v in RX])
                J[rows, base + 1:base + 4] = P @ S
                J[rows, base + 4:base + 7] = P
        return J

    @staticmethod
    def apply_step(q, cameras, dx, optimize_cameras=True):
        q_new = q + dx[0:3]
        if not optimize_cameras:
            return q_new, cameras
        new = []
        for j, c in enumerate(cameras):
            d = dx[3 + PARAMS_PER_CAMERA * j:3 + PARAMS_PER_CAMERA * (j + 1)]
            f = c.focal_length + d[0]
            if not f > 0:
                return None
            R = exp_so3(d[1:4]) @ c.rotation
            # re-orthonormalise to keep rounding drift out of the invariant
            U, _, Vt = np.linalg.svd(R)
            new.append(c.replace(focal_length=f, rotation=U @ Vt,
                                 translation=c.translation + d[4:7]))
        return q_new, tuple(new)


def check_identifiable(dataset: CalibrationDataset, min_points=6) -> None:
    rots = [s.hexapod_pose.rotation for s in dataset.samples]
    spread = max(np.linalg.norm(R @ rots[0].T - np.eye(3)) for R in rots)
    if spread < 1e-9:
        raise DegenerateDataset(
            "all hexapod rotations are identical; the needle offset is "
            "confounded with the camera translations")
    for j in (0, 1):
        t = np.array([s.hexapod_pose.translation for s in dataset.samples
                      if s.observations[j] is not None])
        if len(t) < min_points:
            raise DegenerateDataset(f"camera {j + 1} has {len(t)} observations, "
                                    f"need {min_points}")
        sv = np.linalg.svd(t - t.mean(axis=0), compute_uv=False)
        if sv[-1] < 1e-9 * max(sv[0], 1e-12):
            raise DegenerateDataset(f"camera {j + 1} observations are coplanar")


def solve_initial(dataset: CalibrationDataset, init: CalibrationResult,
                  optimize_cameras: bool = True, max_iterations: int = 200,
                  ftol: float = 1e-12, gtol: float = 1e-10) -> CalibrationResult:
    """Levenberg-Marquardt solve for the needle offset and both cameras.

    With ``optimize_cameras=False`` only ``q`` is estimated and the
    identifiability guard is skipped (one stereo sample suffices).
    Converges when an accepted step lowers the cost by less than ``ftol``
    relative, when the gradient norm drops below ``gtol``, or when the cost is
    at the floating-point floor and no damping can lower it further.
    """
    if optimize_cameras:
        check_identifiable(dataset)
    prob = _Problem(dataset, optimize_cameras)
    q = np.array(init.needle_offset, float)
    cams = tuple(init.cameras)
    r = prob.residuals(q, cams)
    cost = float(r @ r)
    history = [cost]
    lam = 1e-3
    converged = False
    it = 0
    grad_norm = math.inf
    while it < max_iterations:
        it += 1
        J = prob.jacobian(q, cams)
        g = J.T @ r
        grad_norm = float(np.linalg.norm(g))
        if grad_norm < gtol:
            converged = True
            break
        A = J.T @ J
        diag = np.maximum(np.diag(A), 1e-12 * max(np.diag(A).max(), 1e-300))
        accepted = False
        while lam < 1e16:
            try:
                dx = np.linalg.solve(A + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            trial = prob.apply_step(q, cams, dx, optimize_cameras)
            if trial is not None:
                r_new = prob.residuals(*trial)
                cost_new = float(r_new @ r_new)
                if cost_new < cost:
                    accepted = True
                    break
            lam *= 10.0
        if not accepted:
            # no damped step lowers the cost: stationary to machine precision
            converged = True
            break
        q, cams = trial
        decrease = cost - cost_new
        r, cost = r_new, cost_new
        history.append(cost)
        lam = max(lam / 10.0, 1e-12)
        if decrease <= ftol * max(cost + decrease, 1e-300):
            converged = True
            break
    if not converged:
        raise NotConverged(f"no convergence after {max_iterations} iterations "
                           f"(cost {cost:.3e}, |g| {grad_norm:.3e})")
    result = CalibrationResult(q, cams, iterations=it, converged=True,
                               gradient_norm=grad_norm, cost_history=tuple(history))
    return replace(result, residual_stats=reprojection_stats(dataset, result))


def reprojection_stats(dataset: CalibrationDataset, result: CalibrationResult) -> ResidualStats:
    prob = _Problem(dataset, optimize_cameras=False)
    r = prob.residuals(np.asarray(result.needle_offset, float), result.cameras)
    norms = np.linalg.norm(r.reshape(-1, 2), axis=1)
    per_cam = tuple(float(norms[prob.cam == j].mean()) if np.any(prob.cam == j)
                    else math.nan for j in (0, 1))
    return ResidualStats(mean=float(norms.mean()),
                         rms=float(np.sqrt(np.mean(norms**2))),
                         max=float(norms.max()), per_camera_mean=per_cam,
                         count=len(norms))


def calibration_jacobian(dataset, q, cameras, optimize_cameras=True) -> np.ndarray:
    """Analytic Jacobian of the stacked residuals (exposed for checks)."""
    return _Problem(dataset, optimize_cameras).jacobian(np.asarray(q, float), cameras)


def calibration_residuals(dataset, q, cameras) -> np.ndarray:
    return _Problem(dataset, False).residuals(np.asarray(q, float), cameras)


def perturb_parameters(q, cameras, dx):
    """Apply a parameter increment in the solver's own parameterisation."""
    return _Problem.apply_step(np.asarray(q, float), cameras, np.asarray(dx, float))


def solve_needle(obs1: NeedleObservation, obs2: NeedleObservation,
                 c1: CameraModel, c2: CameraModel,
                 home_pose: RigidTransform) -> np.ndarray:
    """Needle-tip offset from one stereo observation at the home pose."""
    tip_world = triangulate_point(obs1.tip, c1, obs2.tip, c2)
    return home_pose.inverse().apply(tip_world)


def solve_needle_axis(obs1: NeedleObservation, obs2: NeedleObservation,
                      c1: CameraModel, c2: CameraModel,
                      home_pose: RigidTransform) -> np.ndarray:
    """Needle direction in the moving frame from the two image angles.

    Image angles carry no sign, so neither does the result: it runs toward
    increasing u in camera 1. Callers orient it against a known reference
    (e.g. the master needle direction).
    """
    line = triangulate_line(ImageLine.through(obs1.tip, obs1.theta), c1,
                            ImageLine.through(obs2.tip, obs2.theta), c2)
    return home_pose.rotation.T @ line.direction


def observe_tip(tip_world, cameras) -> tuple:
    """Noise-free pixel observations of a world point in both cameras."""
    return tuple(project(tip_world, c) for c in cameras)


def needle_observations(tip_world, direction_world, cameras) -> tuple:
    """Noise-free tip and angle observations of a needle in both cameras."""
    return tuple(NeedleObservation(project(tip_world, c),
                                   image_angle(tip_world, direction_world, c))
                 for c in cameras)


def camera_depths(points, c: CameraModel) -> np.ndarray:
    return to_camera(points, c)[..., 2]
