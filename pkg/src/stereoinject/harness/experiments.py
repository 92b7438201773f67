"""Simulator-backed sessions: initial calibration, needle swaps, insertions."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial

import numpy as np

from ..alignment import insertion_trajectory, plan_alignment
from ..calibration import (CalibrationDataset, CalibrationResult, solve_initial,
                           solve_needle, solve_needle_axis)
from ..detection import RansacParams, detect_needle, detect_vein
from ..errors import StereoInjectError
from ..geometry import Line3D, RigidTransform, project, triangulate_line
from ..imaging import render_needle_silhouette, render_tail
from . import simulator as sim
from .config import RigConfig

log = logging.getLogger(__name__)

HOME = RigidTransform.identity()


def child_rng(cfg: RigConfig, *keys) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, *keys])


# -- initial calibration ------------------------------------------------------

@dataclass
class InitialSession:
    result: CalibrationResult
    dataset: CalibrationDataset
    truth_offset: np.ndarray
    truth_cameras: tuple
    render_check: list = field(default_factory=list)

    def summary(self) -> dict:
        s = self.result.residual_stats
        q = self.result.needle_offset
        return {
            "samples": len(self.dataset),
            "observations": s.count,
            "iterations": self.result.iterations,
            "converged": self.result.converged,
            "mean_px": s.mean,
            "rms_px": s.rms,
            "max_px": s.max,
            "camera1_mean_px": s.per_camera_mean[0],
            "camera2_mean_px": s.per_camera_mean[1],
            "q_x_mm": q[0], "q_y_mm": q[1], "q_z_mm": q[2],
            "q_error_mm": float(np.linalg.norm(q - self.truth_offset)),
            "render_check_max_px": max((r["error_px"] for r in self.render_check),
                                       default=math.nan),
        }


def render_check(cfg: RigConfig, dataset: CalibrationDataset, cameras, needle,
                 count: int) -> list:
    """Slow-path validation: render silhouettes for a few samples, run the
    needle detector, and compare with the analytic projection."""
    if count <= 0:
        return []
    picks = np.linspace(0, len(dataset) - 1, count).round().astype(int)
    rows = []
    for i in picks:
        H = dataset.samples[int(i)].hexapod_pose
        scene = sim.needle_scene(cfg, needle, H)
        for j, c in enumerate(cameras):
            truth = project(scene.tip, c)
            if not c.contains(truth, margin=20):
                continue
            obs = detect_needle(render_needle_silhouette(scene, c))
            rows.append({"sample": int(i), "camera": j + 1,
                         "error_px": float(np.linalg.norm(obs.tip - truth))})
    return rows


def run_initial_session(cfg: RigConfig, render_samples: int | None = None) -> InitialSession:
    truth = cfg.true_cameras()
    needle = sim.master_needle(cfg)
    poses = sim.calibration_poses(cfg)
    dataset = sim.synthesize_dataset(cfg, truth, needle, poses,
                                     child_rng(cfg, 1), cfg.calibration_noise_px)
    result = solve_initial(dataset, cfg.initial_guess())
    n = cfg.render_validation_samples if render_samples is None else render_samples
    checks = render_check(cfg, dataset, truth, needle, n)
    log.info("initial calibration: %d samples, mean residual %.4f px",
             len(dataset), result.residual_stats.mean)
    return InitialSession(result, dataset, needle.offset, truth, checks)


# -- needle variance (needle swap experiment) ---------------------------------

@dataclass
class NeedleVarianceReport:
    """Image-space tip error (px) and angle error (deg) of each new needle
    relative to the master, before ("init") and after ("comp") needle
    calibration plus the corrective move."""

    rows: list
    columns: tuple = ("cam1_p_init", "cam1_theta_init", "cam2_p_init", "cam2_theta_init",
                      "cam1_p_comp", "cam1_theta_comp", "cam2_p_comp", "cam2_theta_comp")

    @property
    def rms(self) -> dict:
        return {k: float(np.sqrt(np.mean([r[k] ** 2 for r in self.rows])))
                for k in self.columns}


def _needle_errors(obs, ref) -> list:
    out = []
    for o, r in zip(obs, ref):
        out += [float(np.linalg.norm(o.tip - r.tip)), float(o.theta - r.theta)]
    return out


def run_needle_variance(cfg: RigConfig, n_needles: int = 5,
                        calibration: CalibrationResult | None = None) -> NeedleVarianceReport:
    truth = cfg.true_cameras()
    if calibration is None:
        calibration = run_initial_session(cfg, render_samples=0).result
    cams = calibration.cameras
    master = sim.master_needle(cfg)
    rng = child_rng(cfg, 2)

    def measure(needle, pose):
        return sim.observe_needle(needle, pose, truth, rng, cfg.detection_noise_px,
                                  cfg.angle_noise_deg)

    ref = measure(master, HOME)
    d_ref = _oriented(solve_needle_axis(*ref, *cams, HOME), master.direction)
    rows = []
    for k in range(1, n_needles + 1):
        needle = sim.perturb_needle(cfg, rng, master)
        init = measure(needle, HOME)
        q_est = solve_needle(*init, *cams, HOME)
        d_est = _oriented(solve_needle_axis(*init, *cams, HOME), master.direction)
        pose = sim.corrective_pose(q_est, d_est, calibration.needle_offset, d_ref, HOME)
        comp = measure(needle, pose)
        vals = _needle_errors(init, ref) + _needle_errors(comp, ref)
        rows.append(dict(needle=k, **dict(zip(NeedleVarianceReport.columns, vals))))
    return NeedleVarianceReport(rows)


def _oriented(d, reference) -> np.ndarray:
    return d if d @ reference >= 0 else -d


# -- end-to-end insertion sessions -----------------------------------------------

@dataclass
class SessionOutcome:
    trial: int
    attempt: int
    classification: str  # hit | shallow | deep | failed
    distance_mm: float
    budget_mm: float = math.nan
    budget_ok: bool = True
    detail: str = ""

    def as_record(self) -> dict:
        return {"trial": self.trial, "attempt": self.attempt,
                "classification": self.classification,
                "distance_mm": self.distance_mm, "budget_mm": self.budget_mm,
                "budget_ok": self.budget_ok, "detail": self.detail}


def summarize_outcomes(outcomes, trials: int, max_attempts: int) -> dict:
    """Per-attempt bookkeeping with the columns of an in-vivo results table."""
    rows = []
    for k in range(1, max_attempts + 1):
        at = [o for o in outcomes if o.attempt == k and o.classification != "failed"]
        hits = sum(o.classification == "hit" for o in at)
        rows.append({"attempt": k, "punctures": len(at), "successes": hits,
                     "ratio_pct": 100.0 * hits / len(at) if at else math.nan})
    punct = sum(r["punctures"] for r in rows)
    succ = sum(r["successes"] for r in rows)
    first = [o for o in outcomes if o.attempt == 1]
    return {
        "rows": rows,
        "total": {"punctures": punct, "successes": succ,
                  "ratio_pct": 100.0 * succ / punct if punct else math.nan},
        "trials": trials,
        "first_attempt_hit_rate": (sum(o.classification == "hit" for o in first) / trials
                                   if trials else math.nan),
        "subjects_succeeded": len({o.trial for o in outcomes if o.classification == "hit"}),
        "failed": sum(o.classification == "failed" for o in outcomes),
        "budget_violations": sum(not o.budget_ok for o in outcomes),
    }


def _quantize(pose: RigidTransform, res: float) -> RigidTransform:
    if res <= 0:
        return pose
    return RigidTransform(pose.rotation, np.round(pose.translation / res) * res)


def run_attempt(cfg: RigConfig, calibration: CalibrationResult, truth, vein: Line3D,
                rng: np.random.Generator, trial: int, attempt: int) -> SessionOutcome:
    """One needle swap, vein detection, alignment and insertion."""
    master = sim.master_needle(cfg)
    needle = sim.perturb_needle(cfg, rng, master)
    cams = calibration.cameras

    # needle calibration at home
    obs = sim.observe_needle(needle, HOME, truth, rng, cfg.detection_noise_px,
                             cfg.angle_noise_deg)
    q_est = solve_needle(*obs, *cams, HOME)
    d_est = _oriented(solve_needle_axis(*obs, *cams, HOME), master.direction)

    # vein in both (binned) cameras
    k = cfg.vein_binning
    lines = []
    for j, (c_true, c_cal) in enumerate(zip(truth, cams)):
        cb = c_true.binned(k)
        clean = sim.tail_scene(cfg, vein)
        aoi = sim.vein_aoi(clean, cb)
        scale = cb.focal_length / cb.pose.apply(vein.point)[2]
        arts = sim.random_artifacts(cfg, aoi, rng, scale)
        scene = sim.tail_scene(cfg, vein, arts, artifact_seed=int(rng.integers(2**31)))
        img = render_tail(scene, cb)
        params = RansacParams(cfg.ransac_iterations, cfg.ransac_threshold_px,
                              cfg.ransac_min_inlier_fraction, seed=int(rng.integers(2**31)))
        lines.append((detect_vein(img, aoi, params), c_cal.binned(k)))
    vein_est = triangulate_line(lines[0][0], lines[0][1], lines[1][0], lines[1][1])

    tip_home = HOME.apply(q_est)
    plan = plan_alignment(Line3D(tip_home, HOME.rotation @ d_est), tip_home, vein_est,
                          q_est, HOME, puncture=sim.puncture_nominal(cfg),
                          standoff=cfg.standoff_mm, limits=cfg.limits)
    traj = insertion_trajectory(plan, overlap=cfg.overlap_mm, step=cfg.step_mm)
    final_cmd = traj.waypoints[-1]
    final = _quantize(final_cmd, cfg.hexapod_resolution_mm)
    tip = final.apply(needle.offset)

    foot = vein.closest_point(tip)
    offset = tip - foot
    dist = float(np.linalg.norm(offset))
    if dist <= cfg.vein_radius_mm:
        cls = "hit"
    else:
        # shallow: tip left between vein and skin (toward the cameras)
        cls = "shallow" if offset @ sim.UP > 0 else "deep"

    planned_tip = final_cmd.apply(q_est)
    budget = (float(np.linalg.norm(needle.offset - q_est))
              + float(vein_est.distance(planned_tip))
              + float(vein.distance(vein_est.closest_point(planned_tip)))
              + float(np.linalg.norm(final.translation - final_cmd.translation)))
    return SessionOutcome(trial, attempt, cls, dist, budget, dist <= budget + 1e-12)


def _run_trial(cfg: RigConfig, calibration: CalibrationResult, truth, t: int) -> list:
    rng = child_rng(cfg, 3, t)
    vein = sim.random_vein(cfg, rng)
    outcomes = []
    for attempt in range(1, cfg.max_attempts + 1):
        try:
            out = run_attempt(cfg, calibration, truth, vein, rng, t, attempt)
        except StereoInjectError as exc:
            out = SessionOutcome(t, attempt, "failed", math.nan,
                                 detail=f"{type(exc).__name__}: {exc}")
        outcomes.append(out)
        if out.classification != "shallow":
            break
    return outcomes


def run_end_to_end(cfg: RigConfig, trials: int,
                   calibration: CalibrationResult | None = None, workers: int = 1):
    """Simulated insertion sessions.

    Each trial is one subject with one vein. A shallow miss is retried with
    a fresh needle (up to ``max_attempts``); a hit or a deep miss ends the
    trial, as does any estimation error, which is recorded as ``failed``.
    Trials draw from child seeds of ``cfg.seed``, so ``workers > 1`` gives
    the same outcomes as a serial run.
    Returns the list of per-attempt outcomes and the summary table.
    """
    truth = cfg.true_cameras()
    if calibration is None:
        calibration = run_initial_session(cfg, render_samples=0).result
    job = partial(_run_trial, cfg, calibration, truth)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            per_trial = list(pool.map(job, range(trials)))
    else:
        per_trial = [job(t) for t in range(trials)]
    outcomes = [o for chunk in per_trial for o in chunk]
    return outcomes, summarize_outcomes(outcomes, trials, cfg.max_attempts)
