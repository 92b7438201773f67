"""Command-line front end.

Every subcommand takes ``--config`` (plain ``key = value`` file), ``--seed``
(overrides the config's seed) and ``--out`` (output directory). Results go
to ``<out>/<name>.tsv`` (tab-delimited table) and ``<out>/<name>.jsonl``
(one JSON record per line); a short table is echoed to stdout.

Exit status: 0 on success, otherwise the ``exit_code`` of the error class
(2 config/input, 3 geometry, 4 scene, 5 detection, 6 calibration,
7 alignment, 1 anything else raised by the library).
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from ..calibration import (CalibrationDataset, CalibrationResult, calibration_residuals,
                           solve_initial, solve_needle)
from ..detection import AoI, NeedleObservation, RansacParams, detect_needle, detect_vein
from ..errors import ConfigError, StereoInjectError
from ..geometry import RigidTransform, project
from ..imaging import (projected_vein_line, read_pnm, render_needle_silhouette, render_tail,
                       write_pnm)
from . import experiments as ex
from . import plotting, reports
from . import simulator as sim
from .config import RigConfig

log = logging.getLogger("stereoinject")

HOME = RigidTransform.identity()


# -- helpers --------------------------------------------------------------------

def load_config(args) -> RigConfig:
    cfg = RigConfig.load(args.config) if args.config else RigConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def load_calibration(path, cfg: RigConfig) -> CalibrationResult:
    if path:
        return _parse(CalibrationResult.loads, path)
    log.info("no --calibration given; running the initial calibration first")
    return ex.run_initial_session(cfg, render_samples=0).result


def _read(path) -> str:
    try:
        with open(path) as fh:
            return fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from exc


def _parse(loads, path):
    try:
        return loads(_read(path))
    except (ValueError, KeyError, IndexError) as exc:
        raise ConfigError(f"malformed file {path}: {exc}") from exc


def _echo(text: str) -> None:
    sys.stdout.write(text)


# -- subcommands ----------------------------------------------------------------

def cmd_calibrate_initial(args, cfg: RigConfig, out: Path) -> None:
    if args.dataset:
        dataset = _parse(CalibrationDataset.loads, args.dataset)
        result = solve_initial(dataset, cfg.initial_guess())
        truth_q = None
        checks = []
    else:
        session = ex.run_initial_session(cfg, render_samples=args.render_samples)
        dataset, result = session.dataset, session.result
        truth_q = session.truth_offset
        checks = session.render_check
    reports.write_text(out / "dataset.txt", dataset.dumps())
    reports.write_text(out / "calibration.txt", result.dumps())

    s = result.residual_stats
    row = {"samples": len(dataset), "observations": s.count,
           "iterations": result.iterations, "converged": result.converged,
           "mean_px": s.mean, "rms_px": s.rms, "max_px": s.max,
           "cam1_mean_px": s.per_camera_mean[0], "cam2_mean_px": s.per_camera_mean[1],
           "q_x_mm": result.needle_offset[0], "q_y_mm": result.needle_offset[1],
           "q_z_mm": result.needle_offset[2]}
    if truth_q is not None:
        row["q_error_mm"] = float(np.linalg.norm(result.needle_offset - truth_q))
    reports.write_report(out, "calibration_report", [row], title="initial calibration")

    idx, cam, _ = dataset.observation_arrays()
    r = calibration_residuals(dataset, result.needle_offset, result.cameras).reshape(-1, 2)
    rows = [{"sample": int(i), "camera": int(j) + 1, "du_px": d[0], "dv_px": d[1],
             "norm_px": float(np.hypot(*d))} for i, j, d in zip(idx, cam, r)]
    reports.write_report(out, "residuals", rows, title="per-observation reprojection residuals")
    if checks:
        reports.write_report(out, "render_check", checks,
                             title="rendered-silhouette detection vs analytic projection")
    _echo(reports.format_table([row]))


def cmd_calibrate_needle(args, cfg: RigConfig, out: Path) -> None:
    calib = load_calibration(args.calibration, cfg)
    if args.observation is not None:
        u1, v1, t1, u2, v2, t2 = args.observation
        q = solve_needle(NeedleObservation(np.array([u1, v1]), t1),
                         NeedleObservation(np.array([u2, v2]), t2), *calib.cameras, HOME)
        row = {"q_x_mm": q[0], "q_y_mm": q[1], "q_z_mm": q[2]}
        reports.write_report(out, "needle_offset", [row], title="needle offset")
        _echo(reports.format_table([row]))
        return
    rep = ex.run_needle_variance(cfg, args.needles, calibration=calib)
    cols = ["needle", *rep.columns]
    rows = rep.rows + [dict(needle="RMS", **rep.rms)]
    reports.write_report(out, "needle_variance", rows, cols,
                         title="needle tip error p [px] and angle error theta [deg] "
                               "vs master, before (init) and after (comp)")
    _echo(reports.format_table(rows[-1:], cols))


def _synthetic_tail(cfg: RigConfig):
    """Tail image, AoI and ground-truth line in the (binned) camera 1."""
    rng = ex.child_rng(cfg, 4)
    vein = sim.random_vein(cfg, rng)
    cam = cfg.true_cameras()[0].binned(cfg.vein_binning)
    clean = sim.tail_scene(cfg, vein)
    aoi = sim.vein_aoi(clean, cam)
    scale = cam.focal_length / cam.pose.apply(vein.point)[2]
    arts = sim.random_artifacts(cfg, aoi, rng, scale)
    scene = sim.tail_scene(cfg, vein, arts, artifact_seed=int(rng.integers(2**31)))
    img = render_tail(scene, cam)
    return img, aoi, projected_vein_line(scene, cam)


def cmd_detect_vein(args, cfg: RigConfig, out: Path) -> None:
    truth = None
    if args.image:
        img = _read_image(args.image)
        aoi = AoI(*args.aoi).clipped(img.width, img.height) if args.aoi else AoI.full(img)
    else:
        img, aoi, truth = _synthetic_tail(cfg)
        write_pnm(out / "tail.ppm", img)
        if args.aoi:
            aoi = AoI(*args.aoi).clipped(img.width, img.height)
    params = RansacParams(cfg.ransac_iterations, cfg.ransac_threshold_px,
                          cfg.ransac_min_inlier_fraction, seed=cfg.seed)
    line = detect_vein(img, aoi, params)
    row = {"a": line.a, "b": line.b, "channel": line.channel,
           "inliers": line.inlier_count, "outliers": line.outlier_count,
           "aoi": [aoi.x_min, aoi.x_max, aoi.y_min, aoi.y_max]}
    if truth is not None:
        row.update(a_true=truth[0], b_true=truth[1])
    reports.write_report(out, "vein", [row], title="vein line y = a x + b")
    _echo(reports.format_table([row]))


def cmd_detect_needle(args, cfg: RigConfig, out: Path) -> None:
    truth = None
    if args.image:
        img = _read_image(args.image)
    else:
        rng = ex.child_rng(cfg, 5)
        needle = sim.perturb_needle(cfg, rng)
        cam = cfg.true_cameras()[0]
        scene = sim.needle_scene(cfg, needle, HOME)
        img = render_needle_silhouette(scene, cam)
        truth = project(scene.tip, cam)
        write_pnm(out / "needle.pgm", img)
    obs = detect_needle(img)
    row = {"u": obs.tip[0], "v": obs.tip[1], "theta_deg": obs.theta}
    if truth is not None:
        row.update(u_true=truth[0], v_true=truth[1])
    reports.write_report(out, "needle", [row], title="needle tip [px] and axis angle [deg]")
    _echo(reports.format_table([row]))


def cmd_simulate(args, cfg: RigConfig, out: Path) -> None:
    calib = load_calibration(args.calibration, cfg)
    outcomes, summary = ex.run_end_to_end(cfg, args.trials, calibration=calib,
                                          workers=args.workers)
    records = [o.as_record() for o in outcomes]
    reports.write_report(out, "sessions", records,
                         ["trial", "attempt", "classification", "distance_mm",
                          "budget_mm", "budget_ok", "detail"],
                         title="per-attempt outcomes")
    rows = [dict(r) for r in summary["rows"]] + [dict(attempt="Total", **summary["total"])]
    extra = {k: v for k, v in summary.items() if k not in ("rows", "total")}
    extra["vein_radius_mm"] = cfg.vein_radius_mm
    reports.write_report(out, "summary", rows, ["attempt", "punctures", "successes", "ratio_pct"],
                         title="insertion summary", records=rows + [extra])
    _echo(reports.format_table(rows, ["attempt", "punctures", "successes", "ratio_pct"]))
    _echo(reports.format_table([extra]))


def cmd_report(args, cfg: RigConfig, out: Path) -> None:
    """Figures plus an index table from whatever results ``out`` holds."""
    src = Path(args.results) if args.results else out
    figs = out / "figures"
    made = []
    if (src / "residuals.jsonl").exists():
        res = reports.read_records(src / "residuals.jsonl")
        made.append(("residuals", plotting.residual_histogram(
            [r["norm_px"] for r in res], figs / "residuals.png")))
    if (src / "needle_variance.jsonl").exists():
        rows = [r for r in reports.read_records(src / "needle_variance.jsonl")
                if r["needle"] != "RMS"]
        made.append(("needle_variance", plotting.needle_variance_plot(
            rows, figs / "needle_variance.png")))
    if (src / "sessions.jsonl").exists():
        recs = reports.read_records(src / "sessions.jsonl")
        made.append(("sessions", plotting.session_distance_plot(
            recs, cfg.vein_radius_mm, figs / "sessions.png")))
    if (src / "vein.jsonl").exists() and (src / "tail.ppm").exists():
        v = reports.read_records(src / "vein.jsonl")[0]
        img = read_pnm(src / "tail.ppm")
        made.append(("vein", plotting.detection_overlay(
            img, (v["a"], v["b"]), figs / "vein.png", aoi=AoI(*v["aoi"]))))
    if (src / "needle.jsonl").exists() and (src / "needle.pgm").exists():
        n = reports.read_records(src / "needle.jsonl")[0]
        img = read_pnm(src / "needle.pgm")
        made.append(("needle", plotting.detection_overlay(
            img, None, figs / "needle.png", tip=(n["u"], n["v"]))))
    if not made:
        raise ConfigError(f"no result files found in {src}")
    rows = [{"figure": name, "path": str(p.relative_to(out))} for name, p in made]
    reports.write_report(out, "report", rows, title="figures")
    _echo(reports.format_table(rows))


def _read_image(path):
    try:
        return read_pnm(path)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read image {path}: {exc}") from exc


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", help="key = value configuration file")
    common.add_argument("--seed", "-s", type=int, help="override the config seed")
    common.add_argument("--out", "-o", default="out", help="output directory (default: out)")
    common.add_argument("--verbose", "-v", action="store_true")

    p = argparse.ArgumentParser(prog="stereoinject", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("calibrate-initial", parents=[common],
                       help="joint needle-offset and stereo-camera calibration")
    s.add_argument("--dataset", help="solve this dataset file instead of simulating one")
    s.add_argument("--render-samples", type=int, default=None,
                   help="samples validated through render + detect")
    s.set_defaults(func=cmd_calibrate_initial)

    s = sub.add_parser("calibrate-needle", parents=[common],
                       help="needle-swap calibration (variance experiment or one observation)")
    s.add_argument("--calibration", help="calibration.txt from calibrate-initial")
    s.add_argument("--needles", type=int, default=5)
    s.add_argument("--observation", type=float, nargs=6,
                   metavar=("U1", "V1", "THETA1", "U2", "V2", "THETA2"),
                   help="solve the offset from one stereo tip observation")
    s.set_defaults(func=cmd_calibrate_needle)

    s = sub.add_parser("detect-vein", parents=[common], help="vein line in a tail image")
    s.add_argument("--image", help="P6/P5 image (default: render a synthetic tail)")
    s.add_argument("--aoi", type=int, nargs=4, metavar=("X0", "X1", "Y0", "Y1"))
    s.set_defaults(func=cmd_detect_vein)

    s = sub.add_parser("detect-needle", parents=[common], help="needle tip in a silhouette image")
    s.add_argument("--image", help="P5/P6 image (default: render a synthetic needle)")
    s.set_defaults(func=cmd_detect_needle)

    s = sub.add_parser("simulate", parents=[common], help="end-to-end insertion sessions")
    s.add_argument("--trials", type=int, default=200)
    s.add_argument("--calibration", help="calibration.txt from calibrate-initial")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("report", parents=[common], help="render figures from result files")
    s.add_argument("--results", help="directory holding results (default: --out)")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        args.func(args, cfg, out)
    except StereoInjectError as exc:
        print(f"stereoinject {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"stereoinject {args.command}: {exc}", file=sys.stderr)
        return ConfigError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
