import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stereoinject.detection import (AoI, NeedleObservation, RansacParams, VeinLine,
                                    column_minima, detect_needle, detect_vein,
                                    fit_line_ransac, least_squares_line, otsu_threshold)
from stereoinject.errors import EmptyAoI, NoConsensus, NoSilhouette
from stereoinject.geometry import Line3D, backproject, exp_so3, image_angle
from stereoinject.imaging import (GREEN, RED, ArtifactSpec, Image, NeedleScene, TailScene,
                                  projected_vein_line, render_needle_silhouette, render_tail)
from stereoinject.rig import rig_camera


@pytest.fixture(scope="module")
def cam():
    return rig_camera(np.zeros(3), 1, image_size=(772, 519))


@pytest.fixture(scope="module")
def ncam():
    return rig_camera(np.zeros(3), 1, image_size=(800, 600))


def vein(deg, y=0.0):
    return Line3D([0.0, y, 0.0],
                  exp_so3(np.radians(deg) * np.array([0, 0, 1.0])) @ [1.0, 0, 0])


def needle(uv, c, in_plane_deg=0.0):
    o, d = backproject(uv, c)
    tip = o + 80.0 / (d @ c.rotation[2]) * d
    a = np.radians(in_plane_deg)
    return NeedleScene(tip, c.rotation.T @ [np.cos(a), np.sin(a), 0.0])


def lstsq_oracle(pts):
    """Closed-form minimiser of sum((a x + b - y)^2) via the normal equations."""
    x, y = pts[:, 0], pts[:, 1]
    A = np.array([[np.sum(x * x), np.sum(x)], [np.sum(x), len(x)]])
    return np.linalg.solve(A, [np.sum(x * y), np.sum(y)])


# -- types ---------------------------------------------------------------------------

def test_aoi_validation():
    with pytest.raises(EmptyAoI):
        AoI(10, 5, 0, 3)
    assert AoI(-5, 900, -1, 10).clipped(772, 519) == AoI(0, 771, 0, 10)


def test_ransac_params_validation():
    with pytest.raises(ValueError):
        RansacParams(iterations=0)
    with pytest.raises(ValueError):
        RansacParams(inlier_threshold=0.0)
    with pytest.raises(ValueError):
        RansacParams(min_inlier_fraction=1.5)


def test_needle_observation_wraps_angle():
    assert NeedleObservation(np.zeros(2), 170.0).theta == pytest.approx(-10.0)
    assert NeedleObservation(np.zeros(2), -90.0).theta == pytest.approx(90.0)


# -- column minima -------------------------------------------------------------------

def test_uniform_image_ties_to_top_row():
    img = Image(np.full((20, 30, 3), 0.5))
    pts = column_minima(img, GREEN, AoI(3, 12, 4, 15))
    assert np.array_equal(pts[:, 0], np.arange(3, 13))
    assert np.all(pts[:, 1] == 4)


def test_blob_moves_exactly_the_covered_columns():
    data = np.tile(np.abs(np.arange(40) - 30.0)[:, None] / 40.0, (1, 50))
    data[5:9, 20:24] = 0.0  # a dark block away from the valley at y=30
    pts = column_minima(Image(data), 0, AoI(0, 49, 0, 39))
    moved = np.flatnonzero(pts[:, 1] != 30)
    assert np.array_equal(moved, [20, 21, 22, 23])
    assert np.all(pts[moved, 1] == 5)


def test_rendered_minima_close_to_line(cam):
    scene = TailScene(vein(1.5, 0.1))
    a, b = projected_vein_line(scene, cam)
    pts = column_minima(render_tail(scene, cam), GREEN, AoI(40, 730, 150, 370))
    assert np.sqrt(np.mean((pts[:, 1] - a * pts[:, 0] - b) ** 2)) < 0.5


def test_aoi_outside_image_is_empty():
    img = Image(np.zeros((10, 10)))
    with pytest.raises(EmptyAoI):
        column_minima(img, 0, AoI(20, 30, 0, 5))


# -- line fitting --------------------------------------------------------------------

def test_exact_line_recovered():
    x = np.arange(0, 500, dtype=float)
    line = fit_line_ransac(np.column_stack([x, 0.01 * x + 100]))
    assert abs(line.a - 0.01) < 1e-9 and abs(line.b - 100) < 1e-9
    assert line.outlier_count == 0 and line.inlier_count == 500


def test_least_squares_matches_normal_equations():
    rng = np.random.default_rng(0)
    pts = np.column_stack([np.arange(100.0), rng.normal(size=100) + 0.3 * np.arange(100)])
    assert np.allclose(least_squares_line(pts), lstsq_oracle(pts), atol=1e-9)


def test_ten_percent_outliers_rejected():
    rng = np.random.default_rng(1)
    for _ in range(100):
        x = np.arange(700, dtype=float)
        a, b = rng.uniform(-0.05, 0.05), rng.uniform(100, 400)
        y = a * x + b + rng.normal(0, 0.3, x.size)
        bad = rng.choice(x.size, 70, replace=False)
        y[bad] += 50 * rng.choice([-1, 1], 70)
        line = fit_line_ransac(np.column_stack([x, y]), RansacParams(seed=int(rng.integers(1000))))
        assert abs(line.a - a) < 0.005 and abs(line.b - b) < 0.5


def test_robust_up_to_thirty_percent():
    rng = np.random.default_rng(2)
    worst_a = worst_b = 0.0
    for trial in range(100):
        x = np.arange(600, dtype=float)
        a, b = rng.uniform(-0.05, 0.05), rng.uniform(100, 400)
        y = a * x + b + rng.normal(0, 0.3, x.size)
        n_bad = int(rng.uniform(0.0, 0.3) * x.size)
        bad = rng.choice(x.size, n_bad, replace=False)
        y[bad] += rng.uniform(30, 150, n_bad) * rng.choice([-1, 1], n_bad)
        line = fit_line_ransac(np.column_stack([x, y]), RansacParams(seed=trial))
        worst_a = max(worst_a, abs(line.a - a))
        worst_b = max(worst_b, abs(line.b - b))
    assert worst_a < 0.005 and worst_b < 0.5


def test_mostly_scattered_points_give_no_consensus():
    rng = np.random.default_rng(3)
    x = np.arange(100, dtype=float)
    y = 0.02 * x + 50
    bad = rng.choice(100, 60, replace=False)
    y[bad] = rng.uniform(0, 1000, 60)
    with pytest.raises(NoConsensus):
        fit_line_ransac(np.column_stack([x, y]), RansacParams(min_inlier_fraction=0.5))


def test_too_few_points():
    with pytest.raises(NoConsensus):
        fit_line_ransac(np.array([[0.0, 1.0]]))


def test_ransac_deterministic_given_seed():
    rng = np.random.default_rng(4)
    x = np.arange(300, dtype=float)
    y = 0.1 * x + rng.normal(0, 1.5, 300)
    pts = np.column_stack([x, y])
    p = RansacParams(seed=17)
    assert fit_line_ransac(pts, p) == fit_line_ransac(pts, p)


@settings(max_examples=100, deadline=None)
@given(st.floats(-0.2, 0.2), st.floats(-500, 500), st.integers(3, 400),
       st.integers(0, 2**31 - 1))
def test_zero_outlier_refit_equals_closed_form(a, b, n, seed):
    rng = np.random.default_rng(seed)
    x = np.sort(rng.choice(2000, n, replace=False)).astype(float)
    y = a * x + b + rng.uniform(-1.0, 1.0, n)
    pts = np.column_stack([x, y])
    line = fit_line_ransac(pts, RansacParams(inlier_threshold=3.0, seed=seed))
    assert line.outlier_count == 0
    assert line.inlier_count + line.outlier_count == n
    assert np.allclose([line.a, line.b], lstsq_oracle(pts), atol=1e-9, rtol=0)


# -- vein detector --------------------------------------------------------------------

def test_equal_channels_tie_goes_to_green(cam):
    scene = TailScene(vein(1.0), vein_darkness=(0.3, 0.3, 0.2),
                      tail_brightness=(0.7, 0.7, 0.2))
    img = render_tail(scene, cam)
    aoi = AoI(40, 730, 150, 370)
    line = detect_vein(img, aoi)
    assert line.channel == "green"
    red = fit_line_ransac(column_minima(img, RED, aoi), RansacParams(), channel="red")
    assert (red.a, red.b) == (line.a, line.b)


def test_red_only_hair_selects_green(cam):
    arts = tuple(ArtifactSpec("hair", (x, 200.0), 60, darkness=0.0, channels=(RED,))
                 for x in (150, 350, 550))
    scene = TailScene(vein(1.0), artifacts=arts, artifact_seed=2)
    line = detect_vein(render_tail(scene, cam), AoI(40, 730, 150, 370))
    assert line.channel == "green"
    assert line.outlier_count <= 2


@pytest.mark.parametrize("deg,y", [(2.0, 0.0), (-2.5, 0.2), (0.3, -0.3)])
def test_tilted_vein_matches_projection(cam, deg, y):
    scene = TailScene(vein(deg, y))
    a, b = projected_vein_line(scene, cam)
    line = detect_vein(render_tail(scene, cam), AoI(40, 730, 60, 460))
    assert abs(line.a - a) < 0.005 and abs(line.b - b) < 0.5
    assert line.inlier_count + line.outlier_count == 691


def test_both_channels_failing_raises():
    rng = np.random.default_rng(5)
    img = Image(rng.uniform(0, 1, (200, 300, 3)))
    with pytest.raises(NoConsensus):
        detect_vein(img, AoI.full(img))


def test_vein_detector_deterministic(cam):
    scene = TailScene(vein(1.0), artifacts=(ArtifactSpec("dirt", (300.0, 200.0), 14),))
    img = render_tail(scene, cam)
    p = RansacParams(seed=3)
    assert detect_vein(img, AoI.full(img), p) == detect_vein(img, AoI.full(img), p)


# -- needle detector ------------------------------------------------------------------

def test_otsu_splits_bimodal():
    v = np.concatenate([np.full(1000, 0.1), np.full(3000, 0.9)])
    t = otsu_threshold(v)
    assert 0.1 < t <= 0.9


def test_needle_along_rows(ncam):
    uv = np.array([452.3, 301.7])
    scene = needle(uv, ncam, 0.0)
    obs = detect_needle(render_needle_silhouette(scene, ncam))
    assert np.linalg.norm(obs.tip - uv) <= 0.25
    assert abs(obs.theta - image_angle(scene.tip, scene.axis, ncam)) <= 0.05
    assert abs(obs.theta) <= 0.05


def test_needle_rotated_ten_degrees(ncam):
    uv = np.array([452.3, 301.7])
    scene = needle(uv, ncam, 10.0)
    assert image_angle(scene.tip, scene.axis, ncam) == pytest.approx(10.0, abs=1e-9)
    obs = detect_needle(render_needle_silhouette(scene, ncam))
    assert np.linalg.norm(obs.tip - uv) <= 0.25
    assert abs(obs.theta - 10.0) <= 0.05


@pytest.mark.parametrize("deg", [60.0, 90.0, -75.0, 150.0])
def test_steep_and_reversed_needles(ncam, deg):
    uv = np.array([420.0, 280.0])
    scene = needle(uv, ncam, deg)
    obs = detect_needle(render_needle_silhouette(scene, ncam))
    assert np.linalg.norm(obs.tip - uv) <= 0.25
    d = (obs.theta - image_angle(scene.tip, scene.axis, ncam) + 90) % 180 - 90
    assert abs(d) <= 0.05


def test_needle_detector_unbiased(ncam):
    rng = np.random.default_rng(8)
    errs = []
    for _ in range(100):
        uv = ncam.principal_point + rng.uniform(-150, 150, 2)
        scene = needle(uv, ncam, rng.uniform(-30, 30))
        errs.append(detect_needle(render_needle_silhouette(scene, ncam)).tip - uv)
    errs = np.array(errs)
    assert np.all(np.abs(errs.mean(axis=0)) <= 0.05)
    assert np.abs(errs).max() <= 0.25


def test_blank_image_has_no_silhouette():
    with pytest.raises(NoSilhouette):
        detect_needle(Image(np.full((50, 60), 0.9)))


def test_low_contrast_rejected():
    data = np.full((50, 60), 0.9)
    data[20:30, 0:30] = 0.8
    with pytest.raises(NoSilhouette):
        detect_needle(Image(data))


def test_vein_line_call():
    assert VeinLine(0.5, 2.0)(4.0) == 4.0
