"""Vein line and needle tip detectors."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import AmbiguousShaft, EmptyAoI, NoConsensus, NoSilhouette
from .geometry import wrap_angle
from .imaging import GREEN, RED, Image

CHANNEL_NAMES = {RED: "red", GREEN: "green"}


@dataclass(frozen=True)
class AoI:
    """Inclusive pixel rectangle scanned by the vein detector."""

    x_min: int
    x_max: int
    y_min: int
    y_max: int

    def __post_init__(self):
        if self.x_max < self.x_min or self.y_max < self.y_min:
            raise EmptyAoI(f"empty area of interest {self}")

    @classmethod
    def full(cls, img: Image) -> AoI:
        return cls(0, img.width - 1, 0, img.height - 1)

    def clipped(self, width: int, height: int) -> AoI:
        return AoI(max(self.x_min, 0), min(self.x_max, width - 1),
                   max(self.y_min, 0), min(self.y_max, height - 1))


@dataclass(frozen=True)
class RansacParams:
    iterations: int = 200
    inlier_threshold: float = 3.0
    min_inlier_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.inlier_threshold > 0:
            raise ValueError("inlier_threshold must be positive")
        if not 0.0 <= self.min_inlier_fraction <= 1.0:
            raise ValueError("min_inlier_fraction must lie in [0, 1]")


@dataclass(frozen=True)
class VeinLine:
    """Image line ``y = a x + b`` with its RANSAC bookkeeping."""

    a: float
    b: float
    inlier_count: int = 0
    outlier_count: int = 0
    channel: str = "green"

    def __call__(self, x):
        return self.a * np.asarray(x, float) + self.b


@dataclass(frozen=True, eq=False)
class NeedleObservation:
    tip: np.ndarray
    theta: float

    def __post_init__(self):
        object.__setattr__(self, "tip", np.asarray(self.tip, float))
        object.__setattr__(self, "theta", wrap_angle(self.theta))


def column_minima(img: Image, channel: int, aoi: AoI) -> np.ndarray:
    """Darkest row of every column in ``aoi``; returns an ``(n, 2)`` array of
    ``(x, y)``. Ties resolve to the smallest ``y``."""
    if (aoi.x_min < 0 or aoi.y_min < 0 or aoi.x_max >= img.width
            or aoi.y_max >= img.height):
        raise EmptyAoI(f"{aoi} exceeds the {img.width}x{img.height} image")
    plane = img.channel(channel)[aoi.y_min:aoi.y_max + 1, aoi.x_min:aoi.x_max + 1]
    rows = np.argmin(plane, axis=0)  # first occurrence = smallest y
    xs = np.arange(aoi.x_min, aoi.x_max + 1, dtype=float)
    return np.column_stack([xs, rows + aoi.y_min]).astype(float)


def least_squares_line(points) -> tuple[float, float]:
    """Closed-form minimiser of sum((a x + b - y)^2)."""
    pts = np.asarray(points, float)
    x, y = pts[:, 0], pts[:, 1]
    xm, ym = x.mean(), y.mean()
    sxx = np.sum((x - xm) ** 2)
    if sxx == 0:
        raise NoConsensus("all points share one column")
    a = np.sum((x - xm) * (y - ym)) / sxx
    return float(a), float(ym - a * xm)


def fit_line_ransac(points, params: RansacParams = RansacParams(),
                    channel: str = "green") -> VeinLine:
    """Robust ``y = a x + b`` fit: two-point RANSAC, then a least-squares
    refit on the largest consensus set."""
    pts = np.asarray(points, float)
    n = len(pts)
    if n < 2:
        raise NoConsensus("need at least two points")
    x, y = pts[:, 0], pts[:, 1]
    rng = np.random.default_rng(params.seed)
    i = rng.integers(0, n, size=params.iterations)
    j = rng.integers(0, n - 1, size=params.iterations)
    j = j + (j >= i)  # distinct second index
    dx = x[j] - x[i]
    valid = dx != 0
    a = np.where(valid, (y[j] - y[i]) / np.where(valid, dx, 1.0), 0.0)
    b = y[i] - a * x[i]
    resid = np.abs(a[:, None] * x[None, :] + b[:, None] - y[None, :])
    inliers = resid <= params.inlier_threshold
    counts = np.where(valid, inliers.sum(axis=1), -1)
    best = int(np.argmax(counts))
    if counts[best] < 2 or counts[best] < params.min_inlier_fraction * n:
        frac = max(counts[best], 0) / n
        raise NoConsensus(f"best consensus {frac:.1%} below "
                          f"{params.min_inlier_fraction:.1%}")
    mask = inliers[best]
    a_fit, b_fit = least_squares_line(pts[mask])
    k = int(mask.sum())
    return VeinLine(a_fit, b_fit, k, n - k, channel)


def detect_vein(img: Image, aoi: AoI, params: RansacParams = RansacParams()) -> VeinLine:
    """Fit the vein in the red and green channels and keep the fit with fewer
    outliers; green wins ties."""
    if img.channels < 3:
        raise ValueError("vein detection needs an RGB image")
    fits, errors = {}, []
    for ch in (GREEN, RED):
        try:
            fits[ch] = fit_line_ransac(column_minima(img, ch, aoi), params,
                                       CHANNEL_NAMES[ch])
        except NoConsensus as exc:
            errors.append(f"{CHANNEL_NAMES[ch]}: {exc}")
    if not fits:
        raise NoConsensus("; ".join(errors))
    # dict order is green first, so min() keeps green on equal outlier counts
    return min(fits.values(), key=lambda f: f.outlier_count)


def otsu_threshold(values: np.ndarray, bins: int = 256) -> float:
    hist, edges = np.histogram(values, bins=bins, range=(0.0, 1.0))
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(hist).astype(float)
    w1 = w0[-1] - w0
    m0 = np.cumsum(hist * centers)
    mean0 = np.divide(m0, w0, out=np.zeros_like(m0), where=w0 > 0)
    mean1 = np.divide(m0[-1] - m0, w1, out=np.zeros_like(m0), where=w1 > 0)
    between = w0 * w1 * (mean0 - mean1) ** 2
    return float(edges[int(np.argmax(between)) + 1])


def _edge_crossings(gray, mask, thr, x):
    """Sub-pixel rows where column ``x`` crosses ``thr`` at the top and bottom
    of the silhouette run."""
    rows = np.flatnonzero(mask[:, x])
    top, bot = rows[0], rows[-1]
    if top == 0 or bot == gray.shape[0] - 1:
        return None
    col = gray[:, x]
    y_top = (top - 1) + (col[top - 1] - thr) / (col[top - 1] - col[top])
    y_bot = bot + (col[bot] - thr) / (col[bot] - col[bot + 1])
    return y_top, y_bot


def _fit_horizontal(gray: np.ndarray, min_area: int):
    """Needle detection on an image whose needle is within 45 deg of the
    rows. Returns tip ``(x, y)`` and the bisector slope."""
    h, w = gray.shape
    lo, hi = float(gray.min()), float(gray.max())
    if hi - lo < 0.2:
        raise NoSilhouette(f"contrast {hi - lo:.3f} too low")
    thr = otsu_threshold(gray)
    labels, count = ndimage.label(gray < thr)
    if count == 0:
        raise NoSilhouette("no dark region")
    sizes = ndimage.sum_labels(np.ones_like(gray), labels, index=np.arange(1, count + 1))
    k = int(np.argmax(sizes)) + 1
    if sizes[k - 1] < min_area:
        raise NoSilhouette(f"largest dark region has {int(sizes[k - 1])} px")
    mask = labels == k
    cols = np.flatnonzero(mask.any(axis=0))
    x_lo, x_hi = int(cols[0]), int(cols[-1])

    def width_at(x):
        r = np.flatnonzero(mask[:, x])
        return r[-1] - r[0] + 1

    left_border = x_lo == 0 or mask[[0, -1], x_lo].any()
    right_border = x_hi == w - 1 or mask[[0, -1], x_hi].any()
    if left_border != right_border:
        tip_right = left_border
    else:
        tip_right = width_at(x_hi) <= width_at(x_lo)
    tip_x = x_hi if tip_right else x_lo
    # below 45 deg the blunt end spans fewer columns than the widest
    # column run of the shaft; keep those columns out of the edge fits
    runs = mask.sum(axis=0)
    guard = int(runs.max()) + 5

    xs, tops, bots = [], [], []
    for x in range(x_lo, x_hi + 1):
        if abs(x - tip_x) < guard or x in (0, w - 1):
            continue
        edges = _edge_crossings(gray, mask, thr, x)
        if edges is None:
            continue
        xs.append(x)
        tops.append(edges[0])
        bots.append(edges[1])
    if len(xs) < 10:
        raise AmbiguousShaft(f"only {len(xs)} boundary samples")
    xs = np.asarray(xs, float)
    m1, c1 = np.polyfit(xs, tops, 1)
    m2, c2 = np.polyfit(xs, bots, 1)
    fit_err = max(np.std(np.polyval([m1, c1], xs) - tops),
                  np.std(np.polyval([m2, c2], xs) - bots))
    if fit_err > 2.0:
        raise AmbiguousShaft(f"boundary lines fit to {fit_err:.2f} px")
    # interior bisector: equal signed distance to the two boundary lines
    n1, n2 = np.hypot(1.0, m1), np.hypot(1.0, m2)
    denom = 1.0 / n1 + 1.0 / n2
    mb = (m1 / n1 + m2 / n2) / denom
    cb = (c1 / n1 + c2 / n2) / denom

    # sub-pixel tip along the bisector, starting from the silhouette pixel
    # that reaches farthest along it (the extreme column is a corner of the
    # blunt end once the needle is inclined)
    e = np.array([1.0, mb]) / np.hypot(1.0, mb)
    if not tip_right:
        e = -e
    normal = np.array([-e[1], e[0]])
    ys_m, xs_m = np.nonzero(mask)
    base = np.array([0.0, cb])
    far = float(np.max((np.stack([xs_m, ys_m], axis=1) - base) @ e))
    origin = base + far * e
    half = 0.5 * abs((m2 - m1) * origin[0] + (c2 - c1)) / np.hypot(1.0, mb)
    fg = float(np.median(gray[mask]))
    bg = float(np.median(gray[~mask]))
    reach = half + 12
    y0 = int(max(origin[1] - reach, 0))
    y1 = int(min(origin[1] + reach, h - 1))
    x0 = int(max(origin[0] - reach, 0))
    x1 = int(min(origin[0] + reach, w - 1))
    yy, xx = np.mgrid[y0:y1 + 1, x0:x1 + 1]
    rel = np.stack([xx - origin[0], yy - origin[1]], axis=-1).astype(float)
    s = rel @ e
    r = np.abs(rel @ normal)
    strip = (r <= max(0.5 * half, 1.0)) & (np.abs(s) <= 8.0)
    if strip.sum() < 8:
        raise AmbiguousShaft("tip region too small")
    darkness = (bg - gray[yy, xx][strip]) / (bg - fg)
    s_peak = _transition_peak(s[strip], darkness)
    tip = origin + s_peak * e
    return tip, mb


def _transition_peak(s: np.ndarray, darkness: np.ndarray) -> float:
    """Axial position where the normalised darkness crosses one half.

    A quadratic in ``s`` is fitted to the samples around the current
    estimate and its half-darkness root becomes the next estimate. The window
    widens until it spans at least three distinct axial positions, which
    matters when the needle runs exactly along a pixel row or column.
    """
    order = np.argsort(s)
    s, darkness = s[order], darkness[order]
    e = float(s[np.argmin(np.abs(darkness - 0.5))])
    for _ in range(5):
        half = 1.0
        while True:
            win = np.abs(s - e) <= half
            if len(np.unique(np.round(s[win], 6))) >= 3 or half > 4.0:
                break
            half += 0.5
        if np.count_nonzero(win) < 3:
            break
        c2, c1, c0 = np.polyfit(s[win] - e, darkness[win], 2)
        roots = np.roots([c2, c1, c0 - 0.5])
        roots = roots[np.isreal(roots)].real
        if len(roots) == 0:
            break
        step = roots[np.argmin(np.abs(roots))]
        e += float(np.clip(step, -half, half))
        if abs(step) < 1e-6:
            break
    return e


def detect_needle(img: Image, min_area: int = 50) -> NeedleObservation:
    """Tip position and axis angle of a dark needle silhouette."""
    gray = img.data if img.channels == 1 else img.data.mean(axis=2)
    ys, xs = np.nonzero(gray < 0.5 * (gray.max() + gray.min()))
    if len(xs) < 2:
        raise NoSilhouette("blank image")
    cov = np.cov(np.vstack([xs, ys]).astype(float))
    evals, evecs = np.linalg.eigh(cov)
    major = evecs[:, -1]
    if abs(major[0]) >= abs(major[1]):
        tip, slope = _fit_horizontal(gray, min_area)
        theta = np.degrees(np.arctan(slope))
    else:
        tip_t, slope = _fit_horizontal(gray.T, min_area)
        tip = tip_t[::-1]
        # transposed line x = slope * y + c has direction (slope, 1)
        theta = np.degrees(np.arctan2(1.0, slope))
    return NeedleObservation(np.asarray(tip, float), wrap_angle(theta))
