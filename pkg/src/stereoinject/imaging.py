"""Image container, synthetic scene renderers and PNM file I/O.

The renderers are the ground-truth oracle for the detectors: every rendered
feature is placed by :func:`stereoinject.geometry.project`, so detector
output can be compared against exact projected geometry.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .errors import SceneOutOfFrame
from .geometry import CameraModel, Line3D, NonPositiveDepth, project, to_camera

RED, GREEN, BLUE = 0, 1, 2


@dataclass(frozen=True, eq=False)
class Image:
    """Brightness image with values in [0, 1].

    ``data`` has shape ``(height, width)`` for gray images or
    ``(height, width, 3)`` for RGB. ``meta`` carries renderer bookkeeping and
    is not part of the pixel content.
    """

    data: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        d = np.array(self.data, dtype=float)
        if d.ndim == 3 and d.shape[2] == 1:
            d = d[:, :, 0]
        if d.ndim not in (2, 3) or (d.ndim == 3 and d.shape[2] != 3):
            raise ValueError(f"unsupported image shape {d.shape}")
        if d.shape[0] < 1 or d.shape[1] < 1:
            raise ValueError("empty image")
        if not (np.all(np.isfinite(d)) and d.min() >= 0.0 and d.max() <= 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        d.setflags(write=False)
        object.__setattr__(self, "data", d)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.data.ndim == 2 else 3

    def channel(self, index: int) -> np.ndarray:
        if self.channels == 1:
            if index != 0:
                raise IndexError(f"gray image has no channel {index}")
            return self.data
        return self.data[:, :, index]

    def __call__(self, x: int, y: int, channel: int = 0) -> float:
        return float(self.channel(channel)[y, x])

    def to_bytes(self) -> bytes:
        return np.round(self.data * 255.0).astype(np.uint8).tobytes()


@dataclass(frozen=True)
class ArtifactSpec:
    """A dark occluder stamped onto an image.

    ``dirt`` is a round blob of diameter ``extent``; ``hair`` is a thin
    curved stroke of length ``extent``. ``darkness`` is the brightness at the
    artifact core.
    """

    kind: str
    center: tuple[float, float]
    extent: float
    darkness: float = 0.05
    channels: tuple[int, ...] = (RED, GREEN, BLUE)
    width: float = 2.0

    def __post_init__(self):
        if self.kind not in ("hair", "dirt"):
            raise ValueError(f"unknown artifact kind {self.kind!r}")
        if not self.extent > 0:
            raise ValueError("extent must be positive")
        if not 0.0 <= self.darkness <= 1.0:
            raise ValueError("darkness must be in [0, 1]")


@dataclass(frozen=True, eq=False)
class TailScene:
    """Backlit tail with a straight vein.

    Brightness triples are (red, green, blue). ``vein_darkness`` is the
    brightness at the vein centre line; the default leaves the blue channel
    unchanged so the vein shows only in red and green.
    """

    vein_axis: Line3D
    vein_radius: float = 0.15
    tail_radius: float = 1.2
    tail_axis: Line3D | None = None
    background_brightness: tuple = (0.97, 0.86, 0.30)
    tail_brightness: tuple = (0.82, 0.66, 0.20)
    vein_darkness: tuple = (0.38, 0.30, 0.20)
    artifacts: tuple = ()
    artifact_seed: int = 0

    def __post_init__(self):
        # radius 0 is allowed and renders an invisible vein
        if not 0.0 <= self.vein_radius < self.tail_radius:
            raise ValueError("need 0 <= vein_radius < tail_radius")
        if self.tail_axis is not None:
            gap = self.tail_axis.distance(self.vein_axis.point)
            if gap + self.vein_radius > self.tail_radius:
                raise ValueError("vein axis lies outside the tail")
        for name in ("background_brightness", "tail_brightness", "vein_darkness"):
            v = np.asarray(getattr(self, name), float)
            if v.shape != (3,) or v.min() < 0 or v.max() > 1:
                raise ValueError(f"{name} must be three values in [0, 1]")


@dataclass(frozen=True, eq=False)
class NeedleScene:
    """Needle seen against a uniformly bright back panel.

    ``axis`` points from the mount toward the tip. ``shaft_width`` is the
    width at the blunt tip end; the silhouette widens behind the tip with
    half-angle ``taper_deg``. ``blur`` is the Gaussian edge spread in pixels.
    """

    tip: np.ndarray
    axis: np.ndarray
    shaft_width: float = 0.3
    panel_brightness: float = 0.9
    needle_brightness: float = 0.08
    taper_deg: float = 0.3
    blur: float = 0.5

    def __post_init__(self):
        axis = np.asarray(self.axis, float)
        n = np.linalg.norm(axis)
        if abs(n - 1.0) > 1e-9:
            raise ValueError("axis must be a unit vector")
        if not self.shaft_width > 0:
            raise ValueError("shaft_width must be positive")
        object.__setattr__(self, "tip", np.asarray(self.tip, float))
        object.__setattr__(self, "axis", axis)


def _projected_line(axis: Line3D, c: CameraModel):
    """Image projection of a 3D line: unit normal ``n``, offset ``d`` with
    ``n . uv = d``."""
    p0 = axis.point
    p1 = axis.point + axis.direction
    uv0, uv1 = project(p0, c), project(p1, c)
    t = uv1 - uv0
    if np.linalg.norm(t) < 1e-12:
        raise SceneOutOfFrame("line projects to a point")
    t /= np.linalg.norm(t)
    n = np.array([-t[1], t[0]])
    return n, float(n @ uv0)


def _column_depth(axis: Line3D, c: CameraModel, u: np.ndarray) -> np.ndarray:
    """Camera depth of the axis point imaged at each column ``u``."""
    pc0 = to_camera(axis.point, c)
    dc = c.rotation @ axis.direction
    # u(s) = f (x0 + s dx)/(z0 + s dz) + cx; solve for s
    du = (u - c.principal_point[0]) / c.focal_length
    denom = dc[0] - du * dc[2]
    with np.errstate(divide="ignore", invalid="ignore"):
        s = (du * pc0[2] - pc0[0]) / denom
    z = pc0[2] + s * dc[2]
    bad = ~np.isfinite(z) | (np.abs(denom) < 1e-12)
    if np.any(bad):
        # line nearly along the column direction: fall back to anchor depth
        z = np.where(bad, pc0[2], z)
    return z


def render_tail(scene: TailScene, c: CameraModel) -> Image:
    """Render the backlit tail and vein as an RGB image.

    The vein brightness dips with a raised-cosine profile across the band,
    so within any column the darkest pixel is the one closest to the
    projected vein line.
    """
    try:
        n_v, d_v = _projected_line(scene.vein_axis, c)
        tail_axis = scene.tail_axis or scene.vein_axis
        n_t, d_t = _projected_line(tail_axis, c)
    except NonPositiveDepth as exc:
        raise SceneOutOfFrame(str(exc)) from exc
    w, h = c.image_size
    u = np.arange(w, dtype=float)
    v = np.arange(h, dtype=float)
    z_v = _column_depth(scene.vein_axis, c, u)
    z_t = _column_depth(tail_axis, c, u)
    if np.any(z_v <= 0) or np.any(z_t <= 0):
        raise SceneOutOfFrame("tail crosses the camera plane")
    vein_half = scene.vein_radius * c.focal_length / z_v
    tail_half = scene.tail_radius * c.focal_length / z_t

    dist_t = np.abs(n_t[0] * u[None, :] + n_t[1] * v[:, None] - d_t)
    # cylinder outline spans the tail radius perpendicular to the image line
    tail_w = tail_half[None, :]
    tail_cover = np.clip(tail_w - dist_t + 0.5, 0.0, 1.0)
    if not np.any(tail_cover > 0):
        raise SceneOutOfFrame("tail does not intersect the image")

    dist_v = np.abs(n_v[0] * u[None, :] + n_v[1] * v[:, None] - d_v)
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = dist_v / vein_half[None, :]
    dip = np.where(rel < 1.0, 0.5 * (1.0 + np.cos(np.pi * np.minimum(rel, 1.0))), 0.0)
    dip = np.nan_to_num(dip)

    bg = np.asarray(scene.background_brightness, float)
    tail = np.asarray(scene.tail_brightness, float)
    vein = np.asarray(scene.vein_darkness, float)
    inside = tail[None, None, :] - (tail - vein)[None, None, :] * dip[:, :, None]
    cover = tail_cover[:, :, None]
    data = bg[None, None, :] * (1.0 - cover) + inside * cover
    img = Image(np.clip(data, 0.0, 1.0), meta={"vein_line": (n_v, d_v)})
    if scene.artifacts:
        img = inject_artifacts(img, list(scene.artifacts), scene.artifact_seed)
    return img


def projected_vein_line(scene: TailScene, c: CameraModel) -> tuple[float, float]:
    """Slope and intercept ``(a, b)`` of the rendered vein centre line."""
    n, d = _projected_line(scene.vein_axis, c)
    if abs(n[1]) < 1e-12:
        raise SceneOutOfFrame("vein line is vertical in the image")
    return float(-n[0] / n[1]), float(d / n[1])


def _stamp(data: np.ndarray, alpha: np.ndarray, darkness: float, channels):
    for ch in channels:
        plane = data[:, :, ch] if data.ndim == 3 else data
        np.copyto(plane, plane * (1.0 - alpha) + darkness * alpha)


def _hair_alpha(spec: ArtifactSpec, shape, rng) -> np.ndarray:
    h, w = shape
    angle = rng.uniform(0.0, np.pi)
    bend = rng.uniform(-0.3, 0.3) * spec.extent
    t = np.linspace(-0.5, 0.5, max(int(4 * spec.extent), 8))
    tangent = np.array([np.cos(angle), np.sin(angle)])
    normal = np.array([-tangent[1], tangent[0]])
    pts = (np.asarray(spec.center, float)[None, :]
           + np.outer(t * spec.extent, tangent)
           + np.outer(bend * (1.0 - 4.0 * t**2), normal))
    pad = spec.width + 2.0
    x0 = int(max(np.floor(pts[:, 0].min() - pad), 0))
    x1 = int(min(np.ceil(pts[:, 0].max() + pad), w - 1))
    y0 = int(max(np.floor(pts[:, 1].min() - pad), 0))
    y1 = int(min(np.ceil(pts[:, 1].max() + pad), h - 1))
    alpha = np.zeros(shape)
    if x1 < x0 or y1 < y0:
        return alpha
    yy, xx = np.mgrid[y0:y1 + 1, x0:x1 + 1]
    grid = np.stack([xx.ravel(), yy.ravel()], axis=1).astype(float)
    # distance from each pixel to the densely sampled stroke
    dist = np.full(len(grid), np.inf)
    for chunk in np.array_split(pts, max(1, len(pts) // 64)):
        dd = np.linalg.norm(grid[:, None, :] - chunk[None, :, :], axis=2).min(axis=1)
        dist = np.minimum(dist, dd)
    a = np.clip(spec.width / 2.0 - dist + 0.5, 0.0, 1.0)
    alpha[y0:y1 + 1, x0:x1 + 1] = a.reshape(yy.shape)
    return alpha


def _dirt_alpha(spec: ArtifactSpec, shape, rng) -> np.ndarray:
    h, w = shape
    cx, cy = spec.center
    # mild random elongation so blobs are not perfect discs
    squash = rng.uniform(0.8, 1.0)
    r = spec.extent / 2.0
    yy, xx = np.mgrid[0:h, 0:w]
    dist = np.hypot(xx - cx, (yy - cy) / squash)
    return np.clip(r - dist + 0.5, 0.0, 1.0)


def inject_artifacts(img: Image, artifacts, seed: int = 0) -> Image:
    """Stamp dirt blobs and hair strokes onto a copy of ``img``.

    The shape randomness (hair orientation and bend, blob elongation) comes
    from ``seed``. ``meta['affected_column_fraction']`` reports the share of
    image columns touched by any artifact.
    """
    if not artifacts:
        return img
    data = np.array(img.data)
    rng = np.random.default_rng(seed)
    shape = (img.height, img.width)
    touched = np.zeros(img.width, dtype=bool)
    for spec in artifacts:
        x, y = spec.center
        if not (0 <= x <= img.width - 1 and 0 <= y <= img.height - 1):
            raise ValueError(f"artifact centre {spec.center} outside image")
        alpha = (_hair_alpha if spec.kind == "hair" else _dirt_alpha)(spec, shape, rng)
        channels = [ch for ch in spec.channels if ch < img.channels]
        _stamp(data, alpha, spec.darkness, channels)
        touched |= alpha.max(axis=0) > 0
    meta = dict(img.meta)
    meta["affected_column_fraction"] = float(touched.mean())
    return Image(np.clip(data, 0.0, 1.0), meta=meta)


def render_needle_silhouette(scene: NeedleScene, c: CameraModel) -> Image:
    """Gray silhouette of the needle: a slowly widening dark wedge with a
    blunt end whose centre is exactly ``project(scene.tip)``."""
    try:
        tip = project(scene.tip, c)
    except NonPositiveDepth as exc:
        raise SceneOutOfFrame(f"needle tip not in front of camera: {exc}") from exc
    if not c.contains(tip):
        raise SceneOutOfFrame(f"needle tip {tip} outside image")
    pc = to_camera(scene.tip, c)
    dc = c.rotation @ scene.axis
    fwd = np.array([dc[0] * pc[2] - pc[0] * dc[2], dc[1] * pc[2] - pc[1] * dc[2]])
    if np.linalg.norm(fwd) < 1e-12:
        raise SceneOutOfFrame("needle points along the optical axis")
    fwd /= np.linalg.norm(fwd)
    normal = np.array([-fwd[1], fwd[0]])
    half = 0.5 * scene.shaft_width * c.focal_length / pc[2]
    tan_b = np.tan(np.radians(scene.taper_deg))
    cos_b = np.cos(np.radians(scene.taper_deg))

    w, h = c.image_size
    u = np.arange(w, dtype=float)[None, :] - tip[0]
    v = np.arange(h, dtype=float)[:, None] - tip[1]
    behind = -(u * fwd[0] + v * fwd[1])
    across = np.abs(u * normal[0] + v * normal[1])
    side = (across - half - np.maximum(behind, 0.0) * tan_b) * cos_b
    sigma = scene.blur
    cover = ndtr(-side / sigma) * ndtr(behind / sigma)
    data = scene.panel_brightness - (scene.panel_brightness - scene.needle_brightness) * cover
    return Image(np.clip(data, 0.0, 1.0), meta={"tip": tip})


def write_pnm(path, img: Image) -> None:
    """Write 8-bit binary PGM (gray) or PPM (RGB)."""
    magic = b"P5" if img.channels == 1 else b"P6"
    header = magic + b"\n%d %d\n255\n" % (img.width, img.height)
    with open(path, "wb") as fh:
        fh.write(header + img.to_bytes())


def _tokens(buf: bytes, count: int, pos: int):
    """Header tokens of a PNM file; returns them with the raster offset."""
    out = []
    n = len(buf)
    while len(out) < count:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            end = buf.find(b"\n", pos)
            pos = n if end < 0 else end + 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace():
            pos += 1
        if pos == start or pos >= n:
            raise ValueError("truncated PNM header")
        out.append(buf[start:pos])
    return out, pos + 1


def read_pnm(path) -> Image:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:2] not in (b"P5", b"P6"):
        raise ValueError(f"{os.fspath(path)}: not a binary PGM/PPM file")
    (magic, w, h, maxval), pos = _tokens(buf, 4, 0)
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ValueError("only 8-bit PNM files are supported")
    ch = 1 if magic == b"P5" else 3
    if len(buf) - pos < w * h * ch:
        raise ValueError(f"{os.fspath(path)}: raster shorter than {w}x{h}x{ch}")
    raw = np.frombuffer(buf, dtype=np.uint8, count=w * h * ch, offset=pos)
    shape = (h, w) if ch == 1 else (h, w, 3)
    return Image(raw.reshape(shape).astype(float) / 255.0)
