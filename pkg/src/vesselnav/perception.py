"""Synthetic fluoroscopy rendering and the classical 2D perception stack.

Images are uint8 arrays of shape (height, width). Pixel coordinates are
(x, y) with x along columns; the pixel at array cell [r, c] is centred at
(x=c, y=r). Fluoroscopy convention: bright background, vessels as
low-contrast dark tubes, the instrument as a high-contrast dark curve.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraModel, Pose, project_points
from .vessel_model import VesselTree


class SimulationIntegrityError(RuntimeError):
    """The instrument polyline left every vessel lumen."""


class ConstantImageError(ValueError):
    """Otsu thresholding is undefined for a constant image."""


@dataclass(frozen=True)
class NoiseSpec:
    """Additive Gaussian imaging noise, in gray levels."""

    gaussian_std: float = 2.0

    @staticmethod
    def off() -> "NoiseSpec":
        return NoiseSpec(0.0)


@dataclass(frozen=True)
class RenderStyle:
    background: int = 220
    vessel_value: int = 150
    wire_value: int = 30
    wire_radius_mm: float = 0.3
    min_halfwidth_px: float = 0.7
    lumen_tolerance_mm: float = 1.5


@dataclass
class FluoroFrame:
    """One synthetic fluoroscopy image plus acquisition metadata."""

    pixels: np.ndarray
    cam: CameraModel
    frame_index: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.pixels.dtype != np.uint8:
            raise ValueError("frame pixels must be uint8")
        w, h = self.cam.image_size
        if self.pixels.shape != (h, w):
            raise ValueError(f"frame shape {self.pixels.shape} does not match camera {(h, w)}")


@dataclass(frozen=True)
class TrackedEndpoint:
    """2D instrument tip estimate with a confidence in [0, 1]."""

    position2: np.ndarray
    confidence: float
    frame_index: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "position2", np.asarray(self.position2, dtype=float).reshape(2))
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must lie in [0, 1]")


def frame_view_pose(tree: VesselTree, depth_mm: float = 820.0, rotation: np.ndarray | None = None) -> Pose:
    """World-to-camera pose that centres the tree at the given depth."""
    rot = np.eye(3) if rotation is None else np.asarray(rotation, dtype=float)
    centroid = tree.flat_points()[0].mean(axis=0)
    translation = np.array([0.0, 0.0, depth_mm]) - rot @ centroid
    return Pose(rot, translation)


def _draw_capsules(canvas: np.ndarray, pix: np.ndarray, widths: np.ndarray, value: int) -> None:
    # Rasterize consecutive-point capsules with linearly tapered half-width.
    h, w = canvas.shape
    for k in range(len(pix) - 1):
        a, b = pix[k], pix[k + 1]
        if np.any(np.isnan(a)) or np.any(np.isnan(b)):
            continue
        wa, wb = widths[k], widths[k + 1]
        pad = max(wa, wb) + 1.0
        x0 = max(int(np.floor(min(a[0], b[0]) - pad)), 0)
        x1 = min(int(np.ceil(max(a[0], b[0]) + pad)), w - 1)
        y0 = max(int(np.floor(min(a[1], b[1]) - pad)), 0)
        y1 = min(int(np.ceil(max(a[1], b[1]) + pad)), h - 1)
        if x0 > x1 or y0 > y1:
            continue
        xs = np.arange(x0, x1 + 1)
        ys = np.arange(y0, y1 + 1)
        gx, gy = np.meshgrid(xs, ys)
        ab = b - a
        denom = float(ab @ ab)
        if denom == 0.0:
            t = np.zeros_like(gx, dtype=float)
        else:
            t = ((gx - a[0]) * ab[0] + (gy - a[1]) * ab[1]) / denom
            t = np.clip(t, 0.0, 1.0)
        dx = gx - (a[0] + t * ab[0])
        dy = gy - (a[1] + t * ab[1])
        halfw = wa + t * (wb - wa)
        hit = dx * dx + dy * dy <= halfw * halfw
        region = canvas[y0 : y1 + 1, x0 : x1 + 1]
        region[hit] = np.minimum(region[hit], value)


def _polyline_layers(tree: VesselTree, pose: Pose, cam: CameraModel, style: RenderStyle) -> np.ndarray:
    w, h = cam.image_size
    canvas = np.full((h, w), style.background, dtype=np.uint8)
    for bid in sorted(tree.branches):
        br = tree.branches[bid]
        pix, depth = project_points(br.positions(), pose, cam)
        widths = np.maximum(br.radii() * cam.scale_px_per_mm(1.0) / np.maximum(depth, 1e-9), style.min_halfwidth_px)
        widths[depth <= 0] = 0.0
        _draw_capsules(canvas, pix, widths, style.vessel_value)
    return canvas


def _check_wire_in_lumen(tree: VesselTree, wire: np.ndarray, style: RenderStyle) -> None:
    dist, idx = tree.point_index().query(wire)
    radii = np.array([tree.branches[b].points[i].radius for b, i in (tree.flat_points()[1][j] for j in idx)])
    bad = dist > radii + style.lumen_tolerance_mm
    if np.any(bad):
        k = int(np.argmax(bad))
        raise SimulationIntegrityError(
            f"instrument point {wire[k]} lies {dist[k]:.2f} mm from the nearest centerline, outside the lumen"
        )


class FrameRenderer:
    """Renders frames for a fixed scene; the static vessel layer is cached."""

    def __init__(self, tree: VesselTree, pose: Pose, cam: CameraModel, style: RenderStyle | None = None):
        self.tree = tree
        self.pose = pose
        self.cam = cam
        self.style = style or RenderStyle()
        self._vessel_layer = _polyline_layers(tree, pose, cam, self.style)

    def render(
        self,
        wire: np.ndarray | None,
        noise: NoiseSpec | None = None,
        seed: int | np.random.Generator = 0,
        frame_index: int = 0,
    ) -> FluoroFrame:
        canvas = self._vessel_layer.copy()
        if wire is not None and len(wire) > 0:
            wire = np.asarray(wire, dtype=float).reshape(-1, 3)
            _check_wire_in_lumen(self.tree, wire, self.style)
            pix, depth = project_points(wire, self.pose, self.cam)
            widths = np.maximum(
                self.style.wire_radius_mm * self.cam.scale_px_per_mm(1.0) / np.maximum(depth, 1e-9),
                self.style.min_halfwidth_px,
            )
            widths[depth <= 0] = 0.0
            if len(pix) == 1:
                pix = np.vstack([pix, pix])
                widths = np.append(widths, widths[-1])
            _draw_capsules(canvas, pix, widths, self.style.wire_value)
        if noise is not None and noise.gaussian_std > 0.0:
            rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
            noisy = canvas.astype(np.int16) + np.round(
                rng.normal(0.0, noise.gaussian_std, canvas.shape)
            ).astype(np.int16)
            canvas = np.clip(noisy, 0, 255).astype(np.uint8)
        return FluoroFrame(canvas, self.cam, frame_index)


def render(
    tree: VesselTree,
    wire: np.ndarray | None,
    pose: Pose,
    cam: CameraModel,
    noise: NoiseSpec | None = None,
    seed: int | np.random.Generator = 0,
    style: RenderStyle | None = None,
    frame_index: int = 0,
) -> FluoroFrame:
    """One-shot render. Episode loops should reuse a FrameRenderer instead."""
    return FrameRenderer(tree, pose, cam, style).render(wire, noise, seed, frame_index)


# ---------------------------------------------------------------------------
# segmentation


def otsu_threshold(values: np.ndarray) -> tuple[int, np.ndarray]:
    """Threshold maximizing between-class variance over the 256-bin histogram.

    Returns (threshold, mask) where the mask selects the dark class,
    ``values <= threshold``. Ties resolve to the lowest threshold.
    """
    values = np.asarray(values)
    if values.dtype != np.uint8:
        raise ValueError("otsu_threshold expects uint8 values")
    if values.size == 0:
        raise ConstantImageError("empty input")
    hist = np.bincount(values.ravel(), minlength=256).astype(float)
    total = hist.sum()
    p = hist / total
    levels = np.arange(256, dtype=float)
    w0 = np.cumsum(p)
    m0 = np.cumsum(p * levels)
    mu_total = m0[-1]
    w1 = 1.0 - w0
    valid = (w0 > 0.0) & (w1 > 0.0)
    if not np.any(valid):
        raise ConstantImageError("image has a single gray level")
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = m0 / w0
        mu1 = (mu_total - m0) / w1
    sigma_b = np.where(valid, w0 * w1 * (mu0 - mu1) ** 2, -np.inf)
    t = int(np.argmax(sigma_b))
    return t, values <= t


def segment_layers(
    frame: FluoroFrame, min_wire_contrast: float = 40.0
) -> tuple[np.ndarray, np.ndarray, int, int | None]:
    """Split a frame into vessel and instrument masks.

    The first Otsu pass separates the dark foreground from the background; the
    second pass runs on the foreground population only. When the foreground is
    effectively unimodal (mean separation below ``min_wire_contrast`` gray
    levels) no instrument is reported.

    Returns (vessel_mask, wire_mask, threshold1, threshold2-or-None).
    """
    t1, fg = otsu_threshold(frame.pixels)
    wire_mask = np.zeros_like(fg)
    t2: int | None = None
    fg_values = frame.pixels[fg]
    if fg_values.size >= 2 and fg_values.min() != fg_values.max():
        t2_cand, dark_sel = otsu_threshold(fg_values)
        dark = fg_values[dark_sel]
        bright = fg_values[~dark_sel]
        if bright.size and dark.size and float(bright.mean() - dark.mean()) >= min_wire_contrast:
            t2 = int(t2_cand)
            wire_mask = fg & (frame.pixels <= t2)
    return fg, wire_mask, t1, t2


# ---------------------------------------------------------------------------
# thinning

_thin_cache: dict[tuple, np.ndarray] = {}
_THIN_CACHE_MAX = 8


def _neighbors(p: np.ndarray):
    # p is the padded image; classic clockwise neighborhood starting north.
    p2 = p[:-2, 1:-1]
    p3 = p[:-2, 2:]
    p4 = p[1:-1, 2:]
    p5 = p[2:, 2:]
    p6 = p[2:, 1:-1]
    p7 = p[2:, :-2]
    p8 = p[1:-1, :-2]
    p9 = p[:-2, :-2]
    return p2, p3, p4, p5, p6, p7, p8, p9


def _thin_subiteration(img: np.ndarray, second: bool) -> tuple[np.ndarray, bool]:
    if not img.any():
        return img, False
    p = np.pad(img, 1).astype(np.uint8)
    p2, p3, p4, p5, p6, p7, p8, p9 = _neighbors(p)
    ring = (p2, p3, p4, p5, p6, p7, p8, p9, p2)
    b = sum(int_arr.astype(np.int32) for int_arr in ring[:-1])
    a = sum(((ring[k] == 0) & (ring[k + 1] == 1)).astype(np.int32) for k in range(8))
    if not second:
        c1 = p2 * p4 * p6 == 0
        c2 = p4 * p6 * p8 == 0
    else:
        c1 = p2 * p4 * p8 == 0
        c2 = p2 * p6 * p8 == 0
    kill = img & (b >= 2) & (b <= 6) & (a == 1) & c1 & c2
    if not kill.any():
        return img, False
    return img & ~kill, True


def thin(mask: np.ndarray) -> np.ndarray:
    """Two-subiteration parallel thinning run to convergence.

    Deletion conditions follow the classic two-pass scheme: interior border
    pixels with 2..6 neighbors and a single 0-to-1 transition around the ring
    are peeled, alternating the compass conditions between subiterations.
    """
    mask = np.asarray(mask).astype(bool)
    key = (mask.shape, hashlib.blake2b(np.packbits(mask).tobytes(), digest_size=16).digest())
    cached = _thin_cache.get(key)
    if cached is not None:
        return cached.copy()
    if not mask.any():
        out = mask.copy()
    else:
        rows = np.any(mask, axis=1)
        cols = np.any(mask, axis=0)
        r0, r1 = np.argmax(rows), len(rows) - np.argmax(rows[::-1])
        c0, c1 = np.argmax(cols), len(cols) - np.argmax(cols[::-1])
        crop = mask[r0:r1, c0:c1]
        img = crop.copy()
        changed = True
        while changed:
            img, ch1 = _thin_subiteration(img, second=False)
            img, ch2 = _thin_subiteration(img, second=True)
            changed = ch1 or ch2
        out = np.zeros_like(mask)
        out[r0:r1, c0:c1] = img
    if len(_thin_cache) >= _THIN_CACHE_MAX:
        _thin_cache.pop(next(iter(_thin_cache)))
    _thin_cache[key] = out.copy()
    return out


def skeleton_points(skel: np.ndarray) -> np.ndarray:
    """Skeleton pixels as an (M, 2) float array of (x, y) coordinates."""
    rc = np.argwhere(skel)
    return rc[:, ::-1].astype(float)


def endpoint_candidates(skel: np.ndarray) -> np.ndarray:
    """Skeleton pixels with exactly one 8-neighbor, as (K, 2) (x, y) coords."""
    skel = np.asarray(skel).astype(bool)
    p = np.pad(skel, 1).astype(np.uint8)
    neigh = sum(n.astype(np.int32) for n in _neighbors(p))
    rc = np.argwhere(skel & (neigh == 1))
    return rc[:, ::-1].astype(float)


# ---------------------------------------------------------------------------
# endpoint tracking

TRACK_GATE_PX = 60.0
TRACK_TAU_PX = 20.0


def track(
    candidates: np.ndarray,
    previous: TrackedEndpoint,
    frame_index: int | None = None,
    gate_px: float = TRACK_GATE_PX,
    tau_px: float = TRACK_TAU_PX,
) -> TrackedEndpoint:
    """Pick the candidate nearest the previous tip.

    Confidence decays as exp(-distance / tau). With no candidate inside the
    gate the previous position is kept with confidence 0 (coasting).
    """
    if frame_index is None:
        frame_index = previous.frame_index + 1
    candidates = np.asarray(candidates, dtype=float).reshape(-1, 2)
    if len(candidates) == 0:
        return TrackedEndpoint(previous.position2, 0.0, frame_index)
    d = np.linalg.norm(candidates - previous.position2, axis=1)
    k = int(np.argmin(d))
    if d[k] > gate_px:
        return TrackedEndpoint(previous.position2, 0.0, frame_index)
    return TrackedEndpoint(candidates[k], float(np.exp(-d[k] / tau_px)), frame_index)
