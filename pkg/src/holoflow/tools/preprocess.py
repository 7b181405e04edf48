"""
Raw Bayer frame handling: running background model, background subtraction,
circular-Hough candidate localization, ROI cropping and per-colour hologram extraction.
"""

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import ndimage, stats
from skimage.draw import circle_perimeter
from skimage.feature import peak_local_max
from skimage.transform import hough_circle

from src.holoflow.exceptions import ConfigurationError, RejectedInputError, WarmupRequiredError
from src.holoflow.models import HoughConfig, SensorModel
from src.holoflow.utils.logging_setup import get_logger

logger = get_logger(__name__)


# ========== FRAMES AND BAYER LAYOUT ==========

@dataclass(frozen=True)
class SensorFrame:
    """One raw RGGB exposure, uint16 digital numbers."""

    frame_index: int
    timestamp_s: float
    mosaic: np.ndarray
    sensor: SensorModel

    def __post_init__(self):
        expected = (self.sensor.height_px, self.sensor.width_px)
        if self.mosaic.shape != expected:
            raise RejectedInputError(f"frame {self.frame_index}: shape {self.mosaic.shape} != {expected}")
        if self.mosaic.size and int(self.mosaic.max()) > self.sensor.max_dn:
            raise RejectedInputError(f"frame {self.frame_index}: values exceed {self.sensor.bit_depth}-bit range")


def bayer_channel_map(shape: Tuple[int, int]) -> np.ndarray:
    """Channel index (0=R, 1=G, 2=B) of every site of an RGGB mosaic."""
    rows = np.arange(shape[0])[:, None] % 2
    cols = np.arange(shape[1])[None, :] % 2
    channel = np.ones(shape, dtype=np.int8)
    channel[(rows == 0) & (cols == 0)] = 0
    channel[(rows == 1) & (cols == 1)] = 2
    return channel


def channel_means(mosaic: np.ndarray) -> np.ndarray:
    """Mean of the R, G and B sites of a mosaic."""
    channel = bayer_channel_map(mosaic.shape)
    return np.array([mosaic[channel == c].mean() for c in range(3)])


# ========== BACKGROUND ==========

class BackgroundModel:
    """Ring buffer of the preceding ``capacity`` frames with a running per-pixel mean."""

    def __init__(self, capacity: int = 20):
        if capacity < 1:
            raise RejectedInputError("background capacity must be >= 1")
        self.capacity = capacity
        self.frames: deque = deque()
        self._sum: Optional[np.ndarray] = None
        self.shape: Optional[Tuple[int, int]] = None

    @property
    def count(self) -> int:
        return len(self.frames)

    @property
    def mean_frame(self) -> np.ndarray:
        if not self.frames:
            raise WarmupRequiredError("background model is empty; feed warm-up frames first")
        return self._sum / len(self.frames)

    @property
    def channel_means(self) -> np.ndarray:
        return channel_means(self.mean_frame)


def update_background(model: BackgroundModel, frame: SensorFrame) -> BackgroundModel:
    """Push ``frame`` into the buffer, evicting the oldest frame when full."""
    mosaic = frame.mosaic.astype(np.float64)
    if model.shape is None:
        model.shape = mosaic.shape
        model._sum = np.zeros(mosaic.shape)
    elif mosaic.shape != model.shape:
        raise RejectedInputError(f"frame shape {mosaic.shape} does not match background {model.shape}")

    if len(model.frames) == model.capacity:
        model._sum -= model.frames.popleft()
    model.frames.append(mosaic)
    model._sum += mosaic
    return model


def subtract_background(frame: SensorFrame, model: BackgroundModel) -> np.ndarray:
    """frame - mean background + per-channel background level."""
    if model.count == 0:
        raise WarmupRequiredError("background model is empty; feed warm-up frames first")
    if frame.mosaic.shape != model.shape:
        raise RejectedInputError(f"frame shape {frame.mosaic.shape} does not match background {model.shape}")

    mean = model.mean_frame
    levels = channel_means(mean)
    return frame.mosaic.astype(np.float64) - mean + levels[bayer_channel_map(mean.shape)]


# ========== CANDIDATE LOCALIZATION ==========

@dataclass(frozen=True)
class DetectionCandidate:
    center_px: Tuple[float, float]  # (x, y) on the full mosaic grid
    estimated_radius_px: float
    hough_score: float


def _quad_deviation(bgfree: np.ndarray) -> np.ndarray:
    """Channel-normalized relative deviation, averaged over each 2x2 Bayer quad."""
    channel = bayer_channel_map(bgfree.shape)
    levels = np.array([np.median(bgfree[channel == c]) for c in range(3)])
    levels = np.where(levels > 0, levels, 1.0)
    deviation = bgfree / levels[channel] - 1.0
    h, w = deviation.shape
    return deviation.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def edge_map(bgfree_frame: np.ndarray, hough_cfg: HoughConfig) -> np.ndarray:
    """Thresholded gradient magnitude of the quad-binned relative deviation.

    The cut is the largest of the configured percentile, ``edge_noise_k`` robust
    sigmas of the Sobel response and the absolute ``edge_floor``.
    """
    quad = _quad_deviation(bgfree_frame)
    if hough_cfg.smoothing_sigma_px > 0:
        quad = ndimage.gaussian_filter(quad, hough_cfg.smoothing_sigma_px)

    gx, gy = ndimage.sobel(quad, axis=1), ndimage.sobel(quad, axis=0)
    gradient = np.hypot(gx, gy)
    noise = max(stats.median_abs_deviation(g, axis=None, scale="normal") for g in (gx, gy))
    threshold = max(
        float(np.percentile(gradient, hough_cfg.edge_percentile)),
        hough_cfg.edge_noise_k * float(noise),
        hough_cfg.edge_floor,
    )
    return gradient > threshold


def _search_radii(hough_cfg: HoughConfig) -> np.ndarray:
    """Radii on the quad grid, half the full-resolution radius."""
    r_lo = max(2, int(math.ceil(hough_cfg.r_min_px / 2)))
    r_hi = max(r_lo, int(hough_cfg.r_max_px // 2))
    return np.arange(r_lo, r_hi + 1, max(1, hough_cfg.radius_step_px // 2))


def locate_candidates(bgfree_frame: np.ndarray, hough_cfg: HoughConfig) -> List[DetectionCandidate]:
    """Circular Hough search for hologram ring systems, strongest first.

    Every ring of a hologram votes for the same center, so votes are summed over
    the radius range and one ring system yields one peak. ``hough_score`` is the
    summed circle coverage at the center, in full circles.
    """
    edges = edge_map(bgfree_frame, hough_cfg)
    if not edges.any():
        return []

    radii = _search_radii(hough_cfg)
    votes = hough_circle(edges, radii, normalize=False, full_output=False)
    perimeter = np.array([len(circle_perimeter(0, 0, int(r))[0]) for r in radii], dtype=np.float64)
    coverage = votes / perimeter[:, None, None]
    support = coverage.sum(axis=0)
    total_votes = votes.sum(axis=0)

    sep_quad = max(1, hough_cfg.min_separation_px // 2)
    peaks = peak_local_max(
        support, min_distance=sep_quad, threshold_abs=hough_cfg.score_threshold,
        exclude_border=False, num_peaks=4 * hough_cfg.max_candidates,
    )
    order = sorted(((float(support[r, c]), int(r), int(c)) for r, c in peaks), key=lambda p: (-p[0], p[1], p[2]))

    kept: List[DetectionCandidate] = []
    for score, row, col in order:
        if total_votes[row, col] < hough_cfg.min_votes:
            continue
        x, y = _refine_peak(support, col, row)
        center = (2.0 * x + 0.5, 2.0 * y + 0.5)
        ringed = radii[coverage[:, row, col] >= 0.5]
        extent = float(2 * (ringed.max() if ringed.size else radii[int(np.argmax(coverage[:, row, col]))]))
        if any(_shadowed(center, score, k, hough_cfg.min_separation_px) for k in kept):
            continue
        kept.append(DetectionCandidate(center, extent, score))
        if len(kept) == hough_cfg.max_candidates:
            break

    logger.debug(f"Hough: {int(edges.sum())} edge px, {len(peaks)} peaks, {len(kept)} candidates")
    return kept


def _shadowed(center: Tuple[float, float], score: float, stronger: DetectionCandidate, min_separation_px: int) -> bool:
    """Too close to a kept candidate, or a weak echo inside its ring system."""
    distance = math.dist(center, stronger.center_px)
    if distance < min_separation_px:
        return True
    return distance < stronger.estimated_radius_px and score < 0.5 * stronger.hough_score


def _refine_peak(plane: np.ndarray, x: int, y: int) -> Tuple[float, float]:
    """Sub-pixel accumulator peak by the weighted centroid of its 3x3 neighbourhood."""
    y0, y1 = max(y - 1, 0), min(y + 2, plane.shape[0])
    x0, x1 = max(x - 1, 0), min(x + 2, plane.shape[1])
    patch = plane[y0:y1, x0:x1]
    weights = np.clip(patch - patch.min(), 0, None)
    if weights.sum() <= 0:
        return float(x), float(y)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    return float((xx * weights).sum() / weights.sum()), float((yy * weights).sum() / weights.sum())


# ========== ROI AND CHANNELS ==========

@dataclass(frozen=True)
class RoiCrop:
    mosaic: np.ndarray
    origin_px: Tuple[int, int]  # (x0, y0) of the crop in the frame; always even
    shift_px: Tuple[int, int]  # clamped origin minus desired origin
    center_px: Tuple[float, float]  # object center inside the crop


def crop_roi(bgfree_frame: np.ndarray, center: Tuple[float, float], roi_px: int = 512) -> RoiCrop:
    """Bayer-aligned ``roi_px`` square around ``center``, shifted inward at the borders."""
    h, w = bgfree_frame.shape
    if roi_px % 2 or roi_px > min(h, w):
        raise RejectedInputError(f"ROI of {roi_px} px does not fit a {w}x{h} frame on the Bayer phase")

    def origin(c, size):
        desired = 2 * math.floor((int(round(c)) - roi_px // 2) / 2)
        return min(max(desired, 0), size - roi_px), desired

    (x0, dx), (y0, dy) = origin(center[0], w), origin(center[1], h)
    crop = bgfree_frame[y0:y0 + roi_px, x0:x0 + roi_px]
    return RoiCrop(crop, (x0, y0), (x0 - dx, y0 - dy), (center[0] - x0, center[1] - y0))


def green_site_to_grid(r, c, n: int):
    """Quincunx green site (r + c odd) of an n x n crop -> (u, v) on the 45 degree grid."""
    return (r + c - 1) // 2, (c - r + n - 1) // 2


def grid_to_green_site(u, v, n: int):
    """Inverse of ``green_site_to_grid``."""
    return u - v + n // 2, u + v - n // 2 + 1


def green_grid_mask(n: int) -> np.ndarray:
    """Populated cells of the n x n rotated green grid (exactly n*n/2, a diamond)."""
    u, v = np.mgrid[0:n, 0:n]
    r, c = grid_to_green_site(u, v, n)
    return (r >= 0) & (r < n) & (c >= 0) & (c < n)


def inscribed_green_window(n: int) -> Tuple[slice, slice]:
    """The n/2 x n/2 square of the rotated grid that lies wholly inside the diamond."""
    lo = n // 4
    return slice(lo, lo + n // 2), slice(lo, lo + n // 2)


@dataclass(frozen=True)
class ChannelHolograms:
    """Per-colour amplitude holograms of one ROI.

    red/blue sit on the native 2p grids (blue offset by one pixel in x and y);
    green holds the quincunx sites of the inscribed square of the 45 degree grid,
    pitch p*sqrt(2), every cell a measured site.
    """

    red: np.ndarray
    green: np.ndarray
    blue: np.ndarray
    pitch_m: float  # sensor pitch p
    roi_px: int
    center_px: Tuple[float, float] = (0.0, 0.0)  # object center inside the ROI
    origin_px: Tuple[int, int] = (0, 0)
    levels: Dict[str, float] = field(default_factory=dict)

    @property
    def red_pitch_m(self) -> float:
        return 2.0 * self.pitch_m

    @property
    def blue_pitch_m(self) -> float:
        return 2.0 * self.pitch_m

    @property
    def green_pitch_m(self) -> float:
        return math.sqrt(2.0) * self.pitch_m

    @property
    def green_offset(self) -> int:
        """Index of the first green row/column on the full n x n rotated grid."""
        return self.roi_px // 4

    @property
    def green_sample_count(self) -> int:
        return int(self.green.size)


def check_unmixing(matrix) -> np.ndarray:
    m = np.asarray(matrix, dtype=np.float64)
    if m.shape != (3, 3) or not np.all(np.isfinite(m)):
        raise ConfigurationError("crosstalk inverse must be a finite 3x3 matrix")
    if abs(np.linalg.det(m)) < 1e-12 or np.linalg.cond(m) > 1e12:
        raise ConfigurationError("crosstalk inverse is singular")
    return m


def extract_channels(crop: RoiCrop, crosstalk_inverse, pitch_m: float) -> ChannelHolograms:
    """Unmix colour crosstalk and split the crop into R, G, B amplitude holograms."""
    unmix = check_unmixing(crosstalk_inverse)
    mosaic = np.asarray(crop.mosaic, dtype=np.float64)
    n = mosaic.shape[0]
    if mosaic.shape != (n, n) or n % 4:
        raise RejectedInputError("ROI must be square with a side divisible by 4")

    r_site = mosaic[0::2, 0::2]
    g1, g2 = mosaic[0::2, 1::2], mosaic[1::2, 0::2]
    b_site = mosaic[1::2, 1::2]
    g_quad = 0.5 * (g1 + g2)

    # Native site value for the own channel, quad-level estimates for the other two
    red = unmix[0, 0] * r_site + unmix[0, 1] * g_quad + unmix[0, 2] * b_site
    blue = unmix[2, 0] * r_site + unmix[2, 1] * g_quad + unmix[2, 2] * b_site
    green_1 = unmix[1, 0] * r_site + unmix[1, 1] * g1 + unmix[1, 2] * b_site
    green_2 = unmix[1, 0] * r_site + unmix[1, 1] * g2 + unmix[1, 2] * b_site

    green_mosaic = np.zeros_like(mosaic)
    green_mosaic[0::2, 1::2] = green_1
    green_mosaic[1::2, 0::2] = green_2
    rows, cols = inscribed_green_window(n)
    u, v = np.mgrid[rows, cols]
    green = green_mosaic[grid_to_green_site(u, v, n)]

    levels = {}
    amplitudes = {}
    for name, plane in (("red", red), ("green", green), ("blue", blue)):
        level = float(np.median(plane))
        if not level > 0:
            level = 1.0
        levels[name] = level
        amplitudes[name] = np.sqrt(np.clip(plane / level, 0.0, None))

    return ChannelHolograms(
        red=amplitudes["red"], green=amplitudes["green"], blue=amplitudes["blue"],
        pitch_m=pitch_m, roi_px=n,
        center_px=crop.center_px, origin_px=crop.origin_px, levels=levels,
    )
