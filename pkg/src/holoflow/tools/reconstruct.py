"""
Per-object reconstruction: blue-channel autofocus, colour back-propagation onto a
common p/2 grid, and size measurement.
"""

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage
from skimage.filters import threshold_otsu
from skimage.measure import label, regionprops

from src.holoflow.exceptions import RejectedInputError
from src.holoflow.models import FocusSearchConfig, IlluminationSpec, ReconstructionConfig
from src.holoflow.tools.optics_core import (
    ComplexField, apodize, autofocus, plane_wave_phase, propagate, upsample,
)
from src.holoflow.tools.preprocess import ChannelHolograms
from src.holoflow.utils.logging_setup import get_logger

logger = get_logger(__name__)

# Objects are segmented only if their field deviation clears this level
MIN_SEGMENT_CONTRAST = 0.1


@dataclass(frozen=True)
class ReconstructionStack:
    """Focused intensity and phase of one object, planes ordered R, G, B on a grid of pitch p/2."""

    intensity: np.ndarray  # (3, n, n), >= 0
    phase: np.ndarray  # (3, n, n), in (-pi, pi]
    pitch_m: float
    focus_z_m: float
    center_m: Tuple[float, float]  # object center in frame coordinates

    def __post_init__(self):
        if self.intensity.shape != self.phase.shape or self.intensity.ndim != 3 or self.intensity.shape[0] != 3:
            raise RejectedInputError(f"stack planes must be (3, n, n), got {self.intensity.shape}")
        if np.any(self.intensity < 0):
            raise RejectedInputError("stack intensity must be non-negative")

    @property
    def size_px(self) -> int:
        return self.intensity.shape[1]

    def planes(self) -> np.ndarray:
        """Six planes: intensity R, G, B then phase R, G, B."""
        return np.concatenate([self.intensity, self.phase], axis=0)


@dataclass(frozen=True)
class SizeMeasurement:
    equivalent_diameter_m: float
    major_axis_m: float
    minor_axis_m: float
    orientation_rad: float
    segmentable: bool = True

    @classmethod
    def not_segmentable(cls) -> "SizeMeasurement":
        return cls(0.0, 0.0, 0.0, 0.0, segmentable=False)


def _blue_field(channels: ChannelHolograms, wavelength_m: float, taper_px: int) -> ComplexField:
    field = ComplexField.from_amplitude(channels.blue, channels.blue_pitch_m, wavelength_m)
    return apodize(field, taper_px) if taper_px else field


def autofocus_object(channels: ChannelHolograms, cfg: FocusSearchConfig,
                     illum: Optional[IlluminationSpec] = None, taper_px: int = 0) -> float:
    """Focus height from the blue amplitude hologram (zero initial phase)."""
    illum = illum or IlluminationSpec()
    return autofocus(_blue_field(channels, illum.wavelengths_m[2], taper_px), cfg)


def _rotated_tilt(tilt: Tuple[float, float]) -> Tuple[float, float]:
    """Express an (x, y) tilt on the 45 degree green lattice (columns = v, rows = u)."""
    sx, sy = math.sin(tilt[0]), math.sin(tilt[1])
    su, sv = (sx + sy) / math.sqrt(2.0), (sx - sy) / math.sqrt(2.0)
    return math.asin(sv), math.asin(su)


def _focus(field: ComplexField, z_m: float, tilt: Tuple[float, float], taper_px: int) -> ComplexField:
    if taper_px:
        field = apodize(field, taper_px)
    back = propagate(field, -z_m, tilt)
    # Undo the reference-wave phase so an empty ROI reconstructs to phase 0
    return back.with_samples(back.samples * plane_wave_phase(z_m, field.wavelength_m, tilt))


def _green_to_common(samples: np.ndarray, n_roi: int, offset: int, factor: int, out_px: int) -> np.ndarray:
    """Bilinear resampling of the upsampled rotated green field onto the axis-aligned grid.

    ``offset`` is the first row/column of the green window on the full rotated grid;
    points outside the window take the unit reference field.
    """
    grid = np.arange(out_px) * (n_roi / out_px)  # full-pixel coordinates of the output grid
    r, c = np.meshgrid(grid, grid, indexing="ij")
    u = ((r + c - 1.0) / 2.0 - offset) * factor
    v = ((c - r + n_roi - 1.0) / 2.0 - offset) * factor
    coords = np.array([u.ravel(), v.ravel()])
    re = ndimage.map_coordinates(samples.real, coords, order=1, mode="constant", cval=1.0)
    im = ndimage.map_coordinates(samples.imag, coords, order=1, mode="constant", cval=0.0)
    return (re + 1j * im).reshape(out_px, out_px)


def _border_median(plane: np.ndarray, width: int = 16) -> float:
    border = np.concatenate([
        plane[:width].ravel(), plane[-width:].ravel(),
        plane[width:-width, :width].ravel(), plane[width:-width, -width:].ravel(),
    ])
    level = float(np.median(border))
    return level if level > 0 else 1.0


def contrast_field(amplitude: np.ndarray, pitch_m: float, wavelength_m: float) -> ComplexField:
    """Normalized hologram intensity as a zero-phase field.

    Back-propagating I = |1 + s|^2 puts the scattered term s back at full scale on the
    object (the twin term s* stays defocused); back-propagating sqrt(I) would halve it.
    """
    return ComplexField.from_amplitude(amplitude ** 2, pitch_m, wavelength_m)


def reconstruct_object(channels: ChannelHolograms, z_m: float, illum: IlluminationSpec,
                       cfg: Optional[ReconstructionConfig] = None,
                       channel_height_m: float = 0.8e-3) -> ReconstructionStack:
    """Back-propagate all three colours by ``z_m`` and resample them onto one p/2 grid.

    Propagation runs on the native lattices and is followed by the band-limited
    upsample; both are Fourier multipliers, so the order does not change the result.
    The planes are rolled so the object sits at the grid center.
    """
    cfg = cfg or ReconstructionConfig()
    if not 0 < z_m < channel_height_m:
        raise RejectedInputError(f"focus z={z_m} outside (0, {channel_height_m})")

    n = channels.roi_px
    taper = cfg.taper_px if cfg.apodize else 0
    out_px = (n // 2) * cfg.red_blue_upsample
    planes = []
    for name, amplitude, pitch, wl, tilt in (
        ("red", channels.red, channels.red_pitch_m, illum.wavelengths_m[0], illum.incidence_tilt_rad[0]),
        ("green", channels.green, channels.green_pitch_m, illum.wavelengths_m[1], illum.incidence_tilt_rad[1]),
        ("blue", channels.blue, channels.blue_pitch_m, illum.wavelengths_m[2], illum.incidence_tilt_rad[2]),
    ):
        hologram = contrast_field(amplitude, pitch, wl)
        if name == "green":
            focused = _focus(hologram, z_m, _rotated_tilt(tilt), taper)
            fine = upsample(focused, cfg.green_upsample)
            samples = _green_to_common(fine.samples, n, channels.green_offset, cfg.green_upsample, out_px)
        else:
            focused = _focus(hologram, z_m, tilt, taper)
            samples = upsample(focused, cfg.red_blue_upsample).samples
            if name == "blue":
                # Blue sites sit one sensor pixel down and right of red sites
                samples = np.roll(samples, (out_px // n, out_px // n), axis=(0, 1))
        planes.append(samples)

    fields = np.stack(planes)
    # Recenter so the object is in the middle of the grid
    scale = out_px / n
    cx, cy = channels.center_px
    shift = (int(round(out_px / 2 - cy * scale)), int(round(out_px / 2 - cx * scale)))
    fields = np.roll(fields, shift, axis=(1, 2))

    intensity = np.abs(fields) ** 2
    intensity /= np.array([_border_median(p) for p in intensity])[:, None, None]
    phase = np.angle(fields)
    phase[phase <= -np.pi] = np.pi

    pitch = channels.pitch_m / 2.0
    center = ((channels.origin_px[0] + cx) * channels.pitch_m, (channels.origin_px[1] + cy) * channels.pitch_m)
    return ReconstructionStack(intensity, phase, pitch, z_m, center)


def measure_size(stack: ReconstructionStack, crop_px: int = 256) -> SizeMeasurement:
    """Otsu segmentation of the blue channel around the grid center.

    Segments the deviation |E - 1| of the focused blue field, which is large for both
    absorbing and phase objects, and measures the component under the center.
    """
    n = stack.size_px
    lo = (n - crop_px) // 2
    sl = slice(lo, lo + crop_px)
    field = np.sqrt(stack.intensity[2, sl, sl]) * np.exp(1j * stack.phase[2, sl, sl])
    deviation = ndimage.gaussian_filter(np.abs(field - 1.0), 1.0)

    if deviation.max() < MIN_SEGMENT_CONTRAST:
        return SizeMeasurement.not_segmentable()
    threshold = max(threshold_otsu(deviation), 0.5 * MIN_SEGMENT_CONTRAST)
    labels = label(deviation > threshold)

    c = crop_px // 2
    chosen = labels[c, c]
    if chosen == 0:
        # Nearest component within a few microns of the center
        near = labels[c - 8:c + 8, c - 8:c + 8]
        ids = np.unique(near[near > 0])
        if ids.size == 0:
            return SizeMeasurement.not_segmentable()
        chosen = max(ids, key=lambda i: int((labels == i).sum()))

    region = next(r for r in regionprops((labels == chosen).astype(np.uint8)))
    pitch = stack.pitch_m
    major = float(region.major_axis_length) * pitch
    minor = float(region.minor_axis_length) * pitch
    equivalent = math.sqrt(4.0 * region.area / math.pi) * pitch
    equivalent = min(max(equivalent, minor), major) if major > 0 else equivalent
    return SizeMeasurement(equivalent, major, minor, float(region.orientation))
