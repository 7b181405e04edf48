"""
Scalar-diffraction primitives shared by the simulator and the reconstruction pipeline:
complex fields, angular-spectrum propagation, band-limited upsampling and the
edge-sparsity (Tamura-of-gradient) autofocus.

Every function here is a pure function of its inputs.
"""

from dataclasses import dataclass
from typing import Iterable, Tuple

import numpy as np
from scipy import optimize

from src.holoflow.exceptions import NoFocusFoundError, RejectedInputError
from src.holoflow.models import FocusSearchConfig
from src.holoflow.utils.logging_setup import get_logger

logger = get_logger(__name__)

Tilt = Tuple[float, float]


@dataclass(frozen=True)
class ComplexField:
    """2D complex optical field, row-major with top-left origin."""

    samples: np.ndarray
    pitch_m: float
    wavelength_m: float

    def __post_init__(self):
        samples = np.asarray(self.samples)
        if samples.ndim != 2 or min(samples.shape) < 1:
            raise RejectedInputError(f"field samples must be a non-empty 2D array, got shape {samples.shape}")
        for name in ("pitch_m", "wavelength_m"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise RejectedInputError(f"{name} must be positive and finite, got {value}")
        object.__setattr__(self, "samples", samples.astype(np.complex128, copy=False))

    @property
    def width_px(self) -> int:
        return self.samples.shape[1]

    @property
    def height_px(self) -> int:
        return self.samples.shape[0]

    @property
    def intensity(self) -> np.ndarray:
        return np.abs(self.samples) ** 2

    @property
    def phase(self) -> np.ndarray:
        return np.angle(self.samples)

    def energy(self) -> float:
        """Physical energy: sum of |u|^2 times the pixel area."""
        return float(np.sum(np.abs(self.samples) ** 2) * self.pitch_m ** 2)

    def with_samples(self, samples: np.ndarray) -> "ComplexField":
        return ComplexField(samples, self.pitch_m, self.wavelength_m)

    @classmethod
    def from_amplitude(cls, amplitude: np.ndarray, pitch_m: float, wavelength_m: float) -> "ComplexField":
        """Zero-phase field from a real amplitude image."""
        return cls(np.asarray(amplitude, dtype=np.float64).astype(np.complex128), pitch_m, wavelength_m)


def _require_finite(field: ComplexField):
    if not np.all(np.isfinite(field.samples)):
        raise RejectedInputError("field contains non-finite samples")


def transfer_function(shape: Tuple[int, int], pitch_m: float, wavelength_m: float,
                      distance_m: float, tilt: Tilt = (0.0, 0.0)) -> np.ndarray:
    """Angular-spectrum transfer function on the unshifted FFT grid.

    Spatial frequencies are offset by the illumination carrier sin(tilt)/lambda so the
    propagated envelope of a tilted plane wave walks off laterally; evanescent
    components are zeroed.
    """
    ny, nx = shape
    fx = np.fft.fftfreq(nx, d=pitch_m) + np.sin(tilt[0]) / wavelength_m
    fy = np.fft.fftfreq(ny, d=pitch_m) + np.sin(tilt[1]) / wavelength_m
    arg = 1.0 / wavelength_m ** 2 - fx[None, :] ** 2 - fy[:, None] ** 2
    propagating = arg >= 0
    kz = np.sqrt(np.where(propagating, arg, 0.0))
    return np.where(propagating, np.exp(2j * np.pi * distance_m * kz), 0.0)


def plane_wave_phase(distance_m: float, wavelength_m: float, tilt: Tilt = (0.0, 0.0)) -> complex:
    """Phase factor ``propagate`` applies to the (tilted) illumination plane wave."""
    kz = np.sqrt(max(0.0, 1.0 - np.sin(tilt[0]) ** 2 - np.sin(tilt[1]) ** 2)) / wavelength_m
    return complex(np.exp(2j * np.pi * distance_m * kz))


def propagate(field: ComplexField, distance_m: float, tilt: Tilt = (0.0, 0.0)) -> ComplexField:
    """Propagate ``field`` by ``distance_m`` (negative = back-propagation)."""
    if not np.isfinite(distance_m):
        raise RejectedInputError(f"propagation distance must be finite, got {distance_m}")
    _require_finite(field)
    if distance_m == 0:
        return field

    h = transfer_function(field.samples.shape, field.pitch_m, field.wavelength_m, distance_m, tilt)
    return field.with_samples(np.fft.ifft2(np.fft.fft2(field.samples) * h))


def upsample(field: ComplexField, factor_per_axis: int) -> ComplexField:
    """Band-limited interpolation by zero padding the spectrum.

    Sample (0, 0) keeps its position, so taking every ``factor``-th output sample
    returns the input. Physical energy (``ComplexField.energy``) is preserved.
    """
    if isinstance(factor_per_axis, bool) or int(factor_per_axis) != factor_per_axis or factor_per_axis < 1:
        raise RejectedInputError(f"upsample factor must be an integer >= 1, got {factor_per_axis}")
    factor = int(factor_per_axis)
    if factor == 1:
        return field
    _require_finite(field)

    ny, nx = field.samples.shape
    my, mx = ny * factor, nx * factor
    spectrum = np.fft.fftshift(np.fft.fft2(field.samples))
    before_y, before_x = my // 2 - ny // 2, mx // 2 - nx // 2
    padded = np.pad(
        spectrum,
        ((before_y, my - ny - before_y), (before_x, mx - nx - before_x)),
    )
    samples = np.fft.ifft2(np.fft.ifftshift(padded)) * factor ** 2
    return ComplexField(samples, field.pitch_m / factor, field.wavelength_m)


def apodize(field: ComplexField, border_px: int = 16) -> ComplexField:
    """Cosine taper of the border towards the field's mean level."""
    if border_px <= 0:
        return field
    ny, nx = field.samples.shape

    def ramp(n):
        w = np.ones(n)
        k = min(border_px, n // 2)
        edge = 0.5 - 0.5 * np.cos(np.pi * (np.arange(k) + 0.5) / k)
        w[:k] = edge
        w[n - k:] = edge[::-1]
        return w

    window = ramp(ny)[:, None] * ramp(nx)[None, :]
    level = field.samples.mean()
    return field.with_samples(level + (field.samples - level) * window)


def edge_sparsity_score(field: ComplexField) -> float:
    """Tamura coefficient sqrt(sigma/mu) of the complex-gradient magnitude.

    Forward differences in x and y; a zero-gradient field scores 0.
    """
    s = field.samples
    if s.shape[0] < 2 or s.shape[1] < 2:
        raise RejectedInputError("edge sparsity needs at least 2x2 samples")
    gx = s[:-1, 1:] - s[:-1, :-1]
    gy = s[1:, :-1] - s[:-1, :-1]
    magnitude = np.sqrt(np.abs(gx) ** 2 + np.abs(gy) ** 2)
    mu = magnitude.mean()
    if mu <= 0:
        return 0.0
    return float(np.sqrt(magnitude.std() / mu))


class _FocusSweep:
    """Back-propagation sweep of one hologram reusing its spectrum."""

    def __init__(self, hologram: ComplexField):
        _require_finite(hologram)
        self.hologram = hologram
        self.spectrum = np.fft.fft2(hologram.samples)

    def score(self, z_m: float) -> float:
        h = transfer_function(self.spectrum.shape, self.hologram.pitch_m, self.hologram.wavelength_m, -z_m)
        return edge_sparsity_score(self.hologram.with_samples(np.fft.ifft2(self.spectrum * h)))


def focus_curve(hologram: ComplexField, z_values: Iterable[float]) -> np.ndarray:
    """Edge-sparsity score of the back-propagated hologram at every height in ``z_values``."""
    sweep = _FocusSweep(hologram)
    return np.array([sweep.score(z) for z in z_values])


def autofocus(hologram: ComplexField, cfg: FocusSearchConfig) -> float:
    """Height above the sensor that maximizes the edge-sparsity score.

    Coarse grid over [z_min, z_max], then golden-section refinement inside the
    bracket around the best grid point. Raises NoFocusFoundError when the metric
    is flat or its optimum sits on a bound of the interval.
    """
    sweep = _FocusSweep(hologram)
    grid = np.arange(cfg.z_min_m, cfg.z_max_m + 0.5 * cfg.coarse_step_m, cfg.coarse_step_m)
    grid = grid[grid <= cfg.z_max_m + 1e-15]
    scores = np.array([sweep.score(z) for z in grid])

    best = int(np.argmax(scores))
    spread = scores.max() - scores.min()
    if not np.isfinite(spread) or spread <= 1e-12 * max(1.0, abs(scores.max())):
        raise NoFocusFoundError("edge-sparsity metric is flat over the search interval")

    lo = grid[max(best - 1, 0)]
    hi = grid[min(best + 1, len(grid) - 1)]
    mid = grid[best]
    objective = lambda z: -sweep.score(float(np.clip(z, cfg.z_min_m, cfg.z_max_m)))  # noqa: E731

    interior = 0 < best < len(grid) - 1 and scores[best] > max(scores[best - 1], scores[best + 1])
    if interior:
        rel_tol = cfg.refine_tol_m / (2.0 * max(abs(mid), cfg.coarse_step_m))
        result = optimize.minimize_scalar(objective, bracket=(lo, mid, hi), method="golden", tol=rel_tol)
    else:
        result = optimize.minimize_scalar(
            objective, bounds=(lo, hi), method="bounded", options={"xatol": cfg.refine_tol_m}
        )

    z_refined = float(np.clip(result.x, cfg.z_min_m, cfg.z_max_m))
    z_focus = z_refined if -result.fun >= scores[best] else float(mid)

    # A metric still rising at the end of the interval has no optimum inside it
    margin = 3.0 * cfg.refine_tol_m
    if not interior and min(z_focus - cfg.z_min_m, cfg.z_max_m - z_focus) <= margin:
        raise NoFocusFoundError(f"edge-sparsity optimum pinned to the search bound at {z_focus * 1e6:.1f} um")
    logger.debug(f"autofocus: coarse best {mid * 1e6:.1f} um, refined {z_focus * 1e6:.2f} um")
    return z_focus
