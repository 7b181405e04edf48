"""
Physics ground-truth generator: thin-object particles advected through the channel,
rendered as in-line colour holograms on an RGGB sensor with shot and read noise.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.holoflow.exceptions import RejectedInputError
from src.holoflow.models import (
    ChannelGeometry, FlowModel, FrameVisit, GroundTruthRecord, IlluminationSpec,
    ParticleSpec, RunSpec, SensorModel, StreamManifest,
)
from src.holoflow.tools.constants import (
    DISTRACTOR_DIAMETER_RANGE_M, TARGET_AMPLITUDE_RANGE, TARGET_AXIS_RATIO_RANGE,
    TARGET_LONG_AXIS_RANGE_M, TARGET_PHASE_RANGE_RAD,
)
from src.holoflow.tools.optics_core import ComplexField, plane_wave_phase, propagate
from src.holoflow.tools.preprocess import SensorFrame, bayer_channel_map
from src.holoflow.utils import frame_io
from src.holoflow.utils.logging_setup import get_logger

logger = get_logger(__name__)

SUPERSAMPLE = 4


# ========== PARTICLES ==========

def sample_particle(rng: np.random.Generator, particle_id: int, class_label: str,
                    position_m: Tuple[float, float, float], illum: IlluminationSpec) -> ParticleSpec:
    """Draw synthetic morphology and contrast for one particle.

    Targets are oval, 8-14 um long and phase dominated; distractors span 2-40 um
    with mostly absorbing contrast.
    """
    lambda_g = illum.wavelengths_m[1]
    if class_label == "target_cyst":
        long_axis = rng.uniform(*TARGET_LONG_AXIS_RANGE_M)
        ratio = rng.uniform(*TARGET_AXIS_RATIO_RANGE)
        diameter = long_axis / math.sqrt(ratio)
        shape = "ellipse"
        amplitude = rng.uniform(*TARGET_AMPLITUDE_RANGE)
        phase_g = rng.uniform(*TARGET_PHASE_RANGE_RAD)
    else:
        diameter = rng.uniform(*DISTRACTOR_DIAMETER_RANGE_M)
        shape = "ellipse" if rng.random() < 0.5 else "disk"
        ratio = rng.uniform(1.0, 1.3) if shape == "ellipse" else 1.0
        amplitude = rng.uniform(0.0, 0.7)
        phase_g = rng.uniform(0.0, 0.5)

    # Optical path difference is fixed, so the phase delay scales with 1/lambda
    phases = tuple(phase_g * lambda_g / lam for lam in illum.wavelengths_m)
    return ParticleSpec(
        id=particle_id,
        class_label=class_label,
        position_m=position_m,
        equivalent_diameter_m=diameter,
        amplitude_transmittance=amplitude,
        phase_delay_rad=phases,
        shape=shape,
        axis_ratio=ratio,
        orientation_rad=rng.uniform(0.0, math.pi),
    )


def _coverage(particle: ParticleSpec, col0: int, row0: int, window_px: int, pitch_m: float):
    """Supersampled area fraction of the particle in each window pixel.

    Returns the coverage on the particle's bounding box and the box slices inside the window.
    """
    x, y, _ = particle.position_m
    major, minor = particle.axes_m
    a, b = 0.5 * major, 0.5 * minor
    reach = a + 2 * pitch_m

    c_lo = max(int(math.floor((x - reach) / pitch_m)) - col0, 0)
    c_hi = min(int(math.ceil((x + reach) / pitch_m)) - col0 + 1, window_px)
    r_lo = max(int(math.floor((y - reach) / pitch_m)) - row0, 0)
    r_hi = min(int(math.ceil((y + reach) / pitch_m)) - row0 + 1, window_px)
    if c_lo >= c_hi or r_lo >= r_hi:
        return None, None

    sub = ((np.arange(SUPERSAMPLE) + 0.5) / SUPERSAMPLE - 0.5) * pitch_m
    xs = ((col0 + np.arange(c_lo, c_hi))[:, None] * pitch_m + sub[None, :]).ravel() - x
    ys = ((row0 + np.arange(r_lo, r_hi))[:, None] * pitch_m + sub[None, :]).ravel() - y
    cos_t, sin_t = math.cos(particle.orientation_rad), math.sin(particle.orientation_rad)
    xr = xs[None, :] * cos_t + ys[:, None] * sin_t
    yr = -xs[None, :] * sin_t + ys[:, None] * cos_t
    inside = (xr / a) ** 2 + (yr / b) ** 2 <= 1.0
    coverage = inside.reshape(r_hi - r_lo, SUPERSAMPLE, c_hi - c_lo, SUPERSAMPLE).mean(axis=(1, 3))
    return coverage, (slice(r_lo, r_hi), slice(c_lo, c_hi))


def sensor_fields(particles: Sequence[ParticleSpec], sensor: SensorModel, illum: IlluminationSpec,
                  geometry: ChannelGeometry, window_px: int = 256) -> np.ndarray:
    """Noise-free complex sensor-plane fields, shape (3, H, W), reference wave = 1.

    Each particle's scattered field is propagated inside a window centered on it and
    added coherently to the unit reference.
    """
    h, w, p = sensor.height_px, sensor.width_px, sensor.pitch_m
    fields = np.ones((3, h, w), dtype=np.complex128)

    for particle in particles:
        x, y, z = particle.position_m
        if not 0 < z < geometry.height_m:
            raise RejectedInputError(f"particle {particle.id}: z={z} outside (0, {geometry.height_m})")
        col0 = int(round(x / p)) - window_px // 2
        row0 = int(round(y / p)) - window_px // 2
        # Window intersection with the sensor
        fc0, fc1 = max(col0, 0), min(col0 + window_px, w)
        fr0, fr1 = max(row0, 0), min(row0 + window_px, h)
        if fc0 >= fc1 or fr0 >= fr1:
            continue

        coverage, box = _coverage(particle, col0, row0, window_px, p)
        if coverage is None:
            continue
        for c, wavelength in enumerate(illum.wavelengths_m):
            tilt = illum.incidence_tilt_rad[c]
            contrast = particle.amplitude_transmittance * np.exp(1j * particle.phase_delay_rad[c]) - 1.0
            obj = np.zeros((window_px, window_px), dtype=np.complex128)
            obj[box] = coverage * contrast
            scattered = propagate(ComplexField(obj, p, wavelength), z, tilt).samples
            scattered *= np.conj(plane_wave_phase(z, wavelength, tilt))
            fields[c, fr0:fr1, fc0:fc1] += scattered[fr0 - row0:fr1 - row0, fc0 - col0:fc1 - col0]
    return fields


def ideal_mosaic(fields: np.ndarray, sensor: SensorModel) -> np.ndarray:
    """Crosstalk-mixed intensities sampled on the RGGB mosaic, in DN before noise."""
    intensity = np.abs(fields) ** 2
    mixed = np.einsum("ij,jhw->ihw", np.asarray(sensor.crosstalk_matrix, dtype=np.float64), intensity)
    channel = bayer_channel_map(intensity.shape[1:])
    return sensor.reference_level_dn * np.take_along_axis(mixed, channel[None].astype(np.intp), axis=0)[0]


def apply_sensor_noise(dn: np.ndarray, sensor: SensorModel, rng: Optional[np.random.Generator]) -> np.ndarray:
    """Poisson shot noise, Gaussian read noise, then quantization to ``bit_depth``."""
    signal = dn
    if rng is not None:
        if sensor.shot_noise:
            electrons = rng.poisson(np.clip(dn, 0, None) * sensor.electrons_per_dn)
            signal = electrons / sensor.electrons_per_dn
        if sensor.read_noise_dn > 0:
            signal = signal + rng.normal(0.0, sensor.read_noise_dn, size=dn.shape)
    return np.clip(np.rint(signal), 0, sensor.max_dn).astype(np.uint16)


def render_frame(particles: Sequence[ParticleSpec], sensor: SensorModel, illum: IlluminationSpec,
                 geometry: ChannelGeometry, rng: Optional[np.random.Generator] = None,
                 frame_index: int = 0, timestamp_s: float = 0.0, window_px: int = 256) -> SensorFrame:
    """Render one exposure; ``rng=None`` gives the noise-free quantized frame."""
    fields = sensor_fields(particles, sensor, illum, geometry, window_px)
    mosaic = apply_sensor_noise(ideal_mosaic(fields, sensor), sensor, rng)
    return SensorFrame(frame_index, timestamp_s, mosaic, sensor)


def render_roi(particle: ParticleSpec, sensor: SensorModel, illum: IlluminationSpec,
               geometry: ChannelGeometry, roi_px: int = 512,
               rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Mosaic of a single particle centered in a ``roi_px`` square sensor, as float DN."""
    roi_sensor = sensor.model_copy(update={"width_px": roi_px, "height_px": roi_px})
    center = 0.5 * roi_px * sensor.pitch_m
    placed = particle.model_copy(update={"position_m": (center, center, particle.position_m[2])})
    window = min(roi_px, 256)
    return render_frame([placed], roi_sensor, illum, geometry, rng, window_px=window).mosaic.astype(np.float64)


# ========== MOTION ==========

def advect(particles: Sequence[ParticleSpec], flow: FlowModel, geometry: ChannelGeometry, dt_s: float,
           margin_m: float = 0.0, jitter_m: float = 0.0,
           rng: Optional[np.random.Generator] = None) -> Tuple[List[ParticleSpec], List[ParticleSpec]]:
    """Move particles downstream by v(z, y) * dt; returns (still in view, exited)."""
    if dt_s < 0:
        raise RejectedInputError(f"dt_s must be >= 0, got {dt_s}")

    moved, exited = [], []
    for particle in particles:
        if particle.static:
            moved.append(particle)
            continue
        x, y, z = particle.position_m
        x += float(flow.velocity(z, geometry, y + geometry.fov_y_offset_m)) * dt_s
        if jitter_m > 0 and rng is not None:
            x += rng.normal(0.0, jitter_m)
            y += rng.normal(0.0, jitter_m)
        updated = particle.model_copy(update={"position_m": (x, y, z)})
        (exited if x > geometry.fov_x_m + margin_m else moved).append(updated)
    return moved, exited


class GroundTruth:
    """Per-particle visit history of a simulated run."""

    def __init__(self):
        self.records: Dict[int, GroundTruthRecord] = {}

    def register(self, particle: ParticleSpec):
        self.records[particle.id] = GroundTruthRecord(
            id=particle.id,
            class_label=particle.class_label,
            diameter_um=particle.equivalent_diameter_m * 1e6,
        )

    def record_frame(self, frame_index: int, visible: Sequence[ParticleSpec]):
        for particle in visible:
            x, y, z = particle.position_m
            self.records[particle.id].frames.append(
                FrameVisit(frame=frame_index, x_um=x * 1e6, y_um=y * 1e6, z_um=z * 1e6)
            )

    def to_records(self) -> List[GroundTruthRecord]:
        return [self.records[k] for k in sorted(self.records)]

    def count(self, class_label: Optional[str] = None) -> int:
        return sum(1 for r in self.records.values() if class_label is None or r.class_label == class_label)


def _in_fov(particle: ParticleSpec, geometry: ChannelGeometry) -> bool:
    x, y, _ = particle.position_m
    return 0 <= x < geometry.fov_x_m and 0 <= y < geometry.fov_y_m


def plan_run(spec: RunSpec) -> Tuple[List[List[ParticleSpec]], GroundTruth]:
    """Sequential particle states for every frame of a run, plus the ground truth."""
    geometry, flow, illum = spec.resolved_geometry(), spec.resolved_flow(), spec.illumination
    dt, n_frames, warmup = spec.frame_period_s, spec.frame_count, spec.warmup_frames
    rng = np.random.default_rng(spec.seed)
    jitter_rng = np.random.default_rng([spec.seed, 2])
    margin = 0.5 * spec.render_window_px * spec.sensor.pitch_m
    if not 0 < spec.z_range_m[0] < spec.z_range_m[1] < geometry.height_m:
        raise RejectedInputError(f"z_range_m {spec.z_range_m} must lie inside (0, {geometry.height_m})")

    n_flowing = spec.target_count + spec.distractor_count
    if n_flowing and n_frames <= warmup:
        raise RejectedInputError("frame_count must exceed warmup_frames to place particles")

    # A Poisson process conditioned on its count has uniform, independent arrival times
    arrivals = np.sort(rng.uniform((max(warmup, 1) - 1) * dt, (n_frames - 1) * dt, size=n_flowing))
    labels = rng.permutation(["target_cyst"] * spec.target_count + ["distractor"] * spec.distractor_count)

    truth = GroundTruth()
    entering: Dict[int, List[ParticleSpec]] = {}
    y_lo, y_hi = spec.y_margin_m, geometry.fov_y_m - spec.y_margin_m
    for pid, (t, label) in enumerate(zip(arrivals, labels)):
        y = rng.uniform(y_lo, y_hi)
        z = rng.uniform(*spec.z_range_m)
        k = min(max(int(math.ceil(t / dt)), warmup), n_frames - 1)
        v = float(flow.velocity(z, geometry, y + geometry.fov_y_offset_m))
        x = max(0.0, v * (k * dt - t))
        if v * dt > geometry.fov_x_m:
            # Faster than one FOV per frame: place the first sighting uniformly in view
            x = (k * dt - t) / dt * geometry.fov_x_m
        particle = sample_particle(rng, pid, str(label), (x, y, z), illum)
        truth.register(particle)
        entering.setdefault(k, []).append(particle)

    statics = []
    for i in range(spec.static_particles):
        position = (rng.uniform(margin, geometry.fov_x_m - margin), rng.uniform(y_lo, y_hi),
                    rng.uniform(*spec.z_range_m))
        dust = sample_particle(rng, n_flowing + i, "distractor", position, illum)
        statics.append(dust.model_copy(update={"static": True}))

    states, active = [], []
    for k in range(n_frames):
        if k > 0:
            active, _ = advect(active, flow, geometry, dt, margin, spec.jitter_m, jitter_rng)
        active = active + entering.get(k, [])
        truth.record_frame(k, [p for p in active if _in_fov(p, geometry)])
        states.append(active + statics)
    return states, truth


def generate_run(run_spec: RunSpec, output_dir, workers: int = 1) -> GroundTruth:
    """Write a complete frame container and ground-truth manifest for ``run_spec``."""
    states, truth = plan_run(run_spec)
    geometry, flow = run_spec.resolved_geometry(), run_spec.resolved_flow()
    manifest = StreamManifest.build(
        run_spec.sensor, run_spec.illumination, geometry, flow, run_spec.frame_period_s, run_spec.frame_count
    )
    frame_io.write_manifest(output_dir, manifest)

    def render(k: int) -> SensorFrame:
        rng = np.random.default_rng([run_spec.seed, 1, k]) if run_spec.noise else None
        return render_frame(states[k], run_spec.sensor, run_spec.illumination, geometry, rng,
                            frame_index=k, timestamp_s=k * run_spec.frame_period_s,
                            window_px=run_spec.render_window_px)

    # Per-frame states are fixed above, so frames render independently
    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        for frame in executor.map(render, range(run_spec.frame_count)):
            frame_io.write_frame(output_dir, frame.frame_index, frame.mosaic)

    frame_io.write_ground_truth(output_dir, truth.to_records())
    logger.info(
        f"🧪 Simulated {run_spec.frame_count} frames, {truth.count('target_cyst')} targets, "
        f"{truth.count('distractor')} distractors -> {output_dir}"
    )
    return truth
