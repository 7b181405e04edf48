import math
from typing import List, Dict, Optional, Tuple, Literal

import numpy as np

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from src.holoflow.tools.constants import (
    ML_PER_H_TO_M3_PER_S,
    DEFAULT_WAVELENGTHS_M,
    FULL_FOV_X_M,
)


# ========== OPTICS ==========

class IlluminationSpec(BaseModel):
    wavelengths_m: Tuple[float, float, float] = Field(
        DEFAULT_WAVELENGTHS_M, description="Center wavelengths (red, green, blue) in meters"
    )
    bandwidth_m: float = Field(10e-9, ge=0, description="Per-channel bandwidth (metadata only)")
    incidence_tilt_rad: Tuple[Tuple[float, float], Tuple[float, float], Tuple[float, float]] = Field(
        ((0.0, 0.0), (0.0, 0.0), (0.0, 0.0)),
        description="Per-channel (tilt_x, tilt_y) of the illumination in radians",
    )

    @field_validator("wavelengths_m")
    @classmethod
    def _decreasing(cls, v):
        if not all(math.isfinite(w) and w > 0 for w in v):
            raise ValueError("wavelengths must be positive and finite")
        if not (v[0] > v[1] > v[2]):
            raise ValueError("wavelengths must strictly decrease from red to blue")
        return v


class FocusSearchConfig(BaseModel):
    z_min_m: float = Field(50e-6, description="Lower end of the search interval")
    z_max_m: float = Field(780e-6, description="Upper end of the search interval")
    coarse_step_m: float = Field(25e-6, description="Coarse grid step")
    refine_tol_m: float = Field(1e-6, description="Golden-section termination tolerance")

    @model_validator(mode="after")
    def _ordered(self):
        if not self.z_min_m < self.z_max_m:
            raise ValueError("z_min_m must be below z_max_m")
        if not self.coarse_step_m > self.refine_tol_m > 0:
            raise ValueError("require coarse_step_m > refine_tol_m > 0")
        return self


# ========== CHANNEL / SENSOR / FLOW ==========

class SensorModel(BaseModel):
    width_px: int = Field(1280, gt=0)
    height_px: int = Field(960, gt=0)
    pitch_m: float = Field(1.4e-6, gt=0)
    bayer_order: Literal["RGGB"] = "RGGB"
    bit_depth: int = Field(10, ge=8, le=16)
    read_noise_dn: float = Field(2.0, ge=0, description="Gaussian read noise sigma in DN")
    shot_noise: bool = True
    electrons_per_dn: float = Field(4.0, gt=0, description="Conversion gain used for Poisson shot noise")
    reference_level_dn: float = Field(300.0, gt=0, description="DN of the unobstructed reference wave")
    crosstalk_matrix: List[List[float]] = Field(
        default_factory=lambda: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        description="3x3 colour mixing applied to (R, G, B) intensities at every pixel",
    )

    @field_validator("width_px", "height_px")
    @classmethod
    def _even(cls, v):
        if v % 2:
            raise ValueError("sensor dimensions must be even (complete Bayer quads)")
        return v

    @field_validator("crosstalk_matrix")
    @classmethod
    def _three_by_three(cls, v):
        if len(v) != 3 or any(len(row) != 3 for row in v):
            raise ValueError("crosstalk_matrix must be 3x3")
        return v

    @property
    def max_dn(self) -> int:
        return (1 << self.bit_depth) - 1


class ChannelGeometry(BaseModel):
    width_m: float = Field(5e-3, gt=0)
    height_m: float = Field(0.8e-3, gt=0)
    fov_x_m: float = Field(6.5e-3, gt=0)
    fov_y_m: float = Field(4.6e-3, gt=0)

    @model_validator(mode="after")
    def _fov_inside(self):
        if self.fov_y_m > self.width_m:
            raise ValueError("fov_y_m must not exceed the channel width")
        return self

    @property
    def fov_y_offset_m(self) -> float:
        """Distance from the channel side wall to the first imaged row."""
        return 0.5 * (self.width_m - self.fov_y_m)

    @classmethod
    def for_sensor(cls, sensor: SensorModel, width_m: float = 5e-3, height_m: float = 0.8e-3) -> "ChannelGeometry":
        """Field of view follows the sensor footprint; channel cross-section stays physical."""
        return cls(
            width_m=width_m,
            height_m=height_m,
            fov_x_m=sensor.width_px * sensor.pitch_m,
            fov_y_m=sensor.height_px * sensor.pitch_m,
        )


class FlowModel(BaseModel):
    flowrate_m3_per_s: float = Field(100.0 * ML_PER_H_TO_M3_PER_S, gt=0)
    wall_decay_m: float = Field(0.4e-3, ge=0, description="Side-wall decay zone width")

    @property
    def flowrate_ml_per_h(self) -> float:
        return self.flowrate_m3_per_s / ML_PER_H_TO_M3_PER_S

    def mean_velocity(self, geometry: ChannelGeometry) -> float:
        return self.flowrate_m3_per_s / (geometry.width_m * geometry.height_m)

    def velocity(self, z_m, geometry: ChannelGeometry, y_m=None):
        """Along-flow speed: parabolic in z (peak 1.5x mean), flat in y away from the side walls.

        ``y_m`` is measured across the channel from one side wall; None means mid-channel.
        Accepts scalars or numpy arrays.
        """
        h = geometry.height_m
        u = 6.0 * self.mean_velocity(geometry) * z_m * (h - z_m) / (h * h)
        if y_m is None or self.wall_decay_m == 0:
            return u
        d = np.minimum(y_m, geometry.width_m - y_m)
        # 1 - e^-5 at the edge of the decay zone
        return u * (1.0 - np.exp(-5.0 * np.clip(d, 0.0, None) / self.wall_decay_m))

    def scaled_for_fov(self, geometry: ChannelGeometry) -> "FlowModel":
        """Scale flowrate so residence in frames matches the full-size field of view."""
        return self.model_copy(
            update={"flowrate_m3_per_s": self.flowrate_m3_per_s * geometry.fov_x_m / FULL_FOV_X_M}
        )


# ========== SIMULATION ==========

class ParticleSpec(BaseModel):
    id: int
    class_label: Literal["target_cyst", "distractor"]
    position_m: Tuple[float, float, float] = Field(..., description="(x, y, z); z is height above the sensor")
    equivalent_diameter_m: float = Field(..., gt=0)
    amplitude_transmittance: float = Field(1.0, ge=0.0, le=1.0)
    phase_delay_rad: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    shape: Literal["disk", "ellipse"] = "disk"
    axis_ratio: float = Field(1.0, ge=1.0, description="major/minor for ellipses")
    orientation_rad: float = 0.0
    static: bool = Field(False, description="Sensor-glass contamination that never moves")

    @property
    def axes_m(self) -> Tuple[float, float]:
        """(major, minor) diameters with the same area as the equivalent disk."""
        r = math.sqrt(self.axis_ratio) if self.shape == "ellipse" else 1.0
        return self.equivalent_diameter_m * r, self.equivalent_diameter_m / r


class RunSpec(BaseModel):
    target_count: int = Field(0, ge=0)
    distractor_count: int = Field(0, ge=0)
    static_particles: int = Field(0, ge=0)
    frame_count: int = Field(30, ge=0)
    frame_period_s: float = Field(1.0 / 3.0, gt=0)
    warmup_frames: int = Field(5, ge=0, description="Leading frames kept free of flowing particles")
    seed: int = Field(0, ge=0)
    z_range_m: Tuple[float, float] = (100e-6, 700e-6)
    y_margin_m: float = Field(60e-6, ge=0, description="Keep particle centers this far inside the FOV rows")
    noise: bool = True
    jitter_m: float = Field(0.0, ge=0, description="Optional Gaussian lateral jitter per frame")
    render_window_px: int = Field(256, ge=64)
    sensor: SensorModel = Field(default_factory=SensorModel)
    illumination: IlluminationSpec = Field(default_factory=IlluminationSpec)
    geometry: Optional[ChannelGeometry] = None
    flow: Optional[FlowModel] = None

    @field_validator("render_window_px")
    @classmethod
    def _even_window(cls, v):
        if v % 2:
            raise ValueError("render_window_px must be even")
        return v

    def resolved_geometry(self) -> ChannelGeometry:
        return self.geometry or ChannelGeometry.for_sensor(self.sensor)

    def resolved_flow(self) -> FlowModel:
        return self.flow or FlowModel().scaled_for_fov(self.resolved_geometry())


class FrameVisit(BaseModel):
    frame: int
    x_um: float
    y_um: float
    z_um: float


class GroundTruthRecord(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    id: int
    class_label: str = Field(..., alias="class")
    diameter_um: float
    frames: List[FrameVisit] = Field(default_factory=list)


# ========== FRAME CONTAINER ==========

class ManifestSensor(BaseModel):
    width_px: int
    height_px: int
    pitch_um: float
    bit_depth: int
    bayer_order: Literal["RGGB"] = "RGGB"


class ManifestIllumination(BaseModel):
    wavelengths_nm: List[float] = Field(..., min_length=3, max_length=3)
    incidence_tilt_mrad: List[List[float]] = Field(
        default_factory=lambda: [[0.0, 0.0], [0.0, 0.0], [0.0, 0.0]]
    )


class ManifestChannel(BaseModel):
    width_mm: float
    height_mm: float
    fov_x_mm: float
    fov_y_mm: float


class ManifestFlow(BaseModel):
    flowrate_ml_per_h: float


class StreamManifest(BaseModel):
    schema_version: int = 1
    sensor: ManifestSensor
    illumination: ManifestIllumination
    channel: ManifestChannel
    flow: ManifestFlow
    frame_period_s: float
    frame_count: int

    @classmethod
    def build(cls, sensor: SensorModel, illum: IlluminationSpec, geometry: ChannelGeometry,
              flow: FlowModel, frame_period_s: float, frame_count: int) -> "StreamManifest":
        return cls(
            sensor=ManifestSensor(
                width_px=sensor.width_px, height_px=sensor.height_px,
                pitch_um=sensor.pitch_m * 1e6, bit_depth=sensor.bit_depth,
            ),
            illumination=ManifestIllumination(
                wavelengths_nm=[w * 1e9 for w in illum.wavelengths_m],
                incidence_tilt_mrad=[[t * 1e3 for t in pair] for pair in illum.incidence_tilt_rad],
            ),
            channel=ManifestChannel(
                width_mm=geometry.width_m * 1e3, height_mm=geometry.height_m * 1e3,
                fov_x_mm=geometry.fov_x_m * 1e3, fov_y_mm=geometry.fov_y_m * 1e3,
            ),
            flow=ManifestFlow(flowrate_ml_per_h=flow.flowrate_ml_per_h),
            frame_period_s=frame_period_s,
            frame_count=frame_count,
        )

    def sensor_model(self) -> SensorModel:
        return SensorModel(
            width_px=self.sensor.width_px, height_px=self.sensor.height_px,
            pitch_m=self.sensor.pitch_um * 1e-6, bit_depth=self.sensor.bit_depth,
        )

    def illumination_spec(self) -> IlluminationSpec:
        return IlluminationSpec(
            wavelengths_m=tuple(w * 1e-9 for w in self.illumination.wavelengths_nm),
            incidence_tilt_rad=tuple(tuple(t * 1e-3 for t in pair) for pair in self.illumination.incidence_tilt_mrad),
        )

    def channel_geometry(self) -> ChannelGeometry:
        return ChannelGeometry(
            width_m=self.channel.width_mm * 1e-3, height_m=self.channel.height_mm * 1e-3,
            fov_x_m=self.channel.fov_x_mm * 1e-3, fov_y_m=self.channel.fov_y_mm * 1e-3,
        )

    def flow_model(self) -> FlowModel:
        return FlowModel(flowrate_m3_per_s=self.flow.flowrate_ml_per_h * ML_PER_H_TO_M3_PER_S)


# ========== PROCESSING CONFIGURATION ==========

class HoughConfig(BaseModel):
    r_min_px: int = Field(8, ge=4, le=128)
    r_max_px: int = Field(64, ge=4, le=128)
    radius_step_px: int = Field(2, ge=1)
    score_threshold: float = Field(2.0, ge=0, description="Minimum summed circle coverage at a center")
    min_votes: int = Field(60, ge=1, description="Minimum edge votes summed over all radii at a center")
    min_separation_px: int = Field(48, ge=1)
    edge_percentile: float = Field(97.0, gt=0, lt=100)
    edge_noise_k: float = Field(5.0, ge=0, description="Edge threshold in robust noise sigmas of the gradient")
    edge_floor: float = Field(0.05, ge=0, description="Absolute gradient floor in relative-contrast units")
    smoothing_sigma_px: float = Field(1.0, ge=0, description="Gaussian smoothing on the quad-binned image")
    max_candidates: int = Field(64, ge=1)

    @model_validator(mode="after")
    def _range(self):
        if self.r_min_px > self.r_max_px:
            raise ValueError("r_min_px must not exceed r_max_px")
        return self


class TrackerConfig(BaseModel):
    gate_along_m: float = Field(0.5e-3, gt=0)
    gate_cross_m: float = Field(50e-6, gt=0)
    gate_depth_m: float = Field(100e-6, gt=0)
    max_missed_frames: int = Field(2, ge=1)


class ReconstructionConfig(BaseModel):
    roi_px: int = Field(512, ge=64, description="Multiple of 4 so the inscribed green grid is whole")
    red_blue_upsample: int = Field(4, ge=1, description="Per-axis factor from the 2p native grid")
    green_upsample: int = Field(2, ge=1, description="Per-axis factor on the rotated green lattice")
    apodize: bool = False
    taper_px: int = Field(16, ge=0)
    size_crop_px: int = Field(256, ge=16)

    @field_validator("roi_px")
    @classmethod
    def _quarter_aligned(cls, v):
        if v % 4:
            raise ValueError("roi_px must be a multiple of 4")
        return v


class LossConfig(BaseModel):
    negative_class_weight: float = Field(2.0, ge=0)
    decision_bias: float = Field(2.0, ge=0)


class TrainConfig(BaseModel):
    split: float = Field(0.8, gt=0, lt=1)
    learning_rate: float = Field(1e-3, gt=0)
    batch_size: int = Field(16, ge=1)
    epochs: int = Field(20, ge=1)
    seed: int = Field(0, ge=0)
    widths: Tuple[int, ...] = Field((8, 16, 32, 64), min_length=1)
    min_examples_per_class: int = Field(100, ge=1)
    examples_per_class: int = Field(120, ge=1, description="Simulated examples per class for `train`")


class RunConfig(BaseModel):
    input: Optional[str] = None
    output: Optional[str] = None
    hough: HoughConfig = Field(default_factory=HoughConfig)
    focus: FocusSearchConfig = Field(default_factory=FocusSearchConfig)
    tracker: TrackerConfig = Field(default_factory=TrackerConfig)
    reconstruction: ReconstructionConfig = Field(default_factory=ReconstructionConfig)
    crosstalk_inverse: List[List[float]] = Field(
        default_factory=lambda: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
    )
    loss: LossConfig = Field(default_factory=LossConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    simulation: RunSpec = Field(default_factory=RunSpec)
    offset_fraction: float = Field(0.005, ge=0.0, le=0.05)
    flowrate_ml_per_h: Optional[float] = Field(None, gt=0, description="Overrides the manifest flowrate")
    processing_mode: Literal["batch", "realtime"] = "batch"
    workers: int = Field(1, ge=1)
    model_path: Optional[str] = None
    background_frames: int = Field(20, ge=1)
    warmup_frames: int = Field(5, ge=0)
    histogram_edges_um: List[float] = Field(default_factory=lambda: [float(e) for e in range(0, 42, 2)])
    save_target_stacks: bool = False
    per_object_budget_ms: float = Field(250.0, gt=0)
    benchmark_objects: int = Field(200, ge=1)
    benchmark_frames: int = Field(100, ge=1)
    seed: int = Field(0, ge=0)

    @field_validator("crosstalk_inverse")
    @classmethod
    def _three_by_three(cls, v):
        if len(v) != 3 or any(len(row) != 3 for row in v):
            raise ValueError("crosstalk_inverse must be 3x3")
        return v

    @field_validator("histogram_edges_um")
    @classmethod
    def _increasing(cls, v):
        if len(v) < 2 or any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("histogram_edges_um must be strictly increasing with at least two edges")
        return v


# ========== CLASSIFICATION ==========

class ClassScores(BaseModel):
    z_giardia: float
    z_non: float

    @model_validator(mode="after")
    def _finite(self):
        if not (math.isfinite(self.z_giardia) and math.isfinite(self.z_non)):
            raise ValueError("class scores must be finite")
        return self


class ClassProbabilities(BaseModel):
    p_giardia: float = Field(..., ge=0.0, le=1.0)
    p_non: float = Field(..., ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _normalized(self):
        if abs(self.p_giardia + self.p_non - 1.0) > 1e-9:
            raise ValueError("probabilities must sum to 1")
        return self


class EpochMetrics(BaseModel):
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float


class TrainingMetrics(BaseModel):
    epochs: List[EpochMetrics] = Field(default_factory=list)
    confusion_matrix: List[List[int]] = Field(
        default_factory=list, description="rows true (giardia, non), cols predicted at the biased decision rule"
    )
    val_accuracy: float = 0.0
    val_recall: float = 0.0
    val_false_positive_rate: float = 0.0
    train_size: int = 0
    val_size: int = 0


# ========== OUTPUT RECORDS ==========

class DetectionRecord(BaseModel):
    track_id: int
    first_frame: int
    x_um: float
    y_um: float
    z_um: float
    equivalent_diameter_um: float
    z_giardia: float
    z_non: float
    label: Literal["giardia", "non_giardia"]


class SizeHistogram(BaseModel):
    bin_edges_um: List[float]
    target_counts: List[int]
    other_counts: List[int]


class StageTiming(BaseModel):
    count: int = 0
    mean_ms: float = 0.0
    median_ms: float = 0.0
    p95_ms: float = 0.0


class RunReport(BaseModel):
    total_particles: int = 0
    raw_giardia_count: int = 0
    offset: int = 0
    corrected_giardia: int = 0
    verdict: Literal["Positive", "Negative"] = "Negative"
    offset_fraction: float = 0.005
    size_histogram: SizeHistogram
    frames_processed: int = 0
    frames_skipped: int = 0
    candidates_dropped: int = 0
    volume_processed_ml: float = 0.0
    concentration_per_ml: float = 0.0
    target_concentration_per_ml: float = 0.0
    objects_per_frame: List[int] = Field(default_factory=list)
    mean_objects_per_frame: float = 0.0
    # Timing varies run to run; written to timing.json, not to run_report.json
    stage_timing: Dict[str, StageTiming] = Field(default_factory=dict, exclude=True)

    @model_validator(mode="after")
    def _consistent(self):
        if not (self.corrected_giardia <= self.raw_giardia_count <= self.total_particles):
            raise ValueError("require corrected <= raw <= total")
        if (self.verdict == "Positive") != (self.corrected_giardia > 0):
            raise ValueError("verdict inconsistent with corrected count")
        h = self.size_histogram
        if sum(h.target_counts) + sum(h.other_counts) != self.total_particles:
            raise ValueError("histogram totals must equal total_particles")
        return self


class BenchmarkReport(BaseModel):
    stages: Dict[str, StageTiming]
    frames_timed: int
    objects_timed: int
    frames_per_s: float
    objects_per_s: float
    required_objects_per_s: float
    below_realtime_budget: bool
    per_object_budget_ms: float
    per_object_headroom_ms: float
    reference_ms: Dict[str, float]
    max_realtime_concentration_per_ml: float
    recommended_flowrate_ml_per_h: float
