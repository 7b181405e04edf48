"""
Core pipeline logic for the holoflow engine.
Stream processing, offset correction, benchmarking and training-set generation,
shared by the CLI and the tests.
"""

import json
import threading
import time
from collections import defaultdict
from concurrent.futures import Future, ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass
from decimal import Decimal, ROUND_HALF_UP
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch

from src.holoflow.exceptions import (
    ConfigurationError, CorruptFrameError, NoFocusFoundError, RejectedInputError,
)
from src.holoflow.models import (
    BenchmarkReport, ChannelGeometry, DetectionRecord, FlowModel, HoughConfig, IlluminationSpec, RunConfig,
    RunReport, SizeHistogram, StageTiming, TrainingMetrics,
)
from src.holoflow.tools.classifier import (
    CompactCystNet, assemble_tensor, decide, forward, read_weights, train, write_weights, zero_model,
)
from src.holoflow.tools.constants import (
    BENCHMARK_STAGES, GIARDIA, LABELS, ML_PER_H_TO_M3_PER_S, NON_GIARDIA,
    REALTIME_MAX_CONCENTRATION_PER_ML, REFERENCE_STAGE_MS,
)
from src.holoflow.tools.forward_sim import generate_run, plan_run, render_frame, render_roi, sample_particle
from src.holoflow.tools.preprocess import (
    BackgroundModel, ChannelHolograms, DetectionCandidate, RoiCrop, check_unmixing, crop_roi, extract_channels,
    SensorFrame, locate_candidates, subtract_background, update_background,
)
from src.holoflow.tools.reconstruct import autofocus_object, measure_size, reconstruct_object
from src.holoflow.tools.tracker import Detection, TrackRegistry, match_and_update, predict
from src.holoflow.utils import frame_io
from src.holoflow.utils.logging_setup import get_logger

logger = get_logger(__name__)

TARGETS_DIR = "targets"
MODEL_NAME = "model.hfcn"
TRAIN_METRICS_NAME = "train_metrics.jsonl"
TRAINING_SUMMARY_NAME = "training_metrics.json"
BENCHMARK_NAME = "benchmark.json"


# ========== TIMING ==========

class StageTimer:
    """Per-stage wall-clock samples in milliseconds; safe to share between workers."""

    def __init__(self):
        self.samples: Dict[str, List[float]] = defaultdict(list)
        self._lock = threading.Lock()

    def add(self, stage: str, ms: float):
        with self._lock:
            self.samples[stage].append(ms)

    @contextmanager
    def time(self, stage: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.add(stage, (time.perf_counter() - start) * 1e3)

    def summary(self, stages: Optional[Sequence[str]] = None) -> Dict[str, StageTiming]:
        out = {}
        for stage in stages or sorted(self.samples):
            values = pd.Series(self.samples.get(stage, []), dtype=float)
            if values.empty:
                out[stage] = StageTiming()
                continue
            out[stage] = StageTiming(
                count=int(values.size),
                mean_ms=float(values.mean()),
                median_ms=float(values.median()),
                p95_ms=float(values.quantile(0.95)),
            )
        return out


# ========== COUNTS ==========

def offset_count(total: int, fraction: float) -> int:
    """round(fraction * total), halves rounded away from zero."""
    return int((Decimal(str(fraction)) * Decimal(int(total))).quantize(Decimal(1), rounding=ROUND_HALF_UP))


def apply_offset(total: int, raw: int, fraction: float) -> int:
    """Target count after subtracting the false-positive allowance, floored at 0."""
    if raw < 0 or total < 0 or raw > total:
        raise RejectedInputError(f"require 0 <= raw ({raw}) <= total ({total})")
    return max(0, raw - offset_count(total, fraction))


def size_histogram(diameters_um: Sequence[float], is_target: Sequence[bool],
                   edges_um: Sequence[float]) -> SizeHistogram:
    """Per-class counts; diameters outside the edges land in the first or last bin."""
    edges = np.asarray(edges_um, dtype=np.float64)
    d = np.clip(np.asarray(diameters_um, dtype=np.float64), edges[0], edges[-1])
    mask = np.asarray(is_target, dtype=bool)
    targets, _ = np.histogram(d[mask], bins=edges)
    others, _ = np.histogram(d[~mask], bins=edges)
    return SizeHistogram(
        bin_edges_um=[float(e) for e in edges],
        target_counts=[int(c) for c in targets],
        other_counts=[int(c) for c in others],
    )


def volume_processed_ml(flow: FlowModel, geometry: ChannelGeometry, elapsed_s: float) -> float:
    """Sample volume that crossed the imaged rows: flowrate x time x fov_y / channel width."""
    return flow.flowrate_m3_per_s * 1e6 * elapsed_s * geometry.fov_y_m / geometry.width_m


def build_report(records: Sequence[DetectionRecord], cfg: RunConfig, frames_processed: int,
                 frames_skipped: int, candidates_dropped: int, objects_per_frame: Sequence[int],
                 volume_ml: float) -> RunReport:
    total = len(records)
    raw = sum(1 for r in records if r.label == LABELS[GIARDIA])
    corrected = apply_offset(total, raw, cfg.offset_fraction)
    histogram = size_histogram(
        [r.equivalent_diameter_um for r in records],
        [r.label == LABELS[GIARDIA] for r in records],
        cfg.histogram_edges_um,
    )
    return RunReport(
        total_particles=total,
        raw_giardia_count=raw,
        offset=offset_count(total, cfg.offset_fraction),
        corrected_giardia=corrected,
        verdict="Positive" if corrected > 0 else "Negative",
        offset_fraction=cfg.offset_fraction,
        size_histogram=histogram,
        frames_processed=frames_processed,
        frames_skipped=frames_skipped,
        candidates_dropped=candidates_dropped,
        volume_processed_ml=volume_ml,
        concentration_per_ml=total / volume_ml if volume_ml > 0 else 0.0,
        target_concentration_per_ml=corrected / volume_ml if volume_ml > 0 else 0.0,
        objects_per_frame=list(objects_per_frame),
        mean_objects_per_frame=float(np.mean(objects_per_frame)) if len(objects_per_frame) else 0.0,
    )


# ========== PER-OBJECT STAGES ==========

@dataclass
class CandidatePayload:
    channels: ChannelHolograms
    autofocus_ms: float


@dataclass
class ObjectResult:
    scores: object
    size: object
    label: str


def load_model(cfg: RunConfig) -> CompactCystNet:
    if cfg.model_path:
        logger.info(f"🧠 Loading classifier weights from {cfg.model_path}")
        return read_weights(cfg.model_path)
    logger.warning("⚠️ No model_path configured; every object scores (0, 0) and is labelled non-target")
    return zero_model(cfg.train.widths)


def characterize_object(channels: ChannelHolograms, z_m: float, illum: IlluminationSpec,
                        geometry: ChannelGeometry, cfg: RunConfig, model: CompactCystNet,
                        timer: StageTimer, gallery: Optional[Tuple[Path, int]] = None,
                        focus_ms: float = 0.0) -> ObjectResult:
    """Reconstruct, size and classify one novel object.

    ``focus_ms`` is the autofocus time already spent on it, counted into ``total_per_object``.
    """
    start = time.perf_counter()
    with timer.time("reconstruct"):
        stack = reconstruct_object(channels, z_m, illum, cfg.reconstruction, geometry.height_m)
    with timer.time("size"):
        # Segments the blue field deviation |E - 1|, not blue intensity: phase objects barely show in intensity
        size = measure_size(stack, cfg.reconstruction.size_crop_px)
    with timer.time("classify"):
        scores = forward(assemble_tensor(stack), model)
        label = decide(scores, cfg.loss)

    if gallery is not None and label == LABELS[GIARDIA]:
        directory, track_id = gallery
        frame_io.write_stack(directory, f"track_{track_id:06d}", stack.planes(), {
            "track_id": track_id,
            "focus_z_um": z_m * 1e6,
            "pitch_um": stack.pitch_m * 1e6,
            "planes": ["intensity_red", "intensity_green", "intensity_blue",
                       "phase_red", "phase_green", "phase_blue"],
        })
    timer.add("total_per_object", focus_ms + (time.perf_counter() - start) * 1e3)
    return ObjectResult(scores, size, label)


def _check_run_config(cfg: RunConfig, geometry: ChannelGeometry, width_px: int, height_px: int):
    check_unmixing(cfg.crosstalk_inverse)
    if cfg.focus.z_max_m >= geometry.height_m:
        raise ConfigurationError(
            f"focus search reaches {cfg.focus.z_max_m} m, beyond the {geometry.height_m} m channel"
        )
    if cfg.reconstruction.roi_px > min(width_px, height_px):
        raise ConfigurationError(f"roi_px {cfg.reconstruction.roi_px} exceeds the {width_px}x{height_px} sensor")


def preprocess_frame(frame: SensorFrame, background: BackgroundModel, hough_cfg: HoughConfig,
                     timer: StageTimer) -> Tuple[np.ndarray, List[DetectionCandidate]]:
    """The whole-frame stage: subtract the background, push the frame, locate candidates."""
    with timer.time("frame_preprocess"):
        bgfree = subtract_background(frame, background)
        update_background(background, frame)
        candidates = locate_candidates(bgfree, hough_cfg)
    return bgfree, candidates


def _focus_candidates(bgfree: np.ndarray, candidates: Sequence[DetectionCandidate], k: int, pitch_m: float,
                      illum: IlluminationSpec, cfg: RunConfig, timer: StageTimer) -> Tuple[List[Detection], int]:
    """Candidates of one frame as focused detections; returns (detections, dropped).

    A candidate without a focus inside the search interval is dropped.
    """
    taper = cfg.reconstruction.taper_px if cfg.reconstruction.apodize else 0

    detections, dropped = [], 0
    for candidate in candidates:
        try:
            crop = crop_roi(bgfree, candidate.center_px, cfg.reconstruction.roi_px)
            channels = extract_channels(crop, cfg.crosstalk_inverse, pitch_m)
            start = time.perf_counter()
            z = autofocus_object(channels, cfg.focus, illum, taper)
            elapsed = (time.perf_counter() - start) * 1e3
            timer.add("autofocus", elapsed)
        except (NoFocusFoundError, RejectedInputError) as e:
            dropped += 1
            logger.warning(f"⚠️ Frame {k}: candidate at {candidate.center_px} dropped: {e}")
            continue
        cx, cy = candidate.center_px
        detections.append(Detection(cx * pitch_m, cy * pitch_m, z, k, CandidatePayload(channels, elapsed)))
    return detections, dropped


# ========== STREAM PROCESSING ==========

def process_stream(cfg: RunConfig, output_dir=None) -> Tuple[RunReport, List[DetectionRecord]]:
    """Process a frame container end to end.

    Frames run in order through background, localization, autofocus and tracking;
    novel objects fan out to ``cfg.workers`` threads for reconstruction and
    classification. Output is identical for every worker count and processing mode.
    """
    if not cfg.input:
        raise ConfigurationError("process needs an input stream directory")
    stream_dir = Path(cfg.input)
    manifest = frame_io.read_manifest(stream_dir)
    sensor, illum, geometry = manifest.sensor_model(), manifest.illumination_spec(), manifest.channel_geometry()
    flow = manifest.flow_model()
    if cfg.flowrate_ml_per_h is not None:
        flow = flow.model_copy(update={"flowrate_m3_per_s": cfg.flowrate_ml_per_h * ML_PER_H_TO_M3_PER_S})
    _check_run_config(cfg, geometry, sensor.width_px, sensor.height_px)

    # Intra-op threads would make float reductions depend on scheduling
    torch.set_num_threads(1)
    model = load_model(cfg)
    output_dir = Path(output_dir or cfg.output) if (output_dir or cfg.output) else None
    gallery_dir = output_dir / TARGETS_DIR if output_dir is not None and cfg.save_target_stacks else None

    period = manifest.frame_period_s
    background = BackgroundModel(cfg.background_frames)
    registry = TrackRegistry(geometry, cfg.tracker)
    timer = StageTimer()
    futures: Dict[int, Future] = {}
    objects_per_frame: List[int] = []
    frames_processed = frames_skipped = dropped_total = detect_frames = overruns = 0
    last_tracked: Optional[int] = None

    logger.info(f"🚀 Processing {manifest.frame_count} frames from {stream_dir} "
                f"({cfg.processing_mode}, {cfg.workers} workers)")
    print(f"🔬 Processing {manifest.frame_count} frames from {stream_dir}")

    with ThreadPoolExecutor(max_workers=cfg.workers) as executor:
        for k in range(manifest.frame_count):
            frame_start = time.perf_counter()
            try:
                frame = frame_io.read_frame(stream_dir, k, manifest)
            except CorruptFrameError as e:
                frames_skipped += 1
                logger.warning(f"⚠️ Skipping frame {k}: {e}")
                continue
            frames_processed += 1

            if k < cfg.warmup_frames or background.count == 0:
                update_background(background, frame)
                continue

            bgfree, candidates = preprocess_frame(frame, background, cfg.hough, timer)
            detections, dropped = _focus_candidates(bgfree, candidates, k, sensor.pitch_m, illum, cfg, timer)
            objects_per_frame.append(len(candidates))
            dropped_total += dropped
            detect_frames += 1

            gap = 1 if last_tracked is None else k - last_tracked
            predict(registry, gap * period, flow)
            novel, _ = match_and_update(registry, detections, frame_index=k)
            last_tracked = k

            submitted = []
            for track in novel:
                payload: CandidatePayload = track.payload
                gallery = (gallery_dir, track.track_id) if gallery_dir is not None else None
                futures[track.track_id] = executor.submit(
                    characterize_object, payload.channels, track.position_m[2], illum, geometry,
                    cfg, model, timer, gallery, payload.autofocus_ms,
                )
                track.payload = None
                submitted.append(futures[track.track_id])

            if cfg.processing_mode == "realtime":
                for future in submitted:
                    future.result()
                elapsed = time.perf_counter() - frame_start
                if elapsed > period:
                    overruns += 1
                    logger.warning(f"⏱️ Frame {k} took {elapsed * 1e3:.0f} ms, budget {period * 1e3:.0f} ms")

        registry.retire_all()
        results = {track_id: future.result() for track_id, future in futures.items()}

    records = []
    for track in sorted(registry.retired, key=lambda t: t.track_id):
        result: ObjectResult = results[track.track_id]
        x, y, z = track.first_position_m
        records.append(DetectionRecord(
            track_id=track.track_id,
            first_frame=track.first_frame,
            x_um=x * 1e6, y_um=y * 1e6, z_um=z * 1e6,
            equivalent_diameter_um=result.size.equivalent_diameter_m * 1e6,
            z_giardia=result.scores.z_giardia,
            z_non=result.scores.z_non,
            label=result.label,
        ))

    volume = volume_processed_ml(flow, geometry, detect_frames * period)
    report = build_report(records, cfg, frames_processed, frames_skipped, dropped_total, objects_per_frame, volume)
    report.stage_timing = timer.summary()

    if output_dir is not None:
        frame_io.write_jsonl(output_dir / frame_io.DETECTION_LOG_NAME, records)
        frame_io.write_json(output_dir / frame_io.RUN_REPORT_NAME, report)
        with open(output_dir / frame_io.TIMING_NAME, "w", encoding="utf-8") as f:
            json.dump({
                "processing_mode": cfg.processing_mode,
                "workers": cfg.workers,
                "realtime_overruns": overruns,
                "stages": {k: v.model_dump() for k, v in report.stage_timing.items()},
            }, f, indent=2, sort_keys=True)

    logger.info(f"✅ {report.total_particles} particles, raw {report.raw_giardia_count}, "
                f"corrected {report.corrected_giardia}, verdict {report.verdict}")
    return report, records


# ========== SIMULATION / TRAINING ==========

def simulate(cfg: RunConfig, output_dir=None):
    """Write a synthetic frame container for ``cfg.simulation``."""
    target = output_dir or cfg.output or cfg.input
    if not target:
        raise ConfigurationError("simulate needs an output directory")
    return generate_run(cfg.simulation, target, workers=cfg.workers)


def _roi_channels(mosaic: np.ndarray, cfg: RunConfig, pitch_m: float) -> ChannelHolograms:
    n = mosaic.shape[0]
    crop = RoiCrop(mosaic, (0, 0), (0, 0), (0.5 * n, 0.5 * n))
    return extract_channels(crop, cfg.crosstalk_inverse, pitch_m)


def build_training_set(cfg: RunConfig, examples_per_class: Optional[int] = None,
                       seed: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Simulated single-object tensors run through the production reconstruction path.

    Returns float32 tensors (n, 6, 256, 256) and class indices (0 = giardia).
    """
    spec = cfg.simulation
    per_class = examples_per_class or cfg.train.examples_per_class
    rng = np.random.default_rng(cfg.train.seed if seed is None else seed)
    geometry = spec.resolved_geometry()
    taper = cfg.reconstruction.taper_px if cfg.reconstruction.apodize else 0

    tensors, labels = [], []
    for i in range(2 * per_class):
        class_label = "target_cyst" if i % 2 == 0 else "distractor"
        z = rng.uniform(*spec.z_range_m)
        particle = sample_particle(rng, i, class_label, (0.0, 0.0, z), spec.illumination)
        mosaic = render_roi(particle, spec.sensor, spec.illumination, geometry,
                            cfg.reconstruction.roi_px, rng if spec.noise else None)
        channels = _roi_channels(mosaic, cfg, spec.sensor.pitch_m)
        try:
            z_focus = autofocus_object(channels, cfg.focus, spec.illumination, taper)
        except NoFocusFoundError:
            z_focus = z
        stack = reconstruct_object(channels, z_focus, spec.illumination, cfg.reconstruction, geometry.height_m)
        tensors.append(assemble_tensor(stack).data.astype(np.float32))
        labels.append(GIARDIA if class_label == "target_cyst" else NON_GIARDIA)
    logger.info(f"🧪 Built {len(labels)} training tensors ({per_class} per class)")
    return np.stack(tensors), np.asarray(labels)


def train_reference_model(cfg: RunConfig, output_dir=None) -> Tuple[CompactCystNet, TrainingMetrics]:
    """Build the simulated training set, train, and write weights and metrics."""
    output_dir = Path(output_dir or cfg.output or "output")
    output_dir.mkdir(parents=True, exist_ok=True)
    torch.set_num_threads(1)

    tensors, labels = build_training_set(cfg)
    model, metrics = train(tensors, labels, cfg.train, cfg.loss, str(output_dir / TRAIN_METRICS_NAME))
    write_weights(model, output_dir / MODEL_NAME)
    frame_io.write_json(output_dir / TRAINING_SUMMARY_NAME, metrics)
    logger.info(f"🧠 Trained model: val accuracy {metrics.val_accuracy:.3f}, "
                f"recall {metrics.val_recall:.3f}, FPR {metrics.val_false_positive_rate:.4f}")
    return model, metrics


# ========== BENCHMARK ==========

def benchmark(cfg: RunConfig, output_dir=None, sample_density_per_ml: float = REALTIME_MAX_CONCENTRATION_PER_ML,
              model: Optional[CompactCystNet] = None) -> BenchmarkReport:
    """Time every stage on a generated reference stream and on single-object ROIs.

    Informational: a budget overrun is logged as a warning, never raised.
    """
    torch.set_num_threads(1)
    spec = cfg.simulation
    sensor, illum = spec.sensor, spec.illumination
    geometry = spec.resolved_geometry()
    flow = spec.resolved_flow()
    if cfg.flowrate_ml_per_h is not None:
        flow = flow.model_copy(update={"flowrate_m3_per_s": cfg.flowrate_ml_per_h * ML_PER_H_TO_M3_PER_S})
    _check_run_config(cfg, geometry, sensor.width_px, sensor.height_px)
    model = model or load_model(cfg)
    timer = StageTimer()

    # Whole-frame stage on a reference stream
    warmup = max(1, cfg.warmup_frames)
    stream = spec.model_copy(update={"frame_count": warmup + cfg.benchmark_frames, "warmup_frames": warmup})
    states, _ = plan_run(stream)
    background = BackgroundModel(cfg.background_frames)
    for k, particles in enumerate(states):
        rng = np.random.default_rng([stream.seed, 1, k]) if stream.noise else None
        frame = render_frame(particles, sensor, illum, geometry, rng, k, k * stream.frame_period_s,
                             stream.render_window_px)
        if k < warmup:
            update_background(background, frame)
            continue
        preprocess_frame(frame, background, cfg.hough, timer)

    # Per-object stages on single-object ROIs
    rng = np.random.default_rng([cfg.seed, 3])
    taper = cfg.reconstruction.taper_px if cfg.reconstruction.apodize else 0
    for i in range(cfg.benchmark_objects):
        class_label = "target_cyst" if i % 2 == 0 else "distractor"
        z = rng.uniform(*spec.z_range_m)
        particle = sample_particle(rng, i, class_label, (0.0, 0.0, z), illum)
        mosaic = render_roi(particle, sensor, illum, geometry, cfg.reconstruction.roi_px, rng if spec.noise else None)
        channels = _roi_channels(mosaic, cfg, sensor.pitch_m)

        start = time.perf_counter()
        try:
            z_focus = autofocus_object(channels, cfg.focus, illum, taper)
        except NoFocusFoundError:
            z_focus = z
        focus_ms = (time.perf_counter() - start) * 1e3
        timer.add("autofocus", focus_ms)
        characterize_object(channels, z_focus, illum, geometry, cfg, model, timer, focus_ms=focus_ms)

    stages = timer.summary(BENCHMARK_STAGES)
    frame_ms = stages["frame_preprocess"].mean_ms
    object_ms = stages["total_per_object"].mean_ms
    frames_per_s = 1e3 / frame_ms if frame_ms > 0 else 0.0
    objects_per_s = 1e3 / object_ms if object_ms > 0 else 0.0

    # Sample volume per second through the imaged rows
    imaged_ml_per_s = flow.flowrate_m3_per_s * 1e6 * geometry.fov_y_m / geometry.width_m
    required = REALTIME_MAX_CONCENTRATION_PER_ML * imaged_ml_per_s
    max_concentration = objects_per_s / imaged_ml_per_s if imaged_ml_per_s > 0 else 0.0
    sustainable_ml_per_s = objects_per_s / sample_density_per_ml * geometry.width_m / geometry.fov_y_m
    recommended = min(flow.flowrate_ml_per_h, sustainable_ml_per_s * 3600.0)

    report = BenchmarkReport(
        stages=stages,
        frames_timed=stages["frame_preprocess"].count,
        objects_timed=stages["total_per_object"].count,
        frames_per_s=frames_per_s,
        objects_per_s=objects_per_s,
        required_objects_per_s=required,
        below_realtime_budget=objects_per_s < required,
        per_object_budget_ms=cfg.per_object_budget_ms,
        per_object_headroom_ms=cfg.per_object_budget_ms - object_ms,
        reference_ms=dict(REFERENCE_STAGE_MS),
        max_realtime_concentration_per_ml=max_concentration,
        recommended_flowrate_ml_per_h=recommended,
    )
    if report.per_object_headroom_ms < 0 or report.below_realtime_budget:
        logger.warning(f"⏱️ Per-object time {object_ms:.1f} ms exceeds the realtime budget "
                       f"({cfg.per_object_budget_ms:.0f} ms, {required:.1f} objects/s needed)")

    if output_dir or cfg.output:
        frame_io.write_json(Path(output_dir or cfg.output) / BENCHMARK_NAME, report)
    return report
