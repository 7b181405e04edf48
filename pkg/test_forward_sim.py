"""
Test suite for the physics forward simulator (particles, rendering, advection, runs).
"""

import math

import numpy as np
import pytest

from src.holoflow.exceptions import RejectedInputError
from src.holoflow.models import ChannelGeometry, FlowModel, IlluminationSpec, ParticleSpec, RunSpec, SensorModel
from src.holoflow.tools.forward_sim import (
    advect,
    generate_run,
    plan_run,
    render_frame,
    sample_particle,
    sensor_fields,
)
from src.holoflow.tools.optics_core import ComplexField, propagate
from src.holoflow.utils import frame_io


def small_sensor(width=256, height=256, **kwargs):
    return SensorModel(width_px=width, height_px=height, **kwargs)


def small_run(**kwargs):
    defaults = dict(
        target_count=2, distractor_count=3, frame_count=12, warmup_frames=3, seed=11,
        noise=False, sensor=small_sensor(512, 256),
    )
    defaults.update(kwargs)
    return RunSpec(**defaults)


def test_1_target_morphology():
    """Test 1: Target cysts are 8-14 um ovals with phase scaled by wavelength"""
    rng = np.random.default_rng(0)
    illum = IlluminationSpec()
    for i in range(50):
        p = sample_particle(rng, i, "target_cyst", (0.0, 0.0, 300e-6), illum)
        major, minor = p.axes_m
        assert 8e-6 - 1e-12 <= major <= 14e-6 + 1e-12, f"Long axis {major} outside 8-14 um"
        assert 1.2 - 1e-9 <= major / minor <= 1.6 + 1e-9, f"Axis ratio {major / minor} outside 1.2-1.6"
        assert p.shape == "ellipse"
        red, green, blue = p.phase_delay_rad
        assert red < green < blue, "Phase delay should grow toward shorter wavelengths"
        assert math.isclose(green * illum.wavelengths_m[1], blue * illum.wavelengths_m[2], rel_tol=1e-12)
    print("✅ Test 1 passed: Target morphology")


def test_2_empty_frame_is_reference_level():
    """Test 2: Without particles or noise every pixel reads the reference level"""
    sensor = small_sensor(64, 32)
    geometry = ChannelGeometry.for_sensor(sensor)
    frame = render_frame([], sensor, IlluminationSpec(), geometry)
    assert frame.mosaic.dtype == np.uint16
    assert np.all(frame.mosaic == int(sensor.reference_level_dn)), "Empty frame should be flat"
    print("✅ Test 2 passed: Empty frame")


def test_3_noise_is_seeded():
    """Test 3: Same seed gives identical noisy frames, different seeds differ"""
    sensor = small_sensor(64, 64)
    geometry = ChannelGeometry.for_sensor(sensor)
    illum = IlluminationSpec()
    a = render_frame([], sensor, illum, geometry, np.random.default_rng(5)).mosaic
    b = render_frame([], sensor, illum, geometry, np.random.default_rng(5)).mosaic
    c = render_frame([], sensor, illum, geometry, np.random.default_rng(6)).mosaic
    assert np.array_equal(a, b), "Same seed must reproduce the frame"
    assert not np.array_equal(a, c), "Different seeds should give different noise"
    print("✅ Test 3 passed: Seeded noise")


def test_4_back_propagation_localizes_particle():
    """Test 4: Back-propagating the simulated sensor field refocuses the particle at its position"""
    sensor = small_sensor(256, 256)
    geometry = ChannelGeometry.for_sensor(sensor)
    illum = IlluminationSpec()
    p = sensor.pitch_m
    z = 400e-6
    particle = ParticleSpec(
        id=0, class_label="distractor", position_m=(128 * p, 128 * p, z),
        equivalent_diameter_m=10e-6, amplitude_transmittance=0.0,
    )
    fields = sensor_fields([particle], sensor, illum, geometry)
    back = propagate(ComplexField(fields[1], p, illum.wavelengths_m[1]), -z)
    dark = np.clip(0.5 - back.intensity, 0.0, None)
    assert dark.sum() > 0, "Refocused particle should be dark"
    rows, cols = np.mgrid[0:256, 0:256]
    cy, cx = (rows * dark).sum() / dark.sum(), (cols * dark).sum() / dark.sum()
    assert math.hypot(cx - 128, cy - 128) <= 2.0, f"Refocused center at ({cx:.1f}, {cy:.1f}), expected (128, 128)"
    print("✅ Test 4 passed: Back-propagation localizes the particle")


def test_5_advect_moves_and_retires():
    """Test 5: Particles move by v(z) * dt, statics stay, fast ones exit"""
    geometry = ChannelGeometry()
    flow = FlowModel()
    z = 400e-6
    moving = ParticleSpec(id=0, class_label="distractor", position_m=(0.0, 2.0e-3, z), equivalent_diameter_m=5e-6)
    static = moving.model_copy(update={"id": 1, "static": True})
    leaving = moving.model_copy(update={"id": 2, "position_m": (geometry.fov_x_m - 1e-6, 2.0e-3, z)})

    dt = 0.1
    moved, exited = advect([moving, static, leaving], flow, geometry, dt)
    expected = float(flow.velocity(z, geometry, 2.0e-3 + geometry.fov_y_offset_m)) * dt
    by_id = {p.id: p for p in moved}
    assert math.isclose(by_id[0].position_m[0], expected, rel_tol=1e-12), "Moving particle displacement"
    assert by_id[1].position_m == static.position_m, "Static particle must not move"
    assert [p.id for p in exited] == [2], f"Expected particle 2 to exit, got {[p.id for p in exited]}"
    with pytest.raises(RejectedInputError):
        advect([moving], flow, geometry, -1.0)
    print("✅ Test 5 passed: Advection")


def test_6_peak_velocity_profile():
    """Test 6: Mid-height speed is 1.5x the mean and the walls are at rest"""
    geometry = ChannelGeometry()
    flow = FlowModel()
    mean = flow.mean_velocity(geometry)
    assert math.isclose(flow.velocity(geometry.height_m / 2, geometry), 1.5 * mean, rel_tol=1e-12)
    assert flow.velocity(0.0, geometry) == 0.0
    assert flow.velocity(geometry.height_m / 2, geometry, 0.0) == 0.0, "Side wall must be at rest"
    print("✅ Test 6 passed: Velocity profile")


def test_7_plan_run_ground_truth():
    """Test 7: Every flowing particle is seen at least once, never during warm-up"""
    spec = small_run(static_particles=1)
    states, truth = plan_run(spec)
    assert len(states) == spec.frame_count
    assert truth.count() == 5, f"Expected 5 ground-truth particles, got {truth.count()}"
    assert truth.count("target_cyst") == 2
    for record in truth.to_records():
        assert record.frames, f"Particle {record.id} never visible"
        assert record.frames[0].frame >= spec.warmup_frames, f"Particle {record.id} visible during warm-up"
    assert all(p.static for p in states[0]), "Only static particles exist during warm-up"
    print("✅ Test 7 passed: Run plan and ground truth")


def test_8_generate_run_container(tmp_path):
    """Test 8: generate_run writes manifest, frames and ground truth"""
    spec = small_run()
    truth = generate_run(spec, tmp_path)
    manifest = frame_io.read_manifest(tmp_path)
    assert manifest.frame_count == spec.frame_count
    assert manifest.sensor.width_px == 512 and manifest.sensor.height_px == 256
    for k in range(spec.frame_count):
        frame = frame_io.read_frame(tmp_path, k, manifest)
        assert frame.mosaic.shape == (256, 512)
    records = frame_io.read_ground_truth(tmp_path)
    assert [r.id for r in records] == [r.id for r in truth.to_records()]
    print("✅ Test 8 passed: Frame container")


def test_9_generate_run_deterministic(tmp_path):
    """Test 9: Same seed gives byte-identical output for any worker count"""
    spec = small_run(noise=True)
    generate_run(spec, tmp_path / "a", workers=1)
    generate_run(spec, tmp_path / "b", workers=3)
    for name in ["manifest.json", "ground_truth.jsonl"] + [f"frame_{k:06d}.raw" for k in range(spec.frame_count)]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), f"{name} differs"
    print("✅ Test 9 passed: Deterministic generation")


def test_10_static_only_frames_identical():
    """Test 10: Static contamination renders identically in every noise-free frame"""
    spec = small_run(target_count=0, distractor_count=0, static_particles=2, frame_count=4, warmup_frames=1)
    states, truth = plan_run(spec)
    geometry = spec.resolved_geometry()
    frames = [render_frame(s, spec.sensor, spec.illumination, geometry).mosaic for s in states]
    assert truth.count() == 0, "Static particles are not part of the ground truth"
    assert all(np.array_equal(frames[0], f) for f in frames[1:]), "Static frames should not change"
    assert not np.all(frames[0] == int(spec.sensor.reference_level_dn)), "Statics should be visible"
    print("✅ Test 10 passed: Static contamination")


def test_11_rejects_no_room_after_warmup():
    """Test 11: Flowing particles need frames after warm-up"""
    with pytest.raises(RejectedInputError):
        plan_run(small_run(frame_count=3, warmup_frames=3))
    print("✅ Test 11 passed: Rejects runs without room after warm-up")


if __name__ == "__main__":
    import tempfile
    from pathlib import Path

    test_1_target_morphology()
    test_2_empty_frame_is_reference_level()
    test_3_noise_is_seeded()
    test_4_back_propagation_localizes_particle()
    test_5_advect_moves_and_retires()
    test_6_peak_velocity_profile()
    test_7_plan_run_ground_truth()
    with tempfile.TemporaryDirectory() as d:
        test_8_generate_run_container(Path(d))
    with tempfile.TemporaryDirectory() as d:
        test_9_generate_run_deterministic(Path(d))
    test_10_static_only_frames_identical()
    test_11_rejects_no_room_after_warmup()

    print("\n" + "="*80)
    print("ALL 11 TESTS PASSED! ✅")
    print("="*80)
