"""
Test suite for frame preprocessing (background, Hough localization, ROI and channel extraction).
"""

import math

import numpy as np
import pytest

from src.holoflow.exceptions import ConfigurationError, RejectedInputError, WarmupRequiredError
from src.holoflow.models import ChannelGeometry, HoughConfig, IlluminationSpec, ParticleSpec, SensorModel
from src.holoflow.tools.forward_sim import render_frame, render_roi
from src.holoflow.tools.preprocess import (
    BackgroundModel,
    RoiCrop,
    SensorFrame,
    bayer_channel_map,
    crop_roi,
    extract_channels,
    green_grid_mask,
    green_site_to_grid,
    grid_to_green_site,
    inscribed_green_window,
    locate_candidates,
    subtract_background,
    update_background,
)

IDENTITY = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]


def particle_at(pid, x_px, y_px, pitch, z=300e-6, diameter=20e-6, amplitude=0.0, **kwargs):
    return ParticleSpec(
        id=pid, class_label="distractor", position_m=(x_px * pitch, y_px * pitch, z),
        equivalent_diameter_m=diameter, amplitude_transmittance=amplitude, **kwargs,
    )


def flat_frame(sensor, index=0, level=300):
    return SensorFrame(index, 0.0, np.full((sensor.height_px, sensor.width_px), level, dtype=np.uint16), sensor)


def test_1_bayer_layout():
    """Test 1: RGGB channel map"""
    channel = bayer_channel_map((4, 4))
    expected = np.array([[0, 1, 0, 1], [1, 2, 1, 2], [0, 1, 0, 1], [1, 2, 1, 2]])
    assert np.array_equal(channel, expected), f"Unexpected layout {channel}"
    print("✅ Test 1 passed: Bayer layout")


def test_2_background_ring_buffer():
    """Test 2: The background keeps the mean of the last `capacity` frames"""
    sensor = SensorModel(width_px=8, height_px=8)
    model = BackgroundModel(capacity=3)
    with pytest.raises(WarmupRequiredError):
        subtract_background(flat_frame(sensor), model)
    for level in (10, 20, 30, 40):
        update_background(model, flat_frame(sensor, level=level))
    assert model.count == 3, f"Expected 3 buffered frames, got {model.count}"
    assert np.allclose(model.mean_frame, 30.0), "Oldest frame should have been evicted"
    with pytest.raises(RejectedInputError):
        update_background(model, flat_frame(SensorModel(width_px=4, height_px=8)))
    print("✅ Test 2 passed: Background ring buffer")


def test_3_static_residual_below_read_noise():
    """Test 3: Static contamination cancels to within 2x the read noise"""
    sensor = SensorModel(width_px=256, height_px=256, shot_noise=False, read_noise_dn=2.0)
    geometry = ChannelGeometry.for_sensor(sensor)
    illum = IlluminationSpec()
    dust = [particle_at(0, 128, 128, sensor.pitch_m, amplitude=0.3, static=True)]

    model = BackgroundModel(20)
    for k in range(20):
        update_background(model, render_frame(dust, sensor, illum, geometry, np.random.default_rng([3, k]), k))
    frame = render_frame(dust, sensor, illum, geometry, np.random.default_rng([3, 99]), 20)
    bgfree = subtract_background(frame, model)
    residual = bgfree - model.channel_means[bayer_channel_map(bgfree.shape)]
    rms = float(np.sqrt(np.mean(residual[64:192, 64:192] ** 2)))
    assert rms <= 2 * sensor.read_noise_dn, f"Residual RMS {rms:.2f} DN exceeds 2x read noise"
    print("✅ Test 3 passed: Static residual")


def test_4_moving_object_preserved():
    """Test 4: A moving object's hologram survives subtraction within 5%"""
    sensor = SensorModel(width_px=1024, height_px=256)
    geometry = ChannelGeometry.for_sensor(sensor)
    illum = IlluminationSpec()
    p = sensor.pitch_m

    model = BackgroundModel(20)
    for k in range(20):
        # Same particle earlier in its path, far from where it is imaged now
        earlier = [particle_at(0, 600 + 15 * k, 128, p)]
        update_background(model, render_frame(earlier, sensor, illum, geometry, frame_index=k))
    frame = render_frame([particle_at(0, 200, 128, p)], sensor, illum, geometry, frame_index=20)
    bgfree = subtract_background(frame, model)

    roi = (slice(0, 256), slice(72, 328))
    levels = model.channel_means[bayer_channel_map(bgfree.shape)]
    kept = np.abs(bgfree - levels)[roi].max()
    original = np.abs(frame.mosaic.astype(float) - sensor.reference_level_dn)[roi].max()
    assert abs(kept - original) <= 0.05 * original, f"Amplitude {kept:.1f} vs original {original:.1f}"
    print("✅ Test 4 passed: Moving object preserved")


def noisy_background(sensor, illum, geometry, frames=20, seed=5):
    model = BackgroundModel(frames)
    for k in range(frames):
        update_background(model, render_frame([], sensor, illum, geometry, np.random.default_rng([seed, k]), k))
    return model


def test_5_locate_candidates():
    """Test 5: One disk gives exactly one candidate within 2 px; two disks give two"""
    sensor = SensorModel(width_px=768, height_px=512)
    geometry = ChannelGeometry.for_sensor(sensor)
    illum = IlluminationSpec()
    p = sensor.pitch_m
    model = noisy_background(sensor, illum, geometry)

    for i, z in enumerate((150e-6, 400e-6, 650e-6)):
        truth = (384.0, 256.0)
        frame = render_frame([particle_at(0, *truth, p, z=z)], sensor, illum, geometry,
                             np.random.default_rng([6, i]), 20)
        candidates = locate_candidates(subtract_background(frame, model), HoughConfig())
        assert len(candidates) == 1, f"z={z * 1e6:.0f} um: expected 1 candidate, got {[c.center_px for c in candidates]}"
        error = math.dist(truth, candidates[0].center_px)
        assert error <= 2.0, f"z={z * 1e6:.0f} um: center off by {error:.2f} px"

    truth = [(234.0, 256.0), (534.0, 256.0)]
    particles = [particle_at(i, x, y, p, z=400e-6) for i, (x, y) in enumerate(truth)]
    frame = render_frame(particles, sensor, illum, geometry, np.random.default_rng([6, 9]), 20)
    candidates = locate_candidates(subtract_background(frame, model), HoughConfig())
    assert len(candidates) == 2, f"Expected 2 candidates, got {[c.center_px for c in candidates]}"
    for x, y in truth:
        nearest = min(math.dist((x, y), c.center_px) for c in candidates)
        assert nearest <= 2.0, f"No candidate within 2 px of ({x}, {y})"
    print("✅ Test 5 passed: Candidate localization")


def test_6_crop_roi_alignment_and_borders():
    """Test 6: ROIs keep the Bayer phase and shift inward at the borders"""
    frame = np.zeros((1024, 1024))
    inner = crop_roi(frame, (700.4, 600.0), 512)
    assert inner.origin_px == (444, 344), f"Unexpected origin {inner.origin_px}"
    assert inner.shift_px == (0, 0)
    assert inner.mosaic.shape == (512, 512)
    assert math.isclose(inner.center_px[0], 256.4) and inner.center_px[1] == 256.0

    corner = crop_roi(frame, (10.0, 10.0), 512)
    assert corner.origin_px == (0, 0)
    assert corner.shift_px == (246, 246), f"Unexpected shift {corner.shift_px}"
    assert corner.center_px == (10.0, 10.0)
    with pytest.raises(RejectedInputError):
        crop_roi(np.zeros((256, 256)), (128.0, 128.0), 512)
    print("✅ Test 6 passed: ROI cropping")


def test_7_green_quincunx_mapping():
    """Test 7: Green sites map one-to-one onto the rotated grid"""
    n = 16
    rows, cols = np.nonzero((np.add.outer(np.arange(n), np.arange(n)) % 2) == 1)
    u, v = green_site_to_grid(rows, cols, n)
    assert u.min() >= 0 and v.min() >= 0 and u.max() < n and v.max() < n, "Grid indices out of range"
    assert len(set(zip(u.tolist(), v.tolist()))) == len(rows), "Mapping must be injective"
    r, c = grid_to_green_site(u, v, n)
    assert np.array_equal(r, rows) and np.array_equal(c, cols), "Inverse mapping failed"
    mask = green_grid_mask(n)
    assert int(mask.sum()) == n * n // 2, f"Expected {n * n // 2} populated cells, got {int(mask.sum())}"
    assert mask[u, v].all(), "Every mapped cell must be in the mask"
    window = inscribed_green_window(n)
    assert mask[window].all(), "The inscribed window must hold only measured sites"
    assert mask[window].size == (n // 2) ** 2
    print("✅ Test 7 passed: Green quincunx mapping")


def test_8_extract_flat_roi():
    """Test 8: A flat ROI gives unit amplitudes on the expected grids"""
    crop = RoiCrop(np.full((512, 512), 300.0), (0, 0), (0, 0), (256.0, 256.0))
    channels = extract_channels(crop, IDENTITY, 1.4e-6)
    assert channels.red.shape == (256, 256) and channels.blue.shape == (256, 256)
    assert channels.green.shape == (256, 256), "Green is the inscribed n/2 square of the rotated grid"
    assert channels.green_sample_count == 256 * 256 and channels.green_offset == 128
    for name in ("red", "green", "blue"):
        plane = getattr(channels, name)
        assert np.allclose(plane, 1.0), f"{name} amplitude should be 1"
        assert math.isclose(channels.levels[name], 300.0)
    assert math.isclose(channels.green_pitch_m, math.sqrt(2) * 1.4e-6)
    assert math.isclose(channels.red_pitch_m, 2.8e-6)
    with pytest.raises(RejectedInputError):
        extract_channels(RoiCrop(np.full((66, 66), 300.0), (0, 0), (0, 0), (33.0, 33.0)), IDENTITY, 1.4e-6)
    print("✅ Test 8 passed: Flat ROI extraction")


def test_9_singular_unmixing_rejected():
    """Test 9: A singular crosstalk inverse is a configuration error"""
    crop = RoiCrop(np.full((64, 64), 300.0), (0, 0), (0, 0), (32.0, 32.0))
    singular = [[1.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
    with pytest.raises(ConfigurationError):
        extract_channels(crop, singular, 1.4e-6)
    print("✅ Test 9 passed: Singular unmixing rejected")


def test_10_crosstalk_unmixing():
    """Test 10: Unmixing a crosstalk-mixed ROI recovers the unmixed holograms"""
    mixing = np.array([[0.95, 0.05, 0.0], [0.03, 0.94, 0.03], [0.0, 0.05, 0.95]])
    clean_sensor = SensorModel(width_px=256, height_px=256)
    mixed_sensor = clean_sensor.model_copy(update={"crosstalk_matrix": mixing.tolist()})
    geometry = ChannelGeometry.for_sensor(clean_sensor)
    illum = IlluminationSpec()
    particle = particle_at(0, 0, 0, clean_sensor.pitch_m, diameter=12e-6, amplitude=0.4)

    clean = render_roi(particle, clean_sensor, illum, geometry, 256)
    mixed = render_roi(particle, mixed_sensor, illum, geometry, 256)
    reference = extract_channels(RoiCrop(clean, (0, 0), (0, 0), (128.0, 128.0)), IDENTITY, clean_sensor.pitch_m)
    unmixed = extract_channels(
        RoiCrop(mixed, (0, 0), (0, 0), (128.0, 128.0)), np.linalg.inv(mixing).tolist(), clean_sensor.pitch_m
    )
    for name in ("red", "blue"):
        error = float(np.median(np.abs(getattr(unmixed, name) - getattr(reference, name))))
        assert error < 0.01, f"{name} median unmixing error {error:.4f}"
    print("✅ Test 10 passed: Crosstalk unmixing")


def test_11_blank_frames():
    """Test 11: A noise-free blank frame gives no candidates; noisy blanks at most one per frame"""
    sensor = SensorModel(width_px=768, height_px=512)
    geometry = ChannelGeometry.for_sensor(sensor)
    illum = IlluminationSpec()

    flat = update_background(BackgroundModel(20), flat_frame(sensor))
    assert locate_candidates(subtract_background(flat_frame(sensor), flat), HoughConfig()) == []

    model = noisy_background(sensor, illum, geometry)
    false_candidates = []
    for k in range(20):
        frame = render_frame([], sensor, illum, geometry, np.random.default_rng([11, k]), 20 + k)
        false_candidates.append(len(locate_candidates(subtract_background(frame, model), HoughConfig())))
    assert np.mean(false_candidates) <= 1.0, f"False candidates per blank frame {false_candidates}"
    print("✅ Test 11 passed: Blank frames")


if __name__ == "__main__":
    test_1_bayer_layout()
    test_2_background_ring_buffer()
    test_3_static_residual_below_read_noise()
    test_4_moving_object_preserved()
    test_5_locate_candidates()
    test_6_crop_roi_alignment_and_borders()
    test_7_green_quincunx_mapping()
    test_8_extract_flat_roi()
    test_9_singular_unmixing_rejected()
    test_10_crosstalk_unmixing()
    test_11_blank_frames()

    print("\n" + "="*80)
    print("ALL 11 TESTS PASSED! ✅")
    print("="*80)
