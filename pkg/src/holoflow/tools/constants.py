"""
Shared physical constants and defaults.
"""

from typing import Dict, Tuple

ML_PER_H_TO_M3_PER_S = 1e-6 / 3600.0

# Illumination center wavelengths, red -> blue
DEFAULT_WAVELENGTHS_M: Tuple[float, float, float] = (630e-9, 530e-9, 450e-9)

CHANNELS = ("red", "green", "blue")
CHANNEL_INDEX: Dict[str, int] = {name: i for i, name in enumerate(CHANNELS)}

# Full-size instrument field of view along the flow axis
FULL_FOV_X_M = 6.5e-3

# Classifier input layout: intensities then phases, R, G, B
TENSOR_CHANNELS = (
    "intensity_red", "intensity_green", "intensity_blue",
    "phase_red", "phase_green", "phase_blue",
)
TENSOR_SIZE_PX = 256

# Class index order of network outputs
GIARDIA = 0
NON_GIARDIA = 1
LABELS = ("giardia", "non_giardia")

# Benchmark schema and published per-stage GPU timings to compare against
BENCHMARK_STAGES = ("frame_preprocess", "autofocus", "reconstruct", "size", "classify", "total_per_object")
REFERENCE_STAGE_MS: Dict[str, float] = {
    "frame_preprocess": 34.0,
    "autofocus": 7.0,
    "reconstruct": 2.5,
    "size": 6.0,
    "classify": 9.0,
    "total_per_object": 30.0,
}

# Real-time design point: ~10 objects per frame at 3 frames/s and 100 mL/h
REALTIME_MAX_CONCENTRATION_PER_ML = 1000.0

# Synthetic morphology (modeling choice, see DESIGN.md)
TARGET_LONG_AXIS_RANGE_M = (8e-6, 14e-6)
TARGET_AXIS_RATIO_RANGE = (1.2, 1.6)
TARGET_PHASE_RANGE_RAD = (0.6, 1.2)
TARGET_AMPLITUDE_RANGE = (0.85, 0.97)
DISTRACTOR_DIAMETER_RANGE_M = (2e-6, 40e-6)
