"""
Frame container and record files.

A stream directory holds ``manifest.json`` and ``frame_%06d.raw`` files (uint16 LE,
row-major, RGGB at (0, 0)); simulated runs add ``ground_truth.jsonl``.
"""

import json
import os
from pathlib import Path
from typing import Iterable, List, Type, TypeVar

import numpy as np
from pydantic import BaseModel, ValidationError

from src.holoflow.exceptions import CorruptFrameError, ManifestError, UnsupportedFormatError
from src.holoflow.models import GroundTruthRecord, StreamManifest
from src.holoflow.tools.preprocess import SensorFrame

MANIFEST_NAME = "manifest.json"
GROUND_TRUTH_NAME = "ground_truth.jsonl"
DETECTION_LOG_NAME = "detections.jsonl"
RUN_REPORT_NAME = "run_report.json"
TIMING_NAME = "timing.json"
SCHEMA_VERSION = 1

M = TypeVar("M", bound=BaseModel)


def frame_path(stream_dir, index: int) -> Path:
    return Path(stream_dir) / f"frame_{index:06d}.raw"


def write_json(path, model: BaseModel):
    """Pretty-printed, key-sorted JSON of a pydantic model."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(model.model_dump(mode="json", by_alias=True), f, indent=2, sort_keys=True)
        f.write("\n")


def read_json(path, model_cls: Type[M]) -> M:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return model_cls.model_validate(json.load(f))
    except FileNotFoundError:
        raise ManifestError(f"missing file: {path}")
    except (json.JSONDecodeError, ValidationError) as e:
        raise ManifestError(f"unreadable {model_cls.__name__} in {path}: {e}")


def write_jsonl(path, records: Iterable[BaseModel]):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record.model_dump(mode="json", by_alias=True), sort_keys=True))
            f.write("\n")


def read_jsonl(path, model_cls: Type[M]) -> List[M]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return [model_cls.model_validate_json(line) for line in f if line.strip()]
    except FileNotFoundError:
        raise ManifestError(f"missing file: {path}")
    except ValidationError as e:
        raise ManifestError(f"unreadable {model_cls.__name__} record in {path}: {e}")


# ========== STREAM CONTAINER ==========

def write_manifest(stream_dir, manifest: StreamManifest):
    write_json(Path(stream_dir) / MANIFEST_NAME, manifest)


def read_manifest(stream_dir) -> StreamManifest:
    manifest = read_json(Path(stream_dir) / MANIFEST_NAME, StreamManifest)
    if manifest.schema_version != SCHEMA_VERSION:
        raise UnsupportedFormatError(f"manifest schema_version {manifest.schema_version} is not supported")
    return manifest


def write_frame(stream_dir, index: int, mosaic: np.ndarray):
    os.makedirs(stream_dir, exist_ok=True)
    frame_path(stream_dir, index).write_bytes(np.ascontiguousarray(mosaic, dtype="<u2").tobytes())


def read_frame(stream_dir, index: int, manifest: StreamManifest) -> SensorFrame:
    """Load one frame; size or range problems raise CorruptFrameError."""
    sensor = manifest.sensor_model()
    path = frame_path(stream_dir, index)
    try:
        payload = path.read_bytes()
    except FileNotFoundError:
        raise CorruptFrameError(f"frame {index} missing: {path}")

    expected = 2 * sensor.width_px * sensor.height_px
    if len(payload) != expected:
        raise CorruptFrameError(f"frame {index}: {len(payload)} bytes, expected {expected}")
    mosaic = np.frombuffer(payload, dtype="<u2").reshape(sensor.height_px, sensor.width_px)
    try:
        return SensorFrame(index, index * manifest.frame_period_s, mosaic.astype(np.uint16), sensor)
    except ValueError as e:
        raise CorruptFrameError(str(e))


def write_ground_truth(stream_dir, records: Iterable[GroundTruthRecord]):
    write_jsonl(Path(stream_dir) / GROUND_TRUTH_NAME, records)


def read_ground_truth(stream_dir) -> List[GroundTruthRecord]:
    return read_jsonl(Path(stream_dir) / GROUND_TRUTH_NAME, GroundTruthRecord)


# ========== STACK DUMPS ==========

def write_stack(directory, name: str, planes: np.ndarray, metadata: dict) -> Path:
    """Flat little-endian float32 planes plus a JSON sidecar with shape and metadata."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    raw = directory / f"{name}.raw"
    raw.write_bytes(np.ascontiguousarray(planes, dtype="<f4").tobytes())
    sidecar = {"shape": list(planes.shape), "dtype": "float32_le", **metadata}
    with open(directory / f"{name}.json", "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
        f.write("\n")
    return raw


def read_stack(directory, name: str) -> np.ndarray:
    directory = Path(directory)
    with open(directory / f"{name}.json", "r", encoding="utf-8") as f:
        sidecar = json.load(f)
    data = np.frombuffer((directory / f"{name}.raw").read_bytes(), dtype="<f4")
    return data.reshape(sidecar["shape"])
