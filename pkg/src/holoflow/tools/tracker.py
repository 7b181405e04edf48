"""
Flow-profile particle tracker. Each physical object gets one track so it is
reconstructed, classified and counted once.
"""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

from src.holoflow.exceptions import RejectedInputError
from src.holoflow.models import ChannelGeometry, FlowModel, TrackerConfig
from src.holoflow.utils.logging_setup import get_logger

logger = get_logger(__name__)

Position = Tuple[float, float, float]


@dataclass(frozen=True)
class Detection:
    """One localized, autofocused candidate (frame coordinates in meters)."""

    x_m: float
    y_m: float
    z_m: float
    frame_index: int
    payload: Any = None  # carried through to the novel track (e.g. extracted holograms)


@dataclass
class ParticleTrack:
    track_id: int
    position_m: Position
    frame_index: int
    first_frame: int
    first_position_m: Position
    predicted_m: Position
    observations: int = 1
    missed: int = 0
    expected_exited: bool = False
    payload: Any = None
    # Attached once the novel detection has been reconstructed
    scores: Optional[Any] = None
    size: Optional[Any] = None
    label: Optional[str] = None


@dataclass
class TrackRegistry:
    geometry: ChannelGeometry
    cfg: TrackerConfig = field(default_factory=TrackerConfig)
    active: Dict[int, ParticleTrack] = field(default_factory=dict)
    retired: List[ParticleTrack] = field(default_factory=list)
    next_id: int = 0
    last_frame: int = -1

    def retire_all(self):
        for track_id in sorted(self.active):
            self.retired.append(self.active.pop(track_id))

    def _retire(self, track_id: int, reason: str):
        track = self.active.pop(track_id)
        logger.debug(f"track {track_id} retired ({reason}) after {track.observations} observations")
        self.retired.append(track)


def predict(registry: TrackRegistry, dt_s: float, flow: FlowModel) -> Dict[int, Position]:
    """Advance every active track's predicted position along the flow by v(z, y) * dt."""
    if not dt_s > 0:
        raise RejectedInputError(f"dt_s must be > 0, got {dt_s}")

    geometry = registry.geometry
    predictions = {}
    for track_id in sorted(registry.active):
        track = registry.active[track_id]
        x, y, z = track.predicted_m
        x += float(flow.velocity(z, geometry, y + geometry.fov_y_offset_m)) * dt_s
        track.predicted_m = (x, y, z)
        track.expected_exited = x > geometry.fov_x_m + registry.cfg.gate_along_m
        predictions[track_id] = track.predicted_m
    return predictions


def _gate_distance(predicted: Position, detection: Detection, cfg: TrackerConfig) -> float:
    """Squared residual normalized by the elliptical gate; <= 1 is inside."""
    return (
        ((detection.x_m - predicted[0]) / cfg.gate_along_m) ** 2
        + ((detection.y_m - predicted[1]) / cfg.gate_cross_m) ** 2
        + ((detection.z_m - predicted[2]) / cfg.gate_depth_m) ** 2
    )


def match_and_update(registry: TrackRegistry, detections: Sequence[Detection],
                     frame_index: Optional[int] = None) -> Tuple[List[ParticleTrack], TrackRegistry]:
    """Greedy nearest-neighbour matching of one frame's detections to predicted tracks.

    Returns the tracks spawned by unmatched (novel) detections, in detection order.
    ``frame_index`` names the frame when ``detections`` is empty.
    """
    frames = {d.frame_index for d in detections} or {frame_index}
    if len(frames) > 1:
        raise RejectedInputError(f"detections span several frames: {sorted(frames)}")
    frame_index = frames.pop()
    if frame_index is None:
        frame_index = registry.last_frame + 1
    if frame_index <= registry.last_frame:
        raise RejectedInputError(f"frame {frame_index} is not after {registry.last_frame}")
    registry.last_frame = frame_index
    cfg = registry.cfg

    pairs = []
    for track_id, track in registry.active.items():
        for j, detection in enumerate(detections):
            d2 = _gate_distance(track.predicted_m, detection, cfg)
            if d2 <= 1.0:
                pairs.append((d2, track_id, j))
    pairs.sort()

    matched_tracks, matched_detections = set(), set()
    for _, track_id, j in pairs:
        if track_id in matched_tracks or j in matched_detections:
            continue
        matched_tracks.add(track_id)
        matched_detections.add(j)
        track = registry.active[track_id]
        d = detections[j]
        track.position_m = track.predicted_m = (d.x_m, d.y_m, d.z_m)
        track.frame_index = frame_index
        track.observations += 1
        track.missed = 0
        track.expected_exited = False

    for track_id in sorted(registry.active):
        if track_id in matched_tracks:
            continue
        track = registry.active[track_id]
        track.missed += 1
        if track.expected_exited:
            registry._retire(track_id, "exited")
        elif track.missed >= cfg.max_missed_frames:
            registry._retire(track_id, "missed")

    novel = []
    for j, d in enumerate(detections):
        if j in matched_detections:
            continue
        position = (d.x_m, d.y_m, d.z_m)
        track = ParticleTrack(
            track_id=registry.next_id, position_m=position, frame_index=frame_index,
            first_frame=frame_index, first_position_m=position, predicted_m=position, payload=d.payload,
        )
        registry.active[track.track_id] = track
        registry.next_id += 1
        novel.append(track)

    return novel, registry
