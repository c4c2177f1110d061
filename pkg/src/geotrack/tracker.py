"""Online tracking-by-detection over a scene.

Each frame's detections are associated to existing tracks by solving a
maximization assignment on a score matrix of shape (m, n + m): column j < n
holds the best similarity between track i's buffered instances and
detection j, and column n + i holds track i's null score (its mean
probability of matching nothing). Tracks matched to their null column stay
alive — the targets are static, so disappearing from view is expected —
and each track's 5D pose is re-aggregated in the reference frame after
every update.
"""

from dataclasses import dataclass, field

import numpy as np

from .assignment import AssignmentResult, hungarian  # noqa: F401
from .errors import (
    CapacityExceededError,
    EmptyTrackError,
    OutOfOrderFrameError,
    SchemaError,
    ZeroVectorError,
)
from .geometry import REFERENCE, Pose5D, camera_to_world, normalize_rotation
from .matching import DetectionFeatures, Matcher
from .scene import MotEntry

DEFAULT_BUFFER = 10
DEFAULT_MIN_INSTANCES = 2

AGGREGATORS = ("median", "mean", "idw")


@dataclass
class TrackInstance:
    frame_index: int
    descriptor: np.ndarray  # fused descriptor as the matcher saw it
    pose_ref: Pose5D
    depth: float  # observed T_z, used by inverse-depth weighting


@dataclass
class Track:
    track_id: int
    instances: list = field(default_factory=list)
    observation_count: int = 0
    aggregated: Pose5D | None = None
    status: str = "active"


@dataclass
class GeolocatedObject:
    track_id: int
    pose: Pose5D  # world frame
    instance_count: int


class TrackerState:
    """Mutable per-scene tracking state owned by a single caller."""

    def __init__(self, matcher, ego_ref, buffer_size=DEFAULT_BUFFER,
                 aggregate="median", score_threshold=None):
        if aggregate not in AGGREGATORS:
            raise SchemaError(f"unknown aggregation method {aggregate!r}")
        self.matcher = matcher
        self.ego_ref = ego_ref
        self.buffer_size = buffer_size
        self.aggregate_method = aggregate
        self.score_threshold = score_threshold
        self.tracks = []
        self.last_frame_index = None
        self.next_track_id = 1


def aggregate_pose(track, method="median"):
    """Combine a track's buffered reference-frame poses into one Pose5D."""
    if not track.instances:
        raise EmptyTrackError(f"track {track.track_id} has no instances")
    ts = np.array([inst.pose_ref.T for inst in track.instances])
    rs = np.array([inst.pose_ref.R for inst in track.instances])
    if method == "median":
        t = np.median(ts, axis=0)
        r = np.median(rs, axis=0)
    elif method == "mean":
        t = ts.mean(axis=0)
        r = rs.mean(axis=0)
    elif method == "idw":
        w = 1.0 / np.maximum([inst.depth for inst in track.instances], 1e-6)
        w = w / w.sum()
        t = (ts * w[:, None]).sum(axis=0)
        r = (rs * w[:, None]).sum(axis=0)
    else:
        raise SchemaError(f"unknown aggregation method {method!r}")
    try:
        r = normalize_rotation(r)
    except ZeroVectorError:
        r = track.instances[-1].pose_ref.R
    return Pose5D(t, r, REFERENCE)


def score_matrix(tracks, detection_descriptors, matcher):
    """Similarity scores between m tracks and n detections plus null options.

    For every past frame that still has buffered instances, the matcher is
    re-run between that frame's instances and the current detections; a
    track's detection score is the maximum fused similarity over its
    instances and its null score the mean null-column probability.
    """
    m, n = len(tracks), len(detection_descriptors)
    scores = np.full((m, n + m), -np.inf)
    if m == 0:
        return scores
    null_sums = np.zeros(m)
    null_counts = np.zeros(m)
    det_scores = np.full((m, n), -np.inf)

    by_frame = {}
    for t_idx, track in enumerate(tracks):
        for inst in track.instances:
            by_frame.setdefault(inst.frame_index, []).append((t_idx, inst))
    for frame_index in sorted(by_frame):
        group = by_frame[frame_index]
        bundle = matcher.bundle([inst.descriptor for _, inst in group],
                                detection_descriptors)
        for row, (t_idx, _) in enumerate(group):
            if n:
                det_scores[t_idx] = np.maximum(det_scores[t_idx],
                                               bundle.fused[row, :n])
            null_sums[t_idx] += bundle.S1n[row, -1]
            null_counts[t_idx] += 1

    if n:
        scores[:, :n] = det_scores
    for i in range(m):
        scores[i, n + i] = null_sums[i] / null_counts[i] if null_counts[i] else 1.0
    return scores


def _features_for(detection):
    if detection.appearance is None:
        raise SchemaError("detection lacks an appearance vector; cannot track")
    return DetectionFeatures(
        appearance=detection.appearance,
        observation=detection.observation,
        feature_map=detection.feature_map,
    )


def step(state, frame):
    """Advance the tracker by one frame; returns (assignment, mot_entries)."""
    if state.last_frame_index is not None and frame.frame_index <= state.last_frame_index:
        raise OutOfOrderFrameError(
            f"frame {frame.frame_index} after {state.last_frame_index}"
        )
    config = state.matcher.config
    if len(frame.detections) > config.capacity:
        raise CapacityExceededError(
            f"{len(frame.detections)} detections exceed capacity {config.capacity}"
        )
    features = [_features_for(det) for det in frame.detections]
    descriptors = state.matcher.descriptors(
        features, frame.ego, state.ego_ref, frame.intrinsics
    )

    scores = score_matrix(state.tracks, descriptors, state.matcher)
    if state.score_threshold is not None and scores.size:
        n = len(descriptors)
        low = scores[:, :n] < state.score_threshold
        scores[:, :n][low] = -np.inf
    assignment = hungarian(scores)

    geom_width = 6 + config.embed_dim
    entries = []

    def _instance(det_idx):
        desc = descriptors[det_idx]
        pose_ref = Pose5D(
            desc[:3], normalize_rotation(desc[3:5]), REFERENCE
        )
        det = frame.detections[det_idx]
        depth = det.observation.T_z if det.observation is not None else float(desc[2])
        return TrackInstance(
            frame_index=frame.frame_index,
            descriptor=desc,
            pose_ref=pose_ref,
            depth=depth,
        ), det

    def _emit(track, det, pose_ref):
        world = camera_to_world(pose_ref.with_frame("camera"), state.ego_ref)
        entries.append(
            MotEntry(
                frame=frame.frame_index,
                track_id=track.track_id,
                bbox=det.bbox,
                confidence=det.confidence,
                world_xyz=world.T,
            )
        )

    for track_idx, det_idx in assignment.matches:
        track = state.tracks[track_idx]
        inst, det = _instance(det_idx)
        track.instances.append(inst)
        if len(track.instances) > state.buffer_size:
            track.instances = track.instances[-state.buffer_size:]
        track.observation_count += 1
        track.aggregated = aggregate_pose(track, state.aggregate_method)
        _emit(track, det, inst.pose_ref)

    for det_idx in assignment.unmatched_detections:
        inst, det = _instance(det_idx)
        track = Track(track_id=state.next_track_id, instances=[inst],
                      observation_count=1)
        track.aggregated = aggregate_pose(track, state.aggregate_method)
        state.next_track_id += 1
        state.tracks.append(track)
        _emit(track, det, inst.pose_ref)

    state.last_frame_index = frame.frame_index
    return assignment, entries


def finalize(state, ego_ref=None, min_instances=DEFAULT_MIN_INSTANCES):
    """World-frame aggregated poses of tracks with enough observations."""
    ego_ref = state.ego_ref if ego_ref is None else ego_ref
    out = []
    for track in state.tracks:
        if track.observation_count < min_instances:
            continue
        pose_ref = aggregate_pose(track, state.aggregate_method)
        world = camera_to_world(pose_ref.with_frame("camera"), ego_ref)
        out.append(
            GeolocatedObject(
                track_id=track.track_id,
                pose=world,
                instance_count=track.observation_count,
            )
        )
    return out


def track_scene(scene, params, buffer_size=DEFAULT_BUFFER, aggregate="median",
                score_threshold=None):
    """Run the tracker over a whole scene; returns (state, mot entries)."""
    matcher = params if isinstance(params, Matcher) else Matcher(params)
    state = TrackerState(
        matcher, scene.reference_ego, buffer_size=buffer_size,
        aggregate=aggregate, score_threshold=score_threshold,
    )
    entries = []
    for frame in scene.frames:
        _, frame_entries = step(state, frame)
        entries.extend(frame_entries)
    return state, entries


def geolocation_report(state, min_instances=DEFAULT_MIN_INSTANCES):
    """JSON-ready geolocalization summary of a finished tracker state."""
    objects = finalize(state, min_instances=min_instances)
    return {
        "objects": [
            {
                "track_id": obj.track_id,
                "translation": [float(x) for x in obj.pose.T],
                "rotation": [float(x) for x in obj.pose.R],
                "instances": obj.instance_count,
            }
            for obj in objects
        ],
        "min_instances": min_instances,
        "total_tracks": len(state.tracks),
    }
