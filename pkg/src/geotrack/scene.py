"""Scene data model and file formats.

Two on-disk formats live here:

- Scene JSON (``"schema": 1``): one document per scene holding frames with
  intrinsics, ego pose, detections (optionally with pixel observations,
  appearance vectors, and small feature maps), and ground-truth objects.
  Serialization is canonical (sorted keys, indent 2, repr floats), so
  save -> load -> save is byte-stable.
- Tracking CSV: ``frame,id,bb_left,bb_top,bb_width,bb_height,conf,x,y,z``
  with one line per box, frame-major then id-major. Frames are 1-based on
  disk (0-based in memory), absent fields are written as -1, and x,y,z are
  world coordinates. Import is the exact inverse of export.
"""

import json
import os
import tempfile
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CapacityExceededError,
    FormatError,
    InvariantViolationError,
    ParseError,
    SceneTooShortError,
    SchemaError,
)
from .geometry import WORLD, CameraIntrinsics, EgoPose, PixelObservation, Pose5D

SCENE_SCHEMA_VERSION = 1
DEFAULT_CAPACITY = 30

PAD_FRACTION = 0.15
PAD_MIN = 5
PAD_MAX = 25


@dataclass
class Detection:
    """One detected object in one frame."""

    bbox: np.ndarray  # (left, top, width, height) pixels
    confidence: float = 1.0
    center: np.ndarray | None = None  # regressed pixel center
    observation: PixelObservation | None = None
    appearance: np.ndarray | None = None
    feature_map: np.ndarray | None = None  # (H, W, E)
    gt_id: int | None = None

    def __post_init__(self):
        self.bbox = np.asarray(self.bbox, dtype=np.float64).reshape(4)
        if self.center is not None:
            self.center = np.asarray(self.center, dtype=np.float64).reshape(2)
        if self.appearance is not None:
            self.appearance = np.asarray(self.appearance, dtype=np.float64).reshape(-1)
        if self.feature_map is not None:
            self.feature_map = np.asarray(self.feature_map, dtype=np.float64)


@dataclass
class GroundTruthObject:
    object_id: int
    pose: Pose5D  # world frame
    kind: str = "vertical"
    bbox: np.ndarray | None = None  # image box of the (unoccluded) object

    def __post_init__(self):
        if self.bbox is not None:
            self.bbox = np.asarray(self.bbox, dtype=np.float64).reshape(4)


@dataclass
class FrameRecord:
    frame_index: int
    timestamp: float
    intrinsics: CameraIntrinsics
    ego: EgoPose
    detections: list[Detection] = field(default_factory=list)
    gt_objects: list[GroundTruthObject] | None = None


@dataclass
class SceneSequence:
    scene_id: str
    frames: list[FrameRecord]

    @property
    def reference_ego(self):
        return self.frames[0].ego

    def __len__(self):
        return len(self.frames)


@dataclass
class TrainingPair:
    """Frame pair plus its ground-truth match matrix.

    ``match`` is (N+1) x (N+1): rows are detections of the earlier frame,
    columns of the later frame, the extra row/column encode entering and
    leaving objects, and padded slots are all zero.
    """

    frame_a: int
    frame_b: int
    match: np.ndarray

    @property
    def separation(self):
        return self.frame_b - self.frame_a


# --- bbox helpers -------------------------------------------------------------


def pad_bbox(bbox, image_size):
    """Grow a box by the context margin used before cropping.

    The per-side margin is 15% of the larger box side, clamped to
    [5, 25] pixels; the result is clipped to the image.
    """
    left, top, w, h = (float(x) for x in bbox)
    width, height = image_size
    pad = float(np.clip(round(PAD_FRACTION * max(w, h)), PAD_MIN, PAD_MAX))
    new_left = max(0.0, left - pad)
    new_top = max(0.0, top - pad)
    new_right = min(float(width), left + w + pad)
    new_bottom = min(float(height), top + h + pad)
    return np.array([new_left, new_top, new_right - new_left, new_bottom - new_top])


def _bbox_intersects_image(bbox, intrinsics):
    left, top, w, h = bbox
    return w > 0 and h > 0 and left < intrinsics.width and top < intrinsics.height \
        and left + w > 0 and top + h > 0


# --- match matrices -----------------------------------------------------------


def build_match_matrix(frame_a, frame_b, capacity=DEFAULT_CAPACITY):
    """Ground-truth association matrix between two frames' detections.

    M[i, j] = 1 when detection i of frame_a and detection j of frame_b
    carry the same ground-truth id. Objects leaving set the last column,
    objects entering set the last row; detections without a ground-truth
    id (false positives) count as leaving/entering.
    """
    dets_a, dets_b = frame_a.detections, frame_b.detections
    if len(dets_a) > capacity or len(dets_b) > capacity:
        raise CapacityExceededError(
            f"{max(len(dets_a), len(dets_b))} detections exceed capacity {capacity}"
        )
    ids_b = {}
    for j, det in enumerate(dets_b):
        if det.gt_id is not None:
            if det.gt_id in ids_b:
                raise InvariantViolationError(
                    f"duplicate ground-truth id {det.gt_id} in frame {frame_b.frame_index}"
                )
            ids_b[det.gt_id] = j
    m = np.zeros((capacity + 1, capacity + 1), dtype=np.int64)
    matched_b = set()
    for i, det in enumerate(dets_a):
        j = ids_b.get(det.gt_id) if det.gt_id is not None else None
        if j is None:
            m[i, capacity] = 1
        else:
            m[i, j] = 1
            matched_b.add(j)
    for j in range(len(dets_b)):
        if j not in matched_b:
            m[capacity, j] = 1
    return m


def sample_training_pairs(scene, n_max, count, seed, capacity=DEFAULT_CAPACITY):
    """Sample frame pairs with uniformly random separation n in [1, n_max].

    Deterministic for a fixed seed. Frames must carry ground-truth ids so
    the match matrices can be built.
    """
    if len(scene.frames) < 2:
        raise SceneTooShortError(
            f"scene {scene.scene_id} has {len(scene.frames)} frame(s); need >= 2"
        )
    rng = np.random.default_rng(seed)
    max_sep = min(n_max, len(scene.frames) - 1)
    pairs = []
    for _ in range(count):
        n = int(rng.integers(1, max_sep + 1))
        a = int(rng.integers(0, len(scene.frames) - n))
        pairs.append(
            TrainingPair(
                frame_a=a,
                frame_b=a + n,
                match=build_match_matrix(
                    scene.frames[a], scene.frames[a + n], capacity
                ),
            )
        )
    return pairs


# --- scene JSON ---------------------------------------------------------------


def _floats(a):
    return [float(x) for x in np.asarray(a).reshape(-1)]


def _detection_to_doc(det):
    doc = {"bbox": _floats(det.bbox), "confidence": float(det.confidence)}
    if det.center is not None:
        doc["center"] = _floats(det.center)
    if det.observation is not None:
        doc["observation"] = {
            "center": _floats(det.observation.c),
            "depth": float(det.observation.T_z),
            "rotation": _floats(det.observation.R),
        }
    if det.appearance is not None:
        doc["appearance"] = _floats(det.appearance)
    if det.feature_map is not None:
        doc["feature_map"] = {
            "shape": [int(s) for s in det.feature_map.shape],
            "data": _floats(det.feature_map),
        }
    if det.gt_id is not None:
        doc["gt_id"] = int(det.gt_id)
    return doc


def _detection_from_doc(doc, where):
    try:
        det = Detection(
            bbox=doc["bbox"],
            confidence=float(doc["confidence"]),
            center=doc.get("center"),
            gt_id=doc.get("gt_id"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"{where}: bad detection ({exc})") from exc
    obs = doc.get("observation")
    if obs is not None:
        try:
            det.observation = PixelObservation(
                c=obs["center"], T_z=float(obs["depth"]), R=obs["rotation"]
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"{where}: bad observation ({exc})") from exc
    if "appearance" in doc:
        det.appearance = np.asarray(doc["appearance"], dtype=np.float64)
    if "feature_map" in doc:
        fm = doc["feature_map"]
        try:
            det.feature_map = np.asarray(fm["data"], dtype=np.float64).reshape(fm["shape"])
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"{where}: bad feature map ({exc})") from exc
    return det


def scene_to_doc(scene):
    frames = []
    for fr in scene.frames:
        doc = {
            "frame_index": int(fr.frame_index),
            "timestamp": float(fr.timestamp),
            "intrinsics": {
                "fx": float(fr.intrinsics.f_x),
                "fy": float(fr.intrinsics.f_y),
                "px": float(fr.intrinsics.p_x),
                "py": float(fr.intrinsics.p_y),
                "width": int(fr.intrinsics.width),
                "height": int(fr.intrinsics.height),
            },
            "ego": {
                "rotation": _floats(fr.ego.rotation),
                "translation": _floats(fr.ego.translation),
            },
            "detections": [_detection_to_doc(d) for d in fr.detections],
        }
        if fr.gt_objects is not None:
            doc["gt_objects"] = [
                {
                    "object_id": int(g.object_id),
                    "translation": _floats(g.pose.T),
                    "rotation": _floats(g.pose.R),
                    "kind": g.kind,
                    **({"bbox": _floats(g.bbox)} if g.bbox is not None else {}),
                }
                for g in fr.gt_objects
            ]
        frames.append(doc)
    return {"schema": SCENE_SCHEMA_VERSION, "scene_id": scene.scene_id, "frames": frames}


def scene_from_doc(doc, capacity=DEFAULT_CAPACITY):
    if not isinstance(doc, dict):
        raise SchemaError("scene document must be a JSON object")
    if doc.get("schema") != SCENE_SCHEMA_VERSION:
        raise SchemaError(f"unsupported schema version {doc.get('schema')!r}")
    try:
        scene_id = doc["scene_id"]
        frame_docs = doc["frames"]
    except KeyError as exc:
        raise SchemaError(f"missing top-level field {exc}") from exc

    frames = []
    prev_index = None
    for k, fd in enumerate(frame_docs):
        where = f"frames[{k}]"
        try:
            intr = fd["intrinsics"]
            intrinsics = CameraIntrinsics(
                f_x=float(intr["fx"]),
                f_y=float(intr["fy"]),
                p_x=float(intr["px"]),
                p_y=float(intr["py"]),
                width=int(intr["width"]),
                height=int(intr["height"]),
            )
            ego_doc = fd["ego"]
            if "matrix" in ego_doc:
                ego = EgoPose.from_matrix(ego_doc["matrix"])
            else:
                ego = EgoPose(
                    np.asarray(ego_doc["rotation"], dtype=np.float64),
                    np.asarray(ego_doc["translation"], dtype=np.float64),
                )
            frame = FrameRecord(
                frame_index=int(fd["frame_index"]),
                timestamp=float(fd["timestamp"]),
                intrinsics=intrinsics,
                ego=ego,
                detections=[
                    _detection_from_doc(dd, where) for dd in fd["detections"]
                ],
            )
        except InvariantViolationError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"{where}: {exc}") from exc
        if "gt_objects" in fd:
            gt = []
            for gd in fd["gt_objects"]:
                try:
                    gt.append(
                        GroundTruthObject(
                            object_id=int(gd["object_id"]),
                            pose=Pose5D(
                                np.asarray(gd["translation"], dtype=np.float64),
                                np.asarray(gd["rotation"], dtype=np.float64),
                                WORLD,
                            ),
                            kind=gd.get("kind", "vertical"),
                            bbox=gd.get("bbox"),
                        )
                    )
                except (KeyError, TypeError, ValueError) as exc:
                    raise SchemaError(f"{where}: bad gt object ({exc})") from exc
            frame.gt_objects = gt
        if prev_index is not None and frame.frame_index <= prev_index:
            raise InvariantViolationError(
                f"{where}: frame_index {frame.frame_index} not increasing"
            )
        prev_index = frame.frame_index
        for det in frame.detections:
            if not _bbox_intersects_image(det.bbox, intrinsics):
                raise InvariantViolationError(
                    f"{where}: bbox {det.bbox.tolist()} does not intersect the image"
                )
        if len(frame.detections) > capacity:
            warnings.warn(
                f"{where}: {len(frame.detections)} detections exceed capacity "
                f"{capacity}; keeping the top-{capacity} by confidence",
                stacklevel=2,
            )
            order = sorted(
                range(len(frame.detections)),
                key=lambda i: (-frame.detections[i].confidence, i),
            )[:capacity]
            frame.detections = [frame.detections[i] for i in sorted(order)]
        frames.append(frame)
    if not frames:
        raise InvariantViolationError("scene has no frames")
    return SceneSequence(scene_id=scene_id, frames=frames)


def scene_to_json(scene):
    return json.dumps(scene_to_doc(scene), sort_keys=True, indent=2) + "\n"


def atomic_write_text(path, text):
    """Write via temp file + rename so readers never see partial output."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "w") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_scene(scene, path):
    atomic_write_text(path, scene_to_json(scene))


def load_scene(path, capacity=DEFAULT_CAPACITY):
    try:
        with open(path) as handle:
            doc = json.load(handle)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    except OSError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    return scene_from_doc(doc, capacity)


# --- tracking CSV ---------------------------------------------------------------


@dataclass
class MotEntry:
    """One CSV line: a box of one identity in one frame."""

    frame: int  # 0-based in memory; written 1-based
    track_id: int
    bbox: np.ndarray
    confidence: float = 1.0
    world_xyz: np.ndarray | None = None

    def __post_init__(self):
        self.bbox = np.asarray(self.bbox, dtype=np.float64).reshape(4)
        if self.world_xyz is not None:
            self.world_xyz = np.asarray(self.world_xyz, dtype=np.float64).reshape(3)


def _fmt(x):
    return repr(float(x))


def mot_to_csv(entries):
    lines = []
    for e in sorted(entries, key=lambda e: (e.frame, e.track_id)):
        if e.track_id <= 0:
            raise FormatError(f"track id {e.track_id} must be a positive integer")
        xyz = e.world_xyz
        fields = [
            str(e.frame + 1),
            str(int(e.track_id)),
            _fmt(e.bbox[0]),
            _fmt(e.bbox[1]),
            _fmt(e.bbox[2]),
            _fmt(e.bbox[3]),
            _fmt(e.confidence),
            _fmt(xyz[0]) if xyz is not None else "-1",
            _fmt(xyz[1]) if xyz is not None else "-1",
            _fmt(xyz[2]) if xyz is not None else "-1",
        ]
        lines.append(",".join(fields))
    return "".join(line + "\n" for line in lines)


def mot_from_csv(text):
    entries = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 10:
            raise FormatError(f"expected 10 fields, got {len(parts)}", line=lineno)
        try:
            frame = int(parts[0]) - 1
            track_id = int(parts[1])
            bbox = [float(p) for p in parts[2:6]]
            conf = float(parts[6])
            xyz = [float(p) for p in parts[7:10]]
        except ValueError as exc:
            raise FormatError(str(exc), line=lineno) from exc
        world = None if xyz == [-1.0, -1.0, -1.0] else np.array(xyz)
        entries.append(
            MotEntry(frame=frame, track_id=track_id, bbox=bbox,
                     confidence=conf, world_xyz=world)
        )
    return entries


def write_mot(entries, path):
    atomic_write_text(path, mot_to_csv(entries))


def read_mot(path):
    try:
        with open(path) as handle:
            text = handle.read()
    except OSError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return mot_from_csv(text)


def gt_mot_entries(scene):
    """Ground-truth objects of a scene as CSV entries (ids stay stable)."""
    entries = []
    for fr in scene.frames:
        for g in fr.gt_objects or []:
            if g.bbox is None:
                continue
            entries.append(
                MotEntry(
                    frame=fr.frame_index,
                    track_id=g.object_id,
                    bbox=g.bbox,
                    confidence=1.0,
                    world_xyz=g.pose.T,
                )
            )
    return entries


def export_mot(scene, hypotheses, gt_path, hyp_path):
    """Write the annotation and hypothesis CSV files for one scene."""
    write_mot(gt_mot_entries(scene), gt_path)
    write_mot(hypotheses, hyp_path)


def import_mot(path):
    """Read a tracking CSV back into per-track entry lists."""
    tracks = {}
    for entry in read_mot(path):
        tracks.setdefault(entry.track_id, []).append(entry)
    for entries in tracks.values():
        entries.sort(key=lambda e: e.frame)
    return tracks
