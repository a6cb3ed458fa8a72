"""Core domain types, geometry helpers, and on-disk formats.

Everything downstream (filtering, association, embedding, simulation,
evaluation) is built on the types in this module. All types are immutable
after construction and safe to share across workers.

File formats:
  * detections: JSON lines, one detection per line
    {"frame": int, "box": [x,y,z,yaw,l,w,h], "score": float,
     "cloud": str, "gt_id": int|null}
  * point cloud: binary, magic "UAPC", uint32 count, count x 3 float32,
    all little-endian
  * track output: JSON lines
    {"frame": int, "track_id": int, "box": [...7...], "score": float}
"""

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

TWO_PI = 2.0 * math.pi

CLOUD_MAGIC = b"UAPC"


def wrap_angle(theta: float) -> float:
    """Wrap an angle to the half-open interval [-pi, pi).

    Angles already in range are returned unchanged (bit-exact), which keeps
    wrapping idempotent and serialization round-trips lossless.

    Raises:
        ValueError: if theta is NaN or infinite.
    """
    theta = float(theta)
    if not math.isfinite(theta):
        raise ValueError(f"angle must be finite, got {theta!r}")
    if -math.pi <= theta < math.pi:
        return theta
    r = (theta + math.pi) % TWO_PI - math.pi
    # float modulo can land exactly on the open bound for tiny negatives
    if r >= math.pi:
        r -= TWO_PI
    return r


@dataclass(frozen=True)
class Box7:
    """Oriented 3D bounding box: center (x, y, z), yaw about +z, extents.

    l/w/h are the full extents along the box's local x/y/z axes. yaw is
    normalized to [-pi, pi) at construction.
    """

    x: float
    y: float
    z: float
    yaw: float
    l: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("x", "y", "z", "yaw", "l", "w", "h"):
            v = float(getattr(self, name))
            if not math.isfinite(v):
                raise ValueError(f"Box7.{name} must be finite, got {v!r}")
            object.__setattr__(self, name, v)
        if self.l <= 0 or self.w <= 0 or self.h <= 0:
            raise ValueError(
                f"box extents must be positive, got l={self.l} w={self.w} h={self.h}"
            )
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)

    def to_array(self) -> np.ndarray:
        return np.array(
            [self.x, self.y, self.z, self.yaw, self.l, self.w, self.h],
            dtype=np.float64,
        )

    @classmethod
    def from_array(cls, a) -> "Box7":
        a = np.asarray(a, dtype=np.float64).reshape(7)
        return cls(*(float(v) for v in a))


def center_distance(b1: Box7, b2: Box7) -> float:
    """Euclidean distance between two box centers, in meters."""
    return math.dist((b1.x, b1.y, b1.z), (b2.x, b2.y, b2.z))


@dataclass(frozen=True)
class Detection:
    """One detector output: a box, its confidence, and its point-cloud ref.

    gt_id is only populated by the simulator / evaluation paths; pipeline
    code must not rely on it being present.
    """

    frame: int
    box: Box7
    score: float
    cloud_ref: str
    gt_id: int | None = None

    def __post_init__(self):
        if self.frame < 0:
            raise ValueError(f"frame index must be >= 0, got {self.frame}")
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score must be in [0, 1], got {self.score}")


class PointCloud:
    """Immutable (n, 3) float32 point set in the world frame."""

    __slots__ = ("points",)

    def __init__(self, points):
        pts = np.asarray(points, dtype=np.float32)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be (n, 3), got shape {pts.shape}")
        if not np.isfinite(pts).all():
            raise ValueError("point cloud contains non-finite coordinates")
        pts = pts.copy()
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __setattr__(self, name, value):
        raise AttributeError("PointCloud is immutable")

    @property
    def count(self) -> int:
        return self.points.shape[0]

    def __eq__(self, other):
        if not isinstance(other, PointCloud):
            return NotImplemented
        return np.array_equal(self.points, other.points)

    def __repr__(self):
        return f"PointCloud(count={self.count})"


@dataclass(frozen=True)
class FrameRecord:
    """All detections observed at one frame index."""

    index: int
    detections: tuple[Detection, ...]

    def __post_init__(self):
        object.__setattr__(self, "detections", tuple(self.detections))
        for d in self.detections:
            if d.frame != self.index:
                raise ValueError(
                    f"detection frame {d.frame} disagrees with record index {self.index}"
                )


@dataclass(frozen=True)
class Sequence:
    """An ordered run of frames plus the cloud store they reference."""

    frames: tuple[FrameRecord, ...]
    clouds: dict[str, PointCloud]
    frame_period: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        if self.frame_period <= 0:
            raise ValueError(f"frame period must be > 0, got {self.frame_period}")
        prev = None
        for rec in self.frames:
            if prev is not None and rec.index <= prev:
                raise ValueError("frame indices must be strictly increasing")
            prev = rec.index
            for det in rec.detections:
                if det.cloud_ref not in self.clouds:
                    raise ValueError(f"unresolvable cloud ref {det.cloud_ref!r}")

    def cloud_of(self, det: Detection) -> PointCloud:
        return self.clouds[det.cloud_ref]

    @property
    def n_frames(self) -> int:
        return len(self.frames)


@dataclass(frozen=True)
class TrackletLabel:
    """A track identity with its (frame, detection index) members."""

    track_id: int
    members: tuple[tuple[int, int], ...]

    def __post_init__(self):
        members = tuple((int(f), int(i)) for f, i in self.members)
        object.__setattr__(self, "members", members)
        frames = [f for f, _ in members]
        if len(frames) != len(set(frames)):
            raise ValueError(f"track {self.track_id} has duplicate frame members")
        if frames != sorted(frames):
            raise ValueError(f"track {self.track_id} members must be frame-ordered")


@dataclass(frozen=True)
class TrackRow:
    """One line of the tracks output file."""

    frame: int
    track_id: int
    box: Box7
    score: float


# ---------------------------------------------------------------------------
# serialization


def write_detections(path, seq: Sequence) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for rec in seq.frames:
            for det in rec.detections:
                obj = {
                    "frame": det.frame,
                    "box": [float(v) for v in det.box.to_array()],
                    "score": det.score,
                    "cloud": det.cloud_ref,
                    "gt_id": det.gt_id,
                }
                fh.write(json.dumps(obj) + "\n")


def read_detections(path, clouds: dict[str, PointCloud] | None = None,
                    frame_period: float = 0.5,
                    n_frames: int | None = None) -> Sequence:
    """Rebuild a Sequence from a detections file and a cloud store.

    Frame records are materialized for every index in [min_frame, max_frame]
    (or [0, n_frames) when n_frames is given) so that frames whose detections
    were all dropped still advance the tracker clock. With clouds=None the
    refs resolve to empty stub clouds (box-only workflows such as metric
    evaluation).
    """
    by_frame: dict[int, list[Detection]] = {}
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            det = Detection(
                frame=int(obj["frame"]),
                box=Box7.from_array(obj["box"]),
                score=float(obj["score"]),
                cloud_ref=str(obj["cloud"]),
                gt_id=None if obj.get("gt_id") is None else int(obj["gt_id"]),
            )
            by_frame.setdefault(det.frame, []).append(det)
    if n_frames is not None:
        indices = range(n_frames)
    elif by_frame:
        indices = range(min(by_frame), max(by_frame) + 1)
    else:
        indices = range(0)
    frames = tuple(
        FrameRecord(index=i, detections=tuple(by_frame.get(i, ()))) for i in indices
    )
    if clouds is None:
        stub = PointCloud(np.zeros((0, 3)))
        clouds = {d.cloud_ref: stub for dets in by_frame.values() for d in dets}
    return Sequence(frames=frames, clouds=clouds, frame_period=frame_period)


def write_point_cloud(path, cloud: PointCloud) -> None:
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(CLOUD_MAGIC)
        fh.write(struct.pack("<I", cloud.count))
        fh.write(np.ascontiguousarray(cloud.points, dtype="<f4").tobytes())


def read_point_cloud(path) -> PointCloud:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != CLOUD_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}, expected {CLOUD_MAGIC!r}")
    (count,) = struct.unpack_from("<I", raw, 4)
    expected = 8 + count * 12
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, got {len(raw)}")
    pts = np.frombuffer(raw, dtype="<f4", count=count * 3, offset=8).reshape(count, 3)
    return PointCloud(pts)


def write_clouds(dirpath, clouds: dict[str, PointCloud]) -> None:
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    for ref in sorted(clouds):
        write_point_cloud(dirpath / f"{ref}.uapc", clouds[ref])


def read_clouds(dirpath) -> dict[str, PointCloud]:
    dirpath = Path(dirpath)
    out: dict[str, PointCloud] = {}
    for p in sorted(dirpath.glob("*.uapc")):
        out[p.stem] = read_point_cloud(p)
    return out


def write_sequence(det_path, clouds_dir, seq: Sequence) -> None:
    write_detections(det_path, seq)
    write_clouds(clouds_dir, seq.clouds)


def read_sequence(det_path, clouds_dir, frame_period: float = 0.5,
                  n_frames: int | None = None) -> Sequence:
    clouds = read_clouds(clouds_dir)
    return read_detections(det_path, clouds, frame_period=frame_period, n_frames=n_frames)


def write_track_rows(path, rows) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for row in rows:
            obj = {
                "frame": row.frame,
                "track_id": row.track_id,
                "box": [float(v) for v in row.box.to_array()],
                "score": row.score,
            }
            fh.write(json.dumps(obj) + "\n")


def read_track_rows(path) -> list[TrackRow]:
    rows = []
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            rows.append(
                TrackRow(
                    frame=int(obj["frame"]),
                    track_id=int(obj["track_id"]),
                    box=Box7.from_array(obj["box"]),
                    score=float(obj["score"]),
                )
            )
    return rows
