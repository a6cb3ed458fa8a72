"""Synthetic urban-scene generator with ground truth, plus detector noise.

Objects are car-like surfaces built from one of four height-profile
templates (van / sedan / pickup / hatch), each deformed per instance, moving
on straight, turning, or stopping trajectories around a sensor at the
origin. Point density on each object decays with range to mimic LIDAR
sparsity. Every emitted detection carries its ground-truth identity.

The evaluation noise model perturbs boxes uniformly within +/-center_pct of
the extents, +/-size_pct of scale, and +/-yaw_deg of orientation; the
detector-corruption model additionally drops and injects detections with
realistic score distributions.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from .core import Box7, Detection, FrameRecord, PointCloud, Sequence, TrackletLabel, wrap_angle

# height profiles: (x0_frac, x1_frac, height_frac) segments over x in [-1, 1]
TEMPLATE_PROFILES = {
    0: ((-1.0, 1.0, 1.0),),                                         # van
    1: ((-1.0, -0.5, 0.48), (-0.5, 0.3, 1.0), (0.3, 1.0, 0.48)),    # sedan
    2: ((-1.0, 0.2, 0.38), (0.2, 1.0, 1.0)),                        # pickup
    3: ((-1.0, 0.05, 1.0), (0.05, 0.5, 0.66), (0.5, 1.0, 0.34)),    # hatch
}
N_TEMPLATES = len(TEMPLATE_PROFILES)

_INSET = 0.995  # keep surface points strictly inside the box under float noise


@dataclass(frozen=True)
class NoiseModel:
    """Evaluation / detector noise rates. pct values are fractions of the
    corresponding box extent; yaw noise is in degrees."""

    center_pct: float = 0.10
    size_pct: float = 0.10
    yaw_deg: float = 5.0
    dropout_rate: float = 0.0
    spurious_rate: float = 0.0
    missed_rate: float = 0.0

    def __post_init__(self):
        if self.center_pct < 0 or self.size_pct < 0 or self.yaw_deg < 0:
            raise ValueError("noise magnitudes must be >= 0")
        for name in ("dropout_rate", "spurious_rate", "missed_rate"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must be in [0, 1], got {v}")


@dataclass(frozen=True)
class ObjectSpec:
    """One simulated object: shape template + deformation + trajectory."""

    template: int
    deform: tuple[float, ...]  # alternating boundary/height jitters
    extents: tuple[float, float, float]
    start: tuple[float, float]
    heading: float
    speed: float
    profile: str = "straight"  # straight | turn | stop
    turn_rate: float = 0.0
    stop_time: float = math.inf

    def pose_at(self, t: float) -> tuple[float, float, float]:
        """(x, y, yaw) at time t seconds."""
        x0, y0 = self.start
        if self.profile == "turn" and abs(self.turn_rate) > 1e-9:
            w = self.turn_rate
            th = self.heading + w * t
            x = x0 + (self.speed / w) * (math.sin(th) - math.sin(self.heading))
            y = y0 - (self.speed / w) * (math.cos(th) - math.cos(self.heading))
            return x, y, wrap_angle(th)
        if self.profile == "stop":
            ts = self.stop_time
            if t <= ts:
                dist = self.speed * (t - t * t / (2.0 * ts)) if ts > 0 else 0.0
            else:
                dist = self.speed * ts / 2.0
        else:
            dist = self.speed * t
        x = x0 + dist * math.cos(self.heading)
        y = y0 + dist * math.sin(self.heading)
        return x, y, self.heading


@dataclass(frozen=True)
class SceneConfig:
    n_objects: int = 5
    n_frames: int = 30
    frame_period: float = 0.5
    bounds: float = 45.0
    margin: float = 4.0
    speed_range: tuple[float, float] = (1.0, 6.5)
    crossings: int = 0
    distinct_templates: bool = False
    length_range: tuple[float, float] = (3.9, 4.7)
    width_range: tuple[float, float] = (1.72, 1.92)
    height_range: tuple[float, float] = (1.45, 1.75)
    base_points: int = 220
    min_points: int = 24
    ref_range: float = 18.0

    def __post_init__(self):
        if self.n_objects < 1 or self.n_frames < 2:
            raise ValueError("need at least 1 object and 2 frames")
        if 2 * self.crossings > self.n_objects:
            raise ValueError("more crossing objects than objects")


def template_faces(template: int, deform, extents) -> list:
    """Rectangular faces (origin, u, v) realizing a deformed height profile."""
    l, w, h = extents
    hl, hw, hh = _INSET * l / 2.0, _INSET * w / 2.0, _INSET * h / 2.0
    profile = TEMPLATE_PROFILES[template]
    deform = list(deform)
    # jitters: one per interior boundary, then one per segment height
    n_bounds = len(profile) - 1
    xs = [-1.0] + [
        min(0.92, max(-0.92, profile[k][1] + deform[k])) for k in range(n_bounds)
    ] + [1.0]
    heights = [
        min(1.0, max(0.2, profile[k][2] * (1.0 + deform[n_bounds + k])))
        for k in range(len(profile))
    ]

    def pt(xf, yf, zf):
        return np.array([xf * hl, yf * hw, (2.0 * zf - 1.0) * hh])

    faces = []

    def rect(o, u, v):
        area = float(np.linalg.norm(np.cross(u, v)))
        if area > 1e-12:
            faces.append((o, u, v, area))

    for k in range(len(profile)):
        x0, x1, z = xs[k], xs[k + 1], heights[k]
        # top
        rect(pt(x0, -1, z), pt(x1, -1, z) - pt(x0, -1, z), pt(x0, 1, z) - pt(x0, -1, z))
        # sides
        for yf in (-1, 1):
            rect(pt(x0, yf, 0), pt(x1, yf, 0) - pt(x0, yf, 0), pt(x0, yf, z) - pt(x0, yf, 0))
    # end caps
    rect(pt(-1, -1, 0), pt(-1, 1, 0) - pt(-1, -1, 0), pt(-1, -1, heights[0]) - pt(-1, -1, 0))
    rect(pt(1, -1, 0), pt(1, 1, 0) - pt(1, -1, 0), pt(1, -1, heights[-1]) - pt(1, -1, 0))
    # vertical steps between segments of different height
    for k in range(n_bounds):
        z0, z1 = sorted((heights[k], heights[k + 1]))
        if z1 - z0 > 1e-9:
            xb = xs[k + 1]
            rect(pt(xb, -1, z0), pt(xb, 1, z0) - pt(xb, -1, z0), pt(xb, -1, z1) - pt(xb, -1, z0))
    return faces


def sample_surface(faces, n: int, rng) -> np.ndarray:
    """n points uniform over a face set, area-weighted, in the box frame."""
    areas = np.array([f[3] for f in faces])
    probs = areas / areas.sum()
    idx = rng.choice(len(faces), size=n, p=probs)
    ab = rng.random((n, 2))
    pts = np.empty((n, 3))
    for i, (k, (a, b)) in enumerate(zip(idx, ab)):
        o, u, v, _ = faces[k]
        pts[i] = o + a * u + b * v
    return pts


def sample_deform(template: int, rng) -> tuple[float, ...]:
    n_bounds = len(TEMPLATE_PROFILES[template]) - 1
    n_heights = len(TEMPLATE_PROFILES[template])
    jit = np.concatenate([
        rng.uniform(-0.06, 0.06, size=n_bounds),
        rng.uniform(-0.05, 0.05, size=n_heights),
    ])
    return tuple(float(v) for v in jit)


def _in_bounds(spec: ObjectSpec, scene: SceneConfig) -> bool:
    limit = scene.bounds - scene.margin
    duration = (scene.n_frames - 1) * scene.frame_period
    for f in range(scene.n_frames):
        x, y, _ = spec.pose_at(f * scene.frame_period)
        if abs(x) > limit or abs(y) > limit:
            return False
    del duration
    return True


def _sample_objects(scene: SceneConfig, rng) -> list[ObjectSpec]:
    specs: list[ObjectSpec] = []
    duration = (scene.n_frames - 1) * scene.frame_period
    if scene.distinct_templates:
        templates = [int(t) for t in rng.permutation(N_TEMPLATES)]
        while len(templates) < scene.n_objects:
            templates.append(int(rng.integers(N_TEMPLATES)))
    else:
        templates = [int(rng.integers(N_TEMPLATES)) for _ in range(scene.n_objects)]

    def shape_args(i):
        return dict(
            template=templates[i],
            deform=sample_deform(templates[i], rng),
            extents=(
                float(rng.uniform(*scene.length_range)),
                float(rng.uniform(*scene.width_range)),
                float(rng.uniform(*scene.height_range)),
            ),
        )

    # crossing pairs: two straight movers timed to coincide mid-sequence
    for _pair in range(scene.crossings):
        for _try in range(200):
            px, py = rng.uniform(-0.35, 0.35, size=2) * scene.bounds
            t_cross = duration * rng.uniform(0.4, 0.6)
            base = rng.uniform(0.0, 2.0 * math.pi)
            dth = rng.uniform(0.28, 0.6) * (1 if rng.random() < 0.5 else -1)
            cand = []
            ok = True
            for ang in (base, base + dth):
                v = float(rng.uniform(3.0, 5.5))
                sx = px - v * t_cross * math.cos(ang)
                sy = py - v * t_cross * math.sin(ang)
                spec = ObjectSpec(
                    start=(sx, sy), heading=wrap_angle(ang), speed=v,
                    profile="straight", **shape_args(len(specs) + len(cand)),
                )
                if not _in_bounds(spec, scene):
                    ok = False
                    break
                cand.append(spec)
            if ok:
                specs.extend(cand)
                break
        else:
            raise RuntimeError("could not place crossing pair inside bounds")

    while len(specs) < scene.n_objects:
        for _try in range(200):
            profile = ["straight", "turn", "stop"][int(rng.integers(3))]
            spec = ObjectSpec(
                start=(
                    float(rng.uniform(-0.6, 0.6) * scene.bounds),
                    float(rng.uniform(-0.6, 0.6) * scene.bounds),
                ),
                heading=float(rng.uniform(-math.pi, math.pi)),
                speed=float(rng.uniform(*scene.speed_range)),
                profile=profile,
                turn_rate=float(rng.uniform(0.06, 0.22) * (1 if rng.random() < 0.5 else -1))
                if profile == "turn" else 0.0,
                stop_time=duration * 0.6 if profile == "stop" else math.inf,
                **shape_args(len(specs)),
            )
            if _in_bounds(spec, scene):
                specs.append(spec)
                break
        else:
            raise RuntimeError("could not place object inside bounds")
    return specs


def _points_for_range(scene: SceneConfig, rng_dist: float) -> int:
    scale = min(1.0, (scene.ref_range / max(rng_dist, 1e-6)) ** 2)
    return max(scene.min_points, int(round(scene.base_points * scale)))


def generate_sequence(scene: SceneConfig, seed) -> tuple[Sequence, list[TrackletLabel]]:
    """Simulate a scene; returns the ground-truth Sequence and its tracklets.

    Every detection has score 1.0 and a gt_id; clouds are float32 world-frame
    surface samples. Deterministic for a given seed.
    """
    rng = np.random.default_rng(seed)
    specs = _sample_objects(scene, rng)
    faces_per_obj = [template_faces(s.template, s.deform, s.extents) for s in specs]

    frames = []
    clouds: dict[str, PointCloud] = {}
    members: list[list[tuple[int, int]]] = [[] for _ in specs]
    for f in range(scene.n_frames):
        t = f * scene.frame_period
        dets = []
        for i, spec in enumerate(specs):
            x, y, yaw = spec.pose_at(t)
            l, w, h = spec.extents
            n_pts = _points_for_range(scene, math.hypot(x, y))
            local = sample_surface(faces_per_obj[i], n_pts, rng)
            c, s = math.cos(yaw), math.sin(yaw)
            rot_t = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
            world = local @ rot_t + np.array([x, y, h / 2.0])
            ref = f"f{f:03d}o{i:02d}"
            clouds[ref] = PointCloud(world)
            dets.append(Detection(
                frame=f,
                box=Box7(x=x, y=y, z=h / 2.0, yaw=yaw, l=l, w=w, h=h),
                score=1.0,
                cloud_ref=ref,
                gt_id=i,
            ))
            members[i].append((f, i))
        frames.append(FrameRecord(index=f, detections=tuple(dets)))
    seq = Sequence(frames=tuple(frames), clouds=clouds, frame_period=scene.frame_period)
    labels = [
        TrackletLabel(track_id=i, members=tuple(members[i])) for i in range(len(specs))
    ]
    return seq, labels


def perturb_boxes(seq: Sequence, noise: NoiseModel, seed) -> Sequence:
    """Uniform box noise: centers by +/-pct of extents, sizes by +/-pct,
    yaw by +/-yaw_deg. Clouds, scores and gt_ids are untouched."""
    rng = np.random.default_rng(seed)
    yaw_rad = math.radians(noise.yaw_deg)
    frames = []
    for rec in seq.frames:
        dets = []
        for det in rec.detections:
            b = det.box
            dc = rng.uniform(-noise.center_pct, noise.center_pct, size=3)
            ds = rng.uniform(-noise.size_pct, noise.size_pct, size=3)
            dyaw = float(rng.uniform(-yaw_rad, yaw_rad))
            box = Box7(
                x=b.x + float(dc[0]) * b.l,
                y=b.y + float(dc[1]) * b.w,
                z=b.z + float(dc[2]) * b.h,
                yaw=b.yaw + dyaw,
                l=b.l * (1.0 + float(ds[0])),
                w=b.w * (1.0 + float(ds[1])),
                h=b.h * (1.0 + float(ds[2])),
            )
            dets.append(replace(det, box=box))
        frames.append(FrameRecord(index=rec.index, detections=tuple(dets)))
    return Sequence(frames=tuple(frames), clouds=seq.clouds, frame_period=seq.frame_period)


def corrupt_detections(seq: Sequence, noise: NoiseModel, seed) -> Sequence:
    """Model pre-trained-detector output: perturbed boxes, missed detections,
    spurious detections with sparse clouds, and realistic scores.

    Real detections draw scores from Beta(8, 2), spurious from Beta(2, 8).
    Spurious counts per frame are Binomial(slots, spurious_rate) over the
    frame's pre-drop detection count. With dropout_rate > 0, real clouds are
    re-emitted under a new "<ref>.drop" reference with points removed; the
    original cloud entries are never modified.
    """
    perturbed = perturb_boxes(seq, noise, (seed, 0))
    rng = np.random.default_rng((seed, 1))
    centers = [
        (d.box.x, d.box.y) for rec in seq.frames for d in rec.detections
    ]
    span = max((max(abs(x), abs(y)) for x, y in centers), default=20.0) + 5.0

    clouds = dict(seq.clouds)
    frames = []
    spur_serial = 0
    for rec in perturbed.frames:
        dets = []
        for det in rec.detections:
            if rng.random() < noise.missed_rate:
                continue
            score = float(rng.beta(8.0, 2.0))
            out = replace(det, score=score)
            if noise.dropout_rate > 0:
                pts = seq.clouds[det.cloud_ref].points
                keep = rng.random(pts.shape[0]) >= noise.dropout_rate
                ref = f"{det.cloud_ref}.drop"
                clouds[ref] = PointCloud(pts[keep])
                out = replace(out, cloud_ref=ref)
            dets.append(out)
        n_spur = int(rng.binomial(len(rec.detections), noise.spurious_rate)) \
            if rec.detections else 0
        for _ in range(n_spur):
            l = float(rng.uniform(2.5, 5.5))
            w = float(rng.uniform(1.4, 2.2))
            h = float(rng.uniform(1.2, 2.0))
            box = Box7(
                x=float(rng.uniform(-span, span)),
                y=float(rng.uniform(-span, span)),
                z=h / 2.0 + float(rng.uniform(-0.2, 0.2)),
                yaw=float(rng.uniform(-math.pi, math.pi)),
                l=l, w=w, h=h,
            )
            n_pts = int(rng.integers(4, 16))
            local = rng.uniform(-0.5, 0.5, size=(n_pts, 3)) * np.array([l, w, h]) * 0.9
            c, s = math.cos(box.yaw), math.sin(box.yaw)
            rot_t = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
            world = local @ rot_t + box.center
            ref = f"f{rec.index:03d}spur{spur_serial:03d}"
            spur_serial += 1
            clouds[ref] = PointCloud(world)
            dets.append(Detection(
                frame=rec.index, box=box, score=float(rng.beta(2.0, 8.0)),
                cloud_ref=ref, gt_id=None,
            ))
        frames.append(FrameRecord(index=rec.index, detections=tuple(dets)))
    return Sequence(frames=tuple(frames), clouds=clouds, frame_period=seq.frame_period)
