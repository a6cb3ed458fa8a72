"""Multi-object tracking with fused motion / score / appearance association.

Association scores fuse six features (Mahalanobis distance m, embedding
cosine a, detection score d, and their clamped logs) through a logistic
model fit on a small labeled set. Three modes mirror the ablation rows:
"motion" (raw Mahalanobis + gate), "motion+score", and
"motion+score+appearance". All modes share the association kernel in
assoc.run_tracker, so motion mode reproduces the pseudo-label tracker's
decisions exactly.
"""

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import embed, kalman
from .assoc import AssocConfig, mahalanobis_matrix, run_tracker
from .core import Detection, Sequence, TrackRow

log = logging.getLogger(__name__)

LOG_CLAMP = 1e-8

MODES = ("motion", "motion+score", "motion+score+appearance")


def _clamped_log(v: float) -> float:
    return math.log(max(v, LOG_CLAMP))


@dataclass(frozen=True)
class FeatureVector:
    """Association features for one (predicted track, detection) pair.

    The cosine a is mapped through (a+1)/2 before its log so the log stays
    defined on [-1, 1]; m and d clamp at 1e-8.
    """

    m: float
    a: float
    d: float
    log_m: float
    log_a: float
    log_d: float

    @classmethod
    def build(cls, m: float, a: float, d: float) -> "FeatureVector":
        if m < 0 or not (-1.0 <= a <= 1.0) or not (0.0 <= d <= 1.0):
            raise ValueError(f"bad feature values m={m} a={a} d={d}")
        return cls(
            m=m, a=a, d=d,
            log_m=_clamped_log(m),
            log_a=_clamped_log((a + 1.0) / 2.0),
            log_d=_clamped_log(d),
        )

    def array(self) -> np.ndarray:
        return np.array([self.m, self.a, self.d, self.log_m, self.log_a, self.log_d])


FEATURE_NAMES = ("m", "a", "d", "log_m", "log_a", "log_d")


def association_features(pred: kalman.TrackState, det: Detection,
                         kcfg: kalman.NoiseConfig, net: embed.EmbedNet | None = None,
                         track_emb=None, det_emb=None) -> FeatureVector:
    """Features for pairing a predicted track with a detection. Without a
    network the appearance cosine is 0 (log_a = log 0.5)."""
    m = kalman.mahalanobis(pred, det.box, kcfg)
    a = embed.cosine(track_emb, det_emb) if net is not None else 0.0
    return FeatureVector.build(m=m, a=a, d=det.score)


@dataclass(frozen=True)
class LogisticModel:
    coef: np.ndarray  # (6,) over FEATURE_NAMES
    intercept: float

    def __post_init__(self):
        c = np.asarray(self.coef, dtype=np.float64).reshape(6).copy()
        if not np.isfinite(c).all() or not math.isfinite(self.intercept):
            raise ValueError("logistic parameters must be finite")
        c.setflags(write=False)
        object.__setattr__(self, "coef", c)

    def score(self, fv: FeatureVector) -> float:
        z = float(self.coef @ fv.array()) + self.intercept
        return 1.0 / (1.0 + math.exp(-z))

    def score_array(self, feats: np.ndarray) -> np.ndarray:
        z = feats @ self.coef + self.intercept
        return 1.0 / (1.0 + np.exp(-z))


def save_logistic(path, model: LogisticModel) -> None:
    obj = {"coef": [float(v) for v in model.coef], "intercept": model.intercept}
    Path(path).write_text(json.dumps(obj) + "\n", encoding="utf-8")


def load_logistic(path) -> LogisticModel:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    return LogisticModel(coef=np.array(obj["coef"]), intercept=float(obj["intercept"]))


def fit_logistic(examples) -> LogisticModel:
    """Deterministic L2-penalized logistic regression.

    Full-batch gradient ascent on standardized features: 5000 iterations,
    step 0.1, lambda 1e-4; the standardization is folded back so the model
    applies to raw features. Raises ValueError on single-class input.
    """
    if not examples:
        raise ValueError("no training examples")
    x = np.stack([fv.array() for fv, _ in examples])
    y = np.array([float(lbl) for _, lbl in examples])
    if y.min() == y.max():
        raise ValueError("need both positive and negative examples")
    mu = x.mean(axis=0)
    sigma = x.std(axis=0)
    sigma = np.where(sigma < 1e-12, 1.0, sigma)
    z = (x - mu) / sigma

    lam = 1e-4
    step = 0.1
    w = np.zeros(x.shape[1])
    b = 0.0
    n = len(y)
    for _ in range(5000):
        p = 1.0 / (1.0 + np.exp(-(z @ w + b)))
        gw = z.T @ (y - p) / n - lam * w
        gb = float((y - p).mean())
        w = w + step * gw
        b = b + step * gb
    coef = w / sigma
    intercept = b - float((w * mu / sigma).sum())
    return LogisticModel(coef=coef, intercept=intercept)


@dataclass(frozen=True)
class MotConfig:
    mode: str = "motion"
    score_gate: float = 0.5  # fused modes: require A_ij >= score_gate
    assoc: AssocConfig = AssocConfig()
    points_per_crop: int = embed.DEFAULT_POINTS

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not (0.0 < self.score_gate < 1.0):
            raise ValueError(f"score_gate must be in (0, 1), got {self.score_gate}")


def track_sequence(seq: Sequence, kcfg: kalman.NoiseConfig, mcfg: MotConfig,
                   net: embed.EmbedNet | None = None,
                   model: LogisticModel | None = None) -> list[TrackRow]:
    """Track a sequence and emit one row per (frame, matched track).

    motion mode greedily associates on raw Mahalanobis under the assoc gate;
    fused modes associate on cost 1 - A_ij with pairs admitted when
    A_ij >= score_gate. Appearance mode refreshes each track's embedding to
    its matched detection's embedding.
    """
    use_appearance = mcfg.mode == "motion+score+appearance"
    if use_appearance and net is None:
        raise ValueError("appearance mode requires an embedding checkpoint")
    if mcfg.mode != "motion" and model is None:
        raise ValueError(f"mode {mcfg.mode!r} requires a fitted logistic model")
    if model is not None and model.coef[0] >= 0:
        log.warning(
            "fitted Mahalanobis coefficient is non-negative (%.4f); association "
            "scores will not penalize distance — consider refitting", model.coef[0],
        )

    track_embs: dict[int, np.ndarray] = {}
    frame_embs: list[np.ndarray] = []
    frame_dets: list[Detection] = []

    def det_embedding(det: Detection) -> np.ndarray:
        crop = embed.canonicalize(
            seq.cloud_of(det), det.box, mcfg.points_per_crop,
            seed=embed.canon_seed(det.cloud_ref), source=det.cloud_ref,
        )
        return embed.forward(net, crop)

    def cost_fn(states, rec):
        nonlocal frame_embs, frame_dets
        frame_dets = list(rec.detections)
        if use_appearance:
            frame_embs = [det_embedding(d) for d in rec.detections]
        m = mahalanobis_matrix(states, rec.detections, kcfg, mcfg.assoc.distance)
        if mcfg.mode == "motion":
            return m, mcfg.assoc.gate
        cost = np.ones_like(m)
        for i, s in enumerate(states):
            for j, det in enumerate(rec.detections):
                a = embed.cosine(track_embs[s.track_id], frame_embs[j]) if use_appearance else 0.0
                fv = FeatureVector.build(m=float(m[i, j]), a=a, d=det.score)
                cost[i, j] = 1.0 - model.score(fv)
        return cost, 1.0 - mcfg.score_gate

    rows: list[TrackRow] = []

    def on_match(track_id, det_idx, state):
        if use_appearance:
            track_embs[track_id] = frame_embs[det_idx]
        det = frame_dets[det_idx]
        rows.append(TrackRow(
            frame=det.frame, track_id=track_id, box=state.box(), score=det.score,
        ))

    run_tracker(
        seq, kcfg, mcfg.assoc,
        cost_fn=cost_fn, on_match=on_match, on_birth=on_match,
        collect_confidence=False,
    )
    rows.sort(key=lambda r: (r.frame, r.track_id))
    return rows


def harvest_features(seq: Sequence, kcfg: kalman.NoiseConfig, acfg: AssocConfig,
                     net: embed.EmbedNet | None = None,
                     points_per_crop: int = embed.DEFAULT_POINTS):
    """Collect (FeatureVector, label) pairs for fitting the logistic model.

    Runs the motion-only tracker; at every frame each (predicted track,
    detection) pair is labeled 1 iff the track's last matched detection and
    the candidate share a non-null gt_id. Requires gt_ids on the sequence.
    """
    examples = []
    track_gt: dict[int, int | None] = {}
    track_emb: dict[int, np.ndarray] = {}
    frame_dets: list[Detection] = []
    frame_embs: list[np.ndarray] = []

    def det_embedding(det: Detection) -> np.ndarray:
        crop = embed.canonicalize(
            seq.cloud_of(det), det.box, points_per_crop,
            seed=embed.canon_seed(det.cloud_ref), source=det.cloud_ref,
        )
        return embed.forward(net, crop)

    def cost_fn(states, rec):
        nonlocal frame_dets, frame_embs
        frame_dets = list(rec.detections)
        if net is not None:
            frame_embs = [det_embedding(d) for d in rec.detections]
        m = mahalanobis_matrix(states, rec.detections, kcfg, acfg.distance)
        for i, s in enumerate(states):
            for j, det in enumerate(rec.detections):
                a = embed.cosine(track_emb[s.track_id], frame_embs[j]) if net is not None else 0.0
                fv = FeatureVector.build(m=float(m[i, j]), a=a, d=det.score)
                tgt = track_gt.get(s.track_id)
                label = int(tgt is not None and det.gt_id is not None and tgt == det.gt_id)
                examples.append((fv, label))
        return m, acfg.gate

    def on_match(track_id, det_idx, _state):
        track_gt[track_id] = frame_dets[det_idx].gt_id
        if net is not None:
            track_emb[track_id] = frame_embs[det_idx]

    run_tracker(seq, kcfg, acfg, cost_fn=cost_fn, on_match=on_match,
                on_birth=on_match, collect_confidence=False)
    return examples
