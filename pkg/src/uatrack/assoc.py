"""Greedy data association, association confidence, and pseudo-track building.

The association kernel is shared: `run_tracker` drives predict -> greedy
association -> update over a sequence, and both the pseudo-label path
(`build_pseudo_tracks`, pure Mahalanobis) and the fused multi-object tracker
(mot.track_sequence, which injects its own cost function) use it, so their
frame-by-frame decisions coincide whenever their cost matrices do.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kalman
from .core import Sequence, TrackletLabel


@dataclass(frozen=True)
class AssocConfig:
    """Gating and confidence parameters for greedy association."""

    gate: float = 13.0
    max_age: int = 3
    eps: float = 1e-4
    distance: str = "sqrt"  # "sqrt" | "squared" Mahalanobis variant

    def __post_init__(self):
        if self.gate <= 0:
            raise ValueError(f"gate must be > 0, got {self.gate}")
        if self.max_age < 1:
            raise ValueError(f"max_age must be >= 1, got {self.max_age}")
        if self.eps <= 0:
            raise ValueError(f"eps must be > 0, got {self.eps}")
        if self.distance not in ("sqrt", "squared"):
            raise ValueError(f"distance must be 'sqrt' or 'squared', got {self.distance!r}")


@dataclass(frozen=True)
class AssocPair:
    track: int
    det: int
    distance: float
    confidence: float | None = None


@dataclass(frozen=True)
class AssociationResult:
    pairs: tuple[AssocPair, ...]
    unmatched_tracks: tuple[int, ...]
    unmatched_detections: tuple[int, ...]


def _check_matrix(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"distance matrix must be 2-D, got shape {m.shape}")
    if m.size and (not np.isfinite(m).all() or (m < 0).any()):
        raise ValueError("distance matrix entries must be finite and >= 0")
    return m


def greedy_associate(m, gate: float) -> AssociationResult:
    """Greedily pair the globally smallest distances under a gate.

    Repeatedly selects the smallest remaining entry; stops once it exceeds
    the gate. Ties break toward the smallest row index, then column index.
    Pairs are reported in selection order.
    """
    m = _check_matrix(m)
    if gate <= 0:
        raise ValueError(f"gate must be > 0, got {gate}")
    rows, cols = m.shape
    pairs: list[AssocPair] = []
    if rows and cols:
        work = m.copy()
        for _ in range(min(rows, cols)):
            flat = int(np.argmin(work))  # first minimum in row-major order
            i, j = divmod(flat, cols)
            val = work[i, j]
            if val > gate:
                break
            pairs.append(AssocPair(track=i, det=j, distance=float(m[i, j])))
            work[i, :] = np.inf
            work[:, j] = np.inf
    used_rows = {p.track for p in pairs}
    used_cols = {p.det for p in pairs}
    return AssociationResult(
        pairs=tuple(pairs),
        unmatched_tracks=tuple(i for i in range(rows) if i not in used_rows),
        unmatched_detections=tuple(j for j in range(cols) if j not in used_cols),
    )


def association_confidence(m, i: int, j: int, eps: float = 1e-4) -> float:
    """Confidence that pair (i, j) is the right association in matrix m.

    Compares m[i, j] against its best row and column competitors:

        AC = 1 - exp(-min(min_{k!=j} m[i,k], min_{k!=i} m[k,j]) / (m[i,j]+eps))

    A missing competitor set (single row or column) contributes +inf and
    drops out of the min; with neither competitor the association is
    unambiguous and AC = 1.
    """
    m = _check_matrix(m)
    rows, cols = m.shape
    if not (0 <= i < rows and 0 <= j < cols):
        raise ValueError(f"indices ({i}, {j}) out of bounds for {rows}x{cols} matrix")
    if eps <= 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    denom = m[i, j] + eps
    ratios = []
    if cols > 1:
        ratios.append(np.delete(m[i, :], j).min() / denom)
    if rows > 1:
        ratios.append(np.delete(m[:, j], i).min() / denom)
    if not ratios:
        return 1.0
    return float(1.0 - math.exp(-min(ratios)))


def cumulative_confidence(per_step) -> float:
    """Product of per-link association confidences; empty chain -> 1."""
    out = 1.0
    for v in per_step:
        v = float(v)
        if not (0.0 <= v <= 1.0):
            raise ValueError(f"association confidence {v} outside [0, 1]")
        out *= v
    return out


# ---------------------------------------------------------------------------
# tracking loop


@dataclass
class _Live:
    state: kalman.TrackState
    members: list
    link_conf: list


@dataclass(frozen=True)
class TrackerRun:
    """Everything the shared loop observed: tracklets, link confidences,
    per-frame association decisions, and final filter states."""

    labels: tuple[TrackletLabel, ...]
    link_conf: dict[int, list[float]]
    decisions: tuple[tuple[int, tuple[tuple[int, int], ...]], ...]
    final_states: dict[int, kalman.TrackState]


def run_tracker(
    seq: Sequence,
    kcfg: kalman.NoiseConfig,
    acfg: AssocConfig,
    cost_fn=None,
    on_match=None,
    on_birth=None,
    collect_confidence: bool = True,
) -> TrackerRun:
    """Drive predict -> greedy associate -> update across a sequence.

    cost_fn(states, frame_record) may return a (matrix, gate) pair to
    replace the default Mahalanobis cost; on_match(track_id, det_index,
    state) and on_birth(track_id, det_index, state) observe association
    decisions and the resulting posterior state (used by the appearance
    tracker to maintain per-track embeddings and by the MOT output path).
    """
    live: list[_Live] = []
    done: list[_Live] = []
    order: dict[int, _Live] = {}
    decisions = []
    next_id = 0
    prev_index = None

    for rec in seq.frames:
        if prev_index is not None and live:
            dt = (rec.index - prev_index) * seq.frame_period
            for tr in live:
                tr.state = kalman.predict(tr.state, dt, kcfg)
        prev_index = rec.index

        if cost_fn is not None:
            cost, gate = cost_fn([tr.state for tr in live], rec)
        else:
            cost = mahalanobis_matrix([tr.state for tr in live], rec.detections, kcfg, acfg.distance)
            gate = acfg.gate
        res = greedy_associate(cost, gate)

        frame_pairs = []
        for pair in res.pairs:
            tr = live[pair.track]
            if collect_confidence:
                tr.link_conf.append(association_confidence(cost, pair.track, pair.det, acfg.eps))
            det = rec.detections[pair.det]
            tr.state = kalman.update(tr.state, det.box, kcfg)
            tr.members.append((rec.index, pair.det))
            frame_pairs.append((tr.state.track_id, pair.det))
            if on_match is not None:
                on_match(tr.state.track_id, pair.det, tr.state)

        survivors = []
        matched = {p.track for p in res.pairs}
        for idx, tr in enumerate(live):
            if idx in matched:
                survivors.append(tr)
                continue
            tr.state = kalman.mark_missed(tr.state)
            if tr.state.misses < acfg.max_age:
                survivors.append(tr)
            else:
                done.append(tr)
        for j in res.unmatched_detections:
            tr = _Live(
                state=kalman.init_track(rec.detections[j], kcfg, next_id),
                members=[(rec.index, j)],
                link_conf=[],
            )
            order[next_id] = tr
            survivors.append(tr)
            frame_pairs.append((next_id, j))
            if on_birth is not None:
                on_birth(next_id, j, tr.state)
            next_id += 1
        live = survivors
        decisions.append((rec.index, tuple(frame_pairs)))

    labels = tuple(
        TrackletLabel(track_id=tid, members=tuple(order[tid].members))
        for tid in sorted(order)
    )
    link_conf = {tid: list(order[tid].link_conf) for tid in sorted(order)}
    final_states = {tr.state.track_id: tr.state for tr in live}
    return TrackerRun(
        labels=labels,
        link_conf=link_conf,
        decisions=tuple(decisions),
        final_states=final_states,
    )


def mahalanobis_matrix(states, detections, kcfg: kalman.NoiseConfig,
                       distance: str = "sqrt") -> np.ndarray:
    """Track x detection Mahalanobis distances (optionally squared)."""
    m = np.zeros((len(states), len(detections)))
    for i, s in enumerate(states):
        for j, det in enumerate(detections):
            d = kalman.mahalanobis(s, det.box, kcfg)
            m[i, j] = d * d if distance == "squared" else d
    return m


def build_pseudo_tracks(
    seq: Sequence,
    kcfg: kalman.NoiseConfig,
    acfg: AssocConfig,
) -> tuple[list[TrackletLabel], dict[int, list[float]]]:
    """Self-supervised pseudo-ground-truth tracklets with per-link confidences.

    Runs the motion-only tracker over the sequence; every surviving link
    between consecutive members of a track carries the association
    confidence of the greedy decision that created it.
    """
    if not seq.frames:
        raise ValueError("sequence has no frames")
    run = run_tracker(seq, kcfg, acfg, collect_confidence=True)
    return list(run.labels), run.link_conf


# ---------------------------------------------------------------------------
# pseudo-track file format: one JSON object per line,
# {"track_id": int, "members": [[frame, det_index], ...], "link_conf": [...]}


def write_pseudo_tracks(path, labels, link_conf: dict[int, list[float]],
                        extra: dict[int, dict] | None = None) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for lab in labels:
            obj = {
                "track_id": lab.track_id,
                "members": [[f, i] for f, i in lab.members],
                "link_conf": [float(v) for v in link_conf.get(lab.track_id, [])],
            }
            if extra and lab.track_id in extra:
                obj.update(extra[lab.track_id])
            fh.write(json.dumps(obj) + "\n")


def read_pseudo_tracks(path) -> tuple[list[TrackletLabel], dict[int, list[float]]]:
    labels = []
    conf: dict[int, list[float]] = {}
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            tid = int(obj["track_id"])
            members = tuple((int(f), int(i)) for f, i in obj["members"])
            labels.append(TrackletLabel(track_id=tid, members=members))
            conf[tid] = [float(v) for v in obj["link_conf"]]
            if len(conf[tid]) != max(len(members) - 1, 0):
                raise ValueError(
                    f"track {tid}: {len(conf[tid])} link confidences for {len(members)} members"
                )
    return labels, conf
