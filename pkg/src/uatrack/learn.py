"""Self-supervised triplet trainer over pseudo-tracks.

One training step: sample a batch of (anchor, positive) pairs from the
pseudo-tracks, mine the hardest same-frame negative for each anchor under
the current network, weight each triplet's hinge loss by its cumulative
association confidence, sum, and take one Adam step on exact gradients.

The trainer is deterministic given (config, seed): sampling uses one
explicit generator, canonical crops are seeded from cloud refs, and
gradient reduction order is fixed.
"""

import math
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from . import embed
from .assoc import cumulative_confidence
from .core import Sequence, TrackletLabel
from .kalman import NumericalError


class TrainingDataExhausted(RuntimeError):
    """No pseudo-track provides a usable anchor/positive pair."""


@dataclass(frozen=True)
class TrainerConfig:
    margin: float = 0.2
    learning_rate: float = 2e-5
    batch_size: int = 64
    epochs: int = 100
    max_gap: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    points_per_crop: int = embed.DEFAULT_POINTS
    use_uncertainty: bool = True
    hard_negative_mining: bool = True

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError(f"margin must be > 0, got {self.margin}")
        if self.learning_rate < 0:
            raise ValueError(f"learning rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1 or self.epochs < 0 or self.max_gap < 1:
            raise ValueError("batch_size >= 1, epochs >= 0, max_gap >= 1 required")
        if self.points_per_crop < 1:
            raise ValueError("points_per_crop must be >= 1")


class DetRef(NamedTuple):
    """A detection addressed by (sequence index, frame index, det index)."""

    seq: int
    frame: int
    det: int


@dataclass(frozen=True)
class Triplet:
    """Anchor/positive from one pseudo-track plus a same-frame negative.

    negative is None until mining completes; weight is the cumulative
    association confidence of the anchor->positive chain.
    """

    anchor: DetRef
    positive: DetRef
    negative: DetRef | None
    weight: float

    def __post_init__(self):
        if not (0.0 <= self.weight <= 1.0):
            raise ValueError(f"triplet weight {self.weight} outside [0, 1]")
        if self.negative is not None:
            if self.negative.frame != self.anchor.frame or self.negative.seq != self.anchor.seq:
                raise ValueError("negative must come from the anchor's frame")
            if self.negative.det == self.anchor.det:
                raise ValueError("negative must differ from the anchor")


def triplet_loss(cos_pos: float, cos_neg: float, margin: float) -> float:
    """Hinge on cosine similarities: max(cos_neg - cos_pos + margin, 0)."""
    return max(cos_neg - cos_pos + margin, 0.0)


def weighted_triplet_loss(t: Triplet, cos_pos: float, cos_neg: float,
                          margin: float) -> float:
    """Triplet loss scaled by the triplet's association confidence weight."""
    return triplet_loss(cos_pos, cos_neg, margin) * t.weight


def mine_hard_negative(anchor_emb, same_frame):
    """Pick the candidate with highest cosine to the anchor.

    same_frame is a list of (det_index, embedding) pairs excluding the
    anchor and its own track; returns the winning det_index or None when
    the list is empty (caller skips the triplet). Ties go to the lowest
    det_index.
    """
    best_idx = None
    best_cos = -math.inf
    for det_idx, emb_vec in sorted(same_frame, key=lambda p: p[0]):
        c = embed.cosine(anchor_emb, emb_vec)
        if c > best_cos:
            best_cos = c
            best_idx = det_idx
    return best_idx


# ---------------------------------------------------------------------------
# triplet sampling


@dataclass(frozen=True)
class TripletSource:
    """Indexed view over sequences + pseudo-tracks used for sampling.

    tracks: per entry (seq index, TrackletLabel, link confidences)
    frame_counts[(seq, frame)]: detections present in that frame
    track_of[(seq, frame, det)]: pseudo-track id owning that detection
    """

    seqs: tuple[Sequence, ...]
    tracks: tuple[tuple[int, TrackletLabel, tuple[float, ...]], ...]
    frame_map: dict
    track_of: dict
    total_members: int


def build_triplet_source(seqs, tracks_per_seq) -> TripletSource:
    """tracks_per_seq: per sequence, (list of TrackletLabel, {id: link_conf})."""
    entries = []
    frame_map: dict = {}
    track_of: dict = {}
    total = 0
    for si, seq in enumerate(seqs):
        labels, conf = tracks_per_seq[si]
        for rec in seq.frames:
            frame_map[(si, rec.index)] = rec
        for lab in labels:
            link = tuple(conf.get(lab.track_id, ()))
            if len(link) != max(len(lab.members) - 1, 0):
                raise ValueError(
                    f"track {lab.track_id}: link confidences do not match members"
                )
            entries.append((si, lab, link))
            total += len(lab.members)
            for f, d in lab.members:
                track_of[(si, f, d)] = lab.track_id
    return TripletSource(
        seqs=tuple(seqs),
        tracks=tuple(entries),
        frame_map=frame_map,
        track_of=track_of,
        total_members=total,
    )


def sample_triplet(src: TripletSource, cfg: TrainerConfig, rng) -> Triplet | None:
    """Draw one anchor/positive pair; None means skip and resample.

    Uniform over tracks with >= 2 members, then uniform over ordered member
    pairs whose frame gap is within max_gap. The pair's weight is the
    product of the link confidences it spans. Skips when the anchor frame
    offers no other detection to serve as a negative.
    """
    eligible = [e for e in src.tracks if len(e[1].members) >= 2]
    if not eligible:
        raise TrainingDataExhausted("no pseudo-track has two or more members")
    si, lab, link = eligible[rng.integers(len(eligible))]
    members = lab.members
    pairs = [
        (i, j)
        for i in range(len(members))
        for j in range(i + 1, len(members))
        if 1 <= members[j][0] - members[i][0] <= cfg.max_gap
    ]
    if not pairs:
        return None
    i, j = pairs[rng.integers(len(pairs))]
    anchor_rec = src.frame_map.get((si, members[i][0]))
    if anchor_rec is None or len(anchor_rec.detections) < 2:
        return None
    weight = cumulative_confidence(link[i:j])
    return Triplet(
        anchor=DetRef(si, members[i][0], members[i][1]),
        positive=DetRef(si, members[j][0], members[j][1]),
        negative=None,
        weight=weight,
    )


def negative_candidates(src: TripletSource, anchor: DetRef) -> list[int]:
    """Detection indices in the anchor's frame usable as negatives: everything
    except the anchor itself and members of the anchor's own pseudo-track."""
    rec = src.frame_map[(anchor.seq, anchor.frame)]
    own = src.track_of.get((anchor.seq, anchor.frame, anchor.det))
    out = []
    for d in range(len(rec.detections)):
        if d == anchor.det:
            continue
        cand_track = src.track_of.get((anchor.seq, anchor.frame, d))
        if own is not None and cand_track == own:
            continue
        out.append(d)
    return out


# ---------------------------------------------------------------------------
# Adam


@dataclass(frozen=True)
class AdamState:
    m: tuple[np.ndarray, ...]
    v: tuple[np.ndarray, ...]
    step: int = 0

    @classmethod
    def init(cls, params) -> "AdamState":
        return cls(
            m=tuple(np.zeros_like(p) for p in params),
            v=tuple(np.zeros_like(p) for p in params),
            step=0,
        )


def adam_step(params, grads, state: AdamState, cfg: TrainerConfig):
    """Bias-corrected Adam update; returns (new params, new state)."""
    t = state.step + 1
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * (g * g)
        mhat = m / (1.0 - cfg.beta1 ** t)
        vhat = v / (1.0 - cfg.beta2 ** t)
        new_params.append(p - cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.adam_eps))
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(m=tuple(new_m), v=tuple(new_v), step=t)


# ---------------------------------------------------------------------------
# training


def _cosine_and_grads(a, b):
    """cos(a, b) with its gradients w.r.t. a and b; zero grads when degenerate."""
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na < embed.NORM_EPS or nb < embed.NORM_EPS:
        return 0.0, np.zeros_like(a), np.zeros_like(b)
    c = float(np.dot(a, b) / (na * nb))
    da = b / (na * nb) - c * a / (na * na)
    db = a / (na * nb) - c * b / (nb * nb)
    return c, da, db


@dataclass
class StepRecord:
    step: int
    mean_loss: float
    mean_weight: float


def batch_loss_and_grads(net: embed.EmbedNet, crops, triplets, margin: float,
                         use_uncertainty: bool = True, emb=None):
    """Summed weighted triplet loss and exact parameter gradients for a
    batch of completed triplets (negatives already chosen).

    crops maps a DetRef to its CanonicalCloud. Hinge-inactive or zero-weight
    triplets contribute nothing to the gradient; the mining arg-max is
    treated as frozen. An already-memoized embedding function for the same
    net may be passed as emb. Returns (loss_sum, grads, weight_sum).
    """
    params = net.params()
    grads = [np.zeros_like(p) for p in params]
    if emb is None:
        emb_cache: dict = {}

        def emb(ref):
            got = emb_cache.get(ref)
            if got is None:
                got = embed.forward(net, crops(ref))
                emb_cache[ref] = got
            return got

    loss_sum = 0.0
    weight_sum = 0.0
    for t in triplets:
        if t.negative is None:
            raise ValueError("triplet has no mined negative")
        e_a = emb(t.anchor)
        e_p = emb(t.positive)
        e_n = emb(t.negative)
        w = t.weight if use_uncertainty else 1.0
        cp, dp_a, dp_p = _cosine_and_grads(e_a, e_p)
        cn, dn_a, dn_n = _cosine_and_grads(e_a, e_n)
        raw = triplet_loss(cp, cn, margin)
        loss_sum += raw * w
        weight_sum += w
        if raw > 0.0 and w > 0.0:
            for ref, up in (
                (t.anchor, w * (dn_a - dp_a)),
                (t.positive, -w * dp_p),
                (t.negative, w * dn_n),
            ):
                for slot, g in enumerate(embed.backward(net, crops(ref), up)):
                    grads[slot] += g
    return loss_sum, grads, weight_sum


def train(seqs, tracks_per_seq, net: embed.EmbedNet, cfg: TrainerConfig,
          debug_asserts: bool = False):
    """Run the full triplet-training loop; returns (trained net, history).

    One epoch is ceil(total pseudo-track members / batch size) steps. The
    batch loss is the sum of weighted triplet losses; history records its
    mean per step alongside the mean triplet weight.
    """
    src = build_triplet_source(seqs, tracks_per_seq)
    # fail fast if nothing is sampleable at all
    if not any(len(e[1].members) >= 2 for e in src.tracks):
        raise TrainingDataExhausted("no pseudo-track has two or more members")

    rng = np.random.default_rng(cfg.seed)
    params = net.params()
    adam = AdamState.init(params)
    canon_cache: dict = {}
    history: list[StepRecord] = []

    def canon(ref: DetRef) -> embed.CanonicalCloud:
        got = canon_cache.get(ref)
        if got is None:
            det = src.frame_map[(ref.seq, ref.frame)].detections[ref.det]
            got = embed.canonicalize(
                src.seqs[ref.seq].cloud_of(det), det.box, cfg.points_per_crop,
                seed=embed.canon_seed(det.cloud_ref), source=det.cloud_ref,
            )
            canon_cache[ref] = got
        return got

    steps_per_epoch = max(1, math.ceil(src.total_members / cfg.batch_size))
    global_step = 0
    for _epoch in range(cfg.epochs):
        for _step in range(steps_per_epoch):
            triplets: list[Triplet] = []
            attempts = 0
            while len(triplets) < cfg.batch_size:
                attempts += 1
                if attempts > 200 * cfg.batch_size:
                    raise TrainingDataExhausted(
                        "could not assemble a batch; anchors have no negatives"
                    )
                t = sample_triplet(src, cfg, rng)
                if t is not None:
                    triplets.append(t)

            current = embed.EmbedNet.from_params(params)
            emb_cache: dict = {}

            def emb(ref: DetRef) -> np.ndarray:
                got = emb_cache.get(ref)
                if got is None:
                    got = embed.forward(current, canon(ref))
                    emb_cache[ref] = got
                return got

            # complete each triplet with a negative under the current net
            completed: list[Triplet] = []
            for t in triplets:
                cands = negative_candidates(src, t.anchor)
                if not cands:
                    continue
                if cfg.hard_negative_mining:
                    e_a = emb(t.anchor)
                    pairs = [(d, emb(DetRef(t.anchor.seq, t.anchor.frame, d))) for d in cands]
                    n_det = mine_hard_negative(e_a, pairs)
                    if debug_asserts:
                        chosen = embed.cosine(e_a, emb(DetRef(t.anchor.seq, t.anchor.frame, n_det)))
                        assert all(embed.cosine(e_a, e) <= chosen + 1e-12 for _, e in pairs)
                else:
                    n_det = cands[int(rng.integers(len(cands)))]
                completed.append(replace(
                    t, negative=DetRef(t.anchor.seq, t.anchor.frame, n_det)))

            loss_sum, grads, weight_sum = batch_loss_and_grads(
                current, canon, completed, cfg.margin, cfg.use_uncertainty, emb=emb)
            if not math.isfinite(loss_sum):
                raise NumericalError(
                    f"non-finite batch loss at step {global_step} "
                    f"(epoch {_epoch}, triplets={len(triplets)})"
                )
            params, adam = adam_step(params, grads, adam, cfg)
            history.append(StepRecord(
                step=global_step,
                mean_loss=loss_sum / len(triplets),
                mean_weight=weight_sum / len(triplets),
            ))
            global_step += 1

    return embed.EmbedNet.from_params(params), history


def write_loss_history(path, history) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in history:
            fh.write(f"{rec.step},{rec.mean_loss},{rec.mean_weight}\n")
