"""Evaluation harnesses: single-object association accuracy, AMOTA, and
association-confidence validity.

SOT: the target's first-frame detection is the fixed anchor; in every later
frame containing the target, the candidate with the highest embedding cosine
is selected and scored against the ground-truth identity.

AMOTA: recall-thresholded CLEAR-style MOTA. For each target recall r the
prediction set is cut at the score whose achieved recall is closest from
above to r (minimal cut when unreachable); matching is per-frame greedy by
center distance under match_dist; MOTA_r clamps at 0 and AMOTA averages over
the recall grid.
"""

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import embed
from .core import Detection, Sequence, TrackletLabel, center_distance


@dataclass(frozen=True)
class SotTask:
    """Track one gt identity through a sequence given its first detection."""

    seq: Sequence
    target: int
    anchor: Detection
    anchor_frame: int


def build_sot_tasks(seq: Sequence, candidate_seq: Sequence | None = None) -> list[SotTask]:
    """One task per gt identity; candidates come from candidate_seq when
    given (e.g. a box-perturbed copy) while anchors stay clean."""
    tasks = []
    seen: set[int] = set()
    cand = candidate_seq if candidate_seq is not None else seq
    for rec in seq.frames:
        for det in rec.detections:
            if det.gt_id is None or det.gt_id in seen:
                continue
            seen.add(det.gt_id)
            tasks.append(SotTask(
                seq=cand, target=det.gt_id, anchor=det, anchor_frame=rec.index,
            ))
    return tasks


@dataclass(frozen=True)
class SotResult:
    accuracy: float
    correct: int
    total: int
    per_task: tuple[tuple[int, int, int], ...]  # (target, correct, total)


def sot_evaluate(net: embed.EmbedNet, tasks,
                 points_per_crop: int = embed.DEFAULT_POINTS) -> SotResult:
    """Classification accuracy of arg-max-cosine association over all tasks.

    The anchor is embedded once per task. Frames without the target are
    skipped; ties in cosine go to the lowest candidate index.
    """
    total = 0
    correct = 0
    per_task = []
    for task in tasks:
        anchor_crop = embed.canonicalize(
            task.seq.clouds[task.anchor.cloud_ref], task.anchor.box,
            points_per_crop, seed=embed.canon_seed(task.anchor.cloud_ref),
            source=task.anchor.cloud_ref,
        )
        anchor_emb = embed.forward(net, anchor_crop)
        t_correct = 0
        t_total = 0
        for rec in task.seq.frames:
            if rec.index <= task.anchor_frame:
                continue
            if not any(d.gt_id == task.target for d in rec.detections):
                continue
            best_idx = None
            best_cos = -math.inf
            for idx, det in enumerate(rec.detections):
                crop = embed.canonicalize(
                    task.seq.cloud_of(det), det.box, points_per_crop,
                    seed=embed.canon_seed(det.cloud_ref), source=det.cloud_ref,
                )
                c = embed.cosine(anchor_emb, embed.forward(net, crop))
                if c > best_cos:
                    best_cos = c
                    best_idx = idx
            t_total += 1
            if rec.detections[best_idx].gt_id == task.target:
                t_correct += 1
        total += t_total
        correct += t_correct
        per_task.append((task.target, t_correct, t_total))
    accuracy = correct / total if total else 0.0
    return SotResult(accuracy=accuracy, correct=correct, total=total,
                     per_task=tuple(per_task))


def write_sot_csv(path, result: SotResult) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["target", "correct", "total", "accuracy"])
        for target, c, t in result.per_task:
            writer.writerow([target, c, t, c / t if t else 0.0])
        writer.writerow(["overall", result.correct, result.total, result.accuracy])


# ---------------------------------------------------------------------------
# AMOTA


@dataclass(frozen=True)
class ThresholdStats:
    recall_target: float
    score_cut: float
    recall: float
    mota: float
    fp: int
    fn: int
    ids: int
    gt_count: int


@dataclass(frozen=True)
class MotScore:
    amota: float
    thresholds: tuple[ThresholdStats, ...]


def _group_by_frame(rows):
    out: dict[int, list] = {}
    for r in rows:
        out.setdefault(r.frame, []).append(r)
    return out


def _clear_counts(pred_rows, gt_rows, match_dist: float):
    """Greedy per-frame center-distance matching; returns (tp, fp, fn, ids)."""
    pred_by_frame = _group_by_frame(pred_rows)
    gt_by_frame = _group_by_frame(gt_rows)
    last_match: dict[int, int] = {}  # gt track -> last matched pred track
    tp = fp = fn = ids = 0
    for frame in sorted(gt_by_frame.keys() | pred_by_frame.keys()):
        gts = gt_by_frame.get(frame, [])
        preds = pred_by_frame.get(frame, [])
        cand = []
        for gi, g in enumerate(gts):
            for pi, p in enumerate(preds):
                d = center_distance(g.box, p.box)
                if d <= match_dist:
                    cand.append((d, gi, pi))
        cand.sort()
        used_g: set[int] = set()
        used_p: set[int] = set()
        for d, gi, pi in cand:
            if gi in used_g or pi in used_p:
                continue
            used_g.add(gi)
            used_p.add(pi)
            tp += 1
            gt_id = gts[gi].track_id
            pred_id = preds[pi].track_id
            if gt_id in last_match and last_match[gt_id] != pred_id:
                ids += 1
            last_match[gt_id] = pred_id
        fn += len(gts) - len(used_g)
        fp += len(preds) - len(used_p)
    return tp, fp, fn, ids


def amota(pred_rows, gt_rows, match_dist: float = 2.0, L: int = 40) -> MotScore:
    """Average MOTA over L recall thresholds {1/L, ..., 1}."""
    if match_dist <= 0:
        raise ValueError(f"match_dist must be > 0, got {match_dist}")
    if L < 1:
        raise ValueError(f"L must be >= 1, got {L}")
    gt_rows = list(gt_rows)
    if not gt_rows:
        raise ValueError("ground truth is empty")
    pred_rows = sorted(pred_rows, key=lambda r: (-r.score, r.frame, r.track_id))
    gt_count = len(gt_rows)

    # stats at every candidate score cut, from strictest to all-inclusive
    cuts = sorted({r.score for r in pred_rows}, reverse=True) or [0.0]
    per_cut = []
    for cut in cuts:
        kept = [r for r in pred_rows if r.score >= cut]
        tp, fp, fn, ids = _clear_counts(kept, gt_rows, match_dist)
        recall = tp / gt_count
        mota = max(0.0, 1.0 - (fp + fn + ids) / gt_count)
        per_cut.append((cut, recall, mota, fp, fn, ids))

    thresholds = []
    for k in range(1, L + 1):
        r_target = k / L
        reachable = [pc for pc in per_cut if pc[1] >= r_target]
        if reachable:
            # achieved recall closest from above; strictest cut breaks ties
            chosen = min(reachable, key=lambda pc: (pc[1], -pc[0]))
        else:
            chosen = per_cut[-1]  # minimal cut: keep everything
        cut, recall, mota, fp, fn, ids = chosen
        thresholds.append(ThresholdStats(
            recall_target=r_target, score_cut=cut, recall=recall, mota=mota,
            fp=fp, fn=fn, ids=ids, gt_count=gt_count,
        ))
    return MotScore(
        amota=float(np.mean([t.mota for t in thresholds])),
        thresholds=tuple(thresholds),
    )


# ---------------------------------------------------------------------------
# confidence validity


@dataclass(frozen=True)
class ConfidenceReport:
    mean_correct: float | None
    mean_incorrect: float | None
    correct_hist: tuple[int, ...]  # 20 bins over [0, 1]
    incorrect_hist: tuple[int, ...]
    n_links: int

    @property
    def total_binned(self) -> int:
        return sum(self.correct_hist) + sum(self.incorrect_hist)


def confidence_links(seq: Sequence, labels, link_conf):
    """Split pseudo-track link confidences into gt-correct / gt-incorrect.

    A link is correct iff both endpoint detections carry the same non-null
    gt_id. Requires gt_ids on the sequence (simulator / weak modes).
    """
    rec_by_index = {rec.index: rec for rec in seq.frames}
    correct_vals: list[float] = []
    incorrect_vals: list[float] = []
    for lab in labels:
        conf = link_conf.get(lab.track_id, [])
        for k in range(len(lab.members) - 1):
            f0, d0 = lab.members[k]
            f1, d1 = lab.members[k + 1]
            g0 = rec_by_index[f0].detections[d0].gt_id
            g1 = rec_by_index[f1].detections[d1].gt_id
            ac = float(conf[k])
            if g0 is not None and g1 is not None and g0 == g1:
                correct_vals.append(ac)
            else:
                incorrect_vals.append(ac)
    return correct_vals, incorrect_vals


def report_from_links(correct_vals, incorrect_vals) -> ConfidenceReport:
    def hist(vals):
        h = [0] * 20
        for v in vals:
            h[min(int(v * 20), 19)] += 1
        return tuple(h)

    return ConfidenceReport(
        mean_correct=float(np.mean(correct_vals)) if correct_vals else None,
        mean_incorrect=float(np.mean(incorrect_vals)) if incorrect_vals else None,
        correct_hist=hist(correct_vals),
        incorrect_hist=hist(incorrect_vals),
        n_links=len(correct_vals) + len(incorrect_vals),
    )


def confidence_report(seq: Sequence, labels, link_conf) -> ConfidenceReport:
    """Confidence validity report for one sequence's pseudo-tracks."""
    return report_from_links(*confidence_links(seq, labels, link_conf))


def write_confidence_csv(path, report: ConfidenceReport) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_lo", "bin_hi", "correct", "incorrect"])
        for k in range(20):
            writer.writerow([
                k / 20.0, (k + 1) / 20.0,
                report.correct_hist[k], report.incorrect_hist[k],
            ])
