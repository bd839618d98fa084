"""Evaluation protocols: detection AP/mAP, classification accuracy, and
Oxford-style retrieval mAP.

Detection AP matches detections greedily by rank: a detection is a true
positive when it overlaps an unmatched ground-truth box of its pattern at
IoU >= det_iou.  AP integrates the precision-recall curve stepwise (no
interpolation); ties in score resolve by detection order, which is itself
deterministic upstream.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .matching import box_iou


@dataclass(frozen=True)
class Annotation:
    image_id: str
    pattern_id: str
    box: tuple[float, float, float, float]

    def __post_init__(self):
        if not self.pattern_id:
            raise ValueError("pattern_id must be non-empty")


@dataclass
class EvalConfig:
    det_iou: float = 0.3

    def __post_init__(self):
        if not (0.0 < self.det_iou < 1.0):
            raise ValueError("det_iou must be in (0, 1)")


def iou(box_a, box_b) -> float:
    """Intersection over union of two (x, y, w, h) boxes."""
    return box_iou(box_a, box_b)


def average_precision(detections, ground_truth, det_iou: float = 0.3):
    """AP of ranked detections against ground-truth boxes.

    detections: iterable of (image_id, box, score), sorted by score desc.
    ground_truth: iterable of (image_id, box).
    Returns None (skip) when there is no ground truth.
    """
    gt = list(ground_truth)
    if not gt:
        return None
    matched = [False] * len(gt)
    tp_flags = []
    for image_id, box, _score in detections:
        hit = -1
        best = det_iou
        for j, (gt_image, gt_box) in enumerate(gt):
            if matched[j] or gt_image != image_id:
                continue
            v = box_iou(box, gt_box)
            if v >= best:
                best = v
                hit = j
        if hit >= 0:
            matched[hit] = True
            tp_flags.append(True)
        else:
            tp_flags.append(False)
    ap = 0.0
    tp = 0
    for rank, flag in enumerate(tp_flags, start=1):
        if flag:
            tp += 1
            ap += (1.0 / len(gt)) * (tp / rank)
    return ap


def detection_map(per_query: list[tuple[str, float]]) -> float:
    """Class-level mAP: mean over classes of the mean AP of their queries.

    per_query: list of (class_label, ap), one entry per query.
    """
    by_class: dict[str, list[float]] = {}
    for label, ap in per_query:
        by_class.setdefault(label, []).append(ap)
    if not by_class:
        return 0.0
    class_means = [sum(v) / len(v) for v in by_class.values()]
    return 100.0 * sum(class_means) / len(class_means)


def ltll_accuracy(predictions: dict[str, str], labels: dict[str, str]) -> float:
    """Percent of queries whose predicted class equals the true class."""
    missing = set(labels) - set(predictions)
    if missing:
        raise ValueError(f"missing predictions for {sorted(missing)[:5]}")
    correct = sum(predictions[q] == labels[q] for q in labels)
    return 100.0 * correct / len(labels)


def retrieval_map(rankings: dict[str, list[str]],
                  relevance: dict[str, dict[str, set]]) -> float:
    """Oxford-protocol retrieval mAP over queries, as a percent.

    relevance[q] holds sets under keys "good", "ok", "junk"; junk entries
    are removed from the ranking before computing AP, and good+ok form
    the positive set.
    """
    aps = []
    for q, ranked in rankings.items():
        rel = relevance[q]
        positives = set(rel.get("good", set())) | set(rel.get("ok", set()))
        junk = set(rel.get("junk", set()))
        if not positives:
            continue
        ap = 0.0
        hits = 0
        rank = 0
        for item in ranked:
            if item in junk:
                continue
            rank += 1
            if item in positives:
                hits += 1
                ap += hits / rank
        aps.append(ap / len(positives))
    return 100.0 * sum(aps) / len(aps) if aps else 0.0


def read_annotations(path) -> list[Annotation]:
    """JSON-lines annotations: {image_id, pattern_id, box: [x, y, w, h]}."""
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            out.append(Annotation(image_id=obj["image_id"],
                                  pattern_id=obj["pattern_id"],
                                  box=tuple(obj["box"])))
    return out


def write_annotations(path, annotations: list[Annotation]) -> None:
    with open(path, "w") as fh:
        for a in annotations:
            fh.write(json.dumps({"image_id": a.image_id,
                                 "pattern_id": a.pattern_id,
                                 "box": list(a.box)}) + "\n")
