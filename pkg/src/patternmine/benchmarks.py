"""Planted-copy benchmarks tying mining, training, and detection together.

These run entirely on synthetic corpora with known ground truth, so every
number they report has an oracle: a mined candidate either corresponds to
a planted copy or it does not, and a detection either lands on the planted
target box or it does not.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .evaluation import average_precision
from .features import CELL_STRIDE_PX, DEFAULT_BASE_MAX_DIM, FeaturePyramid, builtin_extract
from .matching import QueryPatch, one_shot_detect, query_from_pyramid
from .mining import CandidateMatch, MiningConfig
from .synthetic import PlantedCopy, SyntheticCorpus
from .training import AdapterParams, adapt_pyramid


def extract_corpus(corpus: SyntheticCorpus) -> dict[str, FeaturePyramid]:
    return {iid: builtin_extract(corpus.images[iid], image_id=iid)
            for iid in corpus.image_ids()}


def base_frame_box(corpus: SyntheticCorpus, image_id: str,
                   box) -> tuple[float, float, float, float]:
    """Original-pixel box mapped into the pyramid's base frame."""
    h, w = corpus.images[image_id].shape[:2]
    ratio = DEFAULT_BASE_MAX_DIM * CELL_STRIDE_PX / max(h, w)
    return tuple(v * ratio for v in box)


def _box_to_cells(corpus, image_id, box) -> tuple[float, float, float, float]:
    x, y, w, h = base_frame_box(corpus, image_id, box)
    s = CELL_STRIDE_PX
    return (x / s, y / s, w / s, h / s)


def candidate_is_planted(c: CandidateMatch, corpus: SyntheticCorpus,
                         tolerance_cells: float = 3.0) -> bool:
    """True when the candidate reproduces a planted correspondence.

    The proposal must sit inside a planted region and the target position
    must agree with the copy's translation within the tolerance.
    """
    pr, pc = c.proposal.pos.row, c.proposal.pos.col
    for planted in corpus.planted:
        for a_img, a_box, b_img, b_box in (
                (planted.source_image_id, planted.source_box,
                 planted.target_image_id, planted.target_box),
                (planted.target_image_id, planted.target_box,
                 planted.source_image_id, planted.source_box)):
            if c.proposal.image_id != a_img or c.target_image_id != b_img:
                continue
            ax, ay, aw, ah = _box_to_cells(corpus, a_img, a_box)
            if not (ax <= pc and pc + 2 <= ax + aw
                    and ay <= pr and pr + 2 <= ay + ah):
                continue
            bx, by, _, _ = _box_to_cells(corpus, b_img, b_box)
            scale = 2.0 ** (-c.target.scale_index / 3.0)
            er = (pr - ay + by) * scale
            ec = (pc - ax + bx) * scale
            if max(abs(c.target.row - er), abs(c.target.col - ec)) \
                    <= tolerance_cells:
                return True
    return False


def mining_precision(candidates: list[CandidateMatch],
                     corpus: SyntheticCorpus) -> float:
    if not candidates:
        return 0.0
    hits = sum(candidate_is_planted(c, corpus) for c in candidates)
    return hits / len(candidates)


@dataclass
class DetectionBenchmark:
    """One-shot detection of every planted copy, scored as AP per query."""

    corpus: SyntheticCorpus
    query_cells: int = 8

    def _query(self, pyramids, planted: PlantedCopy) -> tuple[QueryPatch, tuple]:
        """Query patch plus its footprint mapped into the target region.

        The footprint (not the whole planted box) is the ground truth:
        a correct hit is query-sized by construction, so comparing it
        against a much larger region would only measure box-size ratio.
        """
        pyr = pyramids[planted.source_image_id]
        x, y, w, h = _box_to_cells(self.corpus, planted.source_image_id,
                                   planted.source_box)
        r0, c0 = int(round(y)), int(round(x))
        qh = max(1, min(int(round(h)), self.query_cells,
                        pyr.maps[0].height - r0))
        qw = max(1, min(int(round(w)), self.query_cells,
                        pyr.maps[0].width - c0))
        tx, ty, tw, th = _box_to_cells(self.corpus, planted.target_image_id,
                                       planted.target_box)
        s = CELL_STRIDE_PX
        gt_box = ((tx + (c0 - x)) * s, (ty + (r0 - y)) * s, qw * s, qh * s)
        return query_from_pyramid(pyr, 0, r0, c0, qh, qw), gt_box

    def per_query_ap(self, pyramids: dict[str, FeaturePyramid],
                     det_iou: float = 0.3) -> list[float]:
        aps = []
        for planted in self.corpus.planted:
            q, gt_box = self._query(pyramids, planted)
            targets = [p for iid, p in sorted(pyramids.items())
                       if iid != planted.source_image_id]
            dets = one_shot_detect(q, targets)
            gt = [(planted.target_image_id, gt_box)]
            ranked = [(d.image_id, d.box, d.score) for d in dets]
            ap = average_precision(ranked, gt, det_iou=det_iou)
            aps.append(ap if ap is not None else 0.0)
        return aps

    def mean_ap(self, base_pyramids: dict[str, FeaturePyramid],
                adapter: AdapterParams | None = None,
                det_iou: float = 0.3) -> float:
        if adapter is not None:
            pyramids = {iid: adapt_pyramid(adapter, p)
                        for iid, p in base_pyramids.items()}
        else:
            pyramids = base_pyramids
        aps = self.per_query_ap(pyramids, det_iou=det_iou)
        return 100.0 * float(np.mean(aps))
