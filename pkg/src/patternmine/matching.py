"""Dense query-as-kernel matching, top-K retrieval, and one-shot detection.

A query patch is a small grid of unit descriptors.  Sliding it over a
normalized feature map and averaging the per-cell dot products gives the
mean per-cell cosine at every placement, bounded in [-1, 1] regardless of
the patch size.  All operations here are pure functions of immutable
pyramids, so matching parallelizes over target images; ties are broken by
(image_id, scale_index, row, col) so merged results are deterministic.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .features import (
    CELL_STRIDE_PX,
    FeaturePyramid,
    GridPos,
    builtin_extract,
    l2_normalize_map,
    FeatureMap,
)

DETECT_QUERY_MAX_DIM = 8
DEFAULT_NMS_IOU = 0.5


@dataclass
class QueryPatch:
    """An h x w grid of L2-normalized descriptors lifted from a source image."""

    source_image_id: str
    cells: np.ndarray  # (h, w, C)
    origin: GridPos | None = None


@dataclass
class SimilarityMap:
    target_image_id: str
    scale_index: int
    values: np.ndarray  # (H-h+1, W-w+1)


@dataclass(order=True)
class Match:
    """One placement of a query in a target pyramid, with its similarity."""

    sort_key: tuple = None
    image_id: str = ""
    scale_index: int = 0
    row: int = 0
    col: int = 0
    similarity: float = 0.0


@dataclass
class Detection:
    image_id: str
    box: tuple[float, float, float, float]  # x, y, w, h in base-frame pixels
    score: float
    scale_index: int


def query_from_pyramid(pyr: FeaturePyramid, scale_index: int,
                       row: int, col: int, h: int, w: int) -> QueryPatch:
    cells = pyr.maps[scale_index].values[row:row + h, col:col + w]
    if cells.shape[:2] != (h, w):
        raise ValueError("query patch out of bounds")
    return QueryPatch(source_image_id=pyr.image_id, cells=cells.copy(),
                      origin=GridPos(scale_index, row, col))


def _slide(cells: np.ndarray, values: np.ndarray) -> np.ndarray:
    h, w = cells.shape[:2]
    H, W = values.shape[:2]
    out = np.zeros((H - h + 1, W - w + 1), dtype=np.float64)
    for i in range(h):
        for j in range(w):
            out += values[i:i + H - h + 1, j:j + W - w + 1] @ cells[i, j]
    return out / (h * w)


def dense_similarity(q: QueryPatch, pyr: FeaturePyramid) -> list[SimilarityMap]:
    """Mean per-cell cosine of the query at every placement, every scale.

    Scales whose map is smaller than the query are omitted.
    """
    h, w, c = q.cells.shape
    if c != pyr.channels:
        raise ValueError(f"channel mismatch: query {c}, pyramid {pyr.channels}")
    out = []
    for k, m in enumerate(pyr.maps):
        if m.height < h or m.width < w:
            continue
        out.append(SimilarityMap(
            target_image_id=pyr.image_id, scale_index=k,
            values=_slide(q.cells, m.values),
        ))
    return out


def _matches_for_pyramid(q: QueryPatch, pyr: FeaturePyramid, k: int) -> list[Match]:
    found = []
    for sim in dense_similarity(q, pyr):
        v = sim.values
        flat = v.ravel()
        if flat.size == 0:
            continue
        take = min(k, flat.size)
        idx = np.argpartition(-flat, take - 1)[:take] if take < flat.size \
            else np.arange(flat.size)
        # pull in every tie with the weakest kept value so the global
        # lexicographic tie-break stays exact
        cutoff = flat[idx].min()
        idx = np.flatnonzero(flat >= cutoff)
        for i in idx:
            r, c = divmod(int(i), v.shape[1])
            s = float(flat[i])
            found.append(Match(sort_key=(-s, pyr.image_id, sim.scale_index, r, c),
                               image_id=pyr.image_id, scale_index=sim.scale_index,
                               row=r, col=c, similarity=s))
    found.sort()
    return found[:k] if len(found) > k else found


# used by the process-pool path; set in each worker via fork inheritance
_POOL_PYRAMIDS: list[FeaturePyramid] = []


def _pool_worker(args):
    q, lo, hi, k, repeats = args
    out = []
    for _ in range(repeats):
        out = []
        for pyr in _POOL_PYRAMIDS[lo:hi]:
            out.extend(_matches_for_pyramid(q, pyr, k))
    return out


def top_k_matches(q: QueryPatch, pyramids: list[FeaturePyramid], k: int,
                  exclude_source: bool = True,
                  jobs: int = 1) -> list[Match]:
    """Globally best K placements over all images and scales.

    Ties are broken by (image_id, scale_index, row, col).  With jobs > 1
    the target set is sharded over a fork-based process pool; the merge
    order keeps results identical to the serial path.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    targets = [p for p in pyramids
               if not (exclude_source and p.image_id == q.source_image_id)]
    if jobs > 1 and len(targets) > 1:
        found = _parallel_matches(q, targets, k, jobs)
    else:
        found = []
        for pyr in targets:
            found.extend(_matches_for_pyramid(q, pyr, k))
    found.sort()
    return found[:k]


def _parallel_matches(q, targets, k, jobs, repeats: int = 1):
    global _POOL_PYRAMIDS
    _POOL_PYRAMIDS = targets
    bounds = np.linspace(0, len(targets), jobs + 1).astype(int)
    chunks = [(q, int(lo), int(hi), k, repeats)
              for lo, hi in zip(bounds, bounds[1:]) if hi > lo]
    try:
        import multiprocessing as mp
        ctx = mp.get_context("fork")
        with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx) as pool:
            parts = list(pool.map(_pool_worker, chunks))
    finally:
        _POOL_PYRAMIDS = []
    return [m for part in parts for m in part]


def benchmark_matching(q: QueryPatch, pyramids: list[FeaturePyramid],
                       k: int = 10, jobs: int = 1,
                       repeats: int = 1) -> float:
    """Wall-clock seconds to match `q` against all pyramids `repeats` times.

    The repeated serial and pool paths do identical per-pyramid work, so
    the ratio of their times is a fair parallel-speedup measurement even
    when a single pass is much shorter than process-pool startup.
    """
    import time
    start = time.perf_counter()
    if jobs > 1:
        _parallel_matches(q, pyramids, k, jobs, repeats=repeats)
    else:
        for _ in range(repeats):
            for pyr in pyramids:
                _matches_for_pyramid(q, pyr, k)
    return time.perf_counter() - start


def box_iou(a, b) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    ix = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    iy = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def nms(detections: list[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy non-maximum suppression by score, per image."""
    kept: list[Detection] = []
    for det in sorted(detections, key=lambda d: (-d.score, d.image_id,
                                                 d.scale_index, d.box)):
        if all(d.image_id != det.image_id or box_iou(d.box, det.box) < iou_threshold
               for d in kept):
            kept.append(det)
    return kept


def _local_maxima(values: np.ndarray) -> np.ndarray:
    """Mask of positions that are the maximum of their 3x3 neighborhood."""
    H, W = values.shape
    padded = np.full((H + 2, W + 2), -np.inf)
    padded[1:-1, 1:-1] = values
    mask = np.ones((H, W), dtype=bool)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            mask &= values >= padded[1 + dr:H + 1 + dr, 1 + dc:W + 1 + dc]
    return mask


def extract_detect_query(query_image, box_px, channels_like: int | None = None,
                         stride: int = CELL_STRIDE_PX) -> QueryPatch:
    """Crop a pixel box and re-extract it so its feature grid's longest
    side is DETECT_QUERY_MAX_DIM cells."""
    x, y, w, h = box_px
    if w <= 0 or h <= 0:
        raise ValueError("degenerate query box")
    arr = np.asarray(query_image)
    crop = arr[int(round(y)):int(round(y + h)), int(round(x)):int(round(x + w))]
    if crop.size == 0:
        raise ValueError("query box outside image")
    pyr = builtin_extract(crop, scales=[1.0], image_id="__query__",
                          base_max_dim=DETECT_QUERY_MAX_DIM, stride=stride)
    return QueryPatch(source_image_id="__query__", cells=pyr.maps[0].values)


def one_shot_detect(q: QueryPatch, pyramids: list[FeaturePyramid],
                    nms_iou: float = DEFAULT_NMS_IOU,
                    min_score: float = -1.0,
                    max_per_image: int = 50) -> list[Detection]:
    """Detect placements of a query patch across a collection.

    Local 3x3 similarity maxima become detections; each is mapped back to
    base-frame pixels through the scale factor, then suppressed greedily
    at ``nms_iou``.  Returns detections ranked by score.
    """
    h, w = q.cells.shape[:2]
    out: list[Detection] = []
    for pyr in pyramids:
        stride = pyr.cell_stride_px
        img_w = pyr.maps[0].width * stride
        img_h = pyr.maps[0].height * stride
        dets: list[Detection] = []
        for sim in dense_similarity(q, pyr):
            s = pyr.maps[sim.scale_index].scale_factor
            mask = _local_maxima(sim.values)
            for r, c in zip(*np.nonzero(mask)):
                score = float(sim.values[r, c])
                if score < min_score:
                    continue
                bx = c * stride / s
                by = r * stride / s
                bw = w * stride / s
                bh = h * stride / s
                bx, by = max(0.0, bx), max(0.0, by)
                bw = min(bw, img_w - bx)
                bh = min(bh, img_h - by)
                dets.append(Detection(image_id=pyr.image_id,
                                      box=(bx, by, bw, bh),
                                      score=score, scale_index=sim.scale_index))
        dets = nms(dets, nms_iou)[:max_per_image]
        out.extend(dets)
    out.sort(key=lambda d: (-d.score, d.image_id, d.scale_index, d.box))
    return out
