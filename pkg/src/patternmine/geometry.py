"""Geometric verification: Hough voting, RANSAC affine fits, and scoring.

Noisy dense correspondences are grouped by voting in a discretized
(translation, log2 scale ratio) space; each strong group is fed to RANSAC
to recover an affine transform and its inliers, and the surviving match
is scored by an error-weighted sum of inlier descriptor similarities
normalized by the source feature count:

    S = (1/N) * sum_{i in I} exp(-e_i^2 / (2 sigma^2)) * s_i

All functions here are pure and deterministic under their seeds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .features import CELL_STRIDE_PX


@dataclass
class Correspondence:
    """One source cell matched to one target cell, in base-frame pixels."""

    source_xy: tuple[float, float]
    target_xy: tuple[float, float]
    similarity: float
    source_scale: float = 1.0
    target_scale: float = 1.0


@dataclass
class HoughBin:
    key: tuple[int, int, int]  # (tx bin, ty bin, log2-scale bin)
    votes: int
    members: list[int]  # correspondence indices, neighborhood included


@dataclass
class AffineTransform:
    """2x3 matrix mapping source pixels to target pixels."""

    matrix: np.ndarray

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(points)
        return pts @ self.matrix[:, :2].T + self.matrix[:, 2]

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.matrix[:, :2]))


@dataclass
class ScoringConfig:
    sigma_px: float = 1.5 * CELL_STRIDE_PX
    inlier_threshold_px: float = 2.0 * CELL_STRIDE_PX
    ransac_iters: int = 1000
    trans_bin_px: float = 2.0 * CELL_STRIDE_PX
    scale_bin: float = 1.0 / 3.0  # log2 units, one pyramid step
    min_group_votes: int = 5
    top_groups: int = 10

    def __post_init__(self):
        for name in ("sigma_px", "inlier_threshold_px", "ransac_iters",
                     "trans_bin_px", "scale_bin", "top_groups"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class ScoredPair:
    source_image_id: str
    target_image_id: str
    transform: AffineTransform
    inliers: list[int]
    score: float
    source_box: tuple[float, float, float, float]
    target_box: tuple[float, float, float, float]
    sigma_px: float = 1.5 * CELL_STRIDE_PX


def hough_vote(correspondences: list[Correspondence],
               cfg: ScoringConfig) -> list[HoughBin]:
    """Group correspondences by translation and scale-ratio voting.

    Each correspondence votes in a single bin.  The top bins by raw count
    (at most cfg.top_groups, ties by bin key) are kept if they reach
    cfg.min_group_votes, and each is expanded to include correspondences
    in the 3x3x3 neighborhood of its bin.
    """
    if not correspondences:
        return []
    keys = []
    for c in correspondences:
        tx = c.target_xy[0] - c.source_xy[0]
        ty = c.target_xy[1] - c.source_xy[1]
        ratio = c.target_scale / c.source_scale
        keys.append((int(np.floor(tx / cfg.trans_bin_px)),
                     int(np.floor(ty / cfg.trans_bin_px)),
                     int(np.floor(np.log2(ratio) / cfg.scale_bin + 0.5))))
    counts: dict[tuple, int] = {}
    for k in keys:
        counts[k] = counts.get(k, 0) + 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    out = []
    for key, votes in ranked[:cfg.top_groups]:
        if votes < cfg.min_group_votes:
            continue
        members = [i for i, k in enumerate(keys)
                   if all(abs(k[d] - key[d]) <= 1 for d in range(3))]
        out.append(HoughBin(key=key, votes=votes, members=members))
    return out


def _fit_affine(src: np.ndarray, dst: np.ndarray) -> np.ndarray | None:
    """Least-squares affine from n>=3 point pairs; None when degenerate."""
    n = src.shape[0]
    A = np.hstack([src, np.ones((n, 1))])
    try:
        sol, _, rank, _ = np.linalg.lstsq(A, dst, rcond=None)
    except np.linalg.LinAlgError:
        return None
    if rank < 3:
        return None
    return sol.T  # (2, 3)


def ransac_affine(correspondences: list[Correspondence],
                  cfg: ScoringConfig,
                  seed: int) -> tuple[AffineTransform, list[int]] | None:
    """Robust affine estimation over minimal 3-point samples.

    The best minimal model by inlier count is refit by least squares on
    its inliers, and the inlier set re-evaluated under the refit model
    (one more refit absorbs the change).  Returns None when fewer than 3
    correspondences exist or no model reaches 3 inliers.
    """
    n = len(correspondences)
    if n < 3:
        return None
    src = np.array([c.source_xy for c in correspondences], dtype=np.float64)
    dst = np.array([c.target_xy for c in correspondences], dtype=np.float64)
    rng = np.random.default_rng(seed)

    # batched minimal samples: solve A X = D for all iterations at once
    samples = np.array([rng.choice(n, size=3, replace=False)
                        for _ in range(cfg.ransac_iters)])
    A = np.concatenate([src[samples],
                        np.ones((cfg.ransac_iters, 3, 1))], axis=2)
    D = dst[samples]
    ok = np.abs(np.linalg.det(A)) > 1e-9
    models = np.zeros((cfg.ransac_iters, 2, 3))
    if ok.any():
        sols = np.linalg.solve(A[ok], D[ok])  # (m, 3, 2)
        models[ok] = np.transpose(sols, (0, 2, 1))
    dets2 = models[:, 0, 0] * models[:, 1, 1] - models[:, 0, 1] * models[:, 1, 0]
    ok &= np.abs(dets2) > 1e-8
    if not ok.any():
        return None
    # residuals of every model at every correspondence
    proj = np.einsum("kij,nj->kni", models[:, :, :2], src) + models[:, None, :, 2]
    err = np.linalg.norm(proj - dst[None], axis=2)
    inlier_masks = (err < cfg.inlier_threshold_px) & ok[:, None]
    counts = inlier_masks.sum(axis=1)
    best = int(np.argmax(counts))  # ties keep the earliest iteration
    if counts[best] < 3:
        return None
    best_mask = inlier_masks[best]

    mask = best_mask
    for _ in range(2):  # refit on inliers, then settle the inlier set
        model = _fit_affine(src[mask], dst[mask])
        if model is None or abs(np.linalg.det(model[:, :2])) <= 1e-8:
            return None
        err = np.linalg.norm(src @ model[:, :2].T + model[:, 2] - dst, axis=1)
        new_mask = err < cfg.inlier_threshold_px
        if new_mask.sum() < 3:
            break
        if np.array_equal(new_mask, mask):
            break
        mask = new_mask
    inliers = np.flatnonzero(mask)
    return AffineTransform(matrix=model), [int(i) for i in inliers]


def reprojection_errors(correspondences: list[Correspondence],
                        transform: AffineTransform,
                        indices: list[int]) -> np.ndarray:
    src = np.array([correspondences[i].source_xy for i in indices])
    dst = np.array([correspondences[i].target_xy for i in indices])
    if len(indices) == 0:
        return np.zeros(0)
    return np.linalg.norm(transform.apply(src) - dst, axis=1)


def score_pair(errors: np.ndarray, similarities: np.ndarray,
               n_source_features: int, cfg: ScoringConfig) -> float:
    """Error-weighted similarity sum, normalized by source feature count."""
    if n_source_features <= 0:
        raise ValueError("source feature count must be positive")
    errors = np.asarray(errors, dtype=np.float64)
    similarities = np.asarray(similarities, dtype=np.float64)
    weights = np.exp(-(errors ** 2) / (2.0 * cfg.sigma_px ** 2))
    return float(np.sum(weights * similarities) / n_source_features)


def bounding_box(points: np.ndarray) -> tuple[float, float, float, float]:
    """Axis-aligned bounding box (x, y, w, h) of a point set."""
    x0, y0 = points.min(axis=0)
    x1, y1 = points.max(axis=0)
    return (float(x0), float(y0), float(x1 - x0), float(y1 - y0))
