"""Hard-positive mining: propose, spatially verify, and harvest pairs.

The pipeline: small 2x2-cell proposal regions are sampled at the base
scale, matched densely across the rest of the collection, and one of each
proposal's top-K matches becomes a candidate correspondence.  Each
candidate is then verified by voting: every cell of a window around the
proposal is matched independently in the target image, and votes when its
best match lands where the candidate's geometry predicts.  The most-voted
fraction of candidates is kept, and each survivor yields up to four
positive training pairs at the corners of a square around the proposal,
plus hard negatives from the target image.

All outputs are deterministic functions of (dataset, config, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .features import FeaturePyramid, GridPos
from .matching import Match, QueryPatch, query_from_pyramid, top_k_matches

PROPOSAL_SIZE = 2  # cells; proposals are square


@dataclass
class MiningConfig:
    K: int = 10
    verify_window: int = 10          # cells, centered on the proposal
    verify_tolerance: float = 1.0    # cells, Chebyshev
    verified_fraction: float = 0.10
    positive_config: int = 12        # square size d; sources at (r +/- d/2, c +/- d/2)
    proposals_per_round: int = 64
    n_neg: int = 20
    select_top1: bool = False        # pick the best match instead of sampling top-K
    proposal_masks: dict[str, list[tuple[float, float, float, float]]] | None = None
    candidate_pool: list[str] | None = None  # restrict targets to these image_ids

    def __post_init__(self):
        if not (0.0 < self.verified_fraction <= 1.0):
            raise ValueError("verified_fraction must be in (0, 1]")
        d = self.positive_config
        if d % 2 != 0 or not (2 <= d <= 14):
            raise ValueError("positive_config must be an even size in [2, 14]")


@dataclass(frozen=True)
class ProposalRegion:
    """A 2x2-cell query region at the base scale of one image."""

    image_id: str
    pos: GridPos  # top-left cell; scale_index is always 0


@dataclass
class CandidateMatch:
    """A proposal matched to a position in another image, plus its votes."""

    proposal: ProposalRegion
    target_image_id: str
    target: GridPos
    similarity: float
    votes: int = -1  # filled by verify_candidate


@dataclass(frozen=True)
class FeatureRef:
    """Address of one cell descriptor: (image, scale, row, col)."""

    image_id: str
    pos: GridPos


@dataclass
class PositivePair:
    p1: FeatureRef
    p2: FeatureRef
    negatives: list[FeatureRef] = field(default_factory=list)


def _in_mask(cfg: MiningConfig, image_id: str, row: int, col: int,
             stride: int, scale: float) -> bool:
    if not cfg.proposal_masks:
        return True
    boxes = cfg.proposal_masks.get(image_id)
    if not boxes:
        return False
    k = stride / scale
    x0, y0 = col * k, row * k
    x1, y1 = (col + PROPOSAL_SIZE) * k, (row + PROPOSAL_SIZE) * k
    return any(x0 >= bx and y0 >= by and x1 <= bx + bw and y1 <= by + bh
               for bx, by, bw, bh in boxes)


def sample_proposals(pyramids: list[FeaturePyramid], n: int,
                     rng: np.random.Generator,
                     cfg: MiningConfig | None = None) -> list[ProposalRegion]:
    """n proposals, uniform over images then over in-bounds 2x2 positions."""
    if not pyramids:
        raise ValueError("empty dataset")
    cfg = cfg or MiningConfig()
    eligible = []
    for pyr in pyramids:
        m = pyr.maps[0]
        if m.height < PROPOSAL_SIZE or m.width < PROPOSAL_SIZE:
            continue
        eligible.append(pyr)
    if not eligible:
        raise ValueError("no image has a base map of at least 2x2 cells")

    out = []
    while len(out) < n:
        pyr = eligible[int(rng.integers(len(eligible)))]
        m = pyr.maps[0]
        row = int(rng.integers(m.height - PROPOSAL_SIZE + 1))
        col = int(rng.integers(m.width - PROPOSAL_SIZE + 1))
        if not _in_mask(cfg, pyr.image_id, row, col, pyr.cell_stride_px,
                        m.scale_factor):
            continue
        out.append(ProposalRegion(image_id=pyr.image_id,
                                  pos=GridPos(0, row, col)))
    return out


def propose_candidate(q: ProposalRegion, pyramids: list[FeaturePyramid],
                      cfg: MiningConfig,
                      rng: np.random.Generator) -> CandidateMatch:
    """Pick one of the proposal's top-K cross-image matches as a candidate."""
    by_id = {p.image_id: p for p in pyramids}
    src = by_id[q.image_id]
    patch = query_from_pyramid(src, 0, q.pos.row, q.pos.col,
                               PROPOSAL_SIZE, PROPOSAL_SIZE)
    targets = [p for p in pyramids if p.image_id != q.image_id]
    if cfg.candidate_pool is not None:
        pool = set(cfg.candidate_pool)
        targets = [p for p in targets if p.image_id in pool]
    if not targets:
        raise ValueError("no cross-image candidate positions available")
    matches = top_k_matches(patch, targets, cfg.K, exclude_source=True)
    if not matches:
        raise ValueError("no cross-image candidate positions available")
    pick = matches[0] if cfg.select_top1 else matches[int(rng.integers(len(matches)))]
    return CandidateMatch(
        proposal=q,
        target_image_id=pick.image_id,
        target=GridPos(pick.scale_index, pick.row, pick.col),
        similarity=pick.similarity,
    )


def _best_cell_match(feature: np.ndarray, pyr: FeaturePyramid) -> tuple[int, int, int]:
    """Argmax cosine position of a single descriptor over all scales.

    Ties resolve to the first position in (scale, row, col) scan order.
    """
    best = (-np.inf, 0, 0, 0)
    for k, m in enumerate(pyr.maps):
        sims = m.values @ feature
        i = int(np.argmax(sims))
        v = float(sims.flat[i])
        if v > best[0]:
            r, c = divmod(i, m.width)
            best = (v, k, r, c)
    return best[1], best[2], best[3]


def verify_candidate(c: CandidateMatch, pyramids: list[FeaturePyramid],
                     cfg: MiningConfig) -> int:
    """Count window cells whose independent best match agrees with the
    candidate's translation and scale.

    Each cell of the verify_window x verify_window region around the
    proposal (the proposal's own cells excluded) is matched on its own in
    the target image over all scales.  It votes when the argmax lands at
    the candidate's scale, within verify_tolerance cells of the position
    predicted by the candidate's offset and scale ratio.
    """
    by_id = {p.image_id: p for p in pyramids}
    src = by_id[c.proposal.image_id]
    dst = by_id[c.target_image_id]
    src_map = src.maps[0].values
    H, W = src_map.shape[:2]
    pr, pc = c.proposal.pos.row, c.proposal.pos.col
    scale_ratio = dst.maps[c.target.scale_index].scale_factor / src.maps[0].scale_factor

    half = cfg.verify_window // 2
    # window centered on the 2x2 proposal: rows pr-half+1 .. pr+half
    r0, r1 = pr - half + 1, pr + half
    c0, c1 = pc - half + 1, pc + half
    votes = 0
    for r in range(max(0, r0), min(H - 1, r1) + 1):
        for col in range(max(0, c0), min(W - 1, c1) + 1):
            if pr <= r < pr + PROPOSAL_SIZE and pc <= col < pc + PROPOSAL_SIZE:
                continue
            bs, br, bc = _best_cell_match(src_map[r, col], dst)
            if bs != c.target.scale_index:
                continue
            er = c.target.row + (r - pr) * scale_ratio
            ec = c.target.col + (col - pc) * scale_ratio
            if max(abs(br - er), abs(bc - ec)) <= cfg.verify_tolerance:
                votes += 1
    return votes


def select_verified(candidates: list[CandidateMatch],
                    verified_fraction: float) -> list[CandidateMatch]:
    """Keep the ceil(fraction * n) candidates with the most votes.

    Ties break by higher similarity, then lexicographic position.
    """
    if not candidates:
        raise ValueError("no candidates to select from")
    n_keep = int(np.ceil(verified_fraction * len(candidates)))
    ordered = sorted(candidates, key=lambda c: (
        -c.votes, -c.similarity,
        c.proposal.image_id, c.proposal.pos.row, c.proposal.pos.col,
        c.target_image_id, c.target.scale_index, c.target.row, c.target.col,
    ))
    return ordered[:n_keep]


def generate_positive_pairs(v: CandidateMatch, pyramids: list[FeaturePyramid],
                            cfg: MiningConfig) -> list[PositivePair]:
    """Up to 4 positive pairs at the corners of a size-d square around the
    proposal; corners falling out of bounds are dropped."""
    by_id = {p.image_id: p for p in pyramids}
    src = by_id[v.proposal.image_id]
    dst = by_id[v.target_image_id]
    src_map = src.maps[0]
    dst_map = dst.maps[v.target.scale_index]
    scale_ratio = dst_map.scale_factor / src_map.scale_factor

    d = cfg.positive_config // 2
    pr, pc = v.proposal.pos.row, v.proposal.pos.col
    tr, tc = v.target.row, v.target.col
    pairs = []
    for sr in (-d, d):
        for sc in (-d, d):
            p1r, p1c = pr + sr, pc + sc
            if not (0 <= p1r < src_map.height and 0 <= p1c < src_map.width):
                continue
            p2r = int(np.floor(tr + sr * scale_ratio + 0.5))
            p2c = int(np.floor(tc + sc * scale_ratio + 0.5))
            if not (0 <= p2r < dst_map.height and 0 <= p2c < dst_map.width):
                continue
            pairs.append(PositivePair(
                p1=FeatureRef(src.image_id, GridPos(0, p1r, p1c)),
                p2=FeatureRef(dst.image_id,
                              GridPos(v.target.scale_index, p2r, p2c)),
            ))
    return pairs


def mine_negatives(pair: PositivePair, pyramids: list[FeaturePyramid],
                   n_neg: int) -> list[FeatureRef]:
    """The n_neg highest-cosine single-cell matches to P1 inside P2's image
    at P2's scale.  No exclusion zone: the best 'negative' may in fact be
    the true match; the loss clamp absorbs it."""
    by_id = {p.image_id: p for p in pyramids}
    src = by_id[pair.p1.image_id]
    dst = by_id[pair.p2.image_id]
    feature = src.maps[pair.p1.pos.scale_index].values[pair.p1.pos.row,
                                                       pair.p1.pos.col]
    m = dst.maps[pair.p2.pos.scale_index]
    sims = (m.values @ feature).ravel()
    take = min(n_neg, sims.size)
    order = np.lexsort((np.arange(sims.size), -sims))[:take]
    return [FeatureRef(dst.image_id,
                       GridPos(pair.p2.pos.scale_index, *divmod(int(i), m.width)))
            for i in order]


@dataclass
class MiningRound:
    """Everything one mining pass produced, for inspection and training."""

    proposals: list[ProposalRegion]
    candidates: list[CandidateMatch]
    verified: list[CandidateMatch]
    pairs: list[PositivePair]


def mine_round(pyramids: list[FeaturePyramid], cfg: MiningConfig,
               rng: np.random.Generator) -> MiningRound:
    """One full propose -> verify -> select -> pair harvest pass."""
    proposals = sample_proposals(pyramids, cfg.proposals_per_round, rng, cfg)
    candidates = []
    for q in proposals:
        try:
            candidates.append(propose_candidate(q, pyramids, cfg, rng))
        except ValueError:
            continue
    for c in candidates:
        c.votes = verify_candidate(c, pyramids, cfg)
    verified = select_verified(candidates, cfg.verified_fraction) if candidates else []
    pairs = []
    for v in verified:
        for pair in generate_positive_pairs(v, pyramids, cfg):
            pair.negatives = mine_negatives(pair, pyramids, cfg.n_neg)
            pairs.append(pair)
    return MiningRound(proposals=proposals, candidates=candidates,
                       verified=verified, pairs=pairs)
