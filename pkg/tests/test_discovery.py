import itertools

import numpy as np
import pytest

from patternmine.discovery import (
    Cluster,
    DiscoveryConfig,
    RegionGraph,
    RegionNode,
    UnionFind,
    build_graph,
    clusters_to_json,
    dense_correspondences,
    discover_all_pairs,
    discover_pair,
    extract_clusters,
    localize_by_discovery,
    pairs_from_json,
    pairs_to_json,
)
from patternmine.features import builtin_extract
from patternmine.geometry import AffineTransform, ScoredPair
from patternmine.matching import box_iou
from patternmine.synthetic import make_detail_corpus, texture_image


def sp(src, dst, src_box, dst_box, score=1.0):
    return ScoredPair(source_image_id=src, target_image_id=dst,
                      transform=AffineTransform(np.array([[1.0, 0, 0], [0, 1.0, 0]])),
                      inliers=[], score=score,
                      source_box=src_box, target_box=dst_box)


class TestDenseCorrespondences:
    def test_self_match_is_identity(self):
        rng = np.random.default_rng(0)
        img = texture_image(rng, 400, 400)
        pyr = builtin_extract(img, image_id="a")
        corrs = dense_correspondences(pyr, pyr)
        same = sum(1 for c in corrs if c.source_xy == c.target_xy
                   and abs(c.similarity - 1.0) < 1e-5)
        assert same / len(corrs) > 0.95


class TestDiscoverPair:
    def test_self_pair_identity_transform(self):
        rng = np.random.default_rng(1)
        img = texture_image(rng, 480, 360)
        pyr = builtin_extract(img, image_id="a")
        pairs = discover_pair(pyr, pyr, DiscoveryConfig(), seed=0)
        assert pairs
        top = pairs[0]
        ident = np.array([[1.0, 0, 0], [0, 1.0, 0]])
        assert np.abs(top.transform.matrix - ident).max() < 0.05
        # region covers most of the base frame (640 x 480)
        assert top.source_box[2] > 0.8 * 640
        assert top.score > 0.8

    def test_noise_pairs_rarely_score(self):
        above = 0
        cfg = DiscoveryConfig()
        for trial in range(100):
            rng = np.random.default_rng(5000 + trial)
            a = builtin_extract(texture_image(rng, 320, 320), image_id="a")
            b = builtin_extract(texture_image(rng, 320, 320), image_id="b")
            if discover_pair(a, b, cfg, seed=trial):
                above += 1
        assert above <= 5

    def test_planted_patch_found(self):
        rng = np.random.default_rng(2)
        corpus = make_detail_corpus(rng, n_images=2, details={"d": 2},
                                    image_size=512, detail_size=256)
        ids = corpus.image_ids()
        pyrs = {i: builtin_extract(corpus.images[i], image_id=i) for i in ids}
        a, b = (p for p in corpus.planted)
        pairs = discover_pair(pyrs[a.source_image_id], pyrs[b.source_image_id],
                              DiscoveryConfig(), seed=0)
        assert len(pairs) >= 1
        top = pairs[0]
        ratio = 640 / 512  # base frame vs original pixels
        planted_box = tuple(v * ratio for v in a.source_box)
        assert box_iou(top.source_box, planted_box) >= 0.5

    def test_forward_backward_transforms_are_inverse(self):
        rng = np.random.default_rng(3)
        corpus = make_detail_corpus(rng, n_images=2, details={"d": 2},
                                    image_size=512, detail_size=256)
        a_id, b_id = corpus.image_ids()
        pa = builtin_extract(corpus.images[a_id], image_id=a_id)
        pb = builtin_extract(corpus.images[b_id], image_id=b_id)
        cfg = DiscoveryConfig()
        fwd = discover_pair(pa, pb, cfg, seed=0)
        bwd = discover_pair(pb, pa, cfg, seed=1)
        assert fwd and bwd
        m_f = np.vstack([fwd[0].transform.matrix, [0, 0, 1]])
        m_b = np.vstack([bwd[0].transform.matrix, [0, 0, 1]])
        # composing the two maps should move shared-region points by less
        # than the inlier threshold
        comp = m_b @ m_f
        x, y, w, h = fwd[0].source_box
        pts = np.array([[x, y, 1.0], [x + w, y + h, 1.0], [x + w / 2, y + h / 2, 1.0]])
        moved = (comp @ pts.T).T[:, :2]
        err = np.linalg.norm(moved - pts[:, :2], axis=1)
        assert np.all(err < cfg.scoring.inlier_threshold_px * 2)


class TestBuildGraph:
    def test_match_edges(self):
        pairs = [sp("a", "b", (0, 0, 10, 10), (5, 5, 10, 10))]
        g = build_graph(pairs)
        assert (0, 1, "match") in g.edges

    def test_identical_regions_overlap(self):
        pairs = [sp("a", "b", (0, 0, 10, 10), (0, 0, 10, 10)),
                 sp("a", "c", (0, 0, 10, 10), (3, 3, 10, 10))]
        g = build_graph(pairs)
        overlap = [(i, j) for i, j, kind in g.edges if kind == "overlap"]
        assert (0, 2) in overlap

    def test_iou_below_threshold_no_edge(self):
        # IoU = 0.4: boxes (0,0,10,10) and (0,3.75,10,10) -> 6.25*10 / 137.5
        pairs = [sp("a", "b", (0, 0, 10, 10), (0, 0, 1, 1)),
                 sp("a", "c", (0.0, 4.2857, 10, 10), (0, 0, 1, 1))]
        g = build_graph(pairs, iou_threshold=0.5)
        overlap = [e for e in g.edges if e[2] == "overlap"]
        assert not overlap

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(4)
        pairs = []
        for k in range(12):
            pairs.append(sp(f"i{int(rng.integers(3))}", f"j{int(rng.integers(3))}",
                            tuple(rng.uniform(0, 50, 4)),
                            tuple(rng.uniform(0, 50, 4))))
        g = build_graph(pairs, iou_threshold=0.5)
        got = {(min(i, j), max(i, j)) for i, j, kind in g.edges
               if kind == "overlap"}
        expected = set()
        for i, j in itertools.combinations(range(len(g.nodes)), 2):
            a, b = g.nodes[i], g.nodes[j]
            if a.image_id == b.image_id and box_iou(a.box, b.box) > 0.5:
                expected.add((i, j))
        assert got == expected


class TestExtractClusters:
    def test_chain_plus_isolate(self):
        pairs = [sp("a", "b", (0, 0, 10, 10), (0, 0, 10, 10), score=1.0),
                 sp("b", "c", (0, 0, 10, 10), (0, 0, 10, 10), score=2.0),
                 sp("x", "y", (90, 90, 5, 5), (0, 0, 5, 5), score=0.5)]
        g = build_graph(pairs)
        clusters = extract_clusters(g, pairs, min_size=2)
        sizes = sorted(len(c.members) for c in clusters)
        assert sizes == [2, 4]  # a-b-b-c chain, x-y pair
        assert clusters[0].aggregate_score == 3.0

    def test_empty(self):
        g = build_graph([])
        assert extract_clusters(g, [], min_size=2) == []

    def test_min_size_drop(self):
        pairs = [sp("a", "b", (0, 0, 10, 10), (0, 0, 10, 10))]
        g = build_graph(pairs)
        assert extract_clusters(g, pairs, min_size=3) == []

    def test_order_independence(self):
        rng = np.random.default_rng(5)
        pairs = [sp(f"i{int(rng.integers(4))}", f"j{int(rng.integers(4))}",
                    tuple(rng.uniform(0, 30, 4)), tuple(rng.uniform(0, 30, 4)),
                    score=float(rng.uniform(0.1, 1)))
                 for _ in range(10)]
        g1 = build_graph(pairs)
        c1 = extract_clusters(g1, pairs)
        perm = [pairs[i] for i in rng.permutation(len(pairs))]
        g2 = build_graph(perm)
        c2 = extract_clusters(g2, perm)
        sig1 = [sorted((n.image_id, n.box) for n in c.members) for c in c1]
        sig2 = [sorted((n.image_id, n.box) for n in c.members) for c in c2]
        assert sig1 == sig2
        assert [c.aggregate_score for c in c1] == \
               pytest.approx([c.aggregate_score for c in c2])


class TestUnionFind:
    def test_components(self):
        uf = UnionFind(6)
        uf.union(0, 1)
        uf.union(1, 2)
        uf.union(4, 5)
        roots = {uf.find(i) for i in range(3)}
        assert len(roots) == 1
        assert uf.find(3) not in roots
        assert uf.find(4) == uf.find(5) != uf.find(3)


class TestLocalize:
    def test_identical_reference_ranks_first(self):
        rng = np.random.default_rng(6)
        imgs = [texture_image(rng, 320, 320) for _ in range(3)]
        query = builtin_extract(imgs[0], image_id="query")
        refs = [builtin_extract(img, image_id=f"ref{i}")
                for i, img in enumerate(imgs)]
        ranked = localize_by_discovery(query, refs, DiscoveryConfig(), seed=0)
        assert ranked[0][0] == "ref0"
        assert ranked[0][1] > 0.8

    def test_empty_references(self):
        rng = np.random.default_rng(7)
        query = builtin_extract(texture_image(rng, 320, 320), image_id="q")
        with pytest.raises(ValueError):
            localize_by_discovery(query, [], DiscoveryConfig())


class TestSerialization:
    def test_pairs_round_trip(self):
        pairs = [sp("a", "b", (0.0, 0.0, 10.0, 10.0), (5.0, 5.0, 10.0, 10.0),
                    score=0.25)]
        back = pairs_from_json(pairs_to_json(pairs))
        assert back[0].source_image_id == "a"
        assert back[0].score == 0.25
        assert np.array_equal(back[0].transform.matrix,
                              pairs[0].transform.matrix)

    def test_clusters_json_shape(self):
        pairs = [sp("a", "b", (0, 0, 10, 10), (0, 0, 10, 10))]
        g = build_graph(pairs)
        clusters = extract_clusters(g, pairs)
        objs = clusters_to_json(clusters)
        assert objs[0]["cluster_id"] == 0
        assert len(objs[0]["members"]) == 2
