"""Pattern discovery end to end: pairs, clusters, and an HTML report.

Plants two recurring details across a corpus, discovers near-duplicate
regions with Hough voting and RANSAC verification, clusters them over
the region graph, and writes a browsable report to ./discovery_report.
"""

from pathlib import Path

import numpy as np
from PIL import Image

from patternmine import (DiscoveryConfig, ImageManifestEntry, build_graph,
                         builtin_extract, clusters_to_json,
                         discover_all_pairs, extract_clusters)
from patternmine.report import emit_report
from patternmine.synthetic import make_detail_corpus


def main():
    rng = np.random.default_rng(21)
    corpus = make_detail_corpus(rng, n_images=12,
                                details={"detailA": 4, "detailB": 3},
                                image_size=448, detail_size=160)
    pyramids = [builtin_extract(corpus.images[i], image_id=i)
                for i in corpus.image_ids()]

    pairs = discover_all_pairs(pyramids, DiscoveryConfig(), seed=0)
    print(f"{len(pairs)} scored pairs above threshold")

    graph = build_graph(pairs, DiscoveryConfig().iou_threshold)
    clusters = extract_clusters(graph, pairs, min_size=2)
    for c in clusters:
        images = sorted({n.image_id for n in c.members})
        print(f"cluster {c.cluster_id}: {len(c.members)} regions over "
              f"{len(images)} images, score {c.aggregate_score:.4f}")

    out = Path("discovery_report")
    img_dir = out / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for iid in corpus.image_ids():
        path = img_dir / f"{iid}.png"
        Image.fromarray(corpus.images[iid]).save(path)
        h, w = corpus.images[iid].shape[:2]
        entries.append(ImageManifestEntry(
            image_id=iid, source_path=str(path), pixel_width=w,
            pixel_height=h, pyramid_path=""))
    index = emit_report(clusters_to_json(clusters), entries, out)
    print(f"report written to {index}")


if __name__ == "__main__":
    main()
