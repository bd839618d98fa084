"""Feature pyramids and one-shot detection on a synthetic pair of images.

Builds two textured images sharing one planted detail, extracts built-in
feature pyramids, and localizes the detail in the second image from a
single exemplar box in the first.
"""

import numpy as np

from patternmine import (builtin_extract, extract_detect_query,
                         make_detail_corpus, one_shot_detect)


def main():
    rng = np.random.default_rng(0)
    corpus = make_detail_corpus(rng, n_images=2, details={"sun": 2},
                                image_size=512, detail_size=192)
    a, b = corpus.image_ids()
    planted = corpus.planted[0]

    pyramids = {i: builtin_extract(corpus.images[i], image_id=i)
                for i in (a, b)}
    print(f"pyramid for {a}: "
          + ", ".join(f"{m.height}x{m.width}@{m.scale_factor:.2f}"
                      for m in pyramids[a].maps))

    query = extract_detect_query(corpus.images[planted.source_image_id],
                                 planted.source_box)
    query = type(query)(source_image_id=planted.source_image_id,
                        cells=query.cells, origin=query.origin)
    targets = [pyramids[i] for i in (a, b)
               if i != planted.source_image_id]
    detections = one_shot_detect(query, targets)

    print(f"query: {planted.source_box} in {planted.source_image_id}")
    for d in detections[:3]:
        x, y, w, h = (round(v) for v in d.box)
        print(f"  detected in {d.image_id} at ({x},{y},{w},{h}) "
              f"score {d.score:.3f}")
    print(f"ground truth (base frame): "
          f"{tuple(round(v * 640 / 512) for v in planted.target_box)}")


if __name__ == "__main__":
    main()
