"""Static HTML reports for discovered clusters.

One page per cluster showing the cropped member regions, plus an index
sorted by aggregate score.  Pages are plain static HTML with no scripting
and no timestamps, so a re-run over identical inputs reproduces the same
bytes.
"""

from __future__ import annotations

import html
import logging
from pathlib import Path

import numpy as np
from PIL import Image

from .features import CELL_STRIDE_PX, DEFAULT_BASE_MAX_DIM, ImageManifestEntry

log = logging.getLogger("patternmine.report")

_PAGE = """<!DOCTYPE html>
<html><head><meta charset="utf-8"><title>{title}</title>
<style>
body {{ font-family: sans-serif; margin: 1.5em; }}
.tile {{ display: inline-block; margin: 6px; text-align: center;
        vertical-align: top; }}
.tile img {{ border: 1px solid #999; max-width: 220px; }}
.placeholder {{ width: 160px; height: 120px; background: #ddd;
               line-height: 120px; border: 1px solid #999; }}
table {{ border-collapse: collapse; }}
td, th {{ border: 1px solid #aaa; padding: 4px 10px; }}
</style></head><body>
<h1>{title}</h1>
{body}
</body></html>
"""


def _crop_region(entry: ImageManifestEntry, box) -> Image.Image | None:
    """Crop a base-frame box out of the original image, or None."""
    try:
        img = Image.open(entry.source_path).convert("RGB")
    except OSError:
        return None
    ratio = max(img.size) / (DEFAULT_BASE_MAX_DIM * CELL_STRIDE_PX)
    x, y, w, h = (v * ratio for v in box)
    w = max(w, CELL_STRIDE_PX * ratio)
    h = max(h, CELL_STRIDE_PX * ratio)
    left = int(np.clip(x, 0, img.width - 1))
    top = int(np.clip(y, 0, img.height - 1))
    right = int(np.clip(x + w, left + 1, img.width))
    bottom = int(np.clip(y + h, top + 1, img.height))
    return img.crop((left, top, right, bottom))


def _tile(label: str, crop_rel: str | None) -> str:
    caption = html.escape(label)
    if crop_rel is None:
        return (f'<div class="tile"><div class="placeholder">unreadable'
                f'</div><br>{caption}</div>')
    return (f'<div class="tile"><img src="{crop_rel}" alt="{caption}">'
            f'<br>{caption}</div>')


def emit_report(clusters: list[dict], manifest: list[ImageManifestEntry],
                out_dir) -> Path:
    """Write index.html plus one page per cluster; returns the index path.

    ``clusters`` is the JSON form (see clusters_to_json).  Unreadable
    member images degrade to placeholder tiles rather than aborting.
    """
    out = Path(out_dir)
    crops = out / "crops"
    crops.mkdir(parents=True, exist_ok=True)
    by_id = {e.image_id: e for e in manifest}

    ordered = sorted(clusters, key=lambda c: -float(c["aggregate_score"]))
    rows = []
    for rank, cluster in enumerate(ordered):
        cid = cluster.get("cluster_id", rank)
        page = f"cluster_{cid:04d}.html"
        tiles = []
        for i, member in enumerate(cluster["members"]):
            iid = member["image_id"]
            entry = by_id.get(iid)
            crop = _crop_region(entry, member["box"]) if entry else None
            if crop is None:
                log.warning("cluster %s: could not read image %s", cid, iid)
                tiles.append(_tile(iid, None))
                continue
            name = f"c{cid:04d}_m{i:03d}.png"
            crop.save(crops / name)
            label = f'<a href="{html.escape(entry.source_path)}">{iid}</a>'
            tiles.append(_tile(iid, f"crops/{name}").replace(
                html.escape(iid), label, 1))
        body = (f"<p>aggregate score {cluster['aggregate_score']:.6f}, "
                f"{len(cluster['members'])} regions</p>" + "".join(tiles))
        (out / page).write_text(_PAGE.format(
            title=f"Cluster {cid}", body=body))
        rows.append(f'<tr><td><a href="{page}">cluster {cid}</a></td>'
                    f'<td>{len(cluster["members"])}</td>'
                    f'<td>{cluster["aggregate_score"]:.6f}</td></tr>')

    table = ("<table><tr><th>cluster</th><th>regions</th><th>score</th>"
             "</tr>" + "".join(rows) + "</table>") if rows else \
        "<p>No clusters.</p>"
    index = out / "index.html"
    index.write_text(_PAGE.format(title="Discovered clusters", body=table))
    return index
