"""Convert VIA (VGG Image Annotator) exports to JSON-lines annotations.

Output lines use the evaluation format consumed by the matching engine:
{"image_id": ..., "pattern_id": ..., "box": [x, y, w, h]} with the box in
original-image pixels.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

logger = logging.getLogger(__name__)


class ConversionReport:
    """What was converted, what was skipped, and why."""

    def __init__(self):
        self.converted = 0
        self.skipped_non_rect = 0
        self.unknown_images: list[str] = []

    def __repr__(self):
        return (f"ConversionReport(converted={self.converted}, "
                f"skipped_non_rect={self.skipped_non_rect}, "
                f"unknown_images={self.unknown_images!r})")


def _filename_index(manifest: list[dict]) -> dict[str, str]:
    """Map both image_id and source basename to image_id."""
    index = {}
    for entry in manifest:
        index[entry["image_id"]] = entry["image_id"]
        index[Path(entry["source_path"]).name] = entry["image_id"]
    return index


def _iter_regions(image_record: dict):
    regions = image_record.get("regions", [])
    # VIA 1.x exports regions as a dict keyed by index, 2.x as a list.
    if isinstance(regions, dict):
        regions = [regions[k] for k in sorted(regions)]
    return regions


def convert_annotations(via_export: dict,
                        manifest: list[dict]
                        ) -> tuple[list[dict], ConversionReport]:
    """VIA project/export dict -> (annotation rows, report).

    Rectangular regions with a `pattern` attribute become one row each.
    Non-rectangular regions are skipped with a warning; annotations on
    images absent from the manifest are rejected and listed in the
    report.
    """
    index = _filename_index(manifest)
    report = ConversionReport()
    rows = []
    # VIA wraps per-image metadata under `_via_img_metadata` in project
    # files; plain exports are the metadata dict itself.
    records = via_export.get("_via_img_metadata", via_export)
    for key, record in records.items():
        filename = record.get("filename", key)
        image_id = index.get(filename) or index.get(Path(filename).name)
        if image_id is None:
            report.unknown_images.append(filename)
            continue
        for region in _iter_regions(record):
            shape = region.get("shape_attributes", {})
            if shape.get("name") != "rect":
                logger.warning("skipping non-rectangular region (%s) on %s",
                               shape.get("name"), filename)
                report.skipped_non_rect += 1
                continue
            attrs = region.get("region_attributes", {})
            rows.append({
                "image_id": image_id,
                "pattern_id": attrs.get("pattern", ""),
                "box": [float(shape["x"]), float(shape["y"]),
                        float(shape["width"]), float(shape["height"])],
            })
            report.converted += 1
    if report.unknown_images:
        logger.warning("rejected annotations for images not in manifest: %s",
                       ", ".join(report.unknown_images))
    return rows, report


def write_annotation_lines(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
