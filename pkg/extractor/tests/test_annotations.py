import json

from amfpextract import convert_annotations, write_annotation_lines

MANIFEST = [
    {"image_id": "img1", "source_path": "/data/painting_a.jpg",
     "pixel_width": 640, "pixel_height": 480, "pyramid_path": "img1.amfp"},
    {"image_id": "img2", "source_path": "/data/painting_b.jpg",
     "pixel_width": 512, "pixel_height": 512, "pyramid_path": "img2.amfp"},
]


def rect(x, y, w, h, pattern):
    return {"shape_attributes": {"name": "rect", "x": x, "y": y,
                                 "width": w, "height": h},
            "region_attributes": {"pattern": pattern}}


def test_empty_export():
    rows, report = convert_annotations({}, MANIFEST)
    assert rows == []
    assert report.converted == 0


def test_single_rectangle_field_mapping():
    via = {"painting_a.jpg123": {"filename": "painting_a.jpg",
                                 "regions": [rect(10, 20, 30, 40, "lion_front")]}}
    rows, report = convert_annotations(via, MANIFEST)
    assert rows == [{"image_id": "img1", "pattern_id": "lion_front",
                     "box": [10.0, 20.0, 30.0, 40.0]}]
    assert report.converted == 1


def test_three_boxes_three_lines(tmp_path):
    via = {
        "painting_a.jpg1": {"filename": "painting_a.jpg",
                            "regions": [rect(10, 20, 30, 40, "lion_front"),
                                        rect(100, 50, 60, 60, "lion_side")]},
        "painting_b.jpg2": {"filename": "painting_b.jpg",
                            "regions": [rect(5, 5, 25, 35, "lion_front")]},
    }
    rows, report = convert_annotations(via, MANIFEST)
    assert report.converted == 3
    out = tmp_path / "ann.jsonl"
    write_annotation_lines(out, rows)
    lines = [json.loads(l) for l in out.read_text().splitlines()]
    assert lines == [
        {"image_id": "img1", "pattern_id": "lion_front", "box": [10, 20, 30, 40]},
        {"image_id": "img1", "pattern_id": "lion_side", "box": [100, 50, 60, 60]},
        {"image_id": "img2", "pattern_id": "lion_front", "box": [5, 5, 25, 35]},
    ]


def test_non_rect_skipped_with_count():
    via = {"painting_a.jpg": {"filename": "painting_a.jpg", "regions": [
        {"shape_attributes": {"name": "circle", "cx": 5, "cy": 5, "r": 3},
         "region_attributes": {"pattern": "sun"}},
        rect(1, 2, 3, 4, "moon"),
    ]}}
    rows, report = convert_annotations(via, MANIFEST)
    assert report.skipped_non_rect == 1
    assert len(rows) == 1 and rows[0]["pattern_id"] == "moon"


def test_unknown_image_rejected_with_report():
    via = {"stranger.jpg": {"filename": "stranger.jpg",
                            "regions": [rect(1, 2, 3, 4, "x")]}}
    rows, report = convert_annotations(via, MANIFEST)
    assert rows == []
    assert report.unknown_images == ["stranger.jpg"]


def test_via1_dict_regions_and_project_wrapper():
    via = {"_via_img_metadata": {
        "painting_b.jpg99": {"filename": "painting_b.jpg",
                             "regions": {"0": rect(7, 8, 9, 10, "tree")}}}}
    rows, _ = convert_annotations(via, MANIFEST)
    assert rows == [{"image_id": "img2", "pattern_id": "tree",
                     "box": [7.0, 8.0, 9.0, 10.0]}]
