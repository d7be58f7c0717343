import math

import pytest

from adapters.detector import detect_boxes, filter_boxes
from adapters.errors import MissingWeights

from qpp.io import load_detections

from .conftest import write_blank, write_scene


def test_filter_boxes_threshold_and_geometry():
    boxes = [
        (0.0, 0.0, 10.0, 5.0),   # kept
        (3.0, 3.0, 3.0, 9.0),    # zero width
        (1.0, 8.0, 4.0, 8.0),    # zero height
        (0.0, 0.0, math.inf, 5.0),
        (2.0, 2.0, 6.0, 6.0),    # below threshold
    ]
    scores = [0.9, 0.8, 0.8, 0.9, 0.2]
    kept = filter_boxes(boxes, scores, score_threshold=0.5)
    assert [(b.w, b.h) for b in kept] == [(10.0, 5.0)]


def test_filter_boxes_empty_in_empty_out():
    assert filter_boxes([], [], 0.5) == ()


def test_blank_image_yields_empty_box_list(tmp_path):
    queries = tmp_path / "queries"
    queries.mkdir()
    write_blank(queries / "blank.png")
    write_scene(queries / "scene.png", seed=9)
    out = detect_boxes(
        queries, tmp_path / "dets.jsonl", score_threshold=0.0, min_size=64, max_size=64
    )
    dets = load_detections(out)
    assert dets.for_query("blank") == ()
    assert sorted(dets.boxes) == ["blank", "scene"]
    for box in dets.for_query("scene"):
        assert box.w > 0 and box.h > 0


def test_missing_checkpoint_rejected(tmp_path):
    with pytest.raises(MissingWeights):
        detect_boxes(tmp_path, tmp_path / "d.jsonl", weights=tmp_path / "absent.pt")
