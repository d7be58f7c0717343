import numpy as np
import pytest

from qpp.core import Orientation
from qpp.errors import MissingDetections
from qpp.io import Box, DetectionFile
from qpp.kmeans import fit_kmeans
from qpp.classhead import train_class_head
from qpp.pre_retrieval import (
    density_predictor,
    detection_predictor,
    dispersion_predictor,
    kurtosis_predictor,
    objects_over_area,
    register_external_predictor,
)
from tests.conftest import random_store


class TestObjectsOverArea:
    def test_worked_example(self):
        # two boxes, areas 6 and 2: 2 / ((6 + 2) / 2) = 0.5
        dets = DetectionFile({"q": (Box(2.0, 3.0), Box(1.0, 2.0))})
        assert objects_over_area(dets, "q") == pytest.approx(0.5)

    def test_single_unit_box(self):
        dets = DetectionFile({"q": (Box(1.0, 1.0),)})
        assert objects_over_area(dets, "q") == pytest.approx(1.0)

    def test_empty_list_scores_zero(self):
        dets = DetectionFile({"q": ()})
        assert objects_over_area(dets, "q") == 0.0

    def test_box_order_invariance(self):
        rng = np.random.default_rng(0)
        boxes = tuple(Box(float(w), float(h)) for w, h in rng.uniform(0.1, 9, (40, 2)))
        a = objects_over_area(DetectionFile({"q": boxes}), "q")
        b = objects_over_area(DetectionFile({"q": boxes[::-1]}), "q")
        assert a == b  # fsum makes the value order independent

    def test_many_small_boxes_score_higher_than_one_big(self):
        small = DetectionFile({"q": tuple(Box(0.5, 0.5) for _ in range(10))})
        big = DetectionFile({"q": (Box(5.0, 5.0),)})
        assert objects_over_area(small, "q") > objects_over_area(big, "q")

    def test_missing_query_raises(self):
        dets = DetectionFile({"q": ()})
        with pytest.raises(MissingDetections):
            objects_over_area(dets, "other")


class TestPredictorWrappers:
    def test_detection_predictor(self):
        dets = DetectionFile({"q1": (Box(1.0, 1.0),), "q2": ()})
        out = detection_predictor(dets, ["q1", "q2"])
        assert out.name == "objects_over_area"
        assert out.orientation is Orientation.HIGHER_IS_HARDER
        assert out.scores["q2"] == 0.0

    def test_density_predictor(self):
        docs = random_store(60, 6, seed=1, normalized=False)
        queries = random_store(5, 6, seed=2, prefix="q", normalized=False)
        model = fit_kmeans(docs, k=4, seed=0)
        out = density_predictor(model, queries)
        assert out.name == "cluster_density"
        assert out.orientation is Orientation.HIGHER_IS_HARDER
        assert set(out.scores) == set(queries.ids)
        assert all(v >= 0 for v in out.scores.values())

    def test_classhead_predictors(self):
        docs = random_store(40, 6, seed=3, normalized=False)
        labels = np.array([0, 1] * 20)
        head = train_class_head(docs, labels, epochs=2)
        queries = random_store(4, 6, seed=4, prefix="q", normalized=False)
        disp = dispersion_predictor(head, queries)
        kurt = kurtosis_predictor(head, queries)
        assert disp.name == "class_dispersion"
        assert kurt.name == "class_kurtosis"
        assert disp.orientation is Orientation.HIGHER_IS_BETTER
        assert kurt.orientation is Orientation.HIGHER_IS_BETTER
        assert set(disp.scores) == set(queries.ids)

    def test_external_scores_round_trip(self, tmp_path):
        from qpp.core import PredictorOutput
        from qpp.io import write_scores

        out = PredictorOutput("ae_mse", Orientation.HIGHER_IS_HARDER, {"q": 0.031})
        path = tmp_path / "ae.tsv"
        write_scores(out, path)
        back = register_external_predictor(path)
        assert back.name == "ae_mse"
        assert back.orientation is Orientation.HIGHER_IS_HARDER
        assert back.scores == out.scores
