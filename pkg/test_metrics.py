# Dependencies:
# pip install pytest
import numpy as np
import pandas as pd
import pytest

from config.schemas import SceneConfig
from services.dataset_service import DatasetService, SqaDataset
from services.evaluation_service import BackgroundPredictor, EvaluationService
from utils.error_utils import LabelValueError, ShapeError, UsageError
from utils.metrics_utils import (TABLE_COLUMNS, ConfusionAccumulator, ConfusionCounts, confusion_counts, f1_score,
                                 metrics_from_counts, precision, recall)

# Published (precision, recall, F1) triples; F1 is recomputed from the first two
REPORTED_ROWS = [
    (34.940, 70.326, 46.685),
    (64.691, 52.308, 57.844),
    (51.196, 62.748, 56.386),
    (55.497, 60.698, 57.981),
    (51.376, 63.734, 56.892),
    (59.383, 61.132, 60.245),
]


def random_labels(rng, shape=(32, 32)):
    return rng.integers(0, 3, size=shape).astype(np.uint8)


@pytest.fixture(scope="module")
def tiny_dataset():
    return DatasetService(show_progress=False).generate(SceneConfig(height=64, width=64, seed=5), 6)


class TestScores:

    # F1 recomputed from reported precision and recall matches to three decimals
    @pytest.mark.parametrize("p,r,f1", REPORTED_ROWS)
    def test_reported_f1(self, p, r, f1):
        assert f1_score(p, r) == pytest.approx(f1, abs=0.005)

    # Equal precision and recall give the same F1
    @pytest.mark.parametrize("value", [0.0, 12.5, 50.0, 100.0])
    def test_equal_inputs(self, value):
        assert f1_score(value, value) == pytest.approx(value)

    # Empty denominators report 0
    def test_zero_denominators(self):
        counts = ConfusionCounts(tp=0, fp=0, tn=10, fn=0)
        assert precision(counts) == 0.0
        assert recall(counts) == 0.0
        assert f1_score(0.0, 0.0) == 0.0


class TestConfusion:

    # Counts agree with a per-pixel loop
    def test_matches_loop(self, rng):
        pred, gt = random_labels(rng), random_labels(rng)
        for class_id in range(3):
            expected = ConfusionCounts()
            for p, g in zip(pred.ravel(), gt.ravel()):
                if p == class_id and g == class_id:
                    expected.tp += 1
                elif p == class_id:
                    expected.fp += 1
                elif g == class_id:
                    expected.fn += 1
                else:
                    expected.tn += 1
            assert confusion_counts(pred, gt, class_id) == expected

    # A perfect prediction has no false positives or negatives
    def test_perfect(self, rng):
        gt = random_labels(rng)
        report = metrics_from_counts({c: confusion_counts(gt, gt, c) for c in range(3)})
        assert all(report.counts[c].fp == 0 and report.counts[c].fn == 0 for c in range(3))
        assert report.oa == 100.0

    # Shapes and values are checked
    def test_rejects_bad_input(self, rng):
        with pytest.raises(ShapeError):
            confusion_counts(random_labels(rng), random_labels(rng, (32, 31)), 1)
        with pytest.raises(LabelValueError):
            confusion_counts(np.full((2, 2), 3), np.zeros((2, 2)), 1)


class TestAggregation:

    # Two images aggregate exactly like their concatenation
    def test_micro_aggregation(self, rng):
        # Setup
        pred_a, gt_a = random_labels(rng), random_labels(rng)
        pred_b, gt_b = random_labels(rng, (32, 16)), random_labels(rng, (32, 16))

        # Execute
        split = ConfusionAccumulator()
        split.update(pred_a, gt_a)
        split.update(pred_b, gt_b)
        joined = ConfusionAccumulator()
        joined.update(np.concatenate([pred_a, pred_b], axis=1), np.concatenate([gt_a, gt_b], axis=1))

        # Assert
        assert split.counts == joined.counts
        assert split.get().row() == joined.get().row()

    # Shuffling pixels consistently changes nothing
    def test_shuffle_invariance(self, rng):
        pred, gt = random_labels(rng), random_labels(rng)
        order = rng.permutation(pred.size)
        a, b = ConfusionAccumulator(), ConfusionAccumulator()
        a.update(pred, gt)
        b.update(pred.ravel()[order], gt.ravel()[order])
        assert a.get().row() == b.get().row()

    # Merging shards is the same as one pass
    def test_merge(self, rng):
        pairs = [(random_labels(rng), random_labels(rng)) for _ in range(4)]
        whole, left, right = ConfusionAccumulator(), ConfusionAccumulator(), ConfusionAccumulator()
        for index, (p, g) in enumerate(pairs):
            whole.update(p, g)
            (left if index < 2 else right).update(p, g)
        assert left.merge(right).counts == whole.counts

    # Every figure stays within [0, 100]
    def test_ranges(self, rng):
        for _ in range(20):
            acc = ConfusionAccumulator()
            acc.update(random_labels(rng, (8, 8)), random_labels(rng, (8, 8)))
            assert all(0.0 <= v <= 100.0 for v in acc.get().row().values())


class TestReport:

    # The table keeps precision, recall, F1 per class, then OA
    def test_csv_columns(self, rng, tmp_path):
        acc = ConfusionAccumulator()
        acc.update(random_labels(rng), random_labels(rng))
        path = str(tmp_path / "metrics.csv")
        acc.get().to_csv(path, "Baseline")
        frame = pd.read_csv(path)
        assert list(frame.columns) == ["Method"] + TABLE_COLUMNS
        assert frame.loc[0, "Method"] == "Baseline"

    # JSON output carries both classes and the counts
    def test_to_dict(self, rng):
        acc = ConfusionAccumulator()
        acc.update(random_labels(rng), random_labels(rng))
        data = acc.get().to_dict()
        assert set(data) == {'missed', 'mistaken', 'oa', 'counts'}
        assert set(data['counts']) == {'0', '1', '2'}


class TestEvaluationService:

    # Predicting background everywhere scores F1 0 and OA equal to the background share
    def test_background_predictor(self, tiny_dataset):
        report = EvaluationService(workers=1, batch_size=4).evaluate(BackgroundPredictor(), tiny_dataset)
        labels = np.stack([t.qa_labels for t in tiny_dataset])
        assert report.missed.f1 == 0.0
        assert report.mistaken.f1 == 0.0
        assert report.oa == pytest.approx(100.0 * np.mean(labels == 0))

    # Sharding across workers gives the same counts
    def test_workers_agree(self, tiny_dataset):
        single = EvaluationService(workers=1, batch_size=2).evaluate(BackgroundPredictor(), tiny_dataset)
        sharded = EvaluationService(workers=3, batch_size=2).evaluate(BackgroundPredictor(), tiny_dataset)
        assert single.counts == sharded.counts

    # An empty dataset is a usage error
    def test_empty_dataset(self):
        with pytest.raises(UsageError):
            EvaluationService().evaluate(BackgroundPredictor(), SqaDataset([]))

    # Predictions and overlays are written per scene
    def test_write_predictions(self, tiny_dataset, tmp_path):
        written = EvaluationService().write_predictions(BackgroundPredictor(), tiny_dataset, str(tmp_path))
        assert written == len(tiny_dataset)
        assert (tmp_path / "00000_pred.pgm").exists()
        assert (tmp_path / "00000_pred.ppm").exists()
