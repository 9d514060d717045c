# Dependencies:
# pip install pytest
import json
import os
import time

import pytest

from config.schemas import LossConfig, ModelConfig, OptimizerConfig, SceneConfig, TrainConfig
from services.dataset_service import DatasetService, SqaDataset
from services.evaluation_service import BackgroundPredictor, EvaluationService, NetworkPredictor
from services.training_service import TrainingService

SCORES_PATH = os.path.join(os.path.dirname(os.path.abspath(__file__)), "benchmark_scores.json")


@pytest.fixture
def locked_scores():
    """Benchmark settings and the scores locked by the first seeded run (None until then)."""
    with open(SCORES_PATH) as f:
        return json.load(f)


def error_f1(report):
    return {'missed': report.missed.f1, 'mistaken': report.mistaken.f1}


@pytest.mark.slow
class TestBenchmark:

    # Ten epochs beat the untrained network and the background predictor on both error classes
    def test_training_beats_references(self, locked_scores):
        # Setup
        scenes = locked_scores['scenes']
        config = SceneConfig(height=scenes['height'], width=scenes['width'], seed=scenes['seed'])
        data = DatasetService(show_progress=False).generate(config, scenes['train'] + scenes['test'])
        train_set = SqaDataset(data.triplets[:scenes['train']])
        test_set = SqaDataset(data.triplets[scenes['train']:])
        service = TrainingService(ModelConfig.toy(), LossConfig(), OptimizerConfig(),
                                  TrainConfig(epochs=locked_scores['epochs'], seed=0, show_progress=False))
        evaluation = EvaluationService()
        network = service.build_network()
        untrained = error_f1(evaluation.evaluate(NetworkPredictor(network), test_set))
        background = error_f1(evaluation.evaluate(BackgroundPredictor(), test_set))
        started = time.process_time()

        # Execute
        result = service.train(train_set, network)
        trained = error_f1(evaluation.evaluate(NetworkPredictor(result.network), test_set))

        # Assert
        assert time.process_time() - started <= 600
        assert background == {'missed': 0.0, 'mistaken': 0.0}
        for name in ('missed', 'mistaken'):
            assert trained[name] > untrained[name]
            assert trained[name] > background[name]

        if locked_scores['locked'] is None:
            with open(SCORES_PATH, "w") as f:
                json.dump(dict(locked_scores, locked=trained), f, indent=2)
        else:
            for name, score in locked_scores['locked'].items():
                assert trained[name] == pytest.approx(score, abs=locked_scores['tolerance'])
