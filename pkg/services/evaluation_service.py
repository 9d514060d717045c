"""
Evaluation Service

Runs a predictor over a dataset and micro-aggregates the per-class confusion
counts of every pixel before computing precision, recall, F1 and OA. The
dataset may be sharded across threads; integer counts merge in any order.
"""
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Protocol
import logging
import os

import numpy as np

from engine.tensor import Tensor
from models.backbones import FeaturePyramid
from models.network import SqaNetwork
from services.dataset_service import SqaDataset, SqaTriplet, stack_batch
from utils.env_utils import get_worker_count
from utils.error_utils import UsageError
from utils.metrics_utils import ConfusionAccumulator, MetricsReport
from utils.raster_utils import write_labels, write_overlay

# Configure logging
logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)


class Predictor(Protocol):
    def __call__(self, images: np.ndarray, masks: np.ndarray) -> np.ndarray:
        """(B, 3, H, W) images and (B, 1, H, W) masks to (B, H, W) labels."""


class NetworkPredictor:
    """Argmax of the network logits, in eval mode."""

    def __init__(self, network: SqaNetwork, vit_features: Optional[FeaturePyramid] = None):
        self.network = network.eval()
        self.vit_features = vit_features

    def logits(self, images: np.ndarray, masks: np.ndarray) -> np.ndarray:
        return self.network(Tensor(images), Tensor(masks), self.vit_features).logits.data

    def __call__(self, images: np.ndarray, masks: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(images, masks), axis=1).astype(np.uint8)


class BackgroundPredictor:
    """Predicts background everywhere."""

    def __call__(self, images: np.ndarray, masks: np.ndarray) -> np.ndarray:
        return np.zeros((images.shape[0],) + images.shape[2:], dtype=np.uint8)


class EvaluationService:
    def __init__(self, workers: int = 1, batch_size: int = 8):
        self.workers = get_worker_count(workers)
        self.batch_size = batch_size
        logger.info(f"Initializing EvaluationService with {self.workers} worker(s)")

    def _evaluate_shard(self, predictor: Predictor, triplets: List[SqaTriplet]) -> ConfusionAccumulator:
        accumulator = ConfusionAccumulator()
        for start in range(0, len(triplets), self.batch_size):
            images, masks, labels = stack_batch(triplets[start:start + self.batch_size])
            accumulator.update(predictor(images, masks), labels)
        return accumulator

    def evaluate(self, predictor: Predictor, dataset: SqaDataset) -> MetricsReport:
        """
        Micro-aggregated metrics of `predictor` on `dataset`.

        Raises:
            UsageError: If the dataset is empty
        """
        if len(dataset) == 0:
            raise UsageError("Cannot evaluate on an empty dataset")
        triplets = list(dataset)
        shards = [s for s in np.array_split(np.arange(len(triplets)), self.workers) if len(s)]
        with ThreadPoolExecutor(max_workers=len(shards)) as pool:
            parts = list(pool.map(lambda s: self._evaluate_shard(predictor, [triplets[i] for i in s]), shards))
        total = ConfusionAccumulator()
        for part in parts:
            total.merge(part)
        report = total.get()
        logger.info(f"Evaluated {len(triplets)} scenes ({total.pixels} pixels): "
                    f"missed F1 {report.missed.f1:.3f}, mistaken F1 {report.mistaken.f1:.3f}, OA {report.oa:.3f}")
        return report

    def write_predictions(self, predictor: Predictor, dataset: SqaDataset, output_dir: str) -> int:
        """Predicted label maps and overlays for every triplet; returns how many were written."""
        os.makedirs(output_dir, exist_ok=True)
        for triplet in dataset:
            images, masks, _ = stack_batch([triplet])
            predicted = predictor(images, masks)[0]
            write_labels(os.path.join(output_dir, f"{triplet.index:05d}_pred.pgm"), predicted)
            write_overlay(os.path.join(output_dir, f"{triplet.index:05d}_pred.ppm"), predicted, triplet.image)
        return len(dataset)
