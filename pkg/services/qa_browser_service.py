"""
QA Browser Service

UI-facing operations of the interactive browser: open a dataset directory,
page through its scenes, render missed/mistaken overlays and assess a scene with
a trained network. Every public method returns the standard
{'success': ..., 'data' | 'error': ...} envelope.
"""
from typing import Any, Dict, Optional
import logging
import math

import numpy as np
import pandas as pd

from services.dataset_service import DatasetService, SqaDataset
from services.inference_service import InferenceService
from utils.error_utils import UsageError, with_error_handling
from utils.metrics_utils import ConfusionAccumulator
from utils.raster_utils import colorize, to_uint8

# Configure logging
logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)


class QaBrowserService:
    """
    Service behind the QA browser.
    Holds the opened dataset and, optionally, a loaded network.
    """

    def __init__(self, dataset_service: Optional[DatasetService] = None):
        self.dataset_service = dataset_service or DatasetService(show_progress=False)
        self.dataset: Optional[SqaDataset] = None
        self.inference: Optional[InferenceService] = None

    def _require_dataset(self) -> SqaDataset:
        if self.dataset is None:
            raise UsageError("Open a dataset first")
        return self.dataset

    @with_error_handling()
    def open_dataset(self, directory: str, split: Optional[str] = None) -> Dict[str, Any]:
        """
        Load a dataset directory.

        Returns:
            Dictionary with scene count, split sizes and sensor mix
        """
        self.dataset = self.dataset_service.load(directory, split)
        sensors = pd.Series([t.metadata.get('sensor', "unknown") for t in self.dataset]).value_counts()
        return {
            'directory': directory,
            'count': len(self.dataset),
            'splits': self.dataset.manifest.get('splits', {}),
            'sensors': sensors.to_dict(),
        }

    @with_error_handling()
    def list_scenes(self, page: int = 1, page_size: int = 25) -> Dict[str, Any]:
        """
        Paginated scene table.

        Returns:
            Dictionary with the page DataFrame and pagination info
        """
        dataset = self._require_dataset()
        rows = []
        for triplet in dataset:
            counts = np.bincount(triplet.qa_labels.ravel(), minlength=3)
            rows.append({
                'index': triplet.index,
                'split': triplet.metadata.get('split'),
                'sensor': triplet.metadata.get('sensor'),
                'buildings': len(triplet.metadata.get('buildings', [])),
                'missed_px': int(counts[1]),
                'mistaken_px': int(counts[2]),
            })
        frame = pd.DataFrame(rows)
        total_pages = max(1, math.ceil(len(frame) / page_size))
        page = min(max(1, page), total_pages)
        start = (page - 1) * page_size
        return {
            'data': frame.iloc[start:start + page_size].reset_index(drop=True),
            'total_rows': len(frame),
            'total_pages': total_pages,
            'has_previous': page > 1,
            'has_next': page < total_pages,
        }

    @with_error_handling()
    def get_scene(self, position: int) -> Dict[str, Any]:
        """
        Images of one scene ready for display.

        Returns:
            Dictionary with uint8 image, mask, ground truth and overlay plus the instance table
        """
        dataset = self._require_dataset()
        if not 0 <= position < len(dataset):
            raise UsageError("Scene position out of range", {'position': position, 'count': len(dataset)})
        triplet = dataset[position]
        return {
            'image': to_uint8(triplet.image),
            'mask': triplet.seg_mask[0] * 255,
            'gt': triplet.gt_mask * 255,
            'overlay': colorize(triplet.qa_labels, triplet.image),
            'instances': pd.DataFrame(triplet.metadata.get('perturbations', [])),
            'metadata': {k: v for k, v in triplet.metadata.items() if k not in ('perturbations', 'buildings')},
        }

    @with_error_handling()
    def load_model(self, weights_path: str, config_path: Optional[str] = None) -> Dict[str, Any]:
        self.inference = InferenceService.from_files(weights_path, config_path or None)
        network = self.inference.network
        return {
            'name': network.config.ablation_name,
            'trainable_parameters': network.num_parameters(trainable=True),
            'frozen_parameters': network.num_parameters(trainable=False),
        }

    @with_error_handling()
    def assess_scene(self, position: int) -> Dict[str, Any]:
        """
        Predict QA labels for one scene.

        Returns:
            Dictionary with the predicted overlay and the scene's metrics table
        """
        if self.inference is None:
            raise UsageError("Load a model first")
        dataset = self._require_dataset()
        if not 0 <= position < len(dataset):
            raise UsageError("Scene position out of range", {'position': position, 'count': len(dataset)})
        triplet = dataset[position]
        predicted, _ = self.inference.predict(triplet.image, triplet.seg_mask[0])
        accumulator = ConfusionAccumulator()
        accumulator.update(predicted, triplet.qa_labels)
        return {
            'overlay': colorize(predicted, triplet.image),
            'metrics': accumulator.get().to_frame(self.inference.network.config.ablation_name),
        }
