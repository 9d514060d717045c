"""
Inference Service

Quality assessment of single (image, mask) pairs from files, with an
optional precomputed frozen-encoder feature file, plus the model-free
comparison of a segmentation against its ground truth.
"""
from typing import Dict, Optional, Tuple
import logging
import os

import numpy as np

from config.schemas import ModelConfig, load_json_config
from engine.tensor import Tensor
from models.backbones import load_vit_features, save_vit_features
from models.network import SqaNetwork
from services.evaluation_service import NetworkPredictor
from utils.error_utils import ShapeError
from utils.mask_utils import sqa_ground_truth
from utils.raster_utils import read_image, read_mask, write_labels, write_overlay

# Configure logging
logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)


def resolve_model_config(weights_path: str, config_path: Optional[str] = None) -> ModelConfig:
    """The explicit config file, else model_config.json next to the weights."""
    config_path = config_path or os.path.join(os.path.dirname(weights_path), "model_config.json")
    return load_json_config(config_path, ModelConfig)


def load_network(weights_path: str, config_path: Optional[str] = None) -> SqaNetwork:
    network = SqaNetwork(resolve_model_config(weights_path, config_path))
    return network.load(weights_path).eval()


class InferenceService:
    def __init__(self, network: SqaNetwork):
        self.network = network.eval()
        logger.info(f"Initializing InferenceService for {network.config.ablation_name}")

    @classmethod
    def from_files(cls, weights_path: str, config_path: Optional[str] = None) -> "InferenceService":
        return cls(load_network(weights_path, config_path))

    def predict(self, image: np.ndarray, mask: np.ndarray,
                vit_features_path: Optional[str] = None) -> Tuple[np.ndarray, np.ndarray]:
        """
        Args:
            image: (3, H, W) image in [0, 1]
            mask: (H, W) binary segmentation mask
            vit_features_path: Optional file of precomputed frozen-encoder stage maps

        Returns:
            (labels (H, W) uint8, logits (3, H, W))
        """
        if image.shape[1:] != mask.shape:
            raise ShapeError("Image and mask differ in size", {'image': list(image.shape), 'mask': list(mask.shape)})
        features = load_vit_features(vit_features_path) if vit_features_path else None
        predictor = NetworkPredictor(self.network, features)
        logits = predictor.logits(image[None].astype(np.float32), mask[None, None].astype(np.float32))[0]
        return np.argmax(logits, axis=0).astype(np.uint8), logits

    def infer_files(self, image_path: str, mask_path: str, output_dir: str,
                    vit_features_path: Optional[str] = None) -> Dict[str, object]:
        """
        Write qa_labels.pgm and qa_overlay.ppm for one pair.

        Returns:
            Output paths and per-class pixel counts
        """
        image = read_image(image_path)
        mask = read_mask(mask_path)
        labels, _ = self.predict(image, mask, vit_features_path)
        os.makedirs(output_dir, exist_ok=True)
        paths = {'labels': os.path.join(output_dir, "qa_labels.pgm"),
                 'overlay': os.path.join(output_dir, "qa_overlay.ppm")}
        write_labels(paths['labels'], labels)
        write_overlay(paths['overlay'], labels, image)
        counts = {name: int(np.sum(labels == c)) for c, name in enumerate(("background", "missed", "mistaken"))}
        logger.info(f"Assessed {image_path}: {counts['missed']} missed, {counts['mistaken']} mistaken pixels")
        return {'paths': paths, 'counts': counts}

    def cache_features(self, image_path: str, output_path: str) -> str:
        """Compute the frozen-encoder stage maps of one image and store them."""
        image = read_image(image_path)
        pyramid = self.network.vit_features(Tensor(image[None]))
        if pyramid is None:
            raise ShapeError("This configuration has no frozen encoder")
        save_vit_features(output_path, pyramid)
        return output_path


def diff_mask_files(seg_path: str, gt_path: str, output_dir: str,
                    image_path: Optional[str] = None) -> Dict[str, object]:
    """
    QA labels of a segmentation against its ground truth, without a model.

    The overlay background is the image when given, else the ground-truth mask.
    """
    seg = read_mask(seg_path)
    gt = read_mask(gt_path)
    labels = sqa_ground_truth(seg, gt)
    source = read_image(image_path) if image_path else np.repeat(gt[None].astype(np.float32), 3, axis=0)
    os.makedirs(output_dir, exist_ok=True)
    paths = {'labels': os.path.join(output_dir, "qa_labels.pgm"),
             'overlay': os.path.join(output_dir, "qa_overlay.ppm")}
    write_labels(paths['labels'], labels)
    write_overlay(paths['overlay'], labels, source)
    counts = {name: int(np.sum(labels == c)) for c, name in enumerate(("background", "missed", "mistaken"))}
    return {'paths': paths, 'counts': counts}
