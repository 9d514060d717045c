"""
Loss Module

Weighted cross-entropy + soft dice objective over the three QA classes, with
an optional auxiliary term.
"""
from typing import Callable, Dict, List, Optional, Tuple
import logging

import numpy as np

from config.schemas import NUM_CLASSES, LossConfig
from engine import functional as F
from engine.gradcheck import CaseBuilder
from engine.tensor import Tensor
from utils.error_utils import ShapeError, validate_label_map, validate_shape

# Configure logging
logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)


def one_hot(labels: np.ndarray, dtype=np.float32) -> np.ndarray:
    """(B, H, W) integer labels to (B, 3, H, W) indicators."""
    return np.moveaxis(np.eye(NUM_CLASSES, dtype=dtype)[labels.astype(np.int64)], -1, 1)


def _check(logits: Tensor, labels: np.ndarray) -> None:
    validate_shape(logits.shape, (None, NUM_CLASSES, None, None), "logits")
    if tuple(labels.shape) != (logits.shape[0],) + tuple(logits.shape[2:]):
        raise ShapeError("Labels do not match the logits",
                         {'logits': logits.dims, 'labels': list(labels.shape)})
    validate_label_map(labels, "QA labels")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Pixel-mean softmax cross-entropy."""
    _check(logits, labels)
    target = Tensor(one_hot(labels, logits.dtype))
    picked = F.sum(F.mul(F.log_softmax(logits, axis=1), target), axis=1)
    return F.mul(F.mean(picked), -1.0)


def dice_loss(logits: Tensor, labels: np.ndarray, smooth: float = 1.0) -> Tensor:
    """Class mean of 1 - (2 sum(p g) + eps) / (sum(p) + sum(g) + eps), sums over batch and space."""
    _check(logits, labels)
    target = one_hot(labels, logits.dtype)
    probs = F.softmax(logits, axis=1)
    axes = (0, 2, 3)
    overlap = F.sum(F.mul(probs, Tensor(target)), axis=axes)
    total = F.add(F.sum(probs, axis=axes), target.sum(axis=axes))
    ratio = F.div(F.add(F.mul(overlap, 2.0), smooth), F.add(total, smooth))
    return F.mean(F.sub(1.0, ratio))


def combine_terms(ce, dice, config: LossConfig):
    """gamma1 * ce + gamma2 * dice; works on floats and Tensors alike."""
    if isinstance(ce, Tensor) or isinstance(dice, Tensor):
        return F.add(F.mul(ce, config.ce_weight), F.mul(dice, config.dice_weight))
    return config.ce_weight * ce + config.dice_weight * dice


def segmentation_loss(logits: Tensor, labels: np.ndarray, config: LossConfig) -> Tensor:
    return combine_terms(cross_entropy(logits, labels), dice_loss(logits, labels, config.dice_smooth), config)


def combined_loss(logits: Tensor, labels: np.ndarray, config: Optional[LossConfig] = None,
                  aux_logits: Optional[Tensor] = None, aux_labels: Optional[np.ndarray] = None) -> Tensor:
    """
    Total training objective.

    Args:
        logits: (B, 3, H, W) main logits
        labels: (B, H, W) QA labels in {0, 1, 2}
        config: Loss weights (defaults to LossConfig())
        aux_logits: Optional auxiliary logits; adds aux_weight times their loss
        aux_labels: Target of the auxiliary term; defaults to `labels`

    Raises:
        LabelValueError: If a label lies outside {0, 1, 2}
        ShapeError: If logits and labels disagree
    """
    config = config or LossConfig()
    labels = np.asarray(labels)
    total = segmentation_loss(logits, labels, config)
    if aux_logits is not None:
        target = labels if aux_labels is None else np.asarray(aux_labels)
        total = F.add(total, F.mul(segmentation_loss(aux_logits, target, config), config.aux_weight))
    return total


def loss_breakdown(logits: Tensor, labels: np.ndarray, config: Optional[LossConfig] = None) -> Dict[str, float]:
    """Main-head ce and dice values and their weighted total; the auxiliary term is left out."""
    config = config or LossConfig()
    ce = cross_entropy(logits, labels).item()
    dice = dice_loss(logits, labels, config.dice_smooth).item()
    return {'ce': ce, 'dice': dice, 'total': combine_terms(ce, dice, config)}


def _loss_case(with_aux: bool) -> CaseBuilder:
    def build(rng: np.random.Generator) -> Tuple[List[np.ndarray], Callable[..., Tensor]]:
        shape = (int(rng.integers(1, 3)), NUM_CLASSES, int(rng.integers(2, 5)), int(rng.integers(2, 5)))
        labels = rng.integers(0, NUM_CLASSES, size=(shape[0],) + shape[2:])
        arrays = [rng.standard_normal(shape)]
        if with_aux:
            arrays.append(rng.standard_normal(shape))
            return arrays, lambda logits, aux: combined_loss(logits, labels, aux_logits=aux)
        return arrays, lambda logits: combined_loss(logits, labels)
    return build


def gradcheck_cases() -> Dict[str, CaseBuilder]:
    """Finite-difference cases for the training objective."""
    return {'combined_loss': _loss_case(False), 'combined_loss_aux': _loss_case(True)}
