"""
Mask Utilities Module

Binary-mask morphology, the segmentation-error simulator that turns a
ground-truth building mask into a plausible interactive segmentation result,
and the derivation of quality-assessment labels from a (segmentation, ground
truth) pair.
"""
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union
import logging

import numpy as np
from scipy import ndimage

from config.schemas import SceneConfig
from utils.error_utils import ShapeError, validate_binary_mask

# Configure logging
logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

BACKGROUND, MISSED, MISTAKEN = 0, 1, 2

SeedLike = Union[int, Sequence[int], np.random.Generator]


def disk(radius: int) -> np.ndarray:
    """Boolean disk {dy^2 + dx^2 <= r^2} of size (2r + 1) x (2r + 1)."""
    offsets = np.arange(-radius, radius + 1)
    return offsets[:, None] ** 2 + offsets[None, :] ** 2 <= radius ** 2


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    mask = np.asarray(mask).astype(bool)
    if radius <= 0:
        return mask.astype(np.uint8)
    return ndimage.binary_dilation(mask, structure=disk(radius)).astype(np.uint8)


def erode(mask: np.ndarray, radius: int) -> np.ndarray:
    """Erosion with a disk; pixels outside the canvas count as background."""
    mask = np.asarray(mask).astype(bool)
    if radius <= 0:
        return mask.astype(np.uint8)
    return ndimage.binary_erosion(mask, structure=disk(radius), border_value=0).astype(np.uint8)


def shift(mask: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Integer translation; pixels moved off the canvas are lost, vacated ones are 0."""
    out = np.zeros_like(mask)
    height, width = mask.shape
    if abs(dy) >= height or abs(dx) >= width:
        return out
    src_y = slice(max(0, -dy), height - max(0, dy))
    src_x = slice(max(0, -dx), width - max(0, dx))
    dst_y = slice(max(0, dy), height - max(0, -dy))
    dst_x = slice(max(0, dx), width - max(0, -dx))
    out[dst_y, dst_x] = mask[src_y, src_x]
    return out


def sqa_ground_truth(seg_mask: np.ndarray, gt_mask: np.ndarray) -> np.ndarray:
    """
    Quality-assessment labels: 1 (missed) where gt=1 and seg=0, 2 (mistaken)
    where seg=1 and gt=0, 0 elsewhere.

    Raises:
        ShapeError: If the masks differ in shape
        MaskValueError: If either mask is not binary
    """
    seg_mask = np.asarray(seg_mask)
    gt_mask = np.asarray(gt_mask)
    if seg_mask.shape != gt_mask.shape:
        raise ShapeError("Segmentation and ground-truth masks differ in shape",
                         {'seg': list(seg_mask.shape), 'gt': list(gt_mask.shape)})
    validate_binary_mask(seg_mask, "segmentation mask")
    validate_binary_mask(gt_mask, "ground-truth mask")
    seg = seg_mask.astype(bool)
    gt = gt_mask.astype(bool)
    labels = np.zeros(seg.shape, dtype=np.uint8)
    labels[gt & ~seg] = MISSED
    labels[seg & ~gt] = MISTAKEN
    return labels


@dataclass
class InstancePerturbation:
    """What happened to one building, with the error pixels it ended up causing."""
    instance: int
    dropped: bool
    operation: str
    radius: int
    dy: int
    dx: int
    missed_pixels: int = 0
    mistaken_pixels: int = 0

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)


@dataclass
class Blob:
    y: int
    x: int
    radius: int

    def to_dict(self) -> Dict[str, int]:
        return asdict(self)


def split_instances(gt_mask: np.ndarray) -> List[np.ndarray]:
    """Connected components (4-connectivity) of a binary mask, in label order."""
    labelled, count = ndimage.label(np.asarray(gt_mask).astype(bool))
    return [(labelled == index).astype(np.uint8) for index in range(1, count + 1)]


def perturb_mask(gt_mask: np.ndarray, seed: SeedLike, config: SceneConfig,
                 instances: Optional[Sequence[np.ndarray]] = None
                 ) -> Tuple[np.ndarray, List[InstancePerturbation], List[Blob]]:
    """
    Simulate an interactive segmentation result.

    Each building instance is independently dropped, or dilated/eroded by a
    disk of random radius and translated; spurious disks are then added.

    Args:
        gt_mask: Binary ground-truth mask (H, W)
        seed: Seed (or generator) driving every random choice
        config: Perturbation ranges and probabilities
        instances: Per-building masks; connected components of `gt_mask` when omitted

    Returns:
        (segmentation mask, per-instance records, spurious blobs)
    """
    validate_binary_mask(gt_mask, "ground-truth mask")
    gt_mask = np.asarray(gt_mask).astype(np.uint8)
    rng = np.random.default_rng(seed)
    if instances is None:
        instances = split_instances(gt_mask)
    height, width = gt_mask.shape
    seg = np.zeros_like(gt_mask)
    records: List[InstancePerturbation] = []
    footprints: List[np.ndarray] = []
    low, high = config.radius_range
    for index, instance in enumerate(instances):
        dropped = bool(rng.random() < config.drop_probability)
        radius = int(rng.integers(low, high + 1))
        operation = "erode" if rng.random() < config.erode_probability else "dilate"
        dy, dx = (int(v) for v in rng.integers(-config.shift_range, config.shift_range + 1, size=2))
        footprint = np.zeros_like(gt_mask)
        if not dropped:
            footprint = erode(instance, radius) if operation == "erode" else dilate(instance, radius)
            footprint = shift(footprint, dy, dx)
            seg |= footprint
        records.append(InstancePerturbation(index, dropped, operation, radius, dy, dx))
        footprints.append(footprint)

    blobs: List[Blob] = []
    if rng.random() < config.blob_probability:
        blob_low, blob_high = config.blob_radius_range
        for _ in range(int(rng.integers(1, config.max_blobs + 1))):
            radius = int(rng.integers(blob_low, blob_high + 1))
            y, x = int(rng.integers(0, height)), int(rng.integers(0, width))
            yy, xx = np.ogrid[:height, :width]
            seg[(yy - y) ** 2 + (xx - x) ** 2 <= radius ** 2] = 1
            blobs.append(Blob(y, x, radius))

    for record, instance, footprint in zip(records, instances, footprints):
        record.missed_pixels = int(np.sum(instance.astype(bool) & ~seg.astype(bool)))
        record.mistaken_pixels = int(np.sum(footprint.astype(bool) & ~gt_mask.astype(bool)))
    logger.debug(f"Perturbed {len(records)} instances, {sum(r.dropped for r in records)} dropped, "
                 f"{len(blobs)} blobs")
    return seg, records, blobs
