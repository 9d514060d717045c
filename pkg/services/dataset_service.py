"""
Dataset Service

Synthetic building scenes standing in for an aerial/satellite building
dataset: rendering, segmentation-error simulation, quality-assessment labels,
on-disk layout with a hashed manifest, loading and verification.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple
import hashlib
import json
import logging
import os

import numpy as np
from scipy import ndimage
from tqdm import tqdm

from config.schemas import SceneConfig
from utils.env_utils import get_worker_count, progress_enabled
from utils.error_utils import GenerationError, UsageError, ValidationError
from utils.mask_utils import dilate, perturb_mask, sqa_ground_truth
from utils.raster_utils import read_image, read_labels, read_mask, write_image, write_labels, write_mask

# Configure logging
logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

MANIFEST = "manifest.json"
SUBDIRS = {'image': ("images", ".ppm"), 'mask': ("masks", ".pgm"),
           'gt': ("gt", ".pgm"), 'labels': ("labels", ".pgm")}
SATELLITE_BLUR_SIGMA = 0.8


@dataclass
class SqaTriplet:
    """
    One sample: image (3, H, W) in [0, 1], segmentation mask (1, H, W) in
    {0, 1}, QA labels (H, W) in {0, 1, 2}, the building ground truth it was
    derived from and generation metadata.
    """
    image: np.ndarray
    seg_mask: np.ndarray
    qa_labels: np.ndarray
    gt_mask: np.ndarray
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def index(self) -> int:
        return int(self.metadata.get('index', -1))

    def is_consistent(self) -> bool:
        return bool(np.array_equal(self.qa_labels, sqa_ground_truth(self.seg_mask[0], self.gt_mask)))


def split_for(index: int, count: int, test_fraction: float) -> str:
    """Leading indices train, the trailing round(count * test_fraction) test."""
    n_test = int(round(count * test_fraction))
    return "train" if index < count - n_test else "test"


def rectangle_corners(cy: float, cx: float, height: float, width: float, angle: float) -> np.ndarray:
    """(4, 2) corner coordinates as (x, y) pairs."""
    u = np.array([np.cos(angle), np.sin(angle)])
    v = np.array([-np.sin(angle), np.cos(angle)])
    centre = np.array([cx, cy])
    signs = [(-1, -1), (1, -1), (1, 1), (-1, 1)]
    return np.array([centre + a * width / 2 * u + b * height / 2 * v for a, b in signs])


def rasterize_rectangle(shape: Tuple[int, int], cy: float, cx: float, height: float, width: float,
                        angle: float) -> np.ndarray:
    """Pixels whose centres fall inside the rotated rectangle."""
    yy, xx = np.mgrid[:shape[0], :shape[1]]
    dy, dx = yy + 0.5 - cy, xx + 0.5 - cx
    along = dx * np.cos(angle) + dy * np.sin(angle)
    across = -dx * np.sin(angle) + dy * np.cos(angle)
    return ((np.abs(along) <= width / 2) & (np.abs(across) <= height / 2)).astype(np.uint8)


def _place_building(rng: np.random.Generator, config: SceneConfig, occupied: np.ndarray
                    ) -> Optional[Tuple[np.ndarray, np.ndarray]]:
    canvas = (config.height, config.width)
    for _ in range(config.placement_attempts):
        width = int(rng.integers(config.min_side, config.max_side + 1))
        height = int(rng.integers(config.min_side, config.max_side + 1))
        angle = float(rng.uniform(0.0, np.pi)) if rng.random() < config.rotation_probability else 0.0
        cy = float(rng.uniform(0, config.height))
        cx = float(rng.uniform(0, config.width))
        if width * height < config.min_building_area:
            continue
        corners = rectangle_corners(cy, cx, height, width, angle)
        if corners.min() < 0 or corners[:, 0].max() > config.width or corners[:, 1].max() > config.height:
            continue
        footprint = rasterize_rectangle(canvas, cy, cx, height, width, angle)
        if footprint.sum() < config.min_building_area:
            continue
        # One free pixel around every building keeps instances separable.
        if np.any(footprint & dilate(occupied, 1)):
            continue
        return footprint, corners
    return None


def _render(rng: np.random.Generator, config: SceneConfig, instances: Sequence[np.ndarray],
            satellite: bool) -> np.ndarray:
    shape = (config.height, config.width)
    texture = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=2.0)
    texture /= max(float(np.abs(texture).max()), 1e-12)
    tint = 1.0 + rng.uniform(-0.1, 0.1, size=3)
    image = np.stack([(config.background_level + config.background_texture * texture) * t for t in tint])
    low, high = config.roof_range
    for instance in instances:
        roof = rng.uniform(low, high) * (1.0 + rng.uniform(-0.05, 0.05, size=3))
        image[:, instance.astype(bool)] = roof[:, None]
    noise_std = config.noise_std
    if satellite:
        image = np.stack([ndimage.gaussian_filter(channel, sigma=SATELLITE_BLUR_SIGMA) for channel in image])
        noise_std *= 2.0
    image = np.clip(image + rng.normal(0.0, noise_std, size=image.shape), 0.0, 1.0)
    # Quantised to 1/255 steps so the PPM round trip is exact.
    return np.rint(image * 255.0).astype(np.uint8).astype(np.float32) / np.float32(255.0)


def generate_scene(config: SceneConfig, index: int, count: Optional[int] = None) -> SqaTriplet:
    """
    Render scene `index`; fully determined by (config.seed, index).

    Args:
        config: Scene parameters
        index: Scene index
        count: Dataset size, used only to record the train/test split

    Raises:
        GenerationError: If fewer than min_buildings fit within the attempt budget
    """
    rng = np.random.default_rng([config.seed, index])
    satellite = bool(rng.random() < config.satellite_fraction)
    wanted = int(rng.integers(config.min_buildings, config.max_buildings + 1))
    occupied = np.zeros((config.height, config.width), dtype=np.uint8)
    instances, polygons = [], []
    for building in range(wanted):
        placed = _place_building(rng, config, occupied)
        if placed is None:
            if building >= config.min_buildings:
                logger.debug(f"Scene {index}: canvas full after {building} of {wanted} buildings")
                break
            raise GenerationError(f"Could not place building {building + 1} of {wanted} in scene {index}",
                                  {'index': index, 'seed': config.seed, 'attempts': config.placement_attempts})
        footprint, corners = placed
        occupied |= footprint
        instances.append(footprint)
        polygons.append(np.round(corners, 3).tolist())
    image = _render(rng, config, instances, satellite)
    seg, records, blobs = perturb_mask(occupied, rng, config, instances)
    metadata = {
        'index': index,
        'seed': config.seed,
        'sensor': "satellite" if satellite else "aerial",
        'buildings': polygons,
        'building_areas': [int(i.sum()) for i in instances],
        'perturbations': [r.to_dict() for r in records],
        'blobs': [b.to_dict() for b in blobs],
    }
    if count is not None:
        metadata['split'] = split_for(index, count, config.test_fraction)
    return SqaTriplet(image, seg[None].astype(np.uint8), sqa_ground_truth(seg, occupied), occupied, metadata)


def file_sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def stack_batch(triplets: Sequence[SqaTriplet]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(B, 3, H, W) float32 images, (B, 1, H, W) float32 masks, (B, H, W) int64 labels."""
    images = np.stack([t.image for t in triplets]).astype(np.float32)
    masks = np.stack([t.seg_mask for t in triplets]).astype(np.float32)
    labels = np.stack([t.qa_labels for t in triplets]).astype(np.int64)
    return images, masks, labels


@dataclass
class SqaDataset:
    triplets: List[SqaTriplet]
    directory: Optional[str] = None
    manifest: Dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.triplets)

    def __getitem__(self, index: int) -> SqaTriplet:
        return self.triplets[index]

    def __iter__(self) -> Iterator[SqaTriplet]:
        return iter(self.triplets)

    def batches(self, batch_size: int, order: Optional[Sequence[int]] = None
                ) -> Iterator[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
        order = list(range(len(self))) if order is None else list(order)
        for start in range(0, len(order), batch_size):
            yield stack_batch([self.triplets[i] for i in order[start:start + batch_size]])


class DatasetService:
    """
    Generates, stores, loads and verifies synthetic datasets.
    """

    def __init__(self, workers: int = 1, show_progress: bool = True):
        self.workers = get_worker_count(workers)
        self.show_progress = show_progress
        logger.info(f"Initializing DatasetService with {self.workers} worker(s)")

    def generate(self, config: SceneConfig, count: int) -> SqaDataset:
        """Scenes 0..count-1 in memory."""
        if count < 1:
            raise UsageError("count must be positive", {'count': count})
        config.validate()
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            scenes = pool.map(lambda i: generate_scene(config, i, count), range(count))
            triplets = list(tqdm(scenes, total=count, desc="Generating scenes",
                                 disable=not progress_enabled(self.show_progress)))
        return SqaDataset(triplets)

    def write(self, directory: str, config: SceneConfig, count: int) -> Dict[str, Any]:
        """
        Generate `count` scenes into `directory` with a manifest.

        Returns:
            The manifest
        """
        dataset = self.generate(config, count)
        for name, _ in SUBDIRS.values():
            os.makedirs(os.path.join(directory, name), exist_ok=True)
        entries = []
        for triplet in dataset:
            paths = {key: os.path.join(sub, f"{triplet.index:05d}{ext}") for key, (sub, ext) in SUBDIRS.items()}
            write_image(os.path.join(directory, paths['image']), triplet.image)
            write_mask(os.path.join(directory, paths['mask']), triplet.seg_mask[0])
            write_mask(os.path.join(directory, paths['gt']), triplet.gt_mask)
            write_labels(os.path.join(directory, paths['labels']), triplet.qa_labels)
            entries.append(dict(paths,
                                sha256={key: file_sha256(os.path.join(directory, p)) for key, p in paths.items()},
                                **triplet.metadata))
        manifest = {
            'seed': config.seed,
            'count': count,
            'scene_config': config.to_dict(),
            'splits': {s: sum(e['split'] == s for e in entries) for s in ("train", "test")},
            'entries': entries,
        }
        with open(os.path.join(directory, MANIFEST), "w") as f:
            json.dump(manifest, f, indent=2)
        logger.info(f"Wrote {count} scenes to {directory} "
                    f"({manifest['splits']['train']} train / {manifest['splits']['test']} test)")
        return manifest

    def read_manifest(self, directory: str) -> Dict[str, Any]:
        path = os.path.join(directory, MANIFEST)
        if not os.path.exists(path):
            raise UsageError(f"No manifest found in {directory}", {'path': path})
        with open(path, "r") as f:
            return json.load(f)

    def load(self, directory: str, split: Optional[str] = None, limit: Optional[int] = None) -> SqaDataset:
        """
        Load triplets listed in the manifest.

        Args:
            directory: Dataset directory
            split: 'train', 'test' or None for every entry
            limit: Optional cap on the number of triplets

        Raises:
            UsageError: If the manifest is missing or the split is unknown
            ValidationError: If stored labels disagree with the stored masks
        """
        if split not in (None, "train", "test"):
            raise UsageError(f"Unknown split '{split}'", {'splits': ["train", "test"]})
        manifest = self.read_manifest(directory)
        entries = [e for e in manifest['entries'] if split is None or e.get('split') == split]
        if limit is not None:
            entries = entries[:limit]
        triplets = []
        for entry in entries:
            metadata = {k: v for k, v in entry.items() if k not in SUBDIRS and k != 'sha256'}
            triplet = SqaTriplet(
                image=read_image(os.path.join(directory, entry['image'])),
                seg_mask=read_mask(os.path.join(directory, entry['mask']))[None],
                qa_labels=read_labels(os.path.join(directory, entry['labels'])),
                gt_mask=read_mask(os.path.join(directory, entry['gt'])),
                metadata=metadata,
            )
            if not triplet.is_consistent():
                raise ValidationError(f"Labels of scene {triplet.index} do not match its masks",
                                      {'index': triplet.index, 'labels': entry['labels']})
            triplets.append(triplet)
        logger.info(f"Loaded {len(triplets)} scenes from {directory}" + (f" ({split})" if split else ""))
        return SqaDataset(triplets, directory, manifest)

    def verify(self, directory: str) -> List[Dict[str, str]]:
        """
        Re-hash every file listed in the manifest.

        Returns:
            One record per missing or mismatching file; empty when the dataset is intact
        """
        problems = []
        for entry in self.read_manifest(directory)['entries']:
            for key, expected in entry['sha256'].items():
                path = os.path.join(directory, entry[key])
                if not os.path.exists(path):
                    problems.append({'path': entry[key], 'problem': "missing"})
                elif file_sha256(path) != expected:
                    problems.append({'path': entry[key], 'problem': "hash mismatch"})
        level = logging.INFO if not problems else logging.WARNING
        logger.log(level, f"Verified {directory}: {len(problems)} problem(s)")
        return problems
