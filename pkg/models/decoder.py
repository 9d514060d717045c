"""
Decoder Module

The quality-assessment decoders. `AQSDecoder` learns fast features from the
segmentation mask, subtracts the fused features from them at three scales,
enhances each difference with channel-spatial attention and classifies every
pixel as background, missed or mistaken. `PlainHead` is the ablation
baseline that classifies N1 directly.
"""
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple
import logging

import numpy as np

from engine import functional as F
from engine.tensor import Tensor
from models.layers import (BatchNorm2d, Conv2d, Linear, Module, Profile, Shape, require_channels,
                           trace_conv, trace_linear)
from models.neck import NeckOutput
from utils.error_utils import ShapeError, validate_binary_mask

# Configure logging
logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

SEG_SCALES = (4, 8, 16)


@dataclass
class SegFeatureSet:
    """S1, S2, S3 at 1/4, 1/8 and 1/16, channel-matched to N1..N3."""
    maps: List[Tensor]
    scales: Tuple[int, ...] = SEG_SCALES

    def __getitem__(self, index: int) -> Tensor:
        return self.maps[index]

    def __len__(self) -> int:
        return len(self.maps)


class SegFeatureExtractor(Module):
    """
    Two 3x3 stride-2 convolutions take the mask to S1 at 1/4; two further
    stride-2 convolutions give S2 and S3.
    """

    def __init__(self, rng: np.random.Generator, channels: Sequence[int] = (64, 128, 256), in_channels: int = 1):
        super().__init__()
        c1, c2, c3 = channels
        self.in_channels = in_channels
        self.conv1 = Conv2d(rng, in_channels, c1, 3, 2, 1)
        self.conv2 = Conv2d(rng, c1, c1, 3, 2, 1)
        self.conv3 = Conv2d(rng, c1, c2, 3, 2, 1)
        self.conv4 = Conv2d(rng, c2, c3, 3, 2, 1)

    def forward(self, mask: Tensor, image: Optional[Tensor] = None) -> SegFeatureSet:
        """
        Args:
            mask: (B, 1, H, W) segmentation mask with values in {0, 1}
            image: (B, 3, H, W) image, consumed only when built with 4 input channels

        Raises:
            MaskValueError: If the mask holds values other than 0 and 1
            ShapeError: If H or W is not divisible by 16
        """
        require_channels(mask, 1, "Segmentation feature extractor mask")
        validate_binary_mask(mask.data, "segmentation mask")
        height, width = mask.shape[2:]
        if height % 16 or width % 16:
            raise ShapeError("Mask height and width must be divisible by 16", {'height': height, 'width': width})
        x = mask
        if self.in_channels == 4:
            if image is None:
                raise ShapeError("This extractor was built to read the image as well as the mask")
            x = F.concat([image, mask], axis=1)
        s1 = F.relu(self.conv2(F.relu(self.conv1(x))))
        s2 = F.relu(self.conv3(s1))
        s3 = F.relu(self.conv4(s2))
        return SegFeatureSet([s1, s2, s3])

    def trace(self, shape: Shape, profile: Profile, name: str) -> List[Shape]:
        out = trace_conv(self.conv1, shape, profile, f"{name}.conv1")
        s1 = trace_conv(self.conv2, out, profile, f"{name}.conv2")
        s2 = trace_conv(self.conv3, s1, profile, f"{name}.conv3")
        s3 = trace_conv(self.conv4, s2, profile, f"{name}.conv4")
        return [s1, s2, s3]


def multiscale_diff(seg: SegFeatureSet, neck: NeckOutput) -> List[Tensor]:
    """
    D_i = S_i - N_i for the three finest scales.

    Raises:
        ShapeError: Naming the scale whose shapes differ
    """
    differences = []
    for index, (s, n) in enumerate(zip(seg.maps, neck.maps[:3]), 1):
        if s.shape != n.shape:
            raise ShapeError(f"Scale {index} feature shapes differ",
                             {'scale': f"1/{SEG_SCALES[index - 1]}", 'seg': s.dims, 'fused': n.dims})
        differences.append(F.sub(s, n))
    return differences


class CSAM(Module):
    """
    Channel attention from a shared two-layer MLP over average- and
    max-pooled descriptors, then spatial attention from a 7x7 convolution
    over the channel mean and max.
    """

    def __init__(self, rng: np.random.Generator, channels: int, ratio: int = 8, kernel: int = 7):
        super().__init__()
        hidden = max(1, channels // ratio)
        self.channels = channels
        self.fc1 = Linear(rng, channels, hidden)
        self.fc2 = Linear(rng, hidden, channels)
        self.spatial = Conv2d(rng, 2, 1, kernel, 1, kernel // 2, bias=True)

    def _mlp(self, x: Tensor) -> Tensor:
        return self.fc2(F.relu(self.fc1(x)))

    def channel_weights(self, x: Tensor) -> Tensor:
        """(B, C, 1, 1) multipliers in (0, 1)."""
        avg = F.mean(x, axis=(2, 3))
        peak = F.amax(x, axis=(2, 3))
        weights = F.sigmoid(F.add(self._mlp(avg), self._mlp(peak)))
        return F.reshape(weights, (x.shape[0], x.shape[1], 1, 1))

    def spatial_weights(self, x: Tensor) -> Tensor:
        """(B, 1, H, W) multipliers in (0, 1)."""
        pooled = F.concat([F.mean(x, axis=1, keepdims=True), F.amax(x, axis=1, keepdims=True)], axis=1)
        return F.sigmoid(self.spatial(pooled))

    def forward(self, x: Tensor) -> Tensor:
        require_channels(x, self.channels, "CSAM")
        x = F.mul(x, self.channel_weights(x))
        return F.mul(x, self.spatial_weights(x))

    def trace(self, shape: Shape, profile: Profile, name: str) -> Shape:
        channels, height, width = shape
        hidden = trace_linear(self.fc1, (2, channels), profile, f"{name}.fc1")
        trace_linear(self.fc2, hidden, profile, f"{name}.fc2")
        trace_conv(self.spatial, (2, height, width), profile, f"{name}.spatial")
        return shape


class QAHead(Module):
    """Resize to 1/4, concatenate, 3x3 conv + bn + relu, 1x1 conv to the classes, upsample x4."""

    def __init__(self, rng: np.random.Generator, in_channels: int, head_channels: int = 64, num_classes: int = 3):
        super().__init__()
        self.conv = Conv2d(rng, in_channels, head_channels, 3, 1, 1, bias=False)
        self.bn = BatchNorm2d(head_channels)
        self.classifier = Conv2d(rng, head_channels, num_classes, 1, 1, 0, bias=True)

    def forward(self, features: Sequence[Tensor], input_h: int, input_w: int) -> Tensor:
        height, width = features[0].shape[2:]
        resized = [features[0]] + [F.bilinear_resize(f, height, width) for f in features[1:]]
        x = F.relu(self.bn(self.conv(F.concat(resized, axis=1))))
        return F.bilinear_resize(self.classifier(x), input_h, input_w)

    def trace(self, shapes: Sequence[Shape], profile: Profile, name: str, input_h: int, input_w: int) -> Shape:
        _, height, width = shapes[0]
        out = trace_conv(self.conv, (sum(s[0] for s in shapes), height, width), profile, f"{name}.conv")
        classes, _, _ = trace_conv(self.classifier, out, profile, f"{name}.classifier")
        return (classes, input_h, input_w)


class AQSDecoder(Module):
    def __init__(self, rng: np.random.Generator, channels: Sequence[int] = (64, 128, 256),
                 head_channels: int = 64, csam_ratio: int = 8, csam_kernel: int = 7,
                 uses_image: bool = False):
        super().__init__()
        self.channels = tuple(channels)
        self.seg = SegFeatureExtractor(rng, self.channels, in_channels=4 if uses_image else 1)
        for index, width in enumerate(self.channels, 1):
            setattr(self, f"csam{index}", CSAM(rng, width, csam_ratio, csam_kernel))
        self.head = QAHead(rng, sum(self.channels), head_channels)

    def enhance(self, differences: Sequence[Tensor]) -> List[Tensor]:
        return [getattr(self, f"csam{index}")(d) for index, d in enumerate(differences, 1)]

    def forward(self, mask: Tensor, neck: NeckOutput, image: Optional[Tensor] = None) -> Tensor:
        """
        Args:
            mask: (B, 1, H, W) binary segmentation mask
            neck: Fused pyramid of the same batch
            image: Optional image, used only when the extractor reads it

        Returns:
            (B, 3, H, W) logits
        """
        seg = self.seg(mask, image)
        enhanced = self.enhance(multiscale_diff(seg, neck))
        return self.head(enhanced, *mask.shape[2:])

    def trace(self, shape: Shape, profile: Profile, name: str = "aqsd") -> Shape:
        _, height, width = shape
        seg_shapes = self.seg.trace((self.seg.in_channels, height, width), profile, f"{name}.seg")
        for index, s in enumerate(seg_shapes, 1):
            getattr(self, f"csam{index}").trace(s, profile, f"{name}.csam{index}")
        return self.head.trace(seg_shapes, profile, f"{name}.head", height, width)


class PlainHead(Module):
    """Baseline classifier on N1: 3x3 conv + bn + relu, 1x1 conv, upsample."""

    def __init__(self, rng: np.random.Generator, in_channels: int = 64, head_channels: int = 64,
                 num_classes: int = 3):
        super().__init__()
        self.conv = Conv2d(rng, in_channels, head_channels, 3, 1, 1, bias=False)
        self.bn = BatchNorm2d(head_channels)
        self.classifier = Conv2d(rng, head_channels, num_classes, 1, 1, 0, bias=True)

    def forward(self, neck: NeckOutput, input_h: int, input_w: int) -> Tensor:
        x = F.relu(self.bn(self.conv(neck.maps[0])))
        return F.bilinear_resize(self.classifier(x), input_h, input_w)

    def trace(self, shape: Shape, profile: Profile, name: str, input_h: int, input_w: int) -> Shape:
        out = trace_conv(self.conv, shape, profile, f"{name}.conv")
        classes, _, _ = trace_conv(self.classifier, out, profile, f"{name}.classifier")
        return (classes, input_h, input_w)
