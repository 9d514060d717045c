"""
Neck Module

Fuses the trainable and frozen feature pyramids into one four-stage pyramid:
1x1 channel alignment of the frozen maps, cross-backbone resizing, per-stage
fuse blocks, ASPP on the deepest stage and a top-down pass. The auxiliary
classifier attached to the fused features also lives here.
"""
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple
import logging

import numpy as np

from engine import functional as F
from engine.tensor import Tensor
from models.backbones import FeaturePyramid
from models.layers import BatchNorm2d, Conv2d, Module, Profile, Shape, require_channels, trace_conv
from utils.error_utils import ShapeError

# Configure logging
logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

NECK_SCALES = (4, 8, 16, 16)


@dataclass
class NeckOutput:
    """N1..N4 at 1/4, 1/8, 1/16, 1/16 plus the optional auxiliary logits."""
    maps: List[Tensor]
    channels: Tuple[int, ...]
    aux_logits: Optional[Tensor] = None
    scales: Tuple[int, ...] = NECK_SCALES

    def validate(self, height: int, width: int) -> None:
        """
        Raises:
            ShapeError: Naming the first map that breaks the scale/channel contract
        """
        for index, (feature, scale, channels) in enumerate(zip(self.maps, self.scales, self.channels), 1):
            expected = (channels, height // scale, width // scale)
            if tuple(feature.shape[1:]) != expected:
                raise ShapeError(f"N{index} breaks the neck output contract",
                                 {'stage': f"N{index}", 'expected': list(expected), 'actual': feature.dims})

    def __getitem__(self, index: int) -> Tensor:
        return self.maps[index]


def clamp_rate(rate: int, height: int, width: int) -> int:
    """Dilation rate limited so the dilated kernel never reaches past the map."""
    return max(1, min(rate, min(height, width) - 1))


class FuseBlock(Module):
    """
    y = relu(bn(conv3x3(x))); out = relu(bn(conv3x3(y)) + proj1x1(x)).
    """

    def __init__(self, rng: np.random.Generator, in_channels: int, out_channels: int):
        super().__init__()
        self.in_channels = in_channels
        self.conv1 = Conv2d(rng, in_channels, out_channels, 3, 1, 1, bias=False)
        self.bn1 = BatchNorm2d(out_channels)
        self.conv2 = Conv2d(rng, out_channels, out_channels, 3, 1, 1, bias=False)
        self.bn2 = BatchNorm2d(out_channels)
        self.proj = Conv2d(rng, in_channels, out_channels, 1, 1, 0, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        y = F.relu(self.bn1(self.conv1(x)))
        return F.relu(F.add(self.bn2(self.conv2(y)), self.proj(x)))

    def trace(self, shape: Shape, profile: Profile, name: str) -> Shape:
        out = trace_conv(self.conv1, shape, profile, f"{name}.conv1")
        out = trace_conv(self.conv2, out, profile, f"{name}.conv2")
        trace_conv(self.proj, shape, profile, f"{name}.proj")
        return out


class ASPP(Module):
    """
    Parallel dilated 3x3 branches plus an image-pooling branch, merged by a
    1x1 convolution. Padding equals the (clamped) dilation so the spatial
    extent is preserved.
    """

    def __init__(self, rng: np.random.Generator, channels: int, rates: Sequence[int] = (1, 6, 12, 18)):
        super().__init__()
        self.channels = channels
        self.rates = tuple(rates)
        for index, rate in enumerate(self.rates):
            setattr(self, f"branch{index}", Conv2d(rng, channels, channels, 3, 1, rate, rate, bias=False))
            setattr(self, f"branch{index}_bn", BatchNorm2d(channels))
        self.pool = Conv2d(rng, channels, channels, 1, 1, 0, bias=True)
        self.merge = Conv2d(rng, channels * (len(self.rates) + 1), channels, 1, 1, 0, bias=False)
        self.merge_bn = BatchNorm2d(channels)

    def effective_rates(self, height: int, width: int) -> List[int]:
        return [clamp_rate(rate, height, width) for rate in self.rates]

    def branch(self, index: int, x: Tensor) -> Tensor:
        """Raw dilated convolution of one branch (before its norm and activation)."""
        rate = clamp_rate(self.rates[index], *x.shape[2:])
        return getattr(self, f"branch{index}")(x, dilation=rate, padding=rate)

    def forward(self, x: Tensor) -> Tensor:
        require_channels(x, self.channels, "ASPP")
        height, width = x.shape[2:]
        outputs = [F.relu(getattr(self, f"branch{index}_bn")(self.branch(index, x)))
                   for index in range(len(self.rates))]
        pooled = self.pool(F.global_avg_pool(x))
        outputs.append(F.bilinear_resize(pooled, height, width))
        return F.relu(self.merge_bn(self.merge(F.concat(outputs, axis=1))))

    def trace(self, shape: Shape, profile: Profile, name: str) -> Shape:
        _, height, width = shape
        for index, rate in enumerate(self.effective_rates(height, width)):
            trace_conv(getattr(self, f"branch{index}"), shape, profile, f"{name}.branch{index}",
                       dilation=rate, padding=rate)
        trace_conv(self.pool, (self.channels, 1, 1), profile, f"{name}.pool")
        return trace_conv(self.merge, (self.merge.in_channels, height, width), profile, f"{name}.merge")


class Neck(Module):
    """
    Stage-wise fusion followed by ASPP and a top-down pass.

    With `pretrained_fusion` off the frozen branch is absent: fuse blocks see
    the residual stages alone and the output shapes are unchanged.
    """

    def __init__(self, rng: np.random.Generator, channels: Sequence[int] = (64, 128, 256, 512),
                 vit_dim: int = 96, pretrained_fusion: bool = True,
                 aspp_rates: Sequence[int] = (1, 6, 12, 18)):
        super().__init__()
        self.channels = tuple(channels)
        self.pretrained_fusion = pretrained_fusion
        for index, width in enumerate(self.channels, 1):
            if pretrained_fusion:
                setattr(self, f"align{index}", Conv2d(rng, vit_dim, width, 1, 1, 0, bias=True))
            fuse_in = 2 * width if pretrained_fusion else width
            setattr(self, f"fuse{index}", FuseBlock(rng, fuse_in, width))
        self.aspp = ASPP(rng, self.channels[3], aspp_rates)
        for index in (3, 2, 1):
            setattr(self, f"top_down{index}",
                    FuseBlock(rng, self.channels[index] + self.channels[index - 1], self.channels[index - 1]))

    def align_and_fuse_stage(self, resnet_stage: Tensor, vit_stage: Optional[Tensor], stage_index: int) -> Tensor:
        """
        Fuse one stage of the two pyramids.

        Stages 1-3 resize the aligned frozen map to the residual map's size;
        stage 4 resizes the residual map up to the frozen (1/16) size.

        Raises:
            ShapeError: On a batch mismatch or an unknown stage index
        """
        if stage_index not in (1, 2, 3, 4):
            raise ShapeError("stage_index must be 1..4", {'stage': stage_index})
        width = self.channels[stage_index - 1]
        require_channels(resnet_stage, width, f"Stage {stage_index} residual map")
        if not self.pretrained_fusion or vit_stage is None:
            if self.pretrained_fusion:
                raise ShapeError("Fusion is enabled but no frozen stage was given", {'stage': stage_index})
            if stage_index == 4:
                height, width_px = resnet_stage.shape[2] * 2, resnet_stage.shape[3] * 2
                resnet_stage = F.bilinear_resize(resnet_stage, height, width_px)
            return getattr(self, f"fuse{stage_index}")(resnet_stage)
        if resnet_stage.shape[0] != vit_stage.shape[0]:
            raise ShapeError(f"Stage {stage_index} batch sizes differ",
                             {'stage': stage_index, 'resnet': resnet_stage.dims, 'vit': vit_stage.dims})
        aligned = getattr(self, f"align{stage_index}")(vit_stage)
        if stage_index == 4:
            resnet_stage = F.bilinear_resize(resnet_stage, *aligned.shape[2:])
        else:
            aligned = F.bilinear_resize(aligned, *resnet_stage.shape[2:])
        return getattr(self, f"fuse{stage_index}")(F.concat([resnet_stage, aligned], axis=1))

    def top_down_fuse(self, fused: Sequence[Tensor]) -> List[Tensor]:
        """
        N4 = aspp(fused_4); N_i = top_down_i(concat(resize(N_{i+1}), fused_i)) for i = 3, 2, 1.

        Raises:
            ShapeError: Naming the stage whose map breaks its channel contract
        """
        for index, (feature, width) in enumerate(zip(fused, self.channels), 1):
            if feature.ndim != 4 or feature.shape[1] != width:
                raise ShapeError(f"Fused stage {index} breaks its channel contract",
                                 {'stage': index, 'expected_channels': width, 'actual': feature.dims})
        maps = [None, None, None, self.aspp(fused[3])]
        for index in (3, 2, 1):
            below = fused[index - 1]
            upper = F.bilinear_resize(maps[index], *below.shape[2:])
            maps[index - 1] = getattr(self, f"top_down{index}")(F.concat([upper, below], axis=1))
        return maps

    def forward(self, resnet: FeaturePyramid, vit: Optional[FeaturePyramid] = None) -> NeckOutput:
        vit_stages = vit.stages if vit is not None else [None] * 4
        fused = [self.align_and_fuse_stage(r, v, i)
                 for i, (r, v) in enumerate(zip(resnet.stages, vit_stages), 1)]
        return NeckOutput(self.top_down_fuse(fused), self.channels)

    def trace(self, resnet_shapes: Sequence[Shape], vit_shapes: Optional[Sequence[Shape]],
              profile: Profile, name: str = "neck") -> List[Shape]:
        fused = []
        for index, shape in enumerate(resnet_shapes, 1):
            channels, height, width_px = shape
            if index == 4:
                height, width_px = height * 2, width_px * 2
            inputs = channels
            if self.pretrained_fusion:
                vit_dim, vit_h, vit_w = vit_shapes[index - 1]
                align = getattr(self, f"align{index}")
                trace_conv(align, (vit_dim, vit_h, vit_w), profile, f"{name}.align{index}")
                if index == 4:
                    height, width_px = vit_h, vit_w
                inputs = 2 * channels
            fused.append(getattr(self, f"fuse{index}").trace((inputs, height, width_px), profile,
                                                              f"{name}.fuse{index}"))
        maps = [None, None, None, self.aspp.trace(fused[3], profile, f"{name}.aspp")]
        for index in (3, 2, 1):
            below = fused[index - 1]
            shape = (maps[index][0] + below[0], below[1], below[2])
            maps[index - 1] = getattr(self, f"top_down{index}").trace(shape, profile, f"{name}.top_down{index}")
        return maps


class AuxHead(Module):
    """1x1 convolution to the three classes, upsampled to the input resolution."""

    def __init__(self, rng: np.random.Generator, in_channels: int, num_classes: int = 3):
        super().__init__()
        self.conv = Conv2d(rng, in_channels, num_classes, 1, 1, 0, bias=True)

    def forward(self, feature: Tensor, input_h: int, input_w: int) -> Tensor:
        return F.bilinear_resize(self.conv(feature), input_h, input_w)

    def trace(self, shape: Shape, profile: Profile, name: str, input_h: int, input_w: int) -> Shape:
        classes, _, _ = trace_conv(self.conv, shape, profile, f"{name}.conv")
        return (classes, input_h, input_w)
