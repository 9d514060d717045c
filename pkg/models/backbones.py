"""
Backbones Module

The two feature extractors: a trainable 4-channel residual encoder that sees the
image together with the segmentation mask, and a frozen transformer encoder
that stands in for a large pretrained image encoder. Both return a four-stage
FeaturePyramid.
"""
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple
import logging

import numpy as np

from config.schemas import ModelConfig
from engine import functional as F
from engine.tensor import Tensor
from engine.weights import load_weights, save_weights, select
from models.layers import (BatchNorm2d, Conv2d, LayerNorm, Linear, Module, Profile, Shape,
                           trace_conv, trace_linear)
from utils.error_utils import ChannelCountError, ShapeError, WeightFormatError

# Configure logging
logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

RESNET_SCALES = (4, 8, 16, 32)
VIT_SCALES = (16, 16, 16, 16)
PATCH_SIZE = 16


@dataclass
class FeaturePyramid:
    """Four stage maps with their declared downscale factors and channel counts."""
    stages: List[Tensor]
    scales: Tuple[int, ...]
    channels: Tuple[int, ...]

    def validate(self, height: int, width: int) -> None:
        """
        Check the pyramid contract for an input of the given size.

        Raises:
            ShapeError: Naming the first stage that breaks the contract
        """
        if len(self.stages) != 4 or len(self.scales) != 4 or len(self.channels) != 4:
            raise ShapeError("A feature pyramid has exactly four stages", {'stages': len(self.stages)})
        for index, (stage, scale, channels) in enumerate(zip(self.stages, self.scales, self.channels), 1):
            expected = (channels, height // scale, width // scale)
            if tuple(stage.shape[1:]) != expected:
                raise ShapeError(f"Stage {index} breaks the pyramid contract",
                                 {'stage': index, 'expected': list(expected), 'actual': stage.dims[1:]})

    def __getitem__(self, index: int) -> Tensor:
        return self.stages[index]

    def __len__(self) -> int:
        return len(self.stages)


# ---------------------------------------------------------------------------
# Trainable residual encoder
# ---------------------------------------------------------------------------

class BasicBlock(Module):
    """Two 3x3 convolutions with an identity or 1x1 projection shortcut."""

    def __init__(self, rng: np.random.Generator, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        self.conv1 = Conv2d(rng, in_channels, out_channels, 3, stride, 1, bias=False)
        self.bn1 = BatchNorm2d(out_channels)
        self.conv2 = Conv2d(rng, out_channels, out_channels, 3, 1, 1, bias=False)
        self.bn2 = BatchNorm2d(out_channels)
        self.downsample = None
        if stride != 1 or in_channels != out_channels:
            self.downsample = Conv2d(rng, in_channels, out_channels, 1, stride, 0, bias=False)
            self.downsample_bn = BatchNorm2d(out_channels)

    def forward(self, x: Tensor) -> Tensor:
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        identity = x if self.downsample is None else self.downsample_bn(self.downsample(x))
        return F.relu(F.add(out, identity))

    def trace(self, shape: Shape, profile: Profile, name: str) -> Shape:
        out = trace_conv(self.conv1, shape, profile, f"{name}.conv1")
        out = trace_conv(self.conv2, out, profile, f"{name}.conv2")
        if self.downsample is not None:
            trace_conv(self.downsample, shape, profile, f"{name}.downsample")
        return out


class Stage(Module):
    """Sequence of residual blocks named '0', '1', ..."""

    def __init__(self, blocks: Sequence[Module]):
        super().__init__()
        self.count = len(blocks)
        for index, block in enumerate(blocks):
            setattr(self, str(index), block)

    def blocks(self) -> List[Module]:
        return [getattr(self, str(index)) for index in range(self.count)]

    def forward(self, x: Tensor) -> Tensor:
        for block in self.blocks():
            x = block(x)
        return x

    def trace(self, shape: Shape, profile: Profile, name: str) -> Shape:
        for index, block in enumerate(self.blocks()):
            shape = block.trace(shape, profile, f"{name}.{index}")
        return shape


class ResNetLite(Module):
    """
    Residual encoder over image + mask (4 input channels) without a classifier.

    Stages come out at 1/4, 1/8, 1/16 and 1/32 of the input.
    """

    IN_CHANNELS = 4

    def __init__(self, rng: np.random.Generator, widths: Sequence[int] = (64, 128, 256, 512),
                 blocks_per_stage: int = 2):
        super().__init__()
        self.widths = tuple(widths)
        self.conv1 = Conv2d(rng, self.IN_CHANNELS, widths[0], 7, 2, 3, bias=False)
        self.bn1 = BatchNorm2d(widths[0])
        in_channels = widths[0]
        for index, width in enumerate(widths, 1):
            stride = 1 if index == 1 else 2
            blocks = [BasicBlock(rng, in_channels, width, stride)]
            blocks += [BasicBlock(rng, width, width, 1) for _ in range(blocks_per_stage - 1)]
            setattr(self, f"layer{index}", Stage(blocks))
            in_channels = width

    def stages(self) -> List[Stage]:
        return [self.layer1, self.layer2, self.layer3, self.layer4]

    def forward(self, x: Tensor) -> FeaturePyramid:
        """
        Encode a (B, 4, H, W) image + mask stack.

        Raises:
            ChannelCountError: If the input does not have exactly 4 channels
            ShapeError: If H or W is not divisible by 32
        """
        if x.ndim != 4 or x.shape[1] != self.IN_CHANNELS:
            raise ChannelCountError(
                "The residual encoder takes 4 input channels (RGB image + segmentation mask)",
                {'expected_channels': self.IN_CHANNELS, 'actual': x.dims}
            )
        height, width = x.shape[2:]
        if height % 32 or width % 32:
            raise ShapeError("Input height and width must be divisible by 32",
                             {'height': height, 'width': width})
        out = F.relu(self.bn1(self.conv1(x)))
        out = F.max_pool2d(out, 3, 2, 1)
        stages = []
        for stage in self.stages():
            out = stage(out)
            stages.append(out)
        return FeaturePyramid(stages, RESNET_SCALES, self.widths)

    def trace(self, shape: Shape, profile: Profile, name: str = "resnet") -> List[Shape]:
        out = trace_conv(self.conv1, shape, profile, f"{name}.conv1")
        channels, height, width = out
        out = (channels, F.conv_output_size(height, 3, 2, 1, 1), F.conv_output_size(width, 3, 2, 1, 1))
        shapes = []
        for index, stage in enumerate(self.stages(), 1):
            out = stage.trace(out, profile, f"{name}.layer{index}")
            shapes.append(out)
        return shapes


# ---------------------------------------------------------------------------
# Frozen transformer encoder
# ---------------------------------------------------------------------------

class Attention(Module):
    def __init__(self, rng: np.random.Generator, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        std = 1.0 / np.sqrt(dim)
        self.q = Linear(rng, dim, dim, std=std)
        self.k = Linear(rng, dim, dim, std=std)
        self.v = Linear(rng, dim, dim, std=std)
        self.proj = Linear(rng, dim, dim, std=std)

    def params(self) -> F.AttentionParams:
        return F.AttentionParams(self.q.weight, self.q.bias, self.k.weight, self.k.bias,
                                 self.v.weight, self.v.bias, self.proj.weight, self.proj.bias)

    def forward(self, tokens: Tensor) -> Tensor:
        return F.multi_head_self_attention(tokens, self.params(), self.heads)

    def trace(self, shape: Shape, profile: Profile, name: str) -> Shape:
        count, dim = shape
        for part in ("q", "k", "v"):
            trace_linear(getattr(self, part), shape, profile, f"{name}.{part}")
        profile.add(f"{name}.scores", "attention", (self.heads, count, count), count * count * dim)
        profile.add(f"{name}.mix", "attention", (count, dim), count * count * dim)
        return trace_linear(self.proj, shape, profile, f"{name}.proj")


class TransformerBlock(Module):
    """Pre-norm block: x + attn(ln(x)), then x + mlp(ln(x))."""

    def __init__(self, rng: np.random.Generator, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(rng, dim, heads)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(rng, dim, dim * mlp_ratio, std=1.0 / np.sqrt(dim))
        self.fc2 = Linear(rng, dim * mlp_ratio, dim, std=1.0 / np.sqrt(dim * mlp_ratio))

    def forward(self, x: Tensor) -> Tensor:
        x = F.add(x, self.attn(self.norm1(x)))
        return F.add(x, self.fc2(F.gelu(self.fc1(self.norm2(x)))))

    def trace(self, shape: Shape, profile: Profile, name: str) -> Shape:
        self.attn.trace(shape, profile, f"{name}.attn")
        hidden = trace_linear(self.fc1, shape, profile, f"{name}.fc1")
        return trace_linear(self.fc2, hidden, profile, f"{name}.fc2")


class ViTLite(Module):
    """
    Patch-embedding transformer whose parameters never train.

    The outputs of the blocks listed in `taps` (1-based) are reshaped into
    (B, D, H/16, W/16) maps and returned as the four stages.
    """

    def __init__(self, rng: np.random.Generator, embed_dim: int = 96, depth: int = 8, heads: int = 4,
                 mlp_ratio: int = 4, taps: Tuple[int, int, int, int] = (2, 4, 6, 8), image_size: int = 64):
        super().__init__()
        self.embed_dim = embed_dim
        self.depth = depth
        self.heads = heads
        self.taps = tuple(taps)
        self.grid = image_size // PATCH_SIZE
        self.patch_embed = Conv2d(rng, 3, embed_dim, PATCH_SIZE, PATCH_SIZE, 0, bias=True)
        self.pos_embed = Tensor((rng.standard_normal((1, self.grid * self.grid, embed_dim)) * 0.02)
                                .astype(np.float32), requires_grad=True)
        for index in range(depth):
            setattr(self, f"block{index}", TransformerBlock(rng, embed_dim, heads, mlp_ratio))
        self.freeze()

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.parameters())

    def blocks(self) -> List[TransformerBlock]:
        return [getattr(self, f"block{index}") for index in range(self.depth)]

    def _positional(self, grid_h: int, grid_w: int) -> Tensor:
        if (grid_h, grid_w) == (self.grid, self.grid):
            return self.pos_embed
        pos = F.transpose(F.reshape(self.pos_embed, (1, self.grid, self.grid, self.embed_dim)), (0, 3, 1, 2))
        pos = F.bilinear_resize(pos, grid_h, grid_w)
        return F.reshape(F.transpose(pos, (0, 2, 3, 1)), (1, grid_h * grid_w, self.embed_dim))

    def embed(self, image: Tensor) -> Tensor:
        """Patch tokens plus positional embedding, (B, N, D), before any block."""
        if image.ndim != 4 or image.shape[1] != 3:
            raise ChannelCountError("The frozen encoder takes 3-channel images",
                                    {'expected_channels': 3, 'actual': image.dims})
        batch, _, height, width = image.shape
        if height % PATCH_SIZE or width % PATCH_SIZE:
            raise ShapeError("Image height and width must be divisible by 16",
                             {'height': height, 'width': width})
        grid_h, grid_w = height // PATCH_SIZE, width // PATCH_SIZE
        patches = self.patch_embed(image)
        tokens = F.transpose(F.reshape(patches, (batch, self.embed_dim, grid_h * grid_w)), (0, 2, 1))
        return F.add(tokens, self._positional(grid_h, grid_w))

    def forward(self, image: Tensor) -> FeaturePyramid:
        batch, _, height, width = image.shape
        tokens = self.embed(image)
        grid_h, grid_w = height // PATCH_SIZE, width // PATCH_SIZE
        stages = []
        for index, block in enumerate(self.blocks(), 1):
            tokens = block(tokens)
            if index in self.taps:
                stage = F.transpose(tokens, (0, 2, 1))
                stages.append(F.reshape(stage, (batch, self.embed_dim, grid_h, grid_w)))
        return FeaturePyramid(stages, VIT_SCALES, (self.embed_dim,) * 4)

    def trace(self, shape: Shape, profile: Profile, name: str = "vit") -> List[Shape]:
        out = trace_conv(self.patch_embed, shape, profile, f"{name}.patch_embed")
        _, grid_h, grid_w = out
        tokens = (grid_h * grid_w, self.embed_dim)
        for index, block in enumerate(self.blocks()):
            tokens = block.trace(tokens, profile, f"{name}.block{index}")
        return [(self.embed_dim, grid_h, grid_w)] * 4


def init_resnet_lite(seed: int, config: ModelConfig) -> ResNetLite:
    return ResNetLite(np.random.default_rng([seed, 1]), config.resnet_widths, config.resnet_blocks)


def init_frozen_vit(seed: int, config: ModelConfig, weights_path: Optional[str] = None) -> ViTLite:
    """
    Build the frozen encoder from a seed, optionally overwriting it from an AQSW file.

    Args:
        seed: Seed of the deterministic initialisation
        config: Model configuration (embed dim, depth, heads, taps)
        weights_path: Optional AQSW file holding 'vit.*' tensors

    Returns:
        Frozen ViTLite

    Raises:
        ConfigurationError: If the embed dim is not divisible by the head count
        WeightFormatError: If the weight file is malformed (details carry the byte offset)
    """
    config.validate()
    vit = ViTLite(np.random.default_rng([seed, 2]), config.vit_embed_dim, config.vit_depth,
                  config.vit_heads, config.vit_mlp_ratio, config.taps, config.image_size)
    weights_path = weights_path or config.vit_weights
    if weights_path:
        state = {name[len("vit."):]: value for name, value in select(load_weights(weights_path), "vit.").items()}
        vit.load_state_dict(state)
        logger.info(f"Loaded frozen encoder weights from {weights_path}")
    return vit


def save_vit_features(path: str, pyramid: FeaturePyramid) -> None:
    """Store precomputed frozen-encoder stage maps as 'vit_features.stage{i}'."""
    save_weights(path, {f"vit_features.stage{i}": stage.data for i, stage in enumerate(pyramid.stages, 1)})


def load_vit_features(path: str) -> FeaturePyramid:
    """Read stage maps written by `save_vit_features`."""
    tensors = select(load_weights(path), "vit_features.")
    missing = [f"vit_features.stage{i}" for i in range(1, 5) if f"vit_features.stage{i}" not in tensors]
    if missing:
        raise WeightFormatError("Feature file lacks stage maps", {'missing': missing})
    stages = [Tensor(tensors[f"vit_features.stage{i}"]) for i in range(1, 5)]
    return FeaturePyramid(stages, VIT_SCALES, tuple(s.shape[1] for s in stages))
