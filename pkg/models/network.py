"""
Network Module

Assembles the full quality-assessment network from a ModelConfig: trainable
residual encoder, optional frozen transformer encoder, neck, optional
auxiliary head and either the AQS decoder or the plain baseline head.
Parameter names carry the prefixes 'resnet.', 'vit.', 'neck.', 'aux_head.',
'aqsd.' and 'head.' in weight files.
"""
from dataclasses import dataclass
from typing import Dict, List, Optional
import logging

import numpy as np

from config.schemas import ModelConfig
from engine.tensor import Tensor
from engine.weights import load_weights, parameter_hash, save_weights, select
from models.backbones import FeaturePyramid, ViTLite, init_frozen_vit, init_resnet_lite
from models.decoder import AQSDecoder, PlainHead
from models.layers import Module, Profile, Shape
from models.neck import AuxHead, Neck, NeckOutput
from utils.error_utils import ChannelCountError, ShapeError, validate_binary_mask

# Configure logging
logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)


@dataclass
class NetworkOutput:
    logits: Tensor
    aux_logits: Optional[Tensor]
    neck: NeckOutput


class SqaNetwork(Module):
    """
    Segmentation quality assessment network.

    Each part is initialised from its own generator derived from
    `config.seed`, so toggling one ablation switch leaves the other parts'
    initial weights untouched.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        seed = config.seed
        widths = tuple(config.resnet_widths)
        self.resnet = init_resnet_lite(seed, config)
        self.vit: Optional[ViTLite] = None
        if config.pretrained_fusion:
            self.vit = init_frozen_vit(seed, config)
        self.neck = Neck(np.random.default_rng([seed, 3]), widths, config.vit_embed_dim,
                         config.pretrained_fusion, config.aspp_rates)
        self.aux_head: Optional[AuxHead] = None
        if config.aux_enabled:
            source_channels = widths[3] if config.aux_source == "n4" else widths[0]
            self.aux_head = AuxHead(np.random.default_rng([seed, 4]), source_channels)
        rng = np.random.default_rng([seed, 5])
        if config.decoder == "aqs":
            self.aqsd = AQSDecoder(rng, widths[:3], config.head_channels, config.csam_ratio,
                                   config.csam_kernel, config.decoder_uses_image)
        else:
            self.head = PlainHead(rng, widths[0], config.head_channels)
        logger.info(f"Built {config.ablation_name} network: "
                    f"{self.num_parameters(trainable=True)} trainable / "
                    f"{self.num_parameters(trainable=False)} frozen parameters")

    def vit_features(self, image: Tensor) -> Optional[FeaturePyramid]:
        """Frozen-encoder pyramid for `image`, or None when fusion is disabled."""
        if self.vit is None:
            return None
        return self.vit(image)

    def forward(self, image: Tensor, mask: Tensor,
                vit_features: Optional[FeaturePyramid] = None) -> NetworkOutput:
        """
        Args:
            image: (B, 3, H, W) image in [0, 1]
            mask: (B, 1, H, W) segmentation mask in {0, 1}
            vit_features: Precomputed frozen pyramid; computed from `image` when omitted

        Returns:
            NetworkOutput with (B, 3, H, W) logits and, when enabled, auxiliary logits

        Raises:
            ChannelCountError: If image or mask channel counts are wrong
            MaskValueError: If the mask is not binary
            ShapeError: If sizes disagree or are not divisible by 32
        """
        if image.ndim != 4 or image.shape[1] != 3:
            raise ChannelCountError("Image must have 3 channels", {'actual': image.dims})
        if mask.ndim != 4 or mask.shape[1] != 1:
            raise ChannelCountError("Mask must have 1 channel", {'actual': mask.dims})
        if image.shape[0] != mask.shape[0] or image.shape[2:] != mask.shape[2:]:
            raise ShapeError("Image and mask disagree in batch or size",
                             {'image': image.dims, 'mask': mask.dims})
        validate_binary_mask(mask.data, "segmentation mask")
        height, width = image.shape[2:]
        resnet = self.resnet(Tensor(np.concatenate([image.data, mask.data.astype(image.dtype)], axis=1)))
        vit = None
        if self.vit is not None:
            vit = vit_features if vit_features is not None else self.vit(image)
            vit.validate(height, width)
        neck = self.neck(resnet, vit)
        aux_logits = None
        if self.aux_head is not None:
            source = neck.maps[3] if self.config.aux_source == "n4" else neck.maps[0]
            aux_logits = self.aux_head(source, height, width)
            neck.aux_logits = aux_logits
        if self.config.decoder == "aqs":
            logits = self.aqsd(mask, neck, image if self.config.decoder_uses_image else None)
        else:
            logits = self.head(neck, height, width)
        return NetworkOutput(logits, aux_logits, neck)

    def trace(self, height: int, width: int, profile: Optional[Profile] = None) -> Dict[str, List[Shape]]:
        """
        Propagate shapes through the network for a (3, height, width) input
        without computing anything, recording MACs into `profile`.

        Returns:
            Stage shapes keyed 'resnet', 'vit', 'neck' and 'logits'
        """
        if height % 32 or width % 32:
            raise ShapeError("Input height and width must be divisible by 32", {'height': height, 'width': width})
        profile = profile if profile is not None else Profile()
        shapes: Dict[str, List[Shape]] = {}
        shapes['resnet'] = self.resnet.trace((4, height, width), profile, "resnet")
        shapes['vit'] = self.vit.trace((3, height, width), profile, "vit") if self.vit is not None else []
        shapes['neck'] = self.neck.trace(shapes['resnet'], shapes['vit'] or None, profile, "neck")
        if self.aux_head is not None:
            source = shapes['neck'][3] if self.config.aux_source == "n4" else shapes['neck'][0]
            shapes['aux'] = [self.aux_head.trace(source, profile, "aux_head", height, width)]
        if self.config.decoder == "aqs":
            shapes['logits'] = [self.aqsd.trace((1, height, width), profile, "aqsd")]
        else:
            shapes['logits'] = [self.head.trace(shapes['neck'][0], profile, "head", height, width)]
        return shapes

    def hashes(self) -> Dict[str, str]:
        """SHA-256 of each top-level part's state (parameters and buffers)."""
        state = self.state_dict()
        parts = sorted({name.split(".", 1)[0] for name in state})
        return {part: parameter_hash(select(state, f"{part}.")) for part in parts}

    def save(self, path: str) -> None:
        save_weights(path, self.state_dict())
        logger.info(f"Saved {len(self.state_dict())} tensors to {path}")

    def load(self, path: str) -> "SqaNetwork":
        """
        Raises:
            WeightFormatError: If the file is malformed
            UsageError: If the stored tensors do not match this configuration
        """
        self.load_state_dict(load_weights(path))
        logger.info(f"Loaded weights from {path}")
        return self
