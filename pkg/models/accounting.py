"""
Accounting Module

Parameter totals and multiply-accumulate estimates for a configuration,
obtained by shape propagation so that full-size inputs cost nothing to
analyse.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional
import logging

import pandas as pd

from config.schemas import ModelConfig
from models.layers import Profile, Shape
from models.network import SqaNetwork

# Configure logging
logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)


@dataclass
class AccountingReport:
    name: str
    height: int
    width: int
    trainable_parameters: int
    frozen_parameters: int
    macs: int
    shapes: Dict[str, List[Shape]] = field(default_factory=dict)
    profile: Optional[Profile] = None

    @property
    def total_parameters(self) -> int:
        return self.trainable_parameters + self.frozen_parameters

    def to_dict(self) -> Dict[str, object]:
        return {
            'name': self.name,
            'input': [self.height, self.width],
            'trainable_parameters': self.trainable_parameters,
            'frozen_parameters': self.frozen_parameters,
            'total_parameters': self.total_parameters,
            'params_m': round(self.total_parameters / 1e6, 3),
            'macs': self.macs,
            'flops_g': round(self.macs / 1e9, 3),
            'neck_shapes': [list(s) for s in self.shapes.get('neck', [])],
        }

    def layer_table(self) -> pd.DataFrame:
        """One row per weighted operation: name, op, output shape and MACs."""
        entries = self.profile.entries if self.profile is not None else []
        return pd.DataFrame(entries, columns=['layer', 'op', 'output_shape', 'macs'])


def count_params_flops(config: ModelConfig, height: Optional[int] = None,
                       width: Optional[int] = None, network: Optional[SqaNetwork] = None) -> AccountingReport:
    """
    Count parameters and estimate MACs at an input size.

    Only convolutions, dense layers and attention products are counted;
    normalisation, activations and resampling are treated as free.

    Args:
        config: Model configuration
        height: Input height (defaults to config.image_size)
        width: Input width (defaults to height)
        network: Already built network for `config`, to avoid rebuilding it

    Returns:
        AccountingReport with trainable and frozen totals reported separately
    """
    height = height or config.image_size
    width = width or height
    network = network or SqaNetwork(config)
    profile = Profile()
    shapes = network.trace(height, width, profile)
    report = AccountingReport(
        name=config.ablation_name,
        height=height,
        width=width,
        trainable_parameters=network.num_parameters(trainable=True),
        frozen_parameters=network.num_parameters(trainable=False),
        macs=profile.total_macs,
        shapes=shapes,
        profile=profile,
    )
    logger.info(f"{report.name} at {height}x{width}: {report.total_parameters} parameters, "
                f"{report.macs / 1e9:.3f} GMACs")
    return report
