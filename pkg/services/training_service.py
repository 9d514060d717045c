"""
Training Service

Deterministic mini-batch training of the quality-assessment network with
Adam. The frozen encoder is never handed to the optimizer and its hash is
checked after every run; a non-finite loss aborts with the name of the first
operation that produced a non-finite value.
"""
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional
import json
import logging
import os

import numpy as np
import pandas as pd
from tqdm import tqdm

from config.schemas import LossConfig, ModelConfig, OptimizerConfig, TrainConfig, save_json_config
from engine.optim import Adam
from engine.tensor import ComputationRecord, Tensor, backward_pass
from models.loss import combined_loss, loss_breakdown
from models.network import NetworkOutput, SqaNetwork
from services.dataset_service import SqaDataset
from utils.env_utils import progress_enabled
from utils.error_utils import NonFiniteError, UsageError

# Configure logging
logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)


@dataclass
class TrainingResult:
    network: SqaNetwork
    log: List[Dict[str, Any]]
    hashes_before: Dict[str, str]
    hashes_after: Dict[str, str]
    steps: int = 0
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def losses(self) -> List[float]:
        """Measured loss after each epoch, epoch 0 being the untrained network."""
        return [entry['loss'] for entry in self.log]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.log)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'log': self.log,
            'steps': self.steps,
            'hashes_before': self.hashes_before,
            'hashes_after': self.hashes_after,
            **self.metadata,
        }


def aux_targets(labels: np.ndarray, masks: np.ndarray, target: str) -> np.ndarray:
    """Auxiliary supervision: the QA labels, or the building ground truth as classes {0, 1}."""
    if target == "qa":
        return labels
    # gt = (seg and not mistaken) or missed
    seg = masks[:, 0].astype(bool)
    return (((seg & (labels != 2)) | (labels == 1))).astype(np.int64)


class TrainingService:
    """
    Trains one network configuration on a dataset.
    """

    def __init__(self, model_config: ModelConfig, loss_config: Optional[LossConfig] = None,
                 optimizer_config: Optional[OptimizerConfig] = None, train_config: Optional[TrainConfig] = None):
        self.model_config = model_config
        self.loss_config = loss_config or LossConfig()
        self.optimizer_config = optimizer_config or OptimizerConfig()
        self.train_config = train_config or TrainConfig()
        logger.info(f"Initializing TrainingService for {model_config.ablation_name}")

    def build_network(self) -> SqaNetwork:
        return SqaNetwork(self.model_config)

    def _objective(self, output: NetworkOutput, masks: np.ndarray, labels: np.ndarray) -> Tensor:
        aux_labels = None
        if output.aux_logits is not None:
            aux_labels = aux_targets(labels, masks, self.model_config.aux_target)
        return combined_loss(output.logits, labels, self.loss_config, output.aux_logits, aux_labels)

    def _batch_loss(self, network: SqaNetwork, images: np.ndarray, masks: np.ndarray,
                    labels: np.ndarray) -> Tensor:
        return self._objective(network(Tensor(images), Tensor(masks)), masks, labels)

    def measure_loss(self, network: SqaNetwork, dataset: SqaDataset) -> Dict[str, float]:
        """
        Sample-weighted mean training-mode loss over the dataset without changing
        any state (batch-norm running statistics are restored afterwards).

        Returns:
            'loss' is the full objective; 'ce' and 'dice' are the main head's terms
        """
        snapshot = network.state_dict()
        rows, weights = [], []
        for images, masks, labels in dataset.batches(self.train_config.batch_size):
            output = network(Tensor(images), Tensor(masks))
            terms = loss_breakdown(output.logits, labels, self.loss_config)
            rows.append((self._objective(output, masks, labels).item(), terms['ce'], terms['dice']))
            weights.append(len(images))
        network.load_state_dict(snapshot)
        loss, ce, dice = np.average(np.array(rows), axis=0, weights=weights)
        return {'loss': float(loss), 'ce': float(ce), 'dice': float(dice)}

    def train(self, dataset: SqaDataset, network: Optional[SqaNetwork] = None) -> TrainingResult:
        """
        Run the configured number of epochs.

        Args:
            dataset: Training triplets
            network: Optional network to continue from; built from the config otherwise

        Returns:
            TrainingResult with per-epoch log entries (epoch 0 = before training)

        Raises:
            UsageError: If the dataset is empty or the frozen encoder changed
            NonFiniteError: If a batch loss is NaN or infinite
        """
        if len(dataset) == 0:
            raise UsageError("Cannot train on an empty dataset")
        config = self.train_config
        network = network or self.build_network()
        network.train()
        hashes_before = network.hashes()
        optimizer = Adam(network.trainable_parameters(), lr=self.optimizer_config.lr,
                         beta1=self.optimizer_config.beta1, beta2=self.optimizer_config.beta2,
                         eps=self.optimizer_config.eps)

        log = [{'epoch': 0, **self.measure_loss(network, dataset), 'batch_loss': None}]
        logger.info(f"Epoch 0: loss {log[0]['loss']:.6f} (ce {log[0]['ce']:.6f}, dice {log[0]['dice']:.6f})")
        steps = 0
        show = progress_enabled(config.show_progress)
        for epoch in range(1, config.epochs + 1):
            order = np.random.default_rng([config.seed, epoch]).permutation(len(dataset))
            batch_losses = []
            batches = dataset.batches(config.batch_size, order)
            total = -(-len(dataset) // config.batch_size)
            for batch, (images, masks, labels) in enumerate(
                    tqdm(batches, total=total, desc=f"Epoch {epoch}", disable=not show)):
                optimizer.zero_grad()
                loss = self._batch_loss(network, images, masks, labels)
                record = ComputationRecord(loss)
                if not loss.is_finite():
                    culprit = record.first_nonfinite()
                    raise NonFiniteError(
                        f"Non-finite loss in epoch {epoch}, batch {batch}",
                        {'epoch': epoch, 'batch': batch,
                         'first_nonfinite_op': culprit.op if culprit is not None else None}
                    )
                backward_pass(record, loss)
                optimizer.step()
                steps += 1
                batch_losses.append(loss.item())
                logger.debug(f"Epoch {epoch} batch {batch}: loss {batch_losses[-1]:.6f}")
            entry = {'epoch': epoch, **self.measure_loss(network, dataset),
                     'batch_loss': float(np.mean(batch_losses))}
            log.append(entry)
            logger.info(f"Epoch {epoch}: loss {entry['loss']:.6f} (ce {entry['ce']:.6f}, dice {entry['dice']:.6f}, "
                        f"mean batch loss {entry['batch_loss']:.6f})")

        hashes_after = network.hashes()
        if 'vit' in hashes_before and hashes_before['vit'] != hashes_after['vit']:
            raise UsageError("Frozen encoder parameters changed during training",
                             {'before': hashes_before['vit'], 'after': hashes_after['vit']})
        return TrainingResult(network, log, hashes_before, hashes_after, steps,
                              {'model': self.model_config.ablation_name, 'samples': len(dataset)})

    def save(self, result: TrainingResult, output_dir: str) -> Dict[str, str]:
        """
        Write weights.aqsw, model_config.json and train_log.json into `output_dir`.

        Returns:
            Paths keyed 'weights', 'model_config' and 'log'
        """
        os.makedirs(output_dir, exist_ok=True)
        paths = {
            'weights': os.path.join(output_dir, "weights.aqsw"),
            'model_config': os.path.join(output_dir, "model_config.json"),
            'log': os.path.join(output_dir, "train_log.json"),
        }
        result.network.save(paths['weights'])
        save_json_config(paths['model_config'], self.model_config)
        with open(paths['log'], "w") as f:
            json.dump(result.to_dict(), f, indent=2)
        logger.info(f"Saved training outputs to {output_dir}")
        return paths
