# Dependencies:
# pip install pytest pytest-mock
import math
import os

import numpy as np
import pytest

from config.schemas import LossConfig, ModelConfig, OptimizerConfig, SceneConfig, TrainConfig
from engine import functional as F
from engine.tensor import Tensor
from models import loss as loss_module
from models.accounting import count_params_flops
from models.layers import Conv2d, Linear
from models.loss import (combine_terms, combined_loss, cross_entropy, dice_loss, loss_breakdown, one_hot,
                         segmentation_loss)
from models.network import SqaNetwork
from services.dataset_service import DatasetService
from services.inference_service import load_network
from services.training_service import TrainingService, aux_targets
from utils.error_utils import LabelValueError, NonFiniteError, ShapeError


@pytest.fixture(scope="module")
def small_dataset():
    return DatasetService(show_progress=False).generate(SceneConfig(height=64, width=64, seed=11), 8)


def make_service(epochs=1, lr=1e-3, seed=0):
    return TrainingService(ModelConfig.toy(), LossConfig(), OptimizerConfig(lr=lr),
                           TrainConfig(epochs=epochs, batch_size=2, seed=seed, show_progress=False))


class TestLoss:

    # Confident correct logits give a near-zero loss
    def test_confident_is_near_zero(self, rng):
        labels = rng.integers(0, 3, size=(2, 8, 8))
        logits = Tensor(one_hot(labels) * 1e6)
        assert combined_loss(logits, labels).item() < 1e-3

    # Uniform logits give a cross-entropy of ln 3
    def test_uniform_cross_entropy(self, rng):
        labels = rng.integers(0, 3, size=(2, 8, 8))
        logits = Tensor(np.zeros((2, 3, 8, 8), dtype=np.float32))
        assert cross_entropy(logits, labels).item() == pytest.approx(math.log(3.0), abs=1e-6)

    # Default weights halve each term
    def test_combine_terms(self):
        assert combine_terms(0.4, 0.2, LossConfig()) == pytest.approx(0.3)

    # Dice loss stays within [0, 1]
    def test_dice_range(self, rng):
        for _ in range(10):
            labels = rng.integers(0, 3, size=(2, 6, 6))
            logits = Tensor(rng.standard_normal((2, 3, 6, 6)) * 5)
            assert 0.0 <= dice_loss(logits, labels).item() <= 1.0

    # The auxiliary term is added with weight 0.4
    def test_aux_weight(self, rng):
        labels = rng.integers(0, 3, size=(1, 4, 4))
        logits = Tensor(rng.standard_normal((1, 3, 4, 4)))
        aux = Tensor(rng.standard_normal((1, 3, 4, 4)))
        config = LossConfig()
        expected = segmentation_loss(logits, labels, config).item() + 0.4 * segmentation_loss(aux, labels, config).item()
        assert combined_loss(logits, labels, config, aux).item() == pytest.approx(expected, rel=1e-6)

    # A label of 3 is rejected
    def test_rejects_bad_label(self):
        labels = np.zeros((1, 4, 4), dtype=np.int64)
        labels[0, 1, 1] = 3
        with pytest.raises(LabelValueError):
            combined_loss(Tensor(np.zeros((1, 3, 4, 4))), labels)

    # Labels must match the logits' batch and size
    def test_rejects_mismatched_labels(self):
        with pytest.raises(ShapeError):
            combined_loss(Tensor(np.zeros((1, 3, 4, 4))), np.zeros((1, 4, 5), dtype=np.int64))

    # Logits need exactly three class channels
    def test_rejects_wrong_class_count(self):
        with pytest.raises(ShapeError) as error:
            combined_loss(Tensor(np.zeros((1, 2, 4, 4))), np.zeros((1, 4, 4), dtype=np.int64))
        assert error.value.details['expected'] == ['*', 3, '*', '*']
        assert error.value.details['actual'] == [1, 2, 4, 4]

    # The breakdown reports each term and recombines them with the loss weights
    def test_loss_breakdown(self, rng):
        # Setup
        labels = rng.integers(0, 3, size=(2, 5, 5))
        logits = Tensor(rng.standard_normal((2, 3, 5, 5)))
        config = LossConfig(ce_weight=0.7, dice_weight=0.3)

        # Execute
        terms = loss_breakdown(logits, labels, config)

        # Assert
        assert terms['ce'] == pytest.approx(cross_entropy(logits, labels).item())
        assert terms['dice'] == pytest.approx(dice_loss(logits, labels).item())
        assert terms['total'] == pytest.approx(0.7 * terms['ce'] + 0.3 * terms['dice'])
        assert terms['total'] == pytest.approx(segmentation_loss(logits, labels, config).item(), rel=1e-6)

    # The building target marks every ground-truth pixel
    def test_aux_building_target(self):
        labels = np.array([[[0, 2], [1, 0]]])
        masks = np.array([[[[1, 1], [0, 0]]]], dtype=np.float32)
        np.testing.assert_array_equal(aux_targets(labels, masks, "building"), [[[1, 0], [1, 0]]])
        np.testing.assert_array_equal(aux_targets(labels, masks, "qa"), labels)


class TestTraining:

    # Same seeds give bit-identical loss curves
    def test_deterministic(self, small_dataset):
        first = make_service().train(small_dataset)
        second = make_service().train(small_dataset)
        assert first.losses == second.losses
        assert first.hashes_after == second.hashes_after

    # Training lowers the loss, moves the residual encoder and leaves the frozen one alone
    def test_reduces_loss_and_keeps_frozen(self, small_dataset):
        # Execute
        result = make_service(epochs=2, lr=3e-3).train(small_dataset)

        # Assert
        assert result.steps >= 5
        assert result.losses[-1] < result.losses[0]
        assert result.hashes_after['vit'] == result.hashes_before['vit']
        assert result.hashes_after['resnet'] != result.hashes_before['resnet']
        for entry in result.log:
            assert entry['ce'] > 0.0
            assert 0.0 <= entry['dice'] <= 1.0

    # The optimizer is never handed frozen parameters
    def test_frozen_not_trainable(self):
        network = SqaNetwork(ModelConfig.toy())
        frozen = {id(p) for p in network.vit.parameters()}
        assert frozen
        assert not any(id(p) in frozen for p in network.trainable_parameters())

    # A NaN loss aborts with the first operation that produced it
    def test_nan_guard(self, small_dataset, mocker):
        # Setup
        real_loss = loss_module.combined_loss

        def poisoned(*args, **kwargs):
            with np.errstate(invalid="ignore"):
                return F.log(F.mul(real_loss(*args, **kwargs), -1.0))

        mocker.patch('services.training_service.combined_loss', side_effect=poisoned)

        # Execute
        with pytest.raises(NonFiniteError) as error:
            make_service().train(small_dataset)

        # Assert
        assert error.value.details['first_nonfinite_op'] == "log"
        assert error.value.details['epoch'] == 1

    # Weights, config and log are written and reload to the same network
    def test_save_and_reload(self, small_dataset, tmp_path):
        # Setup
        service = make_service()
        result = service.train(small_dataset)

        # Execute
        paths = service.save(result, str(tmp_path))

        # Assert
        assert all(os.path.exists(p) for p in paths.values())
        assert load_network(paths['weights']).hashes() == result.network.hashes()


class TestAccounting:

    # Dense 10 -> 5 has 55 parameters
    def test_linear_count(self):
        assert Linear(np.random.default_rng(0), 10, 5).num_parameters() == 55

    # 3x3 conv 4 -> 8 with bias has 296 parameters
    def test_conv_count(self):
        assert Conv2d(np.random.default_rng(0), 4, 8, 3).num_parameters() == 296

    # Trainable and frozen totals are reported separately
    def test_report_splits_frozen(self, tiny_model_config):
        network = SqaNetwork(tiny_model_config)
        report = count_params_flops(tiny_model_config, 64, network=network)
        assert report.frozen_parameters == network.vit.num_parameters()
        assert report.trainable_parameters == network.num_parameters() - report.frozen_parameters
        assert report.macs > 0
        assert report.to_dict()['flops_g'] == round(report.macs / 1e9, 3)

    # The baseline without fusion has no frozen encoder
    def test_baseline_has_no_frozen(self):
        report = count_params_flops(ModelConfig.preset("baseline", resnet_widths=(8, 16, 32, 64), resnet_blocks=1,
                                                       head_channels=8), 64)
        assert report.frozen_parameters == 0
        assert report.name == "Baseline"

    # Each ablation step adds cost
    def test_cost_grows_with_components(self):
        names = ("baseline", "baseline+pif", "baseline+pif+aqsd")
        toy = dict(resnet_widths=(8, 16, 32, 64), resnet_blocks=1, vit_embed_dim=16, vit_depth=4, vit_heads=2,
                   vit_mlp_ratio=2, csam_ratio=4, head_channels=8)
        macs = [count_params_flops(ModelConfig.preset(n, **toy), 64).macs for n in names]
        assert macs[0] < macs[1] < macs[2]
