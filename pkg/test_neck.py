# Dependencies:
# pip install pytest
import numpy as np
import pytest

from config.schemas import ModelConfig
from engine import functional as F
from engine.tensor import Tensor
from models.backbones import FeaturePyramid
from models.layers import Profile
from models.neck import ASPP, AuxHead, Neck, NeckOutput, clamp_rate
from models.network import SqaNetwork
from utils.error_utils import ShapeError

WIDTHS = (8, 16, 32, 64)
VIT_DIM = 16


def make_neck(pretrained_fusion=True, seed=0):
    return Neck(np.random.default_rng(seed), WIDTHS, VIT_DIM, pretrained_fusion, (1, 6, 12, 18))


def random_pyramids(rng, batch=2, size=64):
    resnet = FeaturePyramid(
        [Tensor(rng.standard_normal((batch, w, size // s, size // s)).astype(np.float32))
         for w, s in zip(WIDTHS, (4, 8, 16, 32))],
        (4, 8, 16, 32), WIDTHS)
    vit = FeaturePyramid(
        [Tensor(rng.standard_normal((batch, VIT_DIM, size // 16, size // 16)).astype(np.float32)) for _ in range(4)],
        (16,) * 4, (VIT_DIM,) * 4)
    return resnet, vit


def dilated_oracle(x, w, dilation):
    _, cin, height, width = x.shape
    cout = w.shape[0]
    padded = np.pad(x, ((0, 0), (0, 0), (dilation, dilation), (dilation, dilation)))
    out = np.zeros((1, cout, height, width))
    for o in range(cout):
        for i in range(height):
            for j in range(width):
                out[0, o, i, j] = sum(w[o, c, u, v] * padded[0, c, i + u * dilation, j + v * dilation]
                                      for c in range(cin) for u in range(3) for v in range(3))
    return out


class TestAlignAndFuse:

    # Stage 1 resizes the aligned frozen map up to the residual size
    def test_stage_one(self, rng):
        neck = make_neck()
        resnet = Tensor(rng.standard_normal((1, 8, 16, 16)).astype(np.float32))
        vit = Tensor(rng.standard_normal((1, VIT_DIM, 4, 4)).astype(np.float32))
        assert neck.align_and_fuse_stage(resnet, vit, 1).shape == (1, 8, 16, 16)

    # Stage 4 resizes the residual map up to the frozen 1/16 size
    def test_stage_four(self, rng):
        neck = make_neck()
        resnet = Tensor(rng.standard_normal((1, 64, 2, 2)).astype(np.float32))
        vit = Tensor(rng.standard_normal((1, VIT_DIM, 4, 4)).astype(np.float32))
        assert neck.align_and_fuse_stage(resnet, vit, 4).shape == (1, 64, 4, 4)

    # Batch sizes must agree
    def test_batch_mismatch(self, rng):
        neck = make_neck()
        resnet = Tensor(np.zeros((2, 8, 16, 16), dtype=np.float32))
        vit = Tensor(np.zeros((1, VIT_DIM, 4, 4), dtype=np.float32))
        with pytest.raises(ShapeError):
            neck.align_and_fuse_stage(resnet, vit, 1)

    # With zeroed alignment the frozen input no longer matters
    def test_zeroed_alignment_ignores_frozen_input(self, rng):
        # Setup
        neck = make_neck().eval()
        neck.align2.weight.data[...] = 0.0
        neck.align2.bias.data[...] = 0.0
        resnet = Tensor(rng.standard_normal((1, 16, 8, 8)).astype(np.float32))
        vit_a = Tensor(rng.standard_normal((1, VIT_DIM, 4, 4)).astype(np.float32))
        vit_b = Tensor(rng.standard_normal((1, VIT_DIM, 4, 4)).astype(np.float32))

        # Execute
        out_a = neck.align_and_fuse_stage(resnet, vit_a, 2)
        out_b = neck.align_and_fuse_stage(resnet, vit_b, 2)

        # Assert
        np.testing.assert_array_equal(out_a.data, out_b.data)


class TestASPP:

    # Spatial extent is preserved for any size, including tiny maps
    @pytest.mark.parametrize("height,width", [(1, 1), (2, 3), (4, 4), (7, 5), (16, 16)])
    def test_preserves_extent(self, rng, height, width):
        aspp = ASPP(np.random.default_rng(0), 4)
        x = Tensor(rng.standard_normal((2, 4, height, width)).astype(np.float32))
        assert aspp(x).shape == (2, 4, height, width)

    # Rates shrink so the dilated kernel fits inside the map
    def test_clamp_rate(self):
        assert clamp_rate(18, 4, 4) == 3
        assert clamp_rate(6, 32, 32) == 6
        assert clamp_rate(12, 1, 1) == 1

    # All weights and biases zeroed give a zero output
    def test_zeroed_is_zero(self, rng):
        aspp = ASPP(np.random.default_rng(0), 4)
        for p in aspp.parameters():
            p.data[...] = 0.0
        out = aspp(Tensor(rng.standard_normal((2, 4, 6, 6)).astype(np.float32)))
        assert np.all(out.data == 0.0)

    # One dilated branch agrees with the nested-loop oracle
    def test_branch_matches_oracle(self):
        rng = np.random.default_rng(2)
        aspp = ASPP(np.random.default_rng(0), 3, rates=(1, 2, 3))
        for _ in range(100):
            index = int(rng.integers(0, 3))
            size = int(rng.integers(4, 9))
            x = rng.standard_normal((1, 3, size, size))
            rate = clamp_rate(aspp.rates[index], size, size)
            weight = getattr(aspp, f"branch{index}").weight.data.astype(np.float64)
            out = aspp.branch(index, Tensor(x))
            np.testing.assert_allclose(out.data, dilated_oracle(x, weight, rate), atol=1e-6)


class TestNeck:

    # 64 x 64 input: N1..N4 at 16, 8, 4, 4 with the stage widths
    def test_forward_shapes(self, rng):
        resnet, vit = random_pyramids(rng)
        output = make_neck()(resnet, vit)
        assert [m.shape for m in output.maps] == [(2, 8, 16, 16), (2, 16, 8, 8), (2, 32, 4, 4), (2, 64, 4, 4)]
        output.validate(64, 64)
        assert output.maps[2].shape[2:] == output.maps[3].shape[2:]

    # Without fusion there is no alignment and the shapes are unchanged
    def test_without_fusion(self, rng):
        neck = make_neck(pretrained_fusion=False)
        resnet, _ = random_pyramids(rng)
        output = neck(resnet)
        assert not any(name.startswith("align") for name, _ in neck.named_parameters())
        output.validate(64, 64)

    # A fused stage with the wrong channel count is named
    def test_top_down_contract(self, rng):
        neck = make_neck()
        fused = [Tensor(np.zeros((1, w, 4, 4), dtype=np.float32)) for w in WIDTHS]
        fused[1] = Tensor(np.zeros((1, 5, 4, 4), dtype=np.float32))
        with pytest.raises(ShapeError) as error:
            neck.top_down_fuse(fused)
        assert error.value.details['stage'] == 2

    # The output contract check names the map that breaks it
    def test_output_validate_names_map(self):
        maps = [Tensor(np.zeros((1, w, 64 // s, 64 // s), dtype=np.float32))
                for w, s in zip(WIDTHS, (4, 8, 16, 16))]
        maps[3] = Tensor(np.zeros((1, 64, 2, 2), dtype=np.float32))
        with pytest.raises(ShapeError) as error:
            NeckOutput(maps, WIDTHS).validate(64, 64)
        assert error.value.details['stage'] == "N4"

    # Every trainable neck parameter receives a nonzero gradient
    def test_gradients_reach_every_parameter(self, rng):
        # Setup
        neck = make_neck()
        resnet, vit = random_pyramids(rng)

        # Execute
        output = neck(resnet, vit)
        loss = None
        for feature in output.maps:
            term = F.sum(F.mul(feature, Tensor(rng.standard_normal(feature.shape).astype(np.float32))))
            loss = term if loss is None else F.add(loss, term)
        loss.backward()

        # Assert
        dead = [name for name, p in neck.named_parameters()
                if p.grad is None or not np.any(p.grad != 0)]
        assert dead == []

    # Random valid sizes keep the contract
    @pytest.mark.parametrize("size", [32, 96, 128])
    def test_contract_over_sizes(self, tiny_model_config, size):
        network = SqaNetwork(tiny_model_config).eval()
        image = Tensor(np.random.default_rng(size).random((1, 3, size, size)).astype(np.float32))
        mask = Tensor(np.zeros((1, 1, size, size), dtype=np.float32))
        network(image, mask).neck.validate(size, size)

    # 512 x 512 shape propagation gives the full-scale pyramid
    def test_full_scale_trace(self):
        network = SqaNetwork(ModelConfig())
        shapes = network.trace(512, 512, Profile())
        assert shapes['neck'] == [(64, 128, 128), (128, 64, 64), (256, 32, 32), (512, 32, 32)]
        assert shapes['logits'] == [(3, 512, 512)]


class TestAuxHead:

    # N4 at 4 x 4 becomes full-resolution logits
    def test_shape(self, rng):
        head = AuxHead(np.random.default_rng(0), 64)
        out = head(Tensor(rng.standard_normal((1, 64, 4, 4)).astype(np.float32)), 64, 64)
        assert out.shape == (1, 3, 64, 64)

    # Zeroed head gives uniform class probabilities
    def test_zeroed_is_uniform(self, rng):
        head = AuxHead(np.random.default_rng(0), 64)
        for p in head.parameters():
            p.data[...] = 0.0
        out = head(Tensor(rng.standard_normal((1, 64, 4, 4)).astype(np.float32)), 64, 64)
        np.testing.assert_allclose(F.softmax(out, axis=1).data, 1.0 / 3.0, atol=1e-7)

    # Disabled auxiliary head produces no auxiliary logits
    def test_disabled(self, binary_batch):
        network = SqaNetwork(ModelConfig.toy(aux_enabled=False))
        image, mask = binary_batch
        output = network(Tensor(image), Tensor(mask))
        assert output.aux_logits is None
        assert network.aux_head is None
