# Dependencies:
# pip install pytest
import numpy as np
import pytest
from scipy.special import expit

from engine import functional as F
from engine.tensor import Tensor
from models.decoder import AQSDecoder, CSAM, PlainHead, SegFeatureExtractor, SegFeatureSet, multiscale_diff
from models.loss import combined_loss
from models.neck import NeckOutput
from models.network import SqaNetwork
from utils.error_utils import MaskValueError, ShapeError

CHANNELS = (8, 16, 32)
WIDTHS = (8, 16, 32, 64)


def random_neck(rng, batch=2, size=64):
    maps = [Tensor(rng.standard_normal((batch, w, size // s, size // s)).astype(np.float32))
            for w, s in zip(WIDTHS, (4, 8, 16, 16))]
    return NeckOutput(maps, WIDTHS)


def random_mask(rng, batch=2, size=64):
    return Tensor((rng.random((batch, 1, size, size)) > 0.5).astype(np.float32))


class TestSegFeatureExtractor:

    # 64 x 64 mask gives S1, S2, S3 at 16, 8 and 4 with N1..N3's channels
    def test_shapes(self, rng):
        seg = SegFeatureExtractor(np.random.default_rng(0), CHANNELS)(random_mask(rng))
        assert [s.shape for s in seg.maps] == [(2, 8, 16, 16), (2, 16, 8, 8), (2, 32, 4, 4)]

    # Zeroed convolutions give all-zero features
    def test_zeroed(self, rng):
        extractor = SegFeatureExtractor(np.random.default_rng(0), CHANNELS)
        for p in extractor.parameters():
            p.data[...] = 0.0
        assert all(np.all(s.data == 0) for s in extractor(random_mask(rng)).maps)

    # A mask holding 0.5 is rejected
    def test_rejects_soft_mask(self):
        mask = np.zeros((1, 1, 64, 64), dtype=np.float32)
        mask[0, 0, 3, 3] = 0.5
        with pytest.raises(MaskValueError):
            SegFeatureExtractor(np.random.default_rng(0), CHANNELS)(Tensor(mask))

    # Sizes must divide by 16
    def test_rejects_size(self):
        with pytest.raises(ShapeError):
            SegFeatureExtractor(np.random.default_rng(0), CHANNELS)(Tensor(np.zeros((1, 1, 40, 40))))

    # The image-reading variant concatenates the image first
    def test_image_variant(self, rng):
        extractor = SegFeatureExtractor(np.random.default_rng(0), CHANNELS, in_channels=4)
        image = Tensor(rng.random((2, 3, 64, 64)).astype(np.float32))
        assert extractor(random_mask(rng), image).maps[0].shape == (2, 8, 16, 16)
        with pytest.raises(ShapeError):
            extractor(random_mask(rng))


class TestMultiscaleDiff:

    # Subtraction matches the elementwise loop
    def test_matches_loop(self, rng):
        neck = random_neck(rng, batch=1, size=32)
        seg = SegFeatureSet([Tensor(rng.standard_normal(m.shape).astype(np.float32)) for m in neck.maps[:3]])
        for d, s, n in zip(multiscale_diff(seg, neck), seg.maps, neck.maps):
            expected = np.empty_like(s.data)
            for index in np.ndindex(s.shape):
                expected[index] = s.data[index] - n.data[index]
            np.testing.assert_array_equal(d.data, expected)

    # Self-difference is zero and a zero neck leaves S unchanged
    def test_identities(self, rng):
        neck = random_neck(rng)
        same = SegFeatureSet(list(neck.maps[:3]))
        assert all(np.all(d.data == 0) for d in multiscale_diff(same, neck))
        zero = NeckOutput([Tensor(np.zeros_like(m.data)) for m in neck.maps], WIDTHS)
        for d, s in zip(multiscale_diff(same, zero), same.maps):
            np.testing.assert_array_equal(d.data, s.data)

    # A shape mismatch names the scale
    def test_mismatch_names_scale(self, rng):
        neck = random_neck(rng)
        seg = SegFeatureSet([neck.maps[0], Tensor(np.zeros((2, 16, 4, 4), dtype=np.float32)), neck.maps[2]])
        with pytest.raises(ShapeError) as error:
            multiscale_diff(seg, neck)
        assert error.value.details['scale'] == "1/8"


class TestCSAM:

    # Output keeps the input shape; multipliers lie in (0, 1)
    def test_shape_and_range(self, rng):
        csam = CSAM(np.random.default_rng(0), 8, ratio=2)
        x = Tensor(rng.standard_normal((2, 8, 5, 5)).astype(np.float32))
        assert csam(x).shape == x.shape
        for weights in (csam.channel_weights(x).data, csam.spatial_weights(x).data):
            assert np.all((weights > 0) & (weights < 1))

    # A zeroed MLP gives channel multipliers of exactly 0.5
    def test_zeroed_mlp(self, rng):
        csam = CSAM(np.random.default_rng(0), 8, ratio=2)
        for layer in (csam.fc1, csam.fc2):
            layer.weight.data[...] = 0.0
            layer.bias.data[...] = 0.0
        weights = csam.channel_weights(Tensor(rng.standard_normal((1, 8, 3, 3)).astype(np.float32)))
        assert np.all(weights.data == 0.5)

    # Both attention stages agree with a hand-rolled numpy version on 1 x 4 x 2 x 2
    def test_small_oracle(self, rng):
        # Setup
        csam = CSAM(np.random.default_rng(0), 4, ratio=2, kernel=7)
        csam.spatial.bias.data[...] = 0.3
        x = rng.standard_normal((1, 4, 2, 2))

        def mlp(v):
            hidden = np.maximum(v @ csam.fc1.weight.data + csam.fc1.bias.data, 0.0)
            return hidden @ csam.fc2.weight.data + csam.fc2.bias.data

        # Execute
        out = csam(Tensor(x)).data

        # Assert
        channel = expit(mlp(x.mean(axis=(2, 3))) + mlp(x.max(axis=(2, 3))))
        x1 = x * channel[:, :, None, None]
        pooled = np.concatenate([x1.mean(axis=1, keepdims=True), x1.max(axis=1, keepdims=True)], axis=1)
        padded = np.pad(pooled, ((0, 0), (0, 0), (3, 3), (3, 3)))
        kernel = csam.spatial.weight.data[0]
        logits = np.zeros((2, 2))
        for i in range(2):
            for j in range(2):
                logits[i, j] = np.sum(kernel * padded[0, :, i:i + 7, j:j + 7]) + 0.3
        expected = x1 * expit(logits)[None, None]
        np.testing.assert_allclose(out, expected, atol=1e-5)


class TestDecoder:

    def make_decoder(self):
        return AQSDecoder(np.random.default_rng(0), CHANNELS, head_channels=8, csam_ratio=2)

    # Full-resolution three-class logits whose softmax sums to one
    def test_logits(self, rng):
        logits = self.make_decoder()(random_mask(rng), random_neck(rng))
        assert logits.shape == (2, 3, 64, 64)
        np.testing.assert_allclose(F.softmax(logits, axis=1).data.sum(axis=1), 1.0, atol=1e-6)
        assert set(np.unique(np.argmax(logits.data, axis=1))) <= {0, 1, 2}

    # Identical features on both sides give spatially constant logits
    def test_self_consistency(self, rng):
        # Setup
        decoder = self.make_decoder().eval()
        for p in decoder.seg.parameters():
            p.data[...] = 0.0
        zero_neck = NeckOutput([Tensor(np.zeros((1, w, 64 // s, 64 // s), dtype=np.float32))
                                for w, s in zip(WIDTHS, (4, 8, 16, 16))], WIDTHS)

        # Execute
        logits = decoder(random_mask(rng, batch=1), zero_neck).data

        # Assert
        np.testing.assert_allclose(logits, np.broadcast_to(logits[:, :, :1, :1], logits.shape), atol=1e-6)

    # Same inputs, same logits
    def test_deterministic(self, rng):
        decoder = self.make_decoder().eval()
        mask, neck = random_mask(rng), random_neck(rng)
        np.testing.assert_array_equal(decoder(mask, neck).data, decoder(mask, neck).data)

    # Every decoder parameter receives a gradient
    def test_gradients_reach_every_parameter(self, rng):
        decoder = self.make_decoder()
        logits = decoder(random_mask(rng), random_neck(rng))
        combined_loss(logits, rng.integers(0, 3, size=(2, 64, 64))).backward()
        dead = [name for name, p in decoder.named_parameters() if p.grad is None or not np.any(p.grad != 0)]
        assert dead == []

    # The plain baseline head classifies N1 at full resolution
    def test_plain_head(self, rng):
        head = PlainHead(np.random.default_rng(0), 8, 8)
        assert head(random_neck(rng), 64, 64).shape == (2, 3, 64, 64)


class TestNetwork:

    # Both decoders produce (B, 3, H, W) logits end to end
    @pytest.mark.parametrize("decoder", ["aqs", "plain"])
    def test_forward(self, tiny_model_config, binary_batch, decoder):
        network = SqaNetwork(tiny_model_config.updated(decoder=decoder))
        image, mask = binary_batch
        output = network(Tensor(image), Tensor(mask))
        assert output.logits.shape == (2, 3, 64, 64)
        assert output.aux_logits.shape == (2, 3, 64, 64)

    # Precomputed frozen features give the same logits as computing them
    def test_cached_features(self, tiny_model_config, binary_batch):
        network = SqaNetwork(tiny_model_config).eval()
        image, mask = binary_batch
        features = network.vit_features(Tensor(image))
        direct = network(Tensor(image), Tensor(mask)).logits.data
        cached = network(Tensor(image), Tensor(mask), features).logits.data
        np.testing.assert_array_equal(direct, cached)

    # A soft mask is rejected before anything runs
    def test_rejects_soft_mask(self, tiny_model_config, binary_batch):
        network = SqaNetwork(tiny_model_config)
        image, mask = binary_batch
        with pytest.raises(MaskValueError):
            network(Tensor(image), Tensor(mask * 0.5))

    # Weights saved and reloaded reproduce the logits
    def test_save_load(self, tiny_model_config, binary_batch, tmp_path):
        # Setup
        source = SqaNetwork(tiny_model_config.updated(seed=3)).eval()
        path = str(tmp_path / "weights.aqsw")
        source.save(path)

        # Execute
        target = SqaNetwork(tiny_model_config).load(path).eval()

        # Assert
        image, mask = binary_batch
        np.testing.assert_array_equal(source(Tensor(image), Tensor(mask)).logits.data,
                                      target(Tensor(image), Tensor(mask)).logits.data)
        assert source.hashes() == target.hashes()
