# prototype-attention decoder and model assembly
from pathlib import Path
import sys

import numpy as np
import pytest

# Add src to path
sys.path.insert(0, str(Path(__file__).parent.parent / "src" / "anomaly-detector"))

from datamodels import AnyADConfig, DecoderConfig, EncoderConfig, InpConfig, ModalityMask, ShapeError, TrainConfig
from decoder import block_forward, decode, init_decoder_params, prototype_attention
from pipeline import AnyADModel
from tensorgrad import Tensor
from tensorgrad.layers import apply_ffn


@pytest.fixture
def rng():
    return np.random.default_rng(5)


@pytest.fixture
def dec_cfg():
    return DecoderConfig(depth=3, group0_layers=[1], group1_layers=[2, 3])


@pytest.fixture
def tiny():
    return AnyADConfig(
        encoder=EncoderConfig(image_size=8, patch_size=4, embed_dim=8, depth=2, heads=2, shallow_layers=[1], deep_layers=[2]),
        inp=InpConfig(num_prototypes=2, init_std=0.5),
        decoder=DecoderConfig(depth=2, group0_layers=[1], group1_layers=[2]),
        train=TrainConfig(batch_size=2),
    )


class TestPrototypeAttention:
    def test_rows_normalized_and_non_negative(self, rng, dec_cfg):
        params = init_decoder_params(dec_cfg, 4, rng)
        scores = prototype_attention(
            Tensor(rng.normal(size=(2, 5, 4))), Tensor(rng.normal(size=(2, 3, 4))), params, "decoder.block1", True
        )
        assert scores.shape == (2, 5, 3)
        assert np.all(scores.data >= 0)
        sums = scores.data.sum(axis=-1)
        assert np.all((sums < 1.0 + 1e-5))

    def test_no_bias_on_projections(self, rng, dec_cfg):
        params = init_decoder_params(dec_cfg, 4, rng)
        assert "decoder.block1.q.b" not in params
        assert "decoder.block1.ffn.fc1.b" in params

    def test_all_zero_scores_stay_finite(self, dec_cfg):
        params = init_decoder_params(dec_cfg, 2, np.random.default_rng(0))
        params["decoder.block1.q.w"].data[:] = 0.0
        out = block_forward(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 2, 2))), params, "decoder.block1")
        assert np.all(np.isfinite(out.data))

    @pytest.mark.parametrize("normalize", [True, False])
    def test_all_negative_logits_give_ffn_of_zero(self, rng, dec_cfg, normalize):
        params = init_decoder_params(dec_cfg, 4, rng)
        params["decoder.block1.q.w"].data[:] = np.eye(4)
        params["decoder.block1.k.w"].data[:] = -np.eye(4)
        for bias in ("norm.b", "fc1.b", "fc2.b"):
            key = f"decoder.block1.ffn.{bias}"
            params[key].data[:] = rng.normal(size=params[key].shape)
        f = Tensor(rng.uniform(0.5, 1.0, size=(2, 5, 4)))
        p = Tensor(rng.uniform(0.5, 1.0, size=(2, 3, 4)))
        scores = prototype_attention(f, p, params, "decoder.block1", normalize)
        np.testing.assert_array_equal(scores.data, 0.0)
        out = block_forward(f, p, params, "decoder.block1", normalize_attention=normalize)
        expected = apply_ffn(Tensor(np.zeros((2, 5, 4))), params, "decoder.block1.ffn")
        np.testing.assert_allclose(out.data, expected.data, atol=1e-7)

    def test_single_prototype(self, rng, dec_cfg):
        params = init_decoder_params(dec_cfg, 4, rng)
        f, p = Tensor(rng.normal(size=(2, 6, 4))), Tensor(rng.normal(size=(2, 1, 4)))
        raw = prototype_attention(f, p, params, "decoder.block1", False)
        scores = prototype_attention(f, p, params, "decoder.block1", True)
        assert scores.shape == (2, 6, 1)
        np.testing.assert_allclose(scores.data, raw.data / (raw.data + 1e-6), rtol=1e-5)
        assert block_forward(f, p, params, "decoder.block1").shape == (2, 6, 4)

    def test_single_prototype_takes_all_live_tokens(self, rng, dec_cfg):
        params = init_decoder_params(dec_cfg, 4, rng)
        params["decoder.block1.q.w"].data[:] = np.eye(4)
        params["decoder.block1.k.w"].data[:] = np.eye(4)
        proto = rng.normal(size=4)
        # every token is a positive multiple of the prototype, so each weight is ~1
        f = Tensor(rng.uniform(1.0, 3.0, size=(1, 6, 1)) * proto)
        out = block_forward(f, Tensor(proto.reshape(1, 1, 4)), params, "decoder.block1")
        np.testing.assert_allclose(out.data[0], np.broadcast_to(out.data[0, 0], (6, 4)), atol=1e-5)


class TestDecode:
    def test_group_shapes(self, rng, dec_cfg):
        params = init_decoder_params(dec_cfg, 4, rng)
        de0, de1 = decode(Tensor(rng.normal(size=(2, 5, 4))), Tensor(rng.normal(size=(2, 3, 4))), dec_cfg, params)
        assert de0.shape == de1.shape == (2, 5, 4)

    def test_shape_mismatch(self, rng, dec_cfg):
        params = init_decoder_params(dec_cfg, 4, rng)
        with pytest.raises(ShapeError):
            block_forward(Tensor(np.zeros((2, 5, 4))), Tensor(np.zeros((1, 3, 4))), params, "decoder.block1")

    def test_attn_residual_changes_output(self, rng, dec_cfg):
        params = init_decoder_params(dec_cfg, 4, rng)
        f, p = Tensor(rng.normal(size=(1, 5, 4))), Tensor(rng.normal(size=(1, 3, 4)))
        plain = block_forward(f, p, params, "decoder.block1")
        residual = block_forward(f, p, params, "decoder.block1", attn_residual=True)
        assert not np.allclose(plain.data, residual.data)

    def test_encoder_tokens_never_reach_values(self, rng, dec_cfg):
        """With a fixed prototype set, each output token is a function of its own input token only."""
        params = init_decoder_params(dec_cfg, 4, rng)
        p = Tensor(rng.normal(size=(1, 3, 4)))
        f = rng.normal(size=(1, 5, 4))
        g = f.copy()
        g[0, 4] = rng.normal(size=4)
        a, _ = decode(Tensor(f), p, dec_cfg, params)
        b, _ = decode(Tensor(g), p, dec_cfg, params)
        np.testing.assert_array_equal(a.data[0, :4], b.data[0, :4])


class TestModel:
    def test_forward_shapes(self, tiny):
        model = AnyADModel.initialize(tiny)
        out = model.forward(np.random.default_rng(0).random((2, 3, 8, 8)), ModalityMask.full())
        assert out.de0.shape == out.bundle.en0.shape == (2, 4, 8)
        assert out.inp.p.shape == (2, 2, 8)
        assert set(model.attachment_features(out)) == {"en0", "en1", "bn"}

    def test_trainable_excludes_teacher(self, tiny):
        model = AnyADModel.initialize(tiny)
        names = {p.name for p in model.trainable()}
        assert names and not any(n.startswith("teacher.") for n in names)
        assert all(p.requires_grad for p in model.trainable())

    def test_initialize_is_deterministic(self, tiny):
        a, b = AnyADModel.initialize(tiny), AnyADModel.initialize(tiny)
        assert list(a.params) == list(b.params)
        assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
