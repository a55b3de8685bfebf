# channel statistics, reference store and alignment loss
from pathlib import Path
import sys

import numpy as np
import pytest

# Add src to path
sys.path.insert(0, str(Path(__file__).parent.parent / "src" / "anomaly-detector"))

from align import ChannelStats, ReferenceStore, channel_stats, distribution_loss, merge_stats, precompute_reference, stats_of_array
from datamodels import AnyADConfig, ConfigurationError, ContractError, DecoderConfig, EncoderConfig, InpConfig, ModalityMask
from pipeline import AnyADModel
from tensorgrad import Tensor, finite_diff_check, parameter, precision


@pytest.fixture
def rng():
    return np.random.default_rng(2)


@pytest.fixture
def tiny_model():
    cfg = AnyADConfig(
        encoder=EncoderConfig(image_size=8, patch_size=4, embed_dim=8, depth=2, heads=2, shallow_layers=[1], deep_layers=[2]),
        inp=InpConfig(num_prototypes=2, init_std=0.5),
        decoder=DecoderConfig(depth=2, group0_layers=[1], group1_layers=[2]),
    )
    return AnyADModel.initialize(cfg)


class TestChannelStats:
    def test_population_variance(self, rng):
        data = rng.normal(size=(3, 4, 5))
        with precision("f64"):
            stats = channel_stats(Tensor(data))
        flat = data.reshape(-1, 5)
        np.testing.assert_allclose(stats.mean.data, flat.mean(axis=0), atol=1e-12)
        np.testing.assert_allclose(stats.var.data, flat.var(axis=0, ddof=0), atol=1e-10)
        assert stats.count == 12

    def test_channel_shift_moves_mean_only(self, rng):
        data = rng.normal(size=(2, 6, 4))
        shift = rng.normal(scale=5.0, size=4)
        with precision("f64"):
            base = channel_stats(Tensor(data))
            shifted = channel_stats(Tensor(data + shift))
        np.testing.assert_allclose(shifted.mean.data, base.mean.data + shift, atol=1e-10)
        np.testing.assert_allclose(shifted.var.data, base.var.data, atol=1e-10)
        moved = stats_of_array(data + shift)
        np.testing.assert_allclose(moved.var.data, stats_of_array(data).var.data, atol=1e-10)

    def test_single_token_has_zero_variance(self):
        stats = stats_of_array(np.array([[[1.0, 2.0]]]))
        np.testing.assert_array_equal(stats.var.data, [0.0, 0.0])

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            channel_stats(Tensor(np.zeros((0, 3, 2))))


class TestMergeStats:
    def test_equals_whole_dataset(self, rng):
        data = rng.normal(3.0, 2.0, size=(10, 6, 4))
        merged = ChannelStats.zeros(4)
        for part in np.split(data, [2, 3, 7]):
            merged = merge_stats(merged, stats_of_array(part))
        whole = stats_of_array(data)
        assert merged.count == whole.count
        np.testing.assert_allclose(merged.mean.data, whole.mean.data, atol=1e-8)
        np.testing.assert_allclose(merged.var.data, whole.var.data, atol=1e-8)

    def test_empty_side_is_identity(self, rng):
        s = stats_of_array(rng.normal(size=(2, 3, 4)))
        merged = merge_stats(ChannelStats.zeros(4), s)
        np.testing.assert_array_equal(merged.mean.data, s.mean.data)
        assert merged.count == s.count

    def test_dim_mismatch(self):
        with pytest.raises(ContractError):
            merge_stats(ChannelStats.zeros(3), ChannelStats.zeros(4))


class TestDistributionLoss:
    def test_zero_at_reference(self, rng):
        data = rng.normal(size=(2, 3, 4))
        with precision("f64"):
            loss = distribution_loss(channel_stats(Tensor(data)), stats_of_array(data))
        assert loss.item() == pytest.approx(0.0, abs=1e-14)

    def test_missing_reference(self, rng):
        with pytest.raises(ConfigurationError):
            distribution_loss(channel_stats(Tensor(rng.normal(size=(1, 2, 3)))), None)
        with pytest.raises(ConfigurationError):
            distribution_loss(channel_stats(Tensor(rng.normal(size=(1, 2, 3)))), ChannelStats.zeros(3))

    def test_gradient(self, rng):
        with precision("f64"):
            f = parameter(rng.normal(size=(2, 5, 3)), "f")
            ref = stats_of_array(rng.normal(1.0, 2.0, size=(4, 5, 3)))
            report = finite_diff_check(lambda: distribution_loss(channel_stats(f), ref), [f])
        assert report.passed, report.failures()

    def test_reference_receives_no_gradient(self, rng):
        from tensorgrad import Graph, backward

        ref = stats_of_array(rng.normal(size=(2, 3, 4)))
        f = parameter(rng.normal(size=(2, 3, 4)), "f")
        with Graph() as graph:
            backward(distribution_loss(channel_stats(f), ref), graph)
        assert ref.mean.grad is None and ref.var.grad is None


class TestReferenceStore:
    def test_no_attachment_gives_zero(self):
        loss = ReferenceStore(attachment=[]).alignment_loss({})
        assert loss.item() == 0.0 and loss.size == 1

    def test_check_reports_missing_point(self):
        with pytest.raises(ConfigurationError, match="en1"):
            ReferenceStore(points={}, attachment=["en1"]).check()

    def test_precompute_streams_all_points(self, tiny_model, rng):
        images = rng.random((5, 3, 8, 8)).astype(np.float32)
        refs = precompute_reference(images, tiny_model, batch_size=2, attachment=["bn"])
        assert set(refs.points) == {"en0", "en1", "bn"}
        assert refs.attachment == ["bn"]
        assert refs.points["en1"].count == 5 * 4

        features = tiny_model.attachment_features(tiny_model.forward(images, ModalityMask.full()))
        whole = stats_of_array(features["en1"].data)
        np.testing.assert_allclose(refs.points["en1"].mean.data, whole.mean.data, atol=1e-5)
        np.testing.assert_allclose(refs.points["en1"].var.data, whole.var.data, atol=1e-5)

    def test_precompute_leaves_parameters(self, tiny_model, rng):
        before = {k: v.data.copy() for k, v in tiny_model.params.items()}
        precompute_reference(rng.random((2, 3, 8, 8)).astype(np.float32), tiny_model)
        assert all(np.array_equal(before[k], tiny_model.params[k].data) for k in before)

    def test_precompute_empty_rejected(self, tiny_model):
        with pytest.raises(ContractError):
            precompute_reference(np.zeros((0, 3, 8, 8), np.float32), tiny_model)
