# intrinsic normal prototypes
from pathlib import Path
import sys

import numpy as np
import pytest

# Add src to path
sys.path.insert(0, str(Path(__file__).parent.parent / "src" / "anomaly-detector"))

from datamodels import InpConfig, ShapeError
from inp import attention_weights, consistency_loss, extract, fused_query, init_prototype_params, nearest_distances, run_inp
from tensorgrad import Tensor, finite_diff_check, ops, precision
from tensorgrad.layers import apply_ffn


@pytest.fixture
def rng():
    return np.random.default_rng(11)


@pytest.fixture
def params(rng):
    return init_prototype_params(InpConfig(num_prototypes=3, init_std=0.5), 4, rng)


class TestExtract:
    def test_shapes(self, rng, params):
        fq = Tensor(rng.normal(size=(2, 5, 4)))
        assert attention_weights(fq, params).shape == (2, 3, 5)
        assert extract(fq, params).shape == (2, 3, 4)

    def test_attention_rows_sum_to_one(self, rng, params):
        weights = attention_weights(Tensor(rng.normal(size=(1, 5, 4))), params)
        np.testing.assert_allclose(weights.data.sum(axis=-1), 1.0, rtol=1e-5)

    def test_dimension_mismatch(self, rng, params):
        with pytest.raises(ShapeError):
            extract(Tensor(rng.normal(size=(1, 5, 6))), params)

    def test_zero_value_projection_leaves_initial_prototypes(self, rng, params):
        params["inp.v.w"].data[:] = 0.0
        p0 = params["inp.p0"].data
        expected = apply_ffn(Tensor(p0), params, "inp.ffn").data + p0
        for _ in range(3):
            p = extract(Tensor(rng.normal(size=(2, 5, 4))), params)
            np.testing.assert_allclose(p.data, np.broadcast_to(expected, (2, 3, 4)), rtol=1e-5, atol=1e-6)

    def test_single_token(self, rng, params):
        fq = Tensor(rng.normal(size=(2, 1, 4)))
        np.testing.assert_allclose(attention_weights(fq, params).data, 1.0, rtol=1e-6)
        out = run_inp(fq, params)
        assert out.p.shape == (2, 3, 4)
        assert out.token_dist.shape == out.assign.shape == (2, 1)

    def test_prototype_order_does_not_matter(self, rng, params):
        fq = Tensor(rng.normal(size=(2, 7, 4)))
        before = run_inp(fq, params)
        perm = np.array([2, 0, 1])
        params["inp.p0"].data[:] = params["inp.p0"].data[perm]
        after = run_inp(fq, params)
        np.testing.assert_allclose(after.p.data, before.p.data[:, perm], rtol=1e-5, atol=1e-6)
        np.testing.assert_allclose(after.token_dist.data, before.token_dist.data, rtol=1e-5, atol=1e-6)
        np.testing.assert_array_equal(perm[after.assign], before.assign)

    def test_fused_query_is_mean(self):
        out = fused_query(Tensor(np.ones((1, 2, 2))), Tensor(np.full((1, 2, 2), 3.0)))
        np.testing.assert_array_equal(out.data, 2.0)


class TestNearest:
    def test_matches_brute_force(self, rng):
        fq = rng.normal(size=(2, 6, 4))
        p = rng.normal(size=(2, 3, 4))
        dist, assign = nearest_distances(Tensor(fq), Tensor(p))
        for b in range(2):
            for t in range(6):
                d = [1 - fq[b, t] @ p[b, n] / (np.linalg.norm(fq[b, t]) * np.linalg.norm(p[b, n])) for n in range(3)]
                assert assign[b, t] == int(np.argmin(d))
                assert dist.data[b, t] == pytest.approx(min(d), abs=1e-5)

    def test_tie_goes_to_lowest_index(self):
        fq = Tensor(np.array([[[1.0, 0.0]]]))
        p = Tensor(np.array([[[0.0, 1.0], [2.0, 0.0], [1.0, 0.0]]]))
        _, assign = nearest_distances(fq, p)
        assert assign[0, 0] == 1

    def test_consistency_is_mean_distance(self, rng, params):
        out = run_inp(Tensor(rng.normal(size=(2, 5, 4))), params)
        assert consistency_loss(out.token_dist).item() == pytest.approx(float(out.token_dist.data.mean()), rel=1e-6)
        assert out.assign.shape == (2, 5)

    def test_consistency_gradient(self, rng):
        with precision("f64"):
            params = init_prototype_params(InpConfig(num_prototypes=3, init_std=0.5), 4, rng)
            fq = Tensor(rng.normal(size=(1, 6, 4)))
            report = finite_diff_check(
                lambda: consistency_loss(nearest_distances(fq, extract(fq, params))[0]),
                list(params.values()),
            )
        assert report.passed, report.failures()

    def test_gradient_reaches_selected_prototype_only(self, rng):
        from tensorgrad import Graph, backward, parameter

        p = parameter(np.array([[[1.0, 0.0], [0.0, 1.0]]]), "p")
        fq = Tensor(np.array([[[1.0, 0.1], [0.9, 0.2]]]))
        with Graph() as graph:
            dist, _ = nearest_distances(fq, p)
            backward(ops.mean(dist), graph)
        np.testing.assert_array_equal(p.grad[0, 1], 0.0)
        assert np.any(p.grad[0, 0] != 0.0)
