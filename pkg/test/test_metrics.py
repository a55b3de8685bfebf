# ranking metrics, F1-max, connected regions and AUPRO
from pathlib import Path
import sys

import numpy as np
import pytest
from sklearn.metrics import average_precision_score, roc_auc_score

# Add src to path
sys.path.insert(0, str(Path(__file__).parent.parent / "src" / "anomaly-detector"))

from commands.verify_commands import oracle_aupro, oracle_auroc, oracle_f1, oracle_regions
from datamodels import ContractError, ShapeError, UndefinedMetricError
from metrics import ScoredSet, aupro, auroc, average_precision, connected_components, evaluate_scores, f1_max, pro_curve


@pytest.fixture
def rng():
    return np.random.default_rng(17)


def random_instance(rng, n=None):
    n = n or int(rng.integers(8, 200))
    labels = rng.integers(0, 2, size=n)
    labels[:2] = (0, 1)
    scores = np.round(rng.random(n), int(rng.integers(1, 4)))
    return scores, labels


class TestAuroc:
    def test_perfect_and_inverted(self):
        assert auroc(ScoredSet([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])) == 1.0
        assert auroc(ScoredSet([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1])) == 0.0

    def test_ties_count_half(self):
        assert auroc(ScoredSet([0.5, 0.5], [0, 1])) == 0.5

    def test_single_class_undefined(self):
        with pytest.raises(UndefinedMetricError):
            auroc(ScoredSet([0.1, 0.2], [1, 1]))

    def test_matches_sklearn_and_pairwise_oracle(self, rng):
        for _ in range(50):
            scores, labels = random_instance(rng)
            value = auroc(ScoredSet(scores, labels))
            assert value == pytest.approx(roc_auc_score(labels, scores), abs=1e-12)
            assert value == pytest.approx(oracle_auroc(scores, labels), abs=1e-12)

    def test_flipped_labels_complement(self, rng):
        for _ in range(20):
            scores, labels = random_instance(rng)
            flipped = auroc(ScoredSet(scores, 1 - labels))
            assert flipped == pytest.approx(1.0 - auroc(ScoredSet(scores, labels)), abs=1e-12)


class TestIncreasingTransforms:
    """Ranking metrics depend on the score order only"""

    TRANSFORMS = [np.exp, lambda s: 3.0 * s + 1.0, lambda s: s**3]

    @pytest.mark.parametrize("transform", TRANSFORMS)
    def test_image_metrics_unchanged(self, rng, transform):
        for _ in range(20):
            scores, labels = random_instance(rng)
            before, after = ScoredSet(scores, labels), ScoredSet(transform(scores), labels)
            assert auroc(after) == pytest.approx(auroc(before), abs=1e-12)
            assert average_precision(after) == pytest.approx(average_precision(before), abs=1e-12)
            assert f1_max(after)[0] == pytest.approx(f1_max(before)[0], abs=1e-12)
            assert f1_max(after)[1] == pytest.approx(transform(f1_max(before)[1]))

    @pytest.mark.parametrize("transform", TRANSFORMS)
    def test_aupro_unchanged(self, rng, transform):
        masks = [(rng.random((16, 16)) > 0.8).astype(np.uint8) for _ in range(3)]
        masks[0][0, 0] = 1
        maps = [np.round(rng.random((16, 16)) + 0.5 * m, 2) for m in masks]
        assert aupro([transform(m) for m in maps], masks) == pytest.approx(aupro(maps, masks), abs=1e-12)


class TestAveragePrecision:
    def test_known_value(self):
        # descending: 1 (P=1), 0, 1 (P=2/3) -> AP = 0.5 * 1 + 0.5 * 2/3
        assert average_precision(ScoredSet([0.9, 0.8, 0.7], [1, 0, 1])) == pytest.approx(0.5 + 1 / 3)

    def test_matches_sklearn(self, rng):
        for _ in range(50):
            scores, labels = random_instance(rng)
            assert average_precision(ScoredSet(scores, labels)) == pytest.approx(
                average_precision_score(labels, scores), abs=1e-12
            )

    def test_no_positive_undefined(self):
        with pytest.raises(UndefinedMetricError):
            average_precision(ScoredSet([0.1, 0.2], [0, 0]))


class TestF1Max:
    def test_matches_brute_force(self, rng):
        for _ in range(50):
            scores, labels = random_instance(rng)
            best, threshold = f1_max(ScoredSet(scores, labels))
            assert best == pytest.approx(oracle_f1(scores, labels), abs=1e-12)
            assert threshold in set(scores)

    def test_lowest_threshold_wins_ties(self):
        # t=0.9 and t=0.3 both give F1 = 2/3
        best, threshold = f1_max(ScoredSet([0.9, 0.7, 0.5, 0.3], [1, 0, 0, 1]))
        assert best == pytest.approx(2 / 3)
        assert threshold == 0.3

    def test_labels_must_be_binary(self):
        with pytest.raises(ContractError):
            ScoredSet([0.1, 0.2], [0, 2])

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            ScoredSet([0.1, 0.2, 0.3], [0, 1])


class TestRegions:
    def test_eight_connectivity(self):
        mask = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 0]])
        assert len(connected_components(mask)) == 1

    def test_raster_order(self):
        mask = np.array([[0, 0, 1], [0, 0, 0], [1, 1, 0]])
        regions = connected_components(mask)
        assert [r.tolist() for r in regions] == [[2], [6, 7]]

    def test_empty(self):
        assert connected_components(np.zeros((3, 3))) == []

    @pytest.mark.parametrize("density", [0.2, 0.45, 0.6])
    def test_matches_flood_fill(self, rng, density):
        for _ in range(20):
            h, w = rng.integers(1, 33, size=2)
            mask = (rng.random((h, w)) < density).astype(np.uint8)
            found = connected_components(mask)
            expected = oracle_regions(mask)
            assert len(found) == len(expected)
            for a, b in zip(found, expected):
                np.testing.assert_array_equal(a, b)


class TestAupro:
    def test_perfect_localization(self):
        mask = np.zeros((4, 4), np.uint8)
        mask[1:3, 1:3] = 1
        assert aupro([mask.astype(float)], [mask]) == pytest.approx(1.0)

    def test_matches_brute_force(self, rng):
        for _ in range(10):
            size = int(rng.integers(4, 33))
            masks = [(rng.random((size, size)) > 0.8).astype(np.uint8) for _ in range(3)]
            masks[0][0, 0] = 1
            maps = [np.round(rng.random((size, size)) + 0.5 * m, 2) for m in masks]
            assert aupro(maps, masks, 0.3) == pytest.approx(oracle_aupro(maps, masks, 0.3), abs=1e-6)

    def test_curve_starts_at_origin_and_is_monotone(self, rng):
        mask = (rng.random((8, 8)) > 0.7).astype(np.uint8)
        fpr, pro = pro_curve([rng.random((8, 8))], [mask])
        assert (fpr[0], pro[0]) == (0.0, 0.0)
        assert np.all(np.diff(fpr) >= 0) and np.all(np.diff(pro) >= 0)

    def test_binned_close_to_exact(self, rng):
        mask = np.zeros((32, 32), np.uint8)
        mask[5:12, 8:20] = 1
        score = rng.random((32, 32)) + mask
        exact = aupro([score], [mask], mode="exact")
        binned = aupro([score], [mask], mode="binned")
        assert binned == pytest.approx(exact, abs=0.02)

    def test_no_regions_undefined(self):
        with pytest.raises(UndefinedMetricError):
            aupro([np.zeros((2, 2))], [np.zeros((2, 2))])

    def test_bad_limit(self):
        with pytest.raises(ContractError):
            aupro([np.zeros((2, 2))], [np.ones((2, 2))], fpr_limit=0.0)


class TestEvaluateScores:
    def test_all_cells_filled(self, rng):
        masks = [np.zeros((4, 4), np.uint8), np.pad(np.ones((2, 2), np.uint8), 1)]
        maps = [rng.random((4, 4)), rng.random((4, 4)) + masks[1]]
        row = evaluate_scores(np.array([0.1, 0.9]), np.array([0, 1]), maps, masks)
        assert row.auroc_img == 1.0
        assert all(0.0 <= v <= 1.0 for _, v in row)
