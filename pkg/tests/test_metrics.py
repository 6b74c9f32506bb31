import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cpcmil import (
    accuracy,
    aggregate_folds,
    build_bags,
    export_attention_map,
    instance_recovery_score,
    roc_auc,
)
from cpcmil.metrics import read_attention_records


def pairwise_auc(labels, scores):
    """Brute-force oracle: mean over all (pos, neg) pairs with tie credit 0.5."""
    pos = [s for y, s in zip(labels, scores) if y == 1]
    neg = [s for y, s in zip(labels, scores) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else (0.5 if p == n else 0.0)
    return total / (len(pos) * len(neg))


class TestAccuracy:
    def test_known_values(self):
        assert accuracy([1, 0, 1, 0], [0.9, 0.1, 0.8, 0.4]) == 1.0
        assert accuracy([1, 0], [0.2, 0.7]) == 0.0
        assert accuracy([1, 1, 0, 0], [0.9, 0.2, 0.1, 0.6]) == 0.5

    def test_threshold_is_strict(self):
        # 0.5 itself counts as the negative side
        assert accuracy([0], [0.5]) == 1.0
        assert accuracy([1], [0.5]) == 0.0

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            accuracy([1, 0], [0.5])
        with pytest.raises(ValueError):
            accuracy([], [])


class TestRocAuc:
    def test_perfect_and_inverted(self):
        assert roc_auc([0, 0, 1, 1], [0.1, 0.2, 0.8, 0.9]) == 1.0
        assert roc_auc([0, 0, 1, 1], [0.9, 0.8, 0.2, 0.1]) == 0.0

    def test_hand_computed_with_ties(self):
        # pairs: (0.8>0.3)=1, (0.8=0.8)=0.5, (0.3<0.8)=0, (0.3=0.3)=0.5 -> 2/4
        assert roc_auc([1, 1, 0, 0], [0.8, 0.3, 0.3, 0.8]) == 0.5

    def test_matches_pairwise_oracle_randomized(self):
        rng = np.random.default_rng(7)
        for trial in range(100):
            n = int(rng.integers(4, 40))
            labels = [0, 1] + [int(v) for v in rng.integers(0, 2, n - 2)]
            scores = np.round(rng.normal(0, 1, n), 1).tolist()  # rounding forces ties
            assert roc_auc(labels, scores) == pytest.approx(
                pairwise_auc(labels, scores), abs=1e-12
            )

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            roc_auc([1, 1], [0.1, 0.2])
        with pytest.raises(ValueError):
            roc_auc([0, 0], [0.1, 0.2])

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            roc_auc([1, 0, 1], [0.1, 0.2])

    @settings(deadline=None, max_examples=40)
    @given(
        st.lists(st.sampled_from([0, 1]), min_size=2, max_size=25).filter(
            lambda ys: 0 in ys and 1 in ys
        ),
        st.data(),
    )
    def test_rank_formula_equals_pair_counting(self, labels, data):
        scores = data.draw(
            st.lists(
                st.sampled_from([0.0, 0.25, 0.5, 1.0, 2.0]),
                min_size=len(labels),
                max_size=len(labels),
            )
        )
        assert roc_auc(labels, scores) == pytest.approx(pairwise_auc(labels, scores), abs=1e-12)


class TestAggregation:
    def test_formatting(self):
        agg = aggregate_folds([0.9, 1.0])
        assert agg.formatted() == "0.950 ± 0.050"
        assert aggregate_folds([0.5]).formatted() == "0.500 ± 0.000"

    def test_population_std(self):
        agg = aggregate_folds([1.0, 2.0, 3.0, 4.0])
        assert agg.mean == 2.5
        assert agg.std == pytest.approx(np.sqrt(1.25))

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            aggregate_folds([])


class TestAttentionMap:
    @pytest.fixture()
    def bag(self, small_corpus):
        return build_bags(small_corpus)[0]

    def test_round_trip_records(self, bag, tmp_path):
        weights = np.array([0.4, 0.3, 0.2, 0.1])
        png_path, csv_path = export_attention_map(bag, weights, tmp_path / "bag0")
        assert png_path.exists() and csv_path.exists()
        records = read_attention_records(csv_path)
        assert len(records) == bag.n_instances
        for (r, c, w), (row, col), weight in zip(records, bag.coords, weights):
            assert (r, c) == (int(row), int(col))
            assert w == weight

    def test_heatmap_peak_and_layout(self, bag, tmp_path):
        from PIL import Image

        weights = np.array([1.0, 0.5, 0.25, 0.0])
        png_path, _ = export_attention_map(bag, weights, tmp_path / "bag0")
        canvas = np.asarray(Image.open(png_path))
        size = bag.instances.shape[1]
        assert canvas.shape == (64, 64)  # 2x2 grid of 32px patches
        for (r, c), w in zip(bag.coords, weights):
            block = canvas[r : r + size, c : c + size]
            assert (block == round(w * 255)).all()

    def test_weight_count_mismatch_rejected(self, bag, tmp_path):
        with pytest.raises(ValueError):
            export_attention_map(bag, np.ones(3), tmp_path / "bag0")

    def test_coords_outside_layout_rejected(self, bag, tmp_path):
        with pytest.raises(ValueError):
            export_attention_map(bag, np.ones(4), tmp_path / "bag0", image_shape=(40, 40))

    def test_all_zero_weights_render_black(self, bag, tmp_path):
        from PIL import Image

        png_path, _ = export_attention_map(bag, np.zeros(4), tmp_path / "bag0")
        assert not np.asarray(Image.open(png_path)).any()


class TestInstanceRecovery:
    def test_perfect_recovery(self):
        truth = np.array([0, 0, 1, 0])
        attention = np.array([0.1, 0.1, 0.7, 0.1])
        assert instance_recovery_score(attention, truth) == 1.0

    def test_uniform_attention_is_chance(self):
        truth = np.array([0, 1, 0, 1])
        attention = np.full(4, 0.25)
        assert instance_recovery_score(attention, truth) == 0.5
