"""Metric tests: accuracy semantics, worst-client accuracy, fairness spread."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedvit.autodiff import ParamSet, Tensor
from fedvit.data import Dataset
from fedvit.metrics import (
    ClientMetrics,
    accuracy,
    fairness_summary,
    lowest_global_accuracy,
    weighted_mean,
)
from fedvit.model import ViTConfig, forward, init_model, parameter_shapes

RNG = np.random.default_rng(90210)

CFG = ViTConfig(image_h=4, image_w=4, patch=2, dim=4, heads=2, blocks=1,
                mlp_hidden=4, classes=3)


def dataset(n, classes=3, seed=0):
    rng = np.random.default_rng(seed)
    images = [Tensor(rng.uniform(size=(4, 4, 1))) for _ in range(n)]
    labels = [int(v) for v in rng.integers(0, classes, size=n)]
    return Dataset(images, labels, classes)


def biased_model(favored_class):
    """Zero model except a head bias pushing one class."""
    arrays = {name: np.zeros(shape) for name, shape in parameter_shapes(CFG).items()}
    arrays["head_b"][favored_class] = 1.0
    return ParamSet.from_arrays(arrays)


class TestAccuracy:
    def test_model_favoring_true_class_scores_one(self):
        data = dataset(12)
        relabeled = Dataset(data.images, [1] * 12, 3)
        metrics = accuracy(biased_model(1), relabeled, CFG)
        assert metrics.accuracy == 1.0
        assert metrics.correct == metrics.total == 12

    def test_zero_model_ties_break_to_class_zero(self):
        data = dataset(30, seed=3)
        zero = ParamSet.from_arrays(
            {name: np.zeros(shape) for name, shape in parameter_shapes(CFG).items()}
        )
        metrics = accuracy(zero, data, CFG)
        share_of_zero = data.labels.count(0) / len(data)
        assert metrics.accuracy == pytest.approx(share_of_zero, abs=0)

    def test_matches_per_sample_loop_oracle(self):
        data = dataset(50, seed=11)
        params = init_model(CFG, 1)
        metrics = accuracy(params, data, CFG)
        correct = 0
        for img, label in zip(data.images, data.labels):
            logits = forward(params, img, CFG).array
            best = 0
            for k in range(1, CFG.classes):
                if logits[k] > logits[best]:
                    best = k
            correct += best == label
        assert metrics.correct == correct

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            accuracy(init_model(CFG, 0), Dataset([], [], 3), CFG)

    def test_argmax_invariant_under_monotone_transform(self):
        # Doubling every logit (a strictly increasing map) cannot change
        # predictions; emulate by scaling the head, with zero pre-head model.
        data = dataset(20, seed=7)
        base = biased_model(2)
        doubled = base.map_arrays(
            lambda name, w: w * 2.0 if name in ("head_w", "head_b") else w
        )
        a = accuracy(base, data, CFG)
        b = accuracy(doubled, data, CFG)
        assert a.accuracy == b.accuracy and a.correct == b.correct


class TestLowestGlobalAccuracy:
    def test_single_client_equals_its_accuracy(self):
        data = dataset(10)
        params = init_model(CFG, 0)
        assert lowest_global_accuracy(params, [data], CFG) == accuracy(params, data, CFG).accuracy

    def test_identical_sets_min_equals_mean(self):
        data = dataset(10)
        params = init_model(CFG, 0)
        accs = [accuracy(params, data, CFG).accuracy for _ in range(3)]
        assert lowest_global_accuracy(params, [data] * 3, CFG) == sum(accs) / 3

    def test_constructed_fixture_hits_the_min(self):
        # Labels arranged so the class-1-favoring model scores 1.0 / 0.5 / 0.8.
        images = [Tensor(RNG.uniform(size=(4, 4, 1))) for _ in range(10)]
        full = Dataset(images, [1] * 10, 3)
        half = Dataset(images, [1] * 5 + [0] * 5, 3)
        most = Dataset(images, [1] * 8 + [2] * 2, 3)
        model = biased_model(1)
        assert lowest_global_accuracy(model, [full, half, most], CFG) == 0.5

    def test_rejects_no_clients(self):
        with pytest.raises(ValueError):
            lowest_global_accuracy(init_model(CFG, 0), [], CFG)


class TestWeightedMean:
    def test_equal_sizes_is_arithmetic_mean(self):
        assert weighted_mean([0.2, 0.4, 0.9], [7, 7, 7]) == pytest.approx(0.5, abs=1e-15)

    def test_single_element(self):
        assert weighted_mean([0.37], [13]) == 0.37

    def test_direct_arithmetic(self):
        assert weighted_mean([0.0, 1.0], [1, 3]) == 0.75

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            weighted_mean([1.0], [1, 2])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0, 1, allow_nan=False), min_size=1, max_size=8))
    def test_uniform_sizes_match_unweighted(self, values):
        weighted = weighted_mean(values, [5] * len(values))
        assert abs(weighted - sum(values) / len(values)) <= 1e-15


class TestFairnessSummary:
    def metrics(self, accs, totals=None):
        totals = totals or [10] * len(accs)
        return [
            ClientMetrics(i, a, int(round(a * t)), t, 0.5)
            for i, (a, t) in enumerate(zip(accs, totals))
        ]

    def test_equal_accuracies_have_zero_spread(self):
        summary = fairness_summary(self.metrics([0.7, 0.7, 0.7]))
        assert summary.spread == 0.0
        assert summary.min_acc == summary.max_acc == 0.7

    def test_two_client_spread(self):
        summary = fairness_summary(self.metrics([0.2, 0.9]))
        assert summary.spread == pytest.approx(0.7, abs=1e-15)

    def test_matches_loop_oracle(self):
        accs = list(RNG.uniform(size=6))
        totals = [int(v) for v in RNG.integers(5, 40, size=6)]
        summary = fairness_summary(self.metrics(accs, totals))
        lo = hi = accs[0]
        num = den = 0.0
        for a, t in zip(accs, totals):
            lo, hi = min(lo, a), max(hi, a)
            num += a * t
            den += t
        assert summary.min_acc == lo and summary.max_acc == hi
        assert summary.mean_weighted == pytest.approx(num / den, abs=1e-15)

    def test_ordering_invariant(self):
        summary = fairness_summary(self.metrics([0.1, 0.5, 0.9], [10, 20, 30]))
        assert summary.min_acc <= summary.mean_weighted <= summary.max_acc
        assert summary.min_acc <= summary.mean_unweighted <= summary.max_acc
