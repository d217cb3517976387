import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adp.losses import (
    LossWeights,
    batch_hard_triplet,
    chebyshev_distance,
    cross_entropy_branch,
    cross_entropy_from_logits,
    dcml_loss,
    total_loss,
)
from adp.oracles import cross_entropy_oracle, dcml_oracle, triplet_oracle
from adp.selftest import (
    ce_instance,
    check_gradients,
    dcml_instance,
    total_instance,
    triplet_instance,
)
from adp.tensor import ShapeError, Tensor

finite = st.floats(-50, 50, allow_nan=False)


class TestChebyshev:
    def test_identity(self):
        assert chebyshev_distance([1.5, -2.0], [1.5, -2.0]).item() == 0.0

    def test_example(self):
        assert chebyshev_distance([0.0, 0.0], [3.0, -4.0]).item() == 4.0

    def test_extent_mismatch(self):
        with pytest.raises(ShapeError):
            chebyshev_distance([0.0, 0.0], [1.0])

    @given(st.lists(st.tuples(finite, finite, finite), min_size=1, max_size=6))
    @settings(max_examples=50)
    def test_triangle_inequality(self, rows):
        pts = np.array(rows).T
        x, y, z = pts
        dxz = chebyshev_distance(x, z).item()
        assert dxz <= chebyshev_distance(x, y).item() + chebyshev_distance(y, z).item() + 1e-9


class TestDcml:
    def test_identical_branches(self):
        f = Tensor(np.random.default_rng(0).normal(size=(4, 3)))
        assert dcml_loss([f, f, f]).item() == 0.0

    def test_three_branches(self):
        feats = [Tensor([[1.0, 0.0]]), Tensor([[0.0, 2.0]]), Tensor([[1.0, 2.0]])]
        assert dcml_loss(feats).item() == pytest.approx(5 / 3, abs=1e-12)

    def test_batch_mean(self):
        a = Tensor([[0.0, 0.0], [0.0, 0.0]])
        b = Tensor([[1.0, 0.5], [-3.0, 2.0]])
        assert dcml_loss([a, b]).item() == 2.0

    def test_needs_two_branches(self):
        with pytest.raises(ValueError):
            dcml_loss([Tensor(np.zeros((2, 2)))])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            dcml_loss([Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 3)))])

    @pytest.mark.parametrize("metric, expected", [("manhattan", 4.0), ("euclidean", math.sqrt(10))])
    def test_metric_variants(self, metric, expected):
        assert dcml_loss([Tensor([[0.0, 0.0]]), Tensor([[1.0, 3.0]])], metric).item() == pytest.approx(expected)

    def test_unknown_metric(self):
        with pytest.raises(ValueError):
            dcml_loss([Tensor([[0.0]]), Tensor([[1.0]])], "cosine")

    @pytest.mark.parametrize("metric", ["chebyshev", "manhattan", "euclidean"])
    def test_oracle(self, metric):
        rng = np.random.default_rng(1)
        for _ in range(100):
            k, n, d = rng.integers(2, 5), rng.integers(1, 7), rng.integers(1, 9)
            feats = [rng.normal(size=(n, d)) for _ in range(k)]
            got = dcml_loss([Tensor(f) for f in feats], metric).item()
            assert abs(got - dcml_oracle(feats, metric)) < 1e-12

    def test_permutation_invariant_in_branches(self):
        rng = np.random.default_rng(2)
        feats = [Tensor(rng.normal(size=(3, 4))) for _ in range(4)]
        a = dcml_loss(feats).item()
        b = dcml_loss(feats[::-1]).item()
        assert a == pytest.approx(b, abs=1e-14)


class TestCrossEntropy:
    def test_uniform(self):
        feats = Tensor(np.random.default_rng(3).normal(size=(5, 3)))
        loss = cross_entropy_branch(feats, [0, 1, 2, 3, 0], Tensor(np.zeros((4, 3))))
        assert loss.item() == pytest.approx(math.log(4), abs=1e-9)

    def test_large_logit_is_stable(self):
        logits = Tensor([[1000.0, 0.0, 0.0], [0.0, 1000.0, 0.0]])
        loss = cross_entropy_from_logits(logits, [0, 1])
        assert math.isfinite(loss.item()) and loss.item() == pytest.approx(0.0, abs=1e-9)

    def test_two_class_value(self):
        loss = cross_entropy_from_logits(Tensor([[1.0, 0.0]]), [0])
        assert loss.item() == pytest.approx(0.31326, abs=1e-5)
        assert loss.item() == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-15)

    def test_shift_invariance(self):
        rng = np.random.default_rng(4)
        logits = rng.normal(size=(6, 5))
        labels = rng.integers(0, 5, size=6)
        a = cross_entropy_from_logits(Tensor(logits), labels).item()
        b = cross_entropy_from_logits(Tensor(logits + 37.5), labels).item()
        assert a == pytest.approx(b, abs=1e-12)

    def test_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            n, c = rng.integers(1, 7), rng.integers(2, 6)
            logits = rng.normal(scale=3, size=(n, c))
            labels = rng.integers(0, c, size=n)
            got = cross_entropy_from_logits(Tensor(logits), labels).item()
            assert got == pytest.approx(cross_entropy_oracle(logits, labels), abs=1e-12)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            cross_entropy_from_logits(Tensor(np.zeros((1, 3))), [3])

    def test_classifier_shape(self):
        with pytest.raises(ShapeError):
            cross_entropy_branch(Tensor(np.zeros((2, 3))), [0, 1], Tensor(np.zeros((4, 2))))


class TestTriplet:
    def test_separated_clusters(self):
        f = Tensor([[0.0], [1.0], [10.0], [11.0]])
        assert batch_hard_triplet(f, [0, 0, 1, 1]).item() == 0.0

    def test_enumeration_example(self):
        f = Tensor([[0.0], [2.0], [1.0], [1.0]])
        assert batch_hard_triplet(f, [0, 0, 1, 1], 0.3).item() == pytest.approx(0.65, abs=1e-12)

    def test_translation_invariance(self):
        rng = np.random.default_rng(6)
        f = rng.normal(size=(6, 3))
        labels = [0, 0, 1, 1, 2, 2]
        a = batch_hard_triplet(Tensor(f), labels).item()
        b = batch_hard_triplet(Tensor(f + rng.normal(size=3) * 100), labels).item()
        assert a == pytest.approx(b, abs=1e-9)

    def test_single_instance_identity(self):
        with pytest.raises(ValueError, match="single instance"):
            batch_hard_triplet(Tensor(np.zeros((3, 2))), [0, 0, 1])

    def test_single_identity(self):
        with pytest.raises(ValueError):
            batch_hard_triplet(Tensor(np.zeros((3, 2))), [0, 0, 0])

    def test_exhaustive_oracle(self):
        rng = np.random.default_rng(7)
        checked = 0
        for n in range(4, 9):
            for _ in range(40):
                labels = rng.integers(0, n // 2, size=n)
                _, counts = np.unique(labels, return_counts=True)
                if len(counts) < 2 or counts.min() < 2:
                    continue
                f = rng.normal(size=(n, rng.integers(1, 5)))
                got = batch_hard_triplet(Tensor(f), labels, 0.3).item()
                assert got == pytest.approx(triplet_oracle(f, labels, 0.3), abs=1e-12)
                checked += 1
        assert checked > 50

    def test_nonnegative(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            f = rng.normal(size=(6, 2))
            assert batch_hard_triplet(Tensor(f), [0, 0, 1, 1, 2, 2]).item() >= 0.0


def _branches(rng, k, n=4, d=3, c=3):
    feats = [Tensor(rng.normal(size=(n, d))) for _ in range(k)]
    logits = [Tensor(rng.normal(size=(n, c))) for _ in range(k)]
    return feats, logits


class TestTotal:
    LABELS = [0, 0, 1, 1]

    def test_zero_weights(self):
        feats, logits = _branches(np.random.default_rng(9), 2)
        out = total_loss(feats, logits, self.LABELS, LossWeights(0, 0, 0))
        assert out.total.item() == 0.0

    def test_single_branch_has_no_alignment(self):
        feats, logits = _branches(np.random.default_rng(10), 1)
        w = LossWeights(0.7, 1.3, 5.0)
        out = total_loss(feats, logits, self.LABELS, w)
        expected = 0.7 * cross_entropy_from_logits(logits[0], self.LABELS).item()
        expected += 1.3 * batch_hard_triplet(feats[0], self.LABELS).item()
        assert out.total.item() == pytest.approx(expected, abs=1e-12)
        assert out.dcml.item() == 0.0

    def test_recomposition(self):
        feats, logits = _branches(np.random.default_rng(11), 2)
        w = LossWeights(1.0, 0.5, 0.01)
        out = total_loss(feats, logits, self.LABELS, w)
        ce = sum(cross_entropy_from_logits(l, self.LABELS).item() for l in logits)
        tri = sum(batch_hard_triplet(f, self.LABELS).item() for f in feats)
        expected = w.w1 * ce + w.w2 * tri + w.w3 * dcml_loss(feats).item()
        assert out.total.item() == pytest.approx(expected, abs=1e-12)
        assert out.as_floats()["ce"] == pytest.approx(ce, abs=1e-12)

    def test_logits_count_mismatch(self):
        feats, logits = _branches(np.random.default_rng(12), 2)
        with pytest.raises(ValueError):
            total_loss(feats, logits[:1], self.LABELS)

    def test_negative_weight(self):
        with pytest.raises(ValueError):
            LossWeights(1.0, -1.0, 0.0)


@pytest.mark.parametrize(
    "builder", [dcml_instance, ce_instance, triplet_instance, total_instance], ids=lambda b: b.__name__
)
@pytest.mark.parametrize("seed", range(5))
def test_gradients(builder, seed):
    assert check_gradients(builder(seed)) < 1e-4
