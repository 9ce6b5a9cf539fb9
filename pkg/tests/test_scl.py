"""Tests for scale contrastive learning and noise sample matching."""

import itertools
import logging
import math

import numpy as np
import pytest

from csfiqa.autodiff import Tensor
from csfiqa.config import SclConfig
from csfiqa.errors import ConfigError
from csfiqa.model import ScaleFeatures
from csfiqa.scl import (
    RegionGrid,
    classify_pairs,
    cls_taps,
    info_nce,
    noise_loss,
    pair_masks,
    partition_regions,
    region_similarity,
    scale_loss,
)


def _cos(u, v):
    return float(np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v)))


def _contrast_oracle(anchors, candidates, labels, beta, tau, self_positive):
    """Plain loops over anchors, positives and negatives."""
    total, used = 0.0, 0
    for i in range(len(labels)):
        positives = [j for j in range(len(labels)) if j != i and abs(labels[j] - labels[i]) <= beta]
        if self_positive:
            positives.append(i)
        negatives = [j for j in range(len(labels)) if j != i and abs(labels[j] - labels[i]) > beta]
        if not positives:
            continue
        anchor_loss = 0.0
        for p in positives:
            s_p = math.exp(_cos(anchors[i], candidates[p]) / tau)
            s_n = sum(math.exp(_cos(anchors[i], candidates[n]) / tau) for n in negatives)
            anchor_loss += -math.log(s_p / (s_p + s_n))
        total += anchor_loss / len(positives)
        used += 1
    return total / used if used else 0.0


class TestClassifyPairs:
    """Test the positive/negative classifier."""

    def test_example(self):
        """Test a three-image batch."""
        pairs = classify_pairs([0.5, 0.5, 0.9], 0, 0.1)
        assert pairs.positives == (1,)
        assert pairs.negatives == (2,)

    def test_infinite_threshold_has_no_negatives(self):
        """Test that everything is positive at an infinite threshold."""
        pairs = classify_pairs([0.0, 3.0, 9.0], 1, math.inf)
        assert pairs.positives == (0, 2)
        assert pairs.negatives == ()

    def test_boundary_is_positive(self):
        """Test that a distance equal to the threshold is positive."""
        assert classify_pairs([0.0, 0.25], 0, 0.25).positives == (1,)

    def test_exhaustive_label_patterns(self):
        """Test every two-level labelling of six images against pairwise thresholding."""
        for bits in itertools.product((0.0, 0.1), repeat=6):
            labels = list(bits)
            for beta in (0.0, 0.1, math.inf):
                positive, negative = pair_masks(labels, beta)
                for i in range(6):
                    pairs = classify_pairs(labels, i, beta)
                    expected_pos = tuple(j for j in range(6) if j != i and abs(labels[j] - labels[i]) <= beta)
                    expected_neg = tuple(j for j in range(6) if j != i and abs(labels[j] - labels[i]) > beta)
                    assert pairs.positives == expected_pos
                    assert pairs.negatives == expected_neg
                    assert tuple(np.flatnonzero(positive[i])) == expected_pos
                    assert tuple(np.flatnonzero(negative[i])) == expected_neg
                assert np.array_equal(positive, positive.T)


class TestInfoNce:
    """Test InfoNCE closed forms."""

    def setup_method(self):
        """Set up test fixtures."""
        self.anchor = np.array([0.3, -1.0, 2.0])

    def test_one_equal_negative_is_ln2(self):
        """Test ln 2 when the negative matches the positive."""
        loss = info_nce(self.anchor, [self.anchor], [self.anchor], 0.1).item()
        assert abs(loss - math.log(2.0)) <= 1e-12

    def test_two_equal_negatives_is_ln3(self):
        """Test ln 3 with two matching negatives."""
        loss = info_nce(self.anchor, [self.anchor], [self.anchor, self.anchor], 0.1).item()
        assert abs(loss - math.log(3.0)) <= 1e-12

    def test_no_negatives_is_zero(self):
        """Test the zero loss without negatives."""
        assert abs(info_nce(self.anchor, [self.anchor], [], 0.1).item()) <= 1e-12

    def test_closer_negative_costs_more(self):
        """Test that a more similar negative raises the loss."""
        far = info_nce(self.anchor, [self.anchor], [-self.anchor], 0.1).item()
        near = info_nce(self.anchor, [self.anchor], [self.anchor + 0.1], 0.1).item()
        assert near > far

    def test_scale_invariance(self):
        """Test invariance to a common rescaling of the features."""
        rng = np.random.default_rng(0)
        a, p, n = rng.normal(size=(3, 4))
        base = info_nce(a, [p], [n], 0.2).item()
        assert abs(info_nce(3.0 * a, [3.0 * p], [3.0 * n], 0.2).item() - base) <= 1e-12

    def test_no_positive_raises(self):
        """Test that an anchor without positives is rejected."""
        with pytest.raises(ValueError):
            info_nce(self.anchor, [], [self.anchor], 0.1)


class TestScaleLoss:
    """Test the tapped contrastive loss against loop oracles."""

    def setup_method(self):
        """Set up test fixtures."""
        self.rng = np.random.default_rng(1)

    def _taps(self, batch, taps, width_small=3, width_large=5):
        return [
            {
                "small": Tensor(self.rng.normal(size=(batch, width_small))),
                "large": Tensor(self.rng.normal(size=(batch, width_large))),
            }
            for _ in range(taps)
        ]

    def test_matches_brute_force(self):
        """Test random batches against the quadruple loop."""
        config = SclConfig(tau=0.1)
        for _ in range(20):
            batch, count = int(self.rng.integers(2, 7)), int(self.rng.integers(1, 4))
            labels = self.rng.uniform(0.0, 1.0, size=batch)
            taps = self._taps(batch, count)
            expected = sum(
                _contrast_oracle(tap[b].data, tap[b].data, labels, 0.3, 0.1, False)
                for tap in taps
                for b in ("small", "large")
            )
            assert abs(scale_loss(taps, labels, config, 0.3).item() - expected) <= 1e-10

    def test_inter_scope_matches_brute_force(self):
        """Test the cross-branch directions with each image's own token as a positive."""
        config = SclConfig(tau=0.2, scope="inter")
        for _ in range(10):
            batch = int(self.rng.integers(2, 7))
            labels = self.rng.uniform(0.0, 1.0, size=batch)
            taps = self._taps(batch, 2, width_small=4, width_large=4)
            expected = sum(
                _contrast_oracle(tap["small"].data, tap["large"].data, labels, 0.25, 0.2, True)
                + _contrast_oracle(tap["large"].data, tap["small"].data, labels, 0.25, 0.2, True)
                for tap in taps
            )
            loss = scale_loss(taps, labels, config, 0.25, project=lambda t: t)
            assert abs(loss.item() - expected) <= 1e-10

    def test_both_is_intra_plus_inter(self):
        """Test that the combined scope adds the two terms."""
        taps = self._taps(5, 2, width_small=4, width_large=4)
        labels = self.rng.uniform(0.0, 1.0, size=5)

        def loss(scope):
            return scale_loss(taps, labels, SclConfig(scope=scope), 0.3, project=lambda t: t).item()

        assert abs(loss("both") - loss("intra") - loss("inter")) <= 1e-12

    def test_inter_needs_projection(self):
        """Test the configuration error without a projection."""
        with pytest.raises(ConfigError):
            scale_loss(self._taps(3, 1), [0.1, 0.2, 0.3], SclConfig(scope="inter"), 0.1)

    def test_identical_labels_give_zero(self):
        """Test that a batch without negatives has zero loss."""
        loss = scale_loss(self._taps(4, 2), [0.5] * 4, SclConfig(), 0.1).item()
        assert abs(loss) <= 1e-12

    def test_skipped_anchors_logged(self, caplog):
        """Test the zero loss and the debug count when no anchor has a positive."""
        caplog.set_level(logging.DEBUG, logger="csfiqa.scl")
        loss = scale_loss(self._taps(4, 1), [0.0, 1.0, 2.0, 3.0], SclConfig(), 0.1)
        assert loss.item() == 0.0
        assert "skipped 8 anchors" in caplog.text

    def test_cls_taps(self):
        """Test per-tap cls extraction with a shallow small branch."""
        features = ScaleFeatures(
            small=[Tensor(np.zeros((2, 5, 3)))],
            large=[Tensor(np.ones((2, 3, 4))), Tensor(np.full((2, 3, 4), 2.0))],
        )
        taps = cls_taps(features)
        assert len(taps) == 2
        assert taps[1]["small"].shape == (2, 3)
        assert taps[1]["large"].data.tolist() == [[2.0] * 4, [2.0] * 4]


class TestRegions:
    """Test region pooling and similarity."""

    def test_pooling_window(self):
        """Test that each region is the mean of its window."""
        tokens = np.random.default_rng(2).normal(size=(16, 3))
        grid = partition_regions(Tensor(tokens), 4, 2)
        assert grid.count == 4
        assert grid.regions.shape == (1, 4, 3)
        assert np.allclose(grid.regions.data[0, 0], tokens[[0, 1, 4, 5]].mean(axis=0), atol=1e-15)
        assert np.allclose(grid.regions.data[0, 3], tokens[[10, 11, 14, 15]].mean(axis=0), atol=1e-15)

    def test_unit_window_is_identity(self):
        """Test that one-patch regions are the patches themselves."""
        tokens = np.random.default_rng(3).normal(size=(2, 4, 3))
        grid = partition_regions(Tensor(tokens), 2, 1)
        assert np.array_equal(grid.regions.data, tokens)

    def test_constant_tokens_give_constant_regions(self):
        """Test pooling a constant layout."""
        grid = partition_regions(Tensor(np.full((16, 2), 0.5)), 4, 2)
        assert np.all(grid.regions.data == 0.5)

    def test_indivisible_window(self):
        """Test the configuration error."""
        with pytest.raises(ConfigError):
            partition_regions(Tensor(np.zeros((16, 2))), 4, 3)

    def test_similarity_shape(self):
        """Test (B, M, K) cosine similarities."""
        rng = np.random.default_rng(4)
        small = RegionGrid(Tensor(rng.normal(size=(2, 4, 3))), 2, 2)
        large = RegionGrid(Tensor(rng.normal(size=(2, 1, 3))), 1, 1)
        sim = region_similarity(small, large).data
        assert sim.shape == (2, 4, 1)
        assert abs(sim[1, 2, 0] - _cos(small.regions.data[1, 2], large.regions.data[1, 0])) <= 1e-12


class TestNoiseLoss:
    """Test noise sample matching against closed forms and oracles."""

    def setup_method(self):
        """Set up test fixtures."""
        self.rng = np.random.default_rng(5)
        self.config = SclConfig()

    @staticmethod
    def _grid(vectors):
        array = np.asarray(vectors, dtype=np.float64)
        return RegionGrid(Tensor(array), 1, array.shape[1])

    def test_identical_regions(self):
        """Test M*K*e^-1 for identical region vectors."""
        v = [[[1.0, 2.0, -1.0]] * 2]
        loss = noise_loss(self._grid(v), self._grid(v), self.config).item()
        assert abs(loss - 4.0 * math.exp(-1.0)) <= 1e-12

    def test_orthogonal_pair(self):
        """Test exp(0) for a single orthogonal pair."""
        loss = noise_loss(self._grid([[[1.0, 0.0]]]), self._grid([[[0.0, 2.0]]]), self.config).item()
        assert abs(loss - 1.0) <= 1e-12

    def test_matches_double_loop(self):
        """Test random regions against the double loop, averaged over the batch."""
        small = self.rng.normal(size=(2, 4, 5))
        large = self.rng.normal(size=(2, 3, 5))
        expected = np.mean(
            [sum(math.exp(-_cos(small[b, m], large[b, k])) for m in range(4) for k in range(3)) for b in range(2)]
        )
        loss = noise_loss(self._grid(small), self._grid(large), self.config).item()
        assert abs(loss - expected) <= 1e-10

    def test_bounds_on_random_inputs(self):
        """Test M*K*e^-1 <= loss <= M*K*e."""
        for _ in range(1000):
            m, k, d = (int(x) for x in self.rng.integers(1, 5, size=3))
            small = self._grid(self.rng.normal(size=(1, m, d)))
            large = self._grid(self.rng.normal(size=(1, k, d)))
            loss = noise_loss(small, large, self.config).item()
            assert m * k * math.exp(-1.0) - 1e-12 <= loss <= m * k * math.e + 1e-12

    def test_reciprocal_clamps_negative_similarity(self):
        """Test the reciprocal form on antipodal regions."""
        config = SclConfig(noise_form="reciprocal")
        loss = noise_loss(self._grid([[[1.0, 1.0]]]), self._grid([[[-1.0, -1.0]]]), config).item()
        assert loss == pytest.approx(1000.0)

    def test_reciprocal_identical_regions(self):
        """Test 1/Sim at similarity one."""
        config = SclConfig(noise_form="reciprocal")
        v = [[[0.5, 0.5]] * 3]
        assert noise_loss(self._grid(v), self._grid(v), config).item() == pytest.approx(9.0)

    def test_least_similar_pair(self):
        """Test that only the least similar pair is penalised."""
        config = SclConfig(noise_mode="least_similar")
        diagonal = math.sqrt(0.5)
        small = self._grid([[[1.0, 0.0], [0.0, 1.0]]])
        large = self._grid([[[1.0, 0.0], [diagonal, diagonal]]])
        assert abs(noise_loss(small, large, config).item() - 1.0) <= 1e-12
