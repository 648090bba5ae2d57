import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdfsl.data import ClipSet, build_manifest
from cdfsl.errors import CapacityError, ValidationError
from cdfsl.fewshot import (
    EvalConfig,
    EvalReport,
    evaluate,
    evaluate_features,
    extract_features,
    fit_logreg,
    sample_episode,
)
from cdfsl.model import init_encoder

from conftest import TINY, random_clips


def by_class(n_classes=6, per=25):
    return [np.arange(c * per, (c + 1) * per) for c in range(n_classes)]


class TestEpisodes:
    def test_sizes(self):
        ep = sample_episode(by_class(), 5, 5, 15, np.random.default_rng(0))
        assert len(ep.support) == 25 and len(ep.query) == 75
        assert np.bincount(ep.support_labels).tolist() == [5] * 5
        assert np.bincount(ep.query_labels).tolist() == [15] * 5

    def test_disjoint_over_many_episodes(self):
        groups = by_class()
        owner = {int(i): c for c, idx in enumerate(groups) for i in idx}
        rng = np.random.default_rng(1)
        for _ in range(1000):
            ep = sample_episode(groups, 5, 5, 15, rng)
            assert not set(ep.support_ids.tolist()) & set(ep.query_ids.tolist())
            assert len(set(ep.support_ids.tolist())) == 25
            for cid, label in ep.support + ep.query:
                assert owner[cid] == ep.classes[label]

    def test_deterministic(self):
        a = sample_episode(by_class(), 5, 1, 3, np.random.default_rng(7))
        b = sample_episode(by_class(), 5, 1, 3, np.random.default_rng(7))
        assert a == b

    def test_capacity(self):
        with pytest.raises(CapacityError):
            sample_episode(by_class(4), 5, 1, 1, np.random.default_rng(0))
        with pytest.raises(CapacityError):
            sample_episode(by_class(6, 10), 5, 5, 6, np.random.default_rng(0))

    def test_zero_shot_rejected(self):
        with pytest.raises(ValidationError):
            sample_episode(by_class(), 5, 0, 3, np.random.default_rng(0))
        with pytest.raises(ValidationError):
            EvalConfig(shot=0)


class TestLogReg:
    def test_separable_toy(self):
        X = np.array([[1.0, 0.0], [-1.0, 0.0], [1.2, 0.1], [-0.9, -0.2]])
        y = np.array([0, 1, 0, 1])
        head = fit_logreg(X, y, reg_l2=1e-3)
        assert (head.predict(X) == y).all()

    def test_huge_penalty_gives_prior(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(30, 4))
        y = np.repeat([0, 1, 2], [5, 10, 15])
        head = fit_logreg(X, y, reg_l2=1e6, max_iter=2000, tol=1e-9)
        assert np.linalg.norm(head.weight) < 1e-3
        z = head.bias - head.bias.max()
        prior = np.exp(z) / np.exp(z).sum()
        np.testing.assert_allclose(prior, [5 / 30, 10 / 30, 15 / 30], atol=1e-4)

    @pytest.mark.parametrize("seed", range(5))
    def test_objective_never_increases(self, seed):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(25, 8))
        head = fit_logreg(X, np.repeat(np.arange(5), 5))
        assert np.all(np.diff(head.objective_trace) <= 0)

    def test_converges_to_stationary_point(self):
        rng = np.random.default_rng(3)
        X, y = rng.normal(size=(25, 6)), np.repeat(np.arange(5), 5)
        head = fit_logreg(X, y, reg_l2=0.1, max_iter=5000, tol=1e-8)
        assert head.converged
        z = X @ head.weight + head.bias
        P = np.exp(z - z.max(1, keepdims=True))
        P /= P.sum(1, keepdims=True)
        R = (P - np.eye(5)[y]) / 25
        assert np.abs(X.T @ R + 0.1 * head.weight).max() < 1e-8

    def test_support_order_does_not_matter(self):
        rng = np.random.default_rng(4)
        X, y = rng.normal(size=(25, 10)), np.repeat(np.arange(5), 5)
        Q = rng.normal(size=(40, 10))
        perm = rng.permutation(25)
        a, b = fit_logreg(X, y), fit_logreg(X[perm], y[perm])
        pa, pb = (np.exp(h.logits(Q)) / np.exp(h.logits(Q)).sum(1, keepdims=True) for h in (a, b))
        assert np.abs(pa - pb).max() < 1e-8
        assert (a.predict(Q) == b.predict(Q)).all()

    def test_feature_scaling_keeps_decisions_without_penalty(self):
        # overlapping classes, many samples per dimension: a unique finite minimizer exists
        rng = np.random.default_rng(5)
        y = np.repeat(np.arange(5), 40)
        X = rng.normal(size=(5, 3))[y] * 0.5 + rng.normal(size=(200, 3))
        Q = rng.normal(size=(100, 3))
        a = fit_logreg(X, y, reg_l2=0.0, max_iter=20000, tol=1e-7)
        b = fit_logreg(3.0 * X, y, reg_l2=0.0, max_iter=20000, tol=1e-7)
        assert a.converged and b.converged
        np.testing.assert_allclose(3.0 * b.weight, a.weight, atol=1e-5)
        assert (a.predict(Q) == b.predict(3.0 * Q)).all()

    def test_non_finite_rejected(self):
        X = np.ones((4, 2))
        X[0, 0] = np.nan
        with pytest.raises(ValidationError):
            fit_logreg(X, np.array([0, 1, 0, 1]))

    def test_empty_class_rejected(self):
        with pytest.raises(ValidationError):
            fit_logreg(np.ones((3, 2)), np.array([0, 0, 2]))


class TestReport:
    def test_singleton_ci_is_zero(self):
        r = EvalReport.from_accuracies([0.4], {})
        assert r.mean == 0.4 and r.ci95 == 0.0

    @settings(max_examples=50)
    @given(st.lists(st.floats(0, 1), min_size=2, max_size=50))
    def test_mean_and_ci(self, accs):
        r = EvalReport.from_accuracies(accs, {})
        assert abs(r.mean - sum(accs) / len(accs)) < 1e-12
        m = sum(accs) / len(accs)
        sd = math.sqrt(sum((a - m) ** 2 for a in accs) / (len(accs) - 1))
        assert abs(r.ci95 - 1.96 * sd / math.sqrt(len(accs))) < 1e-12

    def test_episode_accuracy_range(self):
        feats = np.random.default_rng(0).normal(size=(150, 4))
        r = evaluate_features(feats, by_class(6, 25), EvalConfig(episodes=30))
        assert all(0.0 <= a <= 1.0 for a in r.accuracies)
        assert r.config == {"way": 5, "shot": 5, "query": 15, "episodes": 30, "seed": 0}

    def test_informative_features_score_perfectly(self):
        groups = by_class(6, 25)
        feats = np.zeros((150, 6))
        for c, idx in enumerate(groups):
            feats[idx, c] = 5.0
        r = evaluate_features(feats, groups, EvalConfig(episodes=20))
        assert r.mean == 1.0

    def test_episodes_are_keyed_by_index(self):
        feats = np.random.default_rng(1).normal(size=(150, 4))
        a = evaluate_features(feats, by_class(6, 25), EvalConfig(episodes=10))
        b = evaluate_features(feats, by_class(6, 25), EvalConfig(episodes=20))
        assert a.accuracies == b.accuracies[:10]


class TestFeatures:
    def setup_method(self):
        self.enc = init_encoder(TINY, np.random.default_rng(0), decoder=False)
        self.clips = random_clips(TINY.clip, 7, 0)

    def test_shape_and_determinism(self):
        f = extract_features(self.enc, self.clips, TINY)
        assert f.shape == (7, TINY.encoder.embed_dim)
        np.testing.assert_array_equal(f, extract_features(self.enc, self.clips, TINY))

    def test_batch_grouping_does_not_matter(self):
        a = extract_features(self.enc, self.clips, TINY, batch_size=64)
        b = extract_features(self.enc, self.clips, TINY, batch_size=3)
        c = np.concatenate([extract_features(self.enc, self.clips[i : i + 1], TINY) for i in range(7)])
        np.testing.assert_allclose(a, b, atol=1e-13)
        np.testing.assert_allclose(a, c, atol=1e-13)


def test_evaluation_reads_labels_only_for_episodes():
    m = build_manifest(4, 5, 6, seed=0)
    test = ClipSet(m.target_test, TINY.clip, "target_test")
    enc = init_encoder(TINY, np.random.default_rng(0), decoder=False)
    evaluate(enc, test, TINY, EvalConfig(shot=1, query=2, episodes=5))
    # grouping the split by class reads each label once; nothing else does
    assert test.label_reads == len(test)
