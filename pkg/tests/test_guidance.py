"""Tests for classifiers, weighted losses, priors, balancing, and guidance."""

import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from genneg import guidance, nets
from genneg.diffusion import NoiseSchedule, new_score_model
from genneg.errors import (BudgetError, ConfigError, ContractError,
                           DegeneratePriorError)
from genneg.guidance import (GuidedModel, LabeledSet, TimeClassifier,
                             balanced_subsample, bayes_optimal_prob, ce_loss,
                             classifier_forward, classifier_train_config,
                             collect_labeled, estimate_alpha,
                             grad_log_classifier, guided_score, is_loss,
                             load_labeled, new_classifier, save_labeled)
from genneg.oracles import Box, Checkerboard

SCHEDULE = NoiseSchedule()


def constant_logit_classifier(logit, d=2, schedule=SCHEDULE):
    clf = new_classifier(d, schedule, hidden=8, t_dim=4, seed=0)
    arrays = {k: np.zeros_like(v) for k, v in clf.params.arrays.items()}
    arrays["b_out"] = np.array([float(logit)])
    return replace(clf, params=replace(clf.params, arrays=arrays))


def trained_like_classifier(seed=0, d=2):
    """Classifier with every layer randomized (as after some training)."""
    clf = new_classifier(d, SCHEDULE, hidden=16, t_dim=8, seed=seed)
    rng = np.random.default_rng(seed + 77)
    arrays = {k: v + 0.3 * rng.normal(size=v.shape)
              for k, v in clf.params.arrays.items()}
    return replace(clf, params=replace(clf.params, arrays=arrays))


class TestClassifierForward:
    def test_zero_init_is_half_everywhere(self):
        clf = new_classifier(2, SCHEDULE, hidden=16, t_dim=8, seed=1)
        rng = np.random.default_rng(0)
        x = rng.normal(size=(20, 2))
        sig = np.exp(rng.uniform(-3, 2, size=20))
        np.testing.assert_array_equal(classifier_forward(clf, x, sig),
                                      np.full(20, 0.5))

    def test_fixed_logit_value(self):
        clf = constant_logit_classifier(2.0)
        p = classifier_forward(clf, np.array([0.3, -0.4]), 0.7)
        assert p == pytest.approx(1.0 / (1.0 + math.exp(-2.0)), abs=1e-12)

    def test_pointwise_under_permutation(self):
        clf = trained_like_classifier(3)
        rng = np.random.default_rng(4)
        x = rng.normal(size=(10, 2))
        perm = rng.permutation(10)
        direct = classifier_forward(clf, x, 0.5)
        permuted = classifier_forward(clf, x[perm], 0.5)
        # batched BLAS kernels may differ in the last bit across layouts
        np.testing.assert_allclose(permuted, direct[perm], rtol=0, atol=1e-15)
        # row-by-row evaluation is bitwise identical to itself in any batch
        for i in (0, 4, 9):
            single = classifier_forward(clf, x[i], 0.5)
            assert single == classifier_forward(clf, np.array([x[i]]), 0.5)[0]

    def test_open_interval(self):
        clf = constant_logit_classifier(1000.0)
        p = classifier_forward(clf, np.array([0.0, 0.0]), 1.0)
        assert 0.0 < p < 1.0


class TestGradLogClassifier:
    def test_constant_classifier_zero_gradient(self):
        clf = constant_logit_classifier(0.7)
        g = grad_log_classifier(clf, np.array([1.0, -2.0]), 0.5)
        np.testing.assert_array_equal(g, np.zeros(2))

    def test_linear_logit_chain_rule(self):
        # drive silu into its asymptotically linear regime with large biases
        # so the logit is affine in x; the gradient must then be
        # (1 - p) * c_in * W_out W_in
        clf = new_classifier(2, SCHEDULE, hidden=4, t_dim=4, seed=0)
        arrays = {k: np.zeros_like(v) for k, v in clf.params.arrays.items()}
        arrays["w_in"] = np.array([[0.6, -0.2], [0.1, 0.4], [0.0, 0.3], [-0.5, 0.2]])
        arrays["b_in"] = np.full(4, 60.0)
        arrays["w_out"] = np.array([[0.7, -0.3, 0.2, 0.4]])
        # cancel the bias shift so the logit stays moderate
        arrays["b_out"] = np.array([-60.0 * arrays["w_out"].sum()])
        clf = replace(clf, params=replace(clf.params, arrays=arrays))
        x = np.array([0.3, -0.8])
        sig = 0.9
        c_in = 1.0 / np.sqrt(sig ** 2 + clf.sigma_data ** 2)
        p = classifier_forward(clf, x, sig)
        expected = (1.0 - p) * c_in * (arrays["w_out"] @ arrays["w_in"])[0]
        got = grad_log_classifier(clf, x, sig)
        np.testing.assert_allclose(got, expected, rtol=1e-8)

    def test_finite_differences(self):
        clf = trained_like_classifier(9)
        rng = np.random.default_rng(10)
        worst = 0.0
        for _ in range(10):
            x = rng.normal(size=2)
            sig = float(np.exp(rng.uniform(-2, 1)))
            g = grad_log_classifier(clf, x, sig)
            for j in range(2):
                ee = np.zeros(2)
                ee[j] = 1e-4
                up = np.log(classifier_forward(clf, x + ee, sig))
                dn = np.log(classifier_forward(clf, x - ee, sig))
                fd = (up - dn) / 2e-4
                worst = max(worst, abs(fd - g[j]) / max(abs(fd), abs(g[j]), 1e-10))
        assert worst < 1e-4

    def test_guidance_scale_multiplies(self):
        clf = trained_like_classifier(2)
        hot = replace(clf, guidance_scale=2.5)
        x = np.array([0.2, 0.4])
        np.testing.assert_allclose(hot.grad_log(x, 0.5),
                                   2.5 * clf.grad_log(x, 0.5), rtol=1e-14)


class TestLosses:
    def test_uninformative_classifier_gives_log2(self):
        clf = constant_logit_classifier(0.0)
        rng = np.random.default_rng(0)
        x0 = rng.normal(size=(16, 2))
        y = rng.integers(0, 2, size=16)
        loss = ce_loss(clf, x0, y, np.random.default_rng(1))
        assert loss == pytest.approx(math.log(2.0), abs=1e-12)

    def test_single_positive_term(self):
        logit = math.log(0.9 / 0.1)
        clf = constant_logit_classifier(logit)
        loss = ce_loss(clf, np.array([[0.0, 0.0]]), np.array([1]),
                       np.random.default_rng(2))
        assert loss == pytest.approx(-math.log(0.9), abs=1e-12)

    def test_confident_correct_classifier_vanishes(self):
        clf = constant_logit_classifier(36.0)
        loss = ce_loss(clf, np.zeros((4, 2)), np.ones(4), np.random.default_rng(3))
        assert loss < 1e-15

    def test_bad_labels_rejected(self):
        clf = constant_logit_classifier(0.0)
        with pytest.raises(ContractError):
            ce_loss(clf, np.zeros((2, 2)), np.array([0, 2]), np.random.default_rng(0))

    def test_is_loss_half_prior_is_half_sum(self):
        # with a prior of one half, both class means carry weight 0.5
        clf = trained_like_classifier(5)
        rng = np.random.default_rng(6)
        pos = rng.normal(size=(8, 2))
        neg = rng.normal(size=(8, 2))
        cfg = classifier_train_config(seed=0)
        l_half = is_loss(0.5, pos, neg, clf, np.random.default_rng(9), cfg)
        rng2 = np.random.default_rng(9)
        z_pos = guidance._noised_logits(clf, pos, rng2, cfg, 1)
        z_neg = guidance._noised_logits(clf, neg, rng2, cfg, 1)
        manual = 0.5 * np.mean(np.logaddexp(0, -z_pos)) \
            + 0.5 * np.mean(np.logaddexp(0, z_neg))
        assert l_half == pytest.approx(manual, abs=1e-12)

    def test_is_loss_single_pair_hand_arithmetic(self):
        # probabilities 0.9 on the positive and 0.2 on the negative with a
        # prior of one half: 0.5(-ln 0.9) + 0.5(-ln 0.8) = 0.16425
        expected = 0.5 * (-math.log(0.9)) + 0.5 * (-math.log(0.8))
        assert expected == pytest.approx(0.16425, abs=5e-6)
        clf_pos = constant_logit_classifier(math.log(0.9 / 0.1))
        clf_neg = constant_logit_classifier(math.log(0.2 / 0.8))
        got = 0.5 * ce_loss(clf_pos, np.zeros((1, 2)), np.ones(1), np.random.default_rng(0)) \
            + 0.5 * ce_loss(clf_neg, np.zeros((1, 2)), np.zeros(1), np.random.default_rng(0))
        assert got == pytest.approx(expected, abs=1e-12)

    def test_is_loss_prior_limit_drops_negative_term(self):
        clf = trained_like_classifier(7)
        rng = np.random.default_rng(8)
        pos = rng.normal(size=(6, 2))
        neg = rng.normal(size=(6, 2))
        cfg = classifier_train_config(seed=0)
        near_one = is_loss(1.0 - 1e-12, pos, neg, clf, np.random.default_rng(4), cfg)
        rng2 = np.random.default_rng(4)
        z_pos = guidance._noised_logits(clf, pos, rng2, cfg, 1)
        assert near_one == pytest.approx(float(np.mean(np.logaddexp(0, -z_pos))),
                                         abs=1e-9)

    def test_is_loss_contracts(self):
        clf = constant_logit_classifier(0.0)
        with pytest.raises(ContractError):
            is_loss(0.5, np.zeros((3, 2)), np.zeros((2, 2)), clf,
                    np.random.default_rng(0))
        with pytest.raises(DegeneratePriorError):
            is_loss(1.0, np.zeros((2, 2)), np.zeros((2, 2)), clf,
                    np.random.default_rng(0))


class TestPriorAndBalancing:
    def test_estimate_alpha_ratio(self):
        assert estimate_alpha(300, 100) == 0.75
        assert estimate_alpha(42, 42) == 0.5

    def test_estimate_alpha_errors(self):
        with pytest.raises(DegeneratePriorError):
            estimate_alpha(10, 0)
        with pytest.raises(DegeneratePriorError):
            estimate_alpha(0, 10)
        with pytest.raises(ContractError):
            estimate_alpha(0, 0)

    def test_subsample_full_set_is_identity(self):
        data = np.arange(12.0).reshape(6, 2)
        np.testing.assert_array_equal(balanced_subsample(6, data, seed=3), data)

    def test_subsample_empty(self):
        data = np.arange(12.0).reshape(6, 2)
        assert balanced_subsample(0, data).shape == (0, 2)

    def test_subsample_too_large_rejected(self):
        with pytest.raises(ContractError):
            balanced_subsample(7, np.zeros((6, 2)))

    def test_subsample_inclusion_uniform(self):
        data = np.arange(40.0).reshape(20, 2)
        n, trials = 5, 4000
        counts = np.zeros(20)
        for seed in range(trials):
            picked = balanced_subsample(n, data, seed=seed)
            counts[picked[:, 0].astype(int) // 2] += 1
        freq = counts / trials
        p = n / 20
        stderr = np.sqrt(p * (1 - p) / trials)
        assert np.all(np.abs(freq - p) < 4 * stderr)

    def test_subsample_deterministic(self):
        data = np.arange(40.0).reshape(20, 2)
        np.testing.assert_array_equal(balanced_subsample(5, data, seed=9),
                                      balanced_subsample(5, data, seed=9))


class TestBayesOptimalProb:
    def test_symmetric(self):
        assert bayes_optimal_prob(0.5, 3.0, 3.0) == pytest.approx(0.5)

    def test_densities_cancel(self):
        assert bayes_optimal_prob(0.8, 0.123, 0.123) == pytest.approx(0.8)

    def test_direct_value(self):
        assert bayes_optimal_prob(0.5, 2.0, 1.0) == pytest.approx(2.0 / 3.0)

    def test_undefined_point(self):
        with pytest.raises(ContractError):
            bayes_optimal_prob(0.5, 0.0, 0.0)

    def test_degenerate_prior(self):
        with pytest.raises(DegeneratePriorError):
            bayes_optimal_prob(1.0, 1.0, 1.0)

    @given(st.floats(0.01, 0.99), st.floats(1e-6, 10), st.floats(1e-6, 10))
    @settings(max_examples=50, deadline=None)
    def test_in_unit_interval(self, alpha, p1, p0):
        assert 0.0 < bayes_optimal_prob(alpha, p1, p0) < 1.0


class TestCrossEntropyKlDecomposition:
    @given(st.floats(1e-6, 1 - 1e-6), st.floats(1e-6, 1 - 1e-6))
    @settings(max_examples=100, deadline=None)
    def test_pointwise_identity(self, q, p):
        ce = -(q * math.log(p) + (1 - q) * math.log(1 - p))
        entropy = -(q * math.log(q) + (1 - q) * math.log(1 - q))
        kl = q * math.log(q / p) + (1 - q) * math.log((1 - q) / (1 - p))
        assert abs((ce - entropy) - kl) < 1e-12
        assert kl >= -1e-15

    def test_equality_iff_matching(self):
        q = 0.37
        ce_match = -(q * math.log(q) + (1 - q) * math.log(1 - q))
        entropy = ce_match
        assert abs((ce_match - entropy)) < 1e-15  # KL = 0 at p = q


class TestGuidedScore:
    def setup_method(self):
        self.model = new_score_model(2, SCHEDULE, hidden=16, t_dim=8, seed=2)

    def test_empty_stack_is_baseline(self):
        from genneg.diffusion import score
        g = GuidedModel(baseline=self.model)
        rng = np.random.default_rng(0)
        x = rng.normal(size=(5, 2))
        np.testing.assert_array_equal(guided_score(g, x, 0.7),
                                      score(self.model, x, 0.7))

    def test_constant_classifier_leaves_baseline(self):
        from genneg.diffusion import score
        g = GuidedModel(baseline=self.model,
                        stack=(constant_logit_classifier(1.3),))
        rng = np.random.default_rng(1)
        x = rng.normal(size=(4, 2))
        np.testing.assert_array_equal(guided_score(g, x, 0.5),
                                      score(self.model, x, 0.5))

    def test_two_classifiers_order_independent(self):
        a, b = trained_like_classifier(1), trained_like_classifier(2)
        g_ab = GuidedModel(baseline=self.model, stack=(a, b))
        g_ba = GuidedModel(baseline=self.model, stack=(b, a))
        rng = np.random.default_rng(2)
        x = rng.normal(size=(6, 2))
        np.testing.assert_allclose(guided_score(g_ab, x, 0.9),
                                   guided_score(g_ba, x, 0.9),
                                   rtol=1e-12, atol=1e-12)

    def test_stack_additivity(self):
        from genneg.diffusion import score
        a, b = trained_like_classifier(3), trained_like_classifier(4)
        rng = np.random.default_rng(3)
        x = rng.normal(size=(6, 2))
        both = guided_score(GuidedModel(self.model, (a, b)), x, 1.1)
        only_a = guided_score(GuidedModel(self.model, (a,)), x, 1.1)
        only_b = guided_score(GuidedModel(self.model, (b,)), x, 1.1)
        base = score(self.model, x, 1.1)
        np.testing.assert_allclose(both, only_a + only_b - base,
                                   rtol=1e-12, atol=1e-12)


class FakeGenerator:
    """Deterministic stand-in sampler with a controllable infraction rate."""

    def __init__(self, infraction=0.3, d=2):
        self.infraction = infraction
        self.d = d
        self.schedule = SCHEDULE

    def sample(self, n, seed=0, steps=None):
        rng = np.random.default_rng(seed)
        bad = rng.random(n) < self.infraction
        pts = np.empty((n, self.d))
        inside = make_positive(rng, int(np.sum(~bad)))
        outside = make_negative(rng, int(np.sum(bad)))
        pts[~bad] = inside
        pts[bad] = outside
        return pts


def make_positive(rng, n):
    from genneg.oracles import make_checkerboard_dataset
    return make_checkerboard_dataset(max(n, 1), seed=int(rng.integers(1 << 31)))[:n]


def make_negative(rng, n):
    pts = make_positive(rng, n)
    return pts + np.array([1.0, 0.0])


class TestCollectLabeled:
    def test_all_positive_oracle_exhausts_budget(self):
        everything = Box(lo=(-100.0, -100.0), hi=(100.0, 100.0))
        gen = FakeGenerator(infraction=0.0)
        with pytest.raises(BudgetError) as info:
            collect_labeled(gen.sample, everything, 50, budget=400, seed=0)
        assert info.value.negatives == 0
        assert info.value.positives > 0

    def test_alpha_matches_generator_rate(self):
        gen = FakeGenerator(infraction=0.3)
        labeled = collect_labeled(gen.sample, Checkerboard(), 400,
                                  budget=40_000, seed=1, batch=1024)
        n = labeled.raw_positive + labeled.raw_negative
        stderr = np.sqrt(0.7 * 0.3 / n)
        assert abs(labeled.alpha - 0.7) < 4 * stderr
        assert labeled.positive.shape == (400, 2)
        assert labeled.negative.shape == (400, 2)

    def test_balanced_budget_expectation(self):
        # at a 50 percent infraction rate the loop should stop after about
        # 2N draws (one batch here)
        gen = FakeGenerator(infraction=0.5)
        labeled = collect_labeled(gen.sample, Checkerboard(), 200,
                                  budget=100_000, seed=3, batch=512)
        used = labeled.raw_positive + labeled.raw_negative
        assert used <= 3 * 200

    def test_budget_precondition(self):
        gen = FakeGenerator()
        with pytest.raises(ConfigError):
            collect_labeled(gen.sample, Checkerboard(), 100, budget=150)


class TestLabeledSetIO:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        labeled = LabeledSet(positive=rng.normal(size=(5, 2)),
                             negative=rng.normal(size=(5, 2)),
                             alpha=0.8125, raw_positive=130, raw_negative=30)
        save_labeled(tmp_path, "labeled", labeled)
        back = load_labeled(tmp_path, "labeled")
        np.testing.assert_array_equal(back.positive, labeled.positive)
        np.testing.assert_array_equal(back.negative, labeled.negative)
        assert back.alpha == labeled.alpha
        assert (back.raw_positive, back.raw_negative) == (130, 30)

    def test_unbalanced_rejected(self):
        with pytest.raises(ContractError):
            LabeledSet(positive=np.zeros((3, 2)), negative=np.zeros((2, 2)),
                       alpha=0.5, raw_positive=3, raw_negative=2)


class TestFitClassifier:
    def test_training_separates_classes(self):
        # toy 1-D geometry: positives on the right, negatives on the left
        rng = np.random.default_rng(0)
        pos = np.abs(rng.normal(size=(256, 1))) + 0.3
        neg = -np.abs(rng.normal(size=(256, 1))) - 0.3
        labeled = LabeledSet(positive=pos, negative=neg, alpha=0.5,
                             raw_positive=256, raw_negative=256)
        cfg = classifier_train_config(iterations=250, batch_size=128,
                                      learning_rate=3e-3, val_cadence=50, seed=0)
        clf = guidance.fit_classifier(labeled, SCHEDULE, cfg, hidden=24, t_dim=8)
        sig = SCHEDULE.sigma_min
        p_pos = classifier_forward(clf, np.array([[1.5]]), sig)
        p_neg = classifier_forward(clf, np.array([[-1.5]]), sig)
        assert p_pos > 0.8 and p_neg < 0.2

    def test_zero_iterations_returns_fresh(self):
        labeled = LabeledSet(positive=np.ones((4, 2)), negative=np.zeros((4, 2)),
                             alpha=0.5, raw_positive=4, raw_negative=4)
        cfg = classifier_train_config(iterations=0, seed=3)
        clf = guidance.fit_classifier(labeled, SCHEDULE, cfg, hidden=8, t_dim=4)
        np.testing.assert_array_equal(clf.params.arrays["w_out"],
                                      np.zeros((1, 8)))
