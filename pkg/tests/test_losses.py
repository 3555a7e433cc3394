import math

import numpy as np
import pytest

from svldl.distributions import (
    VarianceCandidateSet,
    gaussian_label_distribution,
    gaussian_probs,
    make_candidate_set,
)
from svldl.losses import (
    LossReport,
    LossWeights,
    ccc_loss,
    diff_loss,
    focal_loss,
    fold_age_gradients,
    hybrid_loss,
    kl_divergence,
    softmax,
    svldl_kl_loss,
    svldl_select,
    variance_loss,
)


def kl_oracle(t, p):
    # independent scalar loop
    acc = 0.0
    for tk, pk in zip(t, p):
        if tk > 0.0:
            acc += tk * math.log(tk / max(pk, 1e-30))
    return acc


def random_probs(rng, k):
    return softmax(rng.uniform(-2.0, 2.0, size=k))


class TestKLDivergence:
    def test_identity_is_zero(self):
        p = np.array([0.2, 0.3, 0.5])
        value, _ = kl_divergence(p, p)
        assert value == 0.0

    def test_onehot_vs_even(self):
        value, _ = kl_divergence([1.0, 0.0], [0.5, 0.5])
        assert value == pytest.approx(math.log(2.0), rel=1e-12)

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            t = random_probs(rng, 4)
            p = random_probs(rng, 4)
            value, _ = kl_divergence(t, p)
            assert value == pytest.approx(kl_oracle(t, p), abs=1e-12)

    def test_k_mismatch(self):
        with pytest.raises(ValueError):
            kl_divergence([0.5, 0.5], [0.2, 0.3, 0.5])

    def test_nonnegative_zero_iff_equal(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            k = int(rng.integers(2, 30))
            t = random_probs(rng, k)
            p = random_probs(rng, k)
            value, _ = kl_divergence(t, p)
            assert value >= -1e-15
            if not np.array_equal(t, p):
                assert value > 0.0
            value_same, _ = kl_divergence(t, t)
            assert value_same == 0.0

    def test_gradient_formula(self):
        rng = np.random.default_rng(7)
        t = random_probs(rng, 6)
        p = random_probs(rng, 6)
        _, grad = kl_divergence(t, p)
        np.testing.assert_allclose(grad, -t / p, rtol=1e-12)


class TestSelect:
    def test_exact_member_recovered(self):
        cands = make_candidate_set(0.1, 10.0, 0.1, squared=True)
        for idx in (0, 17, 55, 99):
            predicted = gaussian_label_distribution(40.0, cands.values[idx], 100)
            s_star, loss = svldl_select(40.0, cands, predicted)
            assert s_star == cands.values[idx]
            assert abs(loss) <= 1e-10

    def test_between_grid_points_brackets(self):
        cands = make_candidate_set(1.0, 4.0, 1.0, squared=False)
        s_true = 2.4  # strictly between 2 and 3
        predicted = gaussian_label_distribution(40.0, s_true, 100)
        # brute-force oracle over all candidates
        kls = [kl_oracle(gaussian_probs(40.0, s, 100), predicted.probs)
               for s in cands.values]
        s_star, loss = svldl_select(40.0, cands, predicted)
        assert s_star == cands.values[int(np.argmin(kls))]
        assert s_star in (2.0, 3.0)
        assert loss == pytest.approx(min(kls), abs=1e-12)

    def test_tie_breaks_to_smallest(self):
        # K=2 with mu=1.5: every candidate yields the same [0.5, 0.5] target
        cands = VarianceCandidateSet(np.array([1.0, 2.0, 3.0]))
        s_star, loss = svldl_select(1.5, cands, np.array([0.5, 0.5]))
        assert s_star == 1.0
        assert loss == 0.0

    def test_objective_dominance(self):
        rng = np.random.default_rng(8)
        cands = make_candidate_set(0.5, 8.0, 0.5, squared=True)
        for _ in range(50):
            k = int(rng.integers(10, 60))
            mu = float(rng.uniform(2.0, k - 1.0))
            p = random_probs(rng, k)
            s_star, loss = svldl_select(mu, cands, p)
            for s in cands.values:
                other, _ = kl_divergence(gaussian_probs(mu, s, k), p)
                assert loss <= other + 1e-12


class TestSelectiveKLLoss:
    def test_perfect_match_is_zero(self):
        cands = make_candidate_set(0.5, 5.0, 0.5, squared=True)
        p = gaussian_probs(30.0, cands.values[3], 100)
        loss, s_stars, _ = svldl_kl_loss([30.0], p[None, :], cands)
        assert loss == 0.0
        assert s_stars[0] == cands.values[3]

    def test_mean_invariance_under_duplication(self):
        rng = np.random.default_rng(9)
        cands = make_candidate_set(0.5, 5.0, 0.5, squared=True)
        p = random_probs(rng, 40)
        single, _, _ = svldl_kl_loss([25.0], p[None, :], cands)
        double, _, _ = svldl_kl_loss([25.0, 25.0], np.stack([p, p]), cands)
        assert double == pytest.approx(single, rel=1e-12)

    def test_matches_per_sample_oracle(self):
        rng = np.random.default_rng(10)
        cands = make_candidate_set(0.5, 5.0, 0.5, squared=True)
        mus = [20.0, 35.5, 60.0]
        preds = np.stack([random_probs(rng, 80) for _ in mus])
        loss, s_stars, _ = svldl_kl_loss(mus, preds, cands)
        per_sample = []
        for mu, p in zip(mus, preds):
            kls = [kl_oracle(gaussian_probs(mu, s, 80), p) for s in cands.values]
            per_sample.append(min(kls))
        assert loss == pytest.approx(sum(per_sample) / 3.0, abs=1e-12)

    def test_empty_batch(self):
        cands = make_candidate_set(0.5, 5.0, 0.5, squared=True)
        with pytest.raises(ValueError):
            svldl_kl_loss([], np.empty((0, 10)), cands)


class TestDiffLoss:
    def test_zero_at_target(self):
        p = gaussian_label_distribution(30.0, 3.0, 100)
        value, _ = diff_loss(30.0, 3.0, p)
        assert value == 0.0

    def test_hand_case_uniform_k3(self):
        # target diffs (+0.2, -0.2) come from the K=3 Gaussian with
        # exp(-1/s) = 4/7, i.e. s = 1/ln(7/4)
        s = 1.0 / math.log(7.0 / 4.0)
        target = gaussian_probs(2.0, s, 3)
        np.testing.assert_allclose(np.diff(target), [0.2, -0.2], atol=1e-12)
        value, _ = diff_loss(2.0, s, np.ones(3) / 3.0)
        assert value == pytest.approx(0.08, abs=1e-12)

    def test_invalid_s_star(self):
        with pytest.raises(ValueError):
            diff_loss(30.0, 0.0, np.ones(4) / 4)

    def test_rising_side_violation_gradient_signs(self):
        # swap two adjacent rising-side bins of the target: the gradient must
        # push the lower bin down (positive) and the upper bin up (negative)
        rng = np.random.default_rng(11)
        for _ in range(100):
            k_max = int(rng.integers(20, 80))
            mu = float(rng.uniform(k_max * 0.4, k_max * 0.8))
            s = float(rng.uniform(2.0, 30.0))
            target = gaussian_probs(mu, s, k_max)
            k = int(rng.integers(max(1, int(mu) - 8), int(mu) - 1))  # age k < mu - 1
            p = target.copy()
            p[k - 1], p[k] = p[k], p[k - 1]
            assert p[k] < p[k - 1]  # descending step on the rising side
            _, grad = diff_loss(mu, s, p)
            assert grad[k - 1] > 0.0
            assert grad[k] < 0.0


class TestCCCLoss:
    def test_perfect_agreement(self):
        t = np.array([18.0, 30.0, 45.0, 60.0])
        value, grad = ccc_loss(t, t)
        assert value == pytest.approx(0.0, abs=1e-15)
        np.testing.assert_allclose(grad, 0.0, atol=1e-15)

    def test_constant_shift_closed_form(self):
        rng = np.random.default_rng(12)
        t = rng.uniform(20.0, 60.0, size=12)
        for c in (0.5, 3.0, -7.0):
            value, _ = ccc_loss(t, t + c)
            vt = float(np.var(t))
            assert value == pytest.approx(1.0 - 2.0 * vt / (2.0 * vt + c * c), rel=1e-12)

    def test_anticorrelated_exceeds_one(self):
        t = np.array([20.0, 30.0, 40.0, 55.0])
        value, _ = ccc_loss(t, -t + 80.0)
        assert value > 1.0

    def test_translation_and_scale_invariance(self):
        rng = np.random.default_rng(13)
        t = rng.uniform(18.0, 70.0, size=9)
        p = t + rng.normal(0.0, 5.0, size=9)
        base, _ = ccc_loss(t, p)
        shifted, _ = ccc_loss(t + 11.5, p + 11.5)
        scaled, _ = ccc_loss(2.5 * t, 2.5 * p)
        assert shifted == pytest.approx(base, rel=1e-12)
        assert scaled == pytest.approx(base, rel=1e-12)

    def test_too_small_batch(self):
        with pytest.raises(ValueError):
            ccc_loss([40.0], [41.0])

    def test_degenerate_denominator(self):
        with pytest.raises(ValueError):
            ccc_loss([40.0, 40.0], [40.0, 40.0])


class TestVarianceLoss:
    def test_one_hot_is_zero(self):
        p = np.zeros(10)
        p[4] = 1.0
        value, _ = variance_loss(p)
        assert value == 0.0

    def test_uniform_k3(self):
        value, _ = variance_loss(np.ones(3) / 3.0)
        assert value == pytest.approx(2.0 / 3.0, rel=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(14)
        for _ in range(20):
            p = random_probs(rng, int(rng.integers(4, 30)))
            _, grad = variance_loss(p)
            num = np.zeros_like(p)
            for i in range(p.size):
                dp = np.zeros_like(p)
                dp[i] = 1e-6
                num[i] = (variance_loss(p + dp)[0] - variance_loss(p - dp)[0]) / 2e-6
            np.testing.assert_allclose(grad, num, rtol=1e-6, atol=1e-6)


class TestFocalLoss:
    def test_gamma_zero_is_cross_entropy(self):
        value, _ = focal_loss(1, [0.3, 0.7], 0.0)
        assert value == pytest.approx(-math.log(0.7), rel=1e-12)

    def test_perfect_prediction(self):
        value, grad = focal_loss(0, [1.0, 0.0], 2.0)
        assert value == 0.0
        np.testing.assert_allclose(grad, 0.0)

    def test_half_confidence_gamma_two(self):
        value, _ = focal_loss(1, [0.5, 0.5], 2.0)
        assert value == pytest.approx(0.25 * math.log(2.0), rel=1e-12)

    def test_monotone_in_gamma(self):
        rng = np.random.default_rng(15)
        for _ in range(50):
            pt = float(rng.uniform(0.05, 0.95))
            gammas = np.sort(rng.uniform(0.0, 12.0, size=5))
            values = [focal_loss(0, [pt, 1.0 - pt], g)[0] for g in gammas]
            assert np.all(np.diff(values) <= 1e-15)

    def test_validates_distribution(self):
        with pytest.raises(ValueError):
            focal_loss(0, [0.9, 0.3], 1.0)
        with pytest.raises(ValueError):
            focal_loss(2, [0.5, 0.5], 1.0)


class TestHybridLoss:
    def setup_method(self):
        self.cands = make_candidate_set(0.5, 5.0, 0.5, squared=True)
        rng = np.random.default_rng(16)
        self.n, self.k = 5, 60
        self.ages = rng.uniform(10.0, 50.0, size=self.n)
        self.genders = rng.integers(0, 2, size=self.n)
        self.age_logits = rng.normal(size=(self.n, self.k))
        self.gender_logits = rng.normal(size=(self.n, 2))

    def test_all_zero_weights(self):
        w = LossWeights(ccc=0, kl=0, variance=0, diff=0, gender=0, gamma=0)
        report, grads = hybrid_loss(self.ages, self.genders, self.age_logits,
                                    self.gender_logits, self.cands, w)
        assert report.total == 0.0
        assert report.components == {}
        assert report.selected_variances is None
        np.testing.assert_array_equal(grads.age_logits, 0.0)

    def test_single_component_equals_component_loss(self):
        w = LossWeights(ccc=0, kl=1.0, variance=0, diff=0, gender=0)
        report, _ = hybrid_loss(self.ages, self.genders, self.age_logits,
                                self.gender_logits, self.cands, w)
        probs = softmax(self.age_logits)
        expected, _, _ = svldl_kl_loss(self.ages, probs, self.cands)
        assert report.total == pytest.approx(expected, rel=1e-12)
        assert set(report.components) == {"kl"}

    def test_published_weighting_matches_independent_calls(self):
        w = LossWeights(ccc=10.0, kl=1.0, variance=0.1, diff=0.1, gender=0.01, gamma=10.0)
        report, _ = hybrid_loss(self.ages, self.genders, self.age_logits,
                                self.gender_logits, self.cands, w)
        probs = softmax(self.age_logits)
        k = np.arange(1.0, self.k + 1)
        kl, s_stars, _ = svldl_kl_loss(self.ages, probs, self.cands)
        ccc, _ = ccc_loss(self.ages, probs @ k)
        var = float(np.mean([variance_loss(p)[0] for p in probs]))
        diff = float(np.mean([diff_loss(a, s, p)[0]
                              for a, s, p in zip(self.ages, s_stars, probs)]))
        gprobs = softmax(self.gender_logits)
        gender = float(np.mean([focal_loss(g, gp, 10.0)[0]
                                for g, gp in zip(self.genders, gprobs)]))
        expected = 10.0 * ccc + 1.0 * kl + 0.1 * var + 0.1 * diff + 0.01 * gender
        assert report.total == pytest.approx(expected, rel=1e-12)
        assert report.components["ccc"] == pytest.approx(ccc, rel=1e-12)
        assert report.components["gender"] == pytest.approx(gender, rel=1e-12)
        np.testing.assert_array_equal(report.selected_variances, s_stars)

    def test_total_is_weighted_component_sum(self):
        w = LossWeights()
        report, _ = hybrid_loss(self.ages, self.genders, self.age_logits,
                                self.gender_logits, self.cands, w)
        weight_map = {"ccc": w.ccc, "kl": w.kl, "variance": w.variance,
                      "diff": w.diff, "gender": w.gender}
        recomputed = sum(weight_map[name] * val for name, val in report.components.items())
        assert report.total == pytest.approx(recomputed, abs=1e-9)

    def test_ccc_needs_two_samples(self):
        w = LossWeights(ccc=1.0, kl=0, variance=0, diff=0, gender=0)
        with pytest.raises(ValueError):
            hybrid_loss(self.ages[:1], self.genders[:1], self.age_logits[:1],
                        self.gender_logits[:1], self.cands, w)

    def test_batch_of_one_allowed_without_ccc(self):
        w = LossWeights(ccc=0.0, kl=1.0, variance=0.1, diff=0.1, gender=0.01)
        report, _ = hybrid_loss(self.ages[:1], self.genders[:1], self.age_logits[:1],
                                self.gender_logits[:1], self.cands, w)
        assert "ccc" not in report.components
        assert report.total > 0.0

    def test_folded_gradient_matches_finite_differences(self):
        w = LossWeights()
        report, grads = hybrid_loss(self.ages, self.genders, self.age_logits,
                                    self.gender_logits, self.cands, w)
        folded = fold_age_gradients(grads, softmax(self.age_logits))

        def total(logits_flat):
            r, _ = hybrid_loss(self.ages, self.genders,
                               logits_flat.reshape(self.n, self.k),
                               self.gender_logits, self.cands, w)
            return r.total

        flat = self.age_logits.ravel()
        num = np.zeros_like(flat)
        for i in range(flat.size):
            dv = np.zeros_like(flat)
            dv[i] = 1e-6
            num[i] = (total(flat + dv) - total(flat - dv)) / 2e-6
        np.testing.assert_allclose(folded.ravel(), num, rtol=1e-4, atol=1e-8)


class TestWeightTypes:
    def test_rejects_negative_weight(self):
        with pytest.raises(ValueError):
            LossWeights(ccc=-1.0)
        with pytest.raises(ValueError):
            LossWeights(gamma=-0.1)

    def test_report_holds_fields(self):
        r = LossReport(total=1.0, components={"kl": 1.0})
        assert r.selected_variances is None

    def test_component_ranges_on_random_batches(self):
        # everything nonnegative; the concordance term stays inside [0, 2]
        rng = np.random.default_rng(21)
        cands = make_candidate_set(0.5, 5.0, 0.5, squared=True)
        w = LossWeights()
        for _ in range(30):
            n = int(rng.integers(2, 8))
            k = int(rng.integers(10, 50))
            ages = rng.uniform(2.0, k - 1.0, size=n)
            report, _ = hybrid_loss(ages, rng.integers(0, 2, size=n),
                                    rng.normal(size=(n, k)),
                                    rng.normal(size=(n, 2)), cands, w)
            for name, value in report.components.items():
                assert value >= 0.0, name
            assert 0.0 <= report.components["ccc"] <= 2.0
