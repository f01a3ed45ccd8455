import numpy as np
import pytest

from prime import metrics as mx
from prime.errors import InsufficientGroup, NoComparablePairs, Separation, SingleClass


def brute_c_index(times, events, risks):
    num = den = 0.0
    n = len(times)
    for i in range(n):
        for j in range(n):
            if times[i] < times[j] and events[i]:
                den += 1
                if risks[i] > risks[j]:
                    num += 1
                elif risks[i] == risks[j]:
                    num += 0.5
    if den == 0:
        raise NoComparablePairs
    return num / den


def brute_auroc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else (0.5 if p == q else 0.0)
    return total / (len(pos) * len(neg))


def brute_km(times, events):
    # sequential product over sorted copies, one step per distinct event time
    order = np.argsort(times, kind="stable")
    t = np.asarray(times)[order]
    e = np.asarray(events)[order]
    s = 1.0
    out = {}
    for tj in sorted(set(t[e])):
        n_j = (t >= tj).sum()
        d_j = ((t == tj) & e).sum()
        s *= 1 - d_j / n_j
        out[tj] = s
    return out


def brute_logrank(ta, ea, tb, eb):
    all_t = list(ta) + list(tb)
    all_e = list(ea) + list(eb)
    o = ex = v = 0.0
    for tj in sorted({t for t, e in zip(all_t, all_e) if e}):
        n1 = sum(1 for t in ta if t >= tj)
        n2 = sum(1 for t in tb if t >= tj)
        n = n1 + n2
        d = sum(1 for t, e in zip(all_t, all_e) if t == tj and e)
        d1 = sum(1 for t, e in zip(ta, ea) if t == tj and e)
        o += d1
        ex += d * n1 / n
        if n > 1:
            v += d * (n1 / n) * (1 - n1 / n) * (n - d) / (n - 1)
    if v == 0:
        return 0.0, 1.0
    chi2 = (o - ex) ** 2 / v
    return chi2, mx.chi2_sf_1df(chi2)


class TestCIndex:
    def test_perfectly_anti_ordered(self):
        times = np.array([1.0, 2.0, 3.0, 4.0])
        risks = np.array([4.0, 3.0, 2.0, 1.0])
        assert mx.c_index(times, [True] * 4, risks) == 1.0

    def test_all_ties_half(self):
        times = np.array([1.0, 2.0, 3.0])
        assert mx.c_index(times, [True] * 3, np.ones(3)) == 0.5

    def test_five_samples_with_censoring(self):
        times = np.array([2.0, 5.0, 3.0, 8.0, 1.0])
        events = np.array([True, True, False, True, True])
        risks = np.array([0.9, 0.2, 0.5, 0.1, 0.7])
        assert mx.c_index(times, events, risks) == pytest.approx(
            brute_c_index(times, events, risks), abs=1e-12
        )

    def test_no_comparable_pairs(self):
        with pytest.raises(NoComparablePairs):
            mx.c_index([3.0, 3.0], [True, True], [0.1, 0.2])

    def test_invariant_to_monotone_transform(self):
        rng = np.random.default_rng(0)
        times = rng.exponential(5.0, 30)
        events = rng.random(30) < 0.7
        risks = rng.normal(size=30)
        a = mx.c_index(times, events, risks)
        b = mx.c_index(times, events, np.exp(3 * risks) + 2)
        assert a == pytest.approx(b, abs=1e-12)


class TestAuroc:
    def test_separable(self):
        scores = np.array([0.1, 0.2, 0.8, 0.9])
        labels = np.array([False, False, True, True])
        assert mx.auroc(scores, labels) == 1.0

    def test_null_monte_carlo(self):
        rng = np.random.default_rng(1)
        scores = rng.normal(size=10000)
        labels = rng.random(10000) < 0.5
        assert abs(mx.auroc(scores, labels) - 0.5) < 0.02

    def test_single_class_raises(self):
        with pytest.raises(SingleClass):
            mx.auroc([0.1, 0.2], [True, True])

    def test_complement_identity(self):
        rng = np.random.default_rng(2)
        scores = rng.normal(size=50)
        labels = rng.random(50) < 0.4
        if labels.all() or not labels.any():
            labels[0] = ~labels[0]
        assert mx.auroc(scores, labels) + mx.auroc(scores, ~labels) == pytest.approx(1.0)


class TestKm:
    def test_three_events_no_censoring(self):
        curve = mx.km_curve([1.0, 2.0, 3.0], [True, True, True])
        assert np.allclose(curve.survival, [2 / 3, 1 / 3, 0.0])
        assert list(curve.at_risk) == [3, 2, 1]

    def test_all_censored_flat(self):
        curve = mx.km_curve([1.0, 2.0], [False, False])
        assert curve.times.size == 0
        xs, ys = curve.step_points()
        assert list(xs) == [0.0] and list(ys) == [1.0]

    def test_censoring_after_last_event_ignored(self):
        a = mx.km_curve([1.0, 2.0], [True, True])
        b = mx.km_curve([1.0, 2.0, 9.0], [True, True, False])
        # at-risk counts change but the survival values at event times do not
        assert np.allclose(a.survival[0], 1 - 1 / 2)
        assert np.allclose(b.survival, [1 - 1 / 3, (1 - 1 / 3) * (1 - 1 / 2)])
        assert b.survival[-1] > 0  # censoring preserved some mass

    def test_nonincreasing_step_function(self):
        rng = np.random.default_rng(3)
        times = rng.exponential(4.0, 40)
        events = rng.random(40) < 0.6
        if not events.any():
            events[0] = True
        curve = mx.km_curve(times, events)
        assert np.all(np.diff(curve.survival) <= 1e-15)
        assert np.all((curve.survival >= -1e-15) & (curve.survival <= 1.0))


class TestLogrank:
    def test_identical_groups(self):
        t = [1.0, 2.0, 3.0]
        e = [True, True, False]
        chi2, p = mx.logrank_test(t, e, t, e)
        assert chi2 == 0.0
        assert p == 1.0

    def test_textbook_hand_table(self):
        # two groups; hand-computed O-E and V over the pooled event times
        ta, ea = [1.0, 3.0, 5.0], [True, True, True]
        tb, eb = [2.0, 4.0, 6.0], [True, False, True]
        chi2, p = mx.logrank_test(ta, ea, tb, eb)
        bchi2, bp = brute_logrank(ta, ea, tb, eb)
        assert chi2 == pytest.approx(bchi2, abs=1e-12)
        assert p == pytest.approx(bp, abs=1e-12)

    def test_symmetric_in_group_labels(self):
        rng = np.random.default_rng(4)
        ta = rng.exponential(3.0, 12)
        tb = rng.exponential(6.0, 15)
        ea = rng.random(12) < 0.8
        eb = rng.random(15) < 0.8
        c1, p1 = mx.logrank_test(ta, ea, tb, eb)
        c2, p2 = mx.logrank_test(tb, eb, ta, ea)
        assert c1 == pytest.approx(c2, abs=1e-10)
        assert p1 == pytest.approx(p2, abs=1e-10)

    def test_p_in_unit_interval(self):
        rng = np.random.default_rng(5)
        for _ in range(25):
            ta = rng.exponential(3.0, 10)
            tb = rng.exponential(4.0, 10)
            ea = rng.random(10) < 0.7
            eb = rng.random(10) < 0.7
            if not (ea.any() or eb.any()):
                continue
            chi2, p = mx.logrank_test(ta, ea, tb, eb)
            assert chi2 >= 0.0
            assert 0.0 < p <= 1.0


def simulate_two_groups(rng, n, true_hr, censor_scale=1.5):
    group = rng.random(n) < 0.5
    lam = np.where(group, true_hr, 1.0)
    t_event = rng.exponential(1.0 / lam)
    t_cens = rng.exponential(censor_scale, size=n)
    times = np.minimum(t_event, t_cens)
    events = t_event <= t_cens
    return times, events, group.astype(float)


class TestCox:
    def test_permutation_null_hr_near_one(self):
        rng = np.random.default_rng(6)
        times, events, group = simulate_two_groups(rng, 600, 1.0)
        res = mx.cox_univariate(times, events, group)
        assert res.converged
        assert res.ci_low < 1.0 < res.ci_high

    def test_planted_effect_recovery(self):
        rng = np.random.default_rng(7)
        times, events, group = simulate_two_groups(rng, 800, 2.26)
        res = mx.cox_univariate(times, events, group)
        assert res.converged
        assert abs(res.hr - 2.26) / 2.26 < 0.15

    def test_score_equation_at_optimum(self):
        rng = np.random.default_rng(8)
        times, events, group = simulate_two_groups(rng, 200, 1.8)
        res = mx.cox_univariate(times, events, group)
        assert abs(mx.cox_score_at(times, events, group, res.beta)) < 1e-6

    def test_separation_detected(self):
        # all events in one group: monotone likelihood
        times = np.array([1.0, 2.0, 3.0, 4.0])
        events = np.array([True, True, False, False])
        group = np.array([1.0, 1.0, 0.0, 0.0])
        with pytest.raises(Separation):
            mx.cox_univariate(times, events, group)

    def test_ci_coverage_under_null(self):
        rng = np.random.default_rng(9)
        covered = 0
        for _ in range(100):
            times, events, group = simulate_two_groups(rng, 120, 1.0)
            try:
                res = mx.cox_univariate(times, events, group)
            except Separation:
                continue
            if res.ci_low <= 1.0 <= res.ci_high:
                covered += 1
        assert covered >= 93


class TestStratify:
    def test_four_distinct_risks(self):
        high, low = mx.risk_stratify([0.1, 0.9, 0.4, 0.6])
        assert len(high) == 2 and len(low) == 2

    def test_all_equal_goes_low(self):
        high, low = mx.risk_stratify(np.ones(6))
        assert len(high) == 0 and len(low) == 6

    def test_too_few_raises(self):
        with pytest.raises(InsufficientGroup):
            mx.risk_stratify([0.5])


@pytest.mark.parametrize("trial", range(200))
def test_oracle_agreement_on_random_small_instances(trial):
    rng = np.random.default_rng(5000 + trial)
    n = int(rng.integers(4, 21))
    times = np.round(rng.exponential(5.0, n), 1)  # rounding induces ties
    events = rng.random(n) < 0.7
    risks = np.round(rng.normal(size=n), 2)
    labels = rng.random(n) < 0.5

    try:
        mine = mx.c_index(times, events, risks)
        assert mine == pytest.approx(brute_c_index(times, events, risks), abs=1e-10)
    except NoComparablePairs:
        with pytest.raises(NoComparablePairs):
            brute_c_index(times, events, risks)

    if labels.any() and not labels.all():
        assert mx.auroc(risks, labels) == pytest.approx(
            brute_auroc(risks, labels), abs=1e-10
        )

    if events.any():
        curve = mx.km_curve(times, events)
        oracle = brute_km(times, events)
        for tj, sj in zip(curve.times, curve.survival):
            assert sj == pytest.approx(oracle[tj], abs=1e-10)

    half = n // 2
    if half >= 1 and n - half >= 1:
        chi2, p = mx.logrank_test(times[:half], events[:half],
                                  times[half:], events[half:])
        bchi2, bp = brute_logrank(times[:half], events[:half],
                                  times[half:], events[half:])
        assert chi2 == pytest.approx(bchi2, abs=1e-10)
        assert p == pytest.approx(bp, abs=1e-10)
