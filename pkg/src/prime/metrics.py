"""Survival-analysis statistics: Harrell's concordance, AUROC, the
Kaplan-Meier estimator, the two-group log-rank test, and a univariate Cox
fit for hazard ratios. All pure functions on plain arrays."""

from __future__ import annotations

import math
from dataclasses import dataclass
from statistics import NormalDist

import numpy as np

from .errors import (
    EmptyBatch,
    InsufficientGroup,
    NoComparablePairs,
    Separation,
    SingleClass,
)

Z975 = NormalDist().inv_cdf(0.975)


def chi2_sf_1df(x: float) -> float:
    """Survival function of chi-square with one degree of freedom."""
    if x < 0:
        raise ValueError("chi-square statistic must be nonnegative")
    return math.erfc(math.sqrt(x / 2.0))


def c_index(times, events, risks) -> float:
    """Harrell's concordance.

    A pair is comparable when the strictly earlier time is an event; ties
    in risk count half; ties in time are incomparable.
    """
    t = np.asarray(times, dtype=np.float64)
    e = np.asarray(events, dtype=bool)
    r = np.asarray(risks, dtype=np.float64)
    lt = t[:, None] < t[None, :]  # i fails strictly before j
    comparable = lt & e[:, None]
    den = comparable.sum()
    if den == 0:
        raise NoComparablePairs("no comparable pair in the sample")
    gt_r = r[:, None] > r[None, :]
    eq_r = r[:, None] == r[None, :]
    num = (comparable & gt_r).sum() + 0.5 * (comparable & eq_r).sum()
    return float(num / den)


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC with midrank tie handling."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    n_pos = int(y.sum())
    n_neg = int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("AUROC needs both classes present")
    order = np.argsort(s, kind="stable")
    ranks = np.empty(len(s), dtype=np.float64)
    sorted_s = s[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # midrank, 1-based
        i = j + 1
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class KmCurve:
    times: np.ndarray  # distinct event times, ascending
    survival: np.ndarray  # S(t) right after each event time
    at_risk: np.ndarray  # n at risk just before each event time

    def step_points(self) -> tuple[np.ndarray, np.ndarray]:
        """Step-function vertices starting at (0, 1), for plotting."""
        xs = [0.0]
        ys = [1.0]
        for t, s in zip(self.times, self.survival):
            xs.extend([t, t])
            ys.extend([ys[-1], s])
        return np.asarray(xs), np.asarray(ys)


def km_curve(times, events) -> KmCurve:
    """Product-limit estimator S(t) = prod_{t_j <= t} (1 - d_j / n_j)."""
    t = np.asarray(times, dtype=np.float64)
    e = np.asarray(events, dtype=bool)
    if t.size == 0:
        raise EmptyBatch("empty sample")
    event_times = np.unique(t[e])
    surv = []
    risk = []
    s = 1.0
    for tj in event_times:
        n_j = int((t >= tj).sum())
        d_j = int(((t == tj) & e).sum())
        s *= 1.0 - d_j / n_j
        surv.append(s)
        risk.append(n_j)
    return KmCurve(event_times, np.asarray(surv), np.asarray(risk, dtype=np.intp))


def logrank_test(times_a, events_a, times_b, events_b) -> tuple[float, float]:
    """Two-group log-rank test; returns (chi2, p) with p from chi2(1)."""
    ta = np.asarray(times_a, dtype=np.float64)
    ea = np.asarray(events_a, dtype=bool)
    tb = np.asarray(times_b, dtype=np.float64)
    eb = np.asarray(events_b, dtype=bool)
    if ta.size == 0 or tb.size == 0:
        raise InsufficientGroup("both groups must be nonempty")
    all_t = np.concatenate([ta, tb])
    all_e = np.concatenate([ea, eb])
    event_times = np.unique(all_t[all_e])
    observed_a = 0.0
    expected_a = 0.0
    variance = 0.0
    for tj in event_times:
        n_a = int((ta >= tj).sum())
        n_b = int((tb >= tj).sum())
        n_j = n_a + n_b
        d_j = int(((all_t == tj) & all_e).sum())
        d_a = int(((ta == tj) & ea).sum())
        observed_a += d_a
        expected_a += d_j * n_a / n_j
        if n_j > 1:
            variance += d_j * (n_a / n_j) * (1 - n_a / n_j) * (n_j - d_j) / (n_j - 1)
    if variance == 0.0:
        return 0.0, 1.0
    chi2 = (observed_a - expected_a) ** 2 / variance
    return float(chi2), float(chi2_sf_1df(chi2))


@dataclass
class CoxResult:
    hr: float
    ci_low: float
    ci_high: float
    beta: float
    se: float
    converged: bool


def cox_univariate(times, events, group) -> CoxResult:
    """Newton-Raphson on the Breslow partial likelihood for one binary
    covariate. Raises Separation when the likelihood is monotone (a group
    without events, or a diverging coefficient)."""
    t = np.asarray(times, dtype=np.float64)
    e = np.asarray(events, dtype=bool)
    x = np.asarray(group, dtype=np.float64)
    if set(np.unique(x)) - {0.0, 1.0}:
        raise ValueError("group indicator must be binary")
    if not ((e & (x == 1)).any() and (e & (x == 0)).any()):
        raise Separation("events required in both groups for identifiability")

    order = np.argsort(t, kind="stable")
    t, e, x = t[order], e[order], x[order]
    n = len(t)
    beta = 0.0
    converged = False
    info = 0.0
    for _ in range(50):
        # Breslow: each event uses the full risk set {j : t_j >= t_i}
        w = np.exp(beta * x)
        # suffix sums over the sorted times give risk-set aggregates
        s0 = np.cumsum(w[::-1])[::-1]
        s1 = np.cumsum((w * x)[::-1])[::-1]
        # align risk sets to event times (ties share the same risk set)
        first_at = np.searchsorted(t, t, side="left")
        s0_e = s0[first_at[e]]
        s1_e = s1[first_at[e]]
        score = float((x[e] - s1_e / s0_e).sum())
        mu = s1_e / s0_e
        info = float((mu * (1.0 - mu)).sum())  # x is binary so s2 == s1
        if info <= 0:
            raise Separation("non-positive information; monotone likelihood")
        delta = score / info
        beta += delta
        if abs(beta) > 30:
            raise Separation("coefficient diverging; monotone likelihood")
        if abs(delta) < 1e-8:
            converged = True
            break
    se = 1.0 / math.sqrt(info)
    return CoxResult(
        hr=math.exp(beta),
        ci_low=math.exp(beta - Z975 * se),
        ci_high=math.exp(beta + Z975 * se),
        beta=beta,
        se=se,
        converged=converged,
    )


def cox_score_at(times, events, group, beta: float) -> float:
    """Score (d logL / d beta) of the Breslow partial likelihood; the fit
    should drive this to ~0."""
    t = np.asarray(times, dtype=np.float64)
    e = np.asarray(events, dtype=bool)
    x = np.asarray(group, dtype=np.float64)
    order = np.argsort(t, kind="stable")
    t, e, x = t[order], e[order], x[order]
    w = np.exp(beta * x)
    s0 = np.cumsum(w[::-1])[::-1]
    s1 = np.cumsum((w * x)[::-1])[::-1]
    first_at = np.searchsorted(t, t, side="left")
    return float((x[e] - s1[first_at[e]] / s0[first_at[e]]).sum())


def risk_stratify(risks) -> tuple[np.ndarray, np.ndarray]:
    """Split at the median risk; ties go to the low-risk group.

    Returns (high_idx, low_idx). The high group can come out empty when
    risks are heavily tied; downstream tests should then report
    InsufficientGroup rather than fabricate a split.
    """
    r = np.asarray(risks, dtype=np.float64)
    if r.size < 2:
        raise InsufficientGroup("need at least two patients to stratify")
    med = float(np.median(r))
    high = np.where(r > med)[0]
    low = np.where(r <= med)[0]
    return high, low
