"""Discrete-time survival head with censoring-aware likelihood, plus the
binary 3-year heads."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .errors import DegenerateBins, ShapeMismatch


class SurvivalHead(nn.Module):
    """Linear map from the pooled representation to per-interval hazard
    logits; hazards are sigmoid(logit)."""

    def __init__(self, rng, d: int, k_time: int):
        self.fc = nn.Linear(rng, d, k_time)
        self.k_time = k_time

    def __call__(self, pooled: Tensor) -> Tensor:
        return self.fc(pooled)


class BinaryHead(nn.Module):
    def __init__(self, rng, d: int):
        self.fc = nn.Linear(rng, d, 1)

    def __call__(self, pooled: Tensor) -> Tensor:
        return ad.reshape(self.fc(pooled), (pooled.data.shape[0],))


def discretize_time(times, events, k_time: int) -> tuple[np.ndarray, np.ndarray]:
    """Bin follow-up times at empirical quantiles of the uncensored event
    times, so events are balanced across bins.

    Returns (interval index per patient, interior bin edges). Duplicate
    quantiles (fewer distinct event times than bins) are merged, shrinking
    the effective bin count.
    """
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=bool)
    if k_time < 1:
        raise DegenerateBins("k_time must be at least 1")
    event_times = times[events]
    if event_times.size == 0:
        raise DegenerateBins("no uncensored event times to bin on")
    if k_time == 1:
        edges = np.empty(0)
    else:
        qs = np.quantile(event_times, np.arange(1, k_time) / k_time)
        edges = np.unique(qs)
    idx = np.searchsorted(edges, times, side="right")
    return idx.astype(np.intp), edges


def survival_nll(hazard_logits: Tensor, interval_idx, censored) -> Tensor:
    """Censoring-aware negative log-likelihood, batch mean.

    Event in bin j:    -log h_j - sum_{u<j} log(1-h_u)
    Censored in bin j: -sum_{u<=j} log(1-h_u)

    log h = -softplus(-x) and log(1-h) = -softplus(x) keep everything in
    logit space (no clipped probabilities).
    """
    b, k = hazard_logits.data.shape
    idx = np.asarray(interval_idx, dtype=np.intp)
    cens = np.asarray(censored, dtype=bool)
    if idx.shape != (b,) or cens.shape != (b,):
        raise ShapeMismatch("interval/censoring vectors must match the batch")
    if idx.min() < 0 or idx.max() >= k:
        raise ShapeMismatch("interval index out of range")
    cols = np.arange(k)[None, :]
    # survived-through mask: u < j for events, u <= j for censored
    surv_mask = np.where(cens[:, None], cols <= idx[:, None], cols < idx[:, None])
    event_mask = np.zeros((b, k))
    rows = np.where(~cens)[0]
    event_mask[rows, idx[rows]] = 1.0
    pos_terms = ad.mul(ad.softplus(hazard_logits), ad.constant(surv_mask.astype(float)))
    neg_terms = ad.mul(ad.softplus(ad.mul(hazard_logits, ad.constant(-1.0))),
                       ad.constant(event_mask))
    per_patient = ad.sum_(ad.add(pos_terms, neg_terms), axis=-1)
    return ad.mean(per_patient)


def binary_ce(logits: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy on logits: softplus(x) - y*x."""
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != logits.data.shape:
        raise ShapeMismatch("label vector must match logits")
    return ad.mean(ad.sub(ad.softplus(logits), ad.mul(logits, ad.constant(y))))


def hazard_probs(hazard_logits: np.ndarray) -> np.ndarray:
    x = np.asarray(hazard_logits, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ez = np.exp(x[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def risk_score(hazard_logits: np.ndarray) -> np.ndarray:
    """Negated expected discrete survival mass: risk = -sum_j S_j with
    S_j = prod_{u<=j} (1-h_u). Higher is riskier; monotone in every hazard."""
    h = hazard_probs(np.atleast_2d(hazard_logits))
    surv = np.cumprod(1.0 - h, axis=-1)
    return -surv.sum(axis=-1)
