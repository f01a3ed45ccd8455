"""Pretraining objectives: masked pairwise alignment over co-observed
patients, Dirichlet-driven structured-missingness augmentation, reliability-
weighted pooling, inter-view consistency, and the weighted total."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .data import MODALITIES
from .errors import EmptyBatch, InvalidConfig, NoReliableToken
from .prototypes import PrototypeBank, mixture_tokens

MODALITY_PAIRS = ((0, 1), (0, 2), (1, 2))  # (I,R), (I,T), (R,T)


class ProjectionHead(nn.Module):
    """Two-layer MLP to the contrastive space; output is L2-normalized."""

    def __init__(self, rng, d_in: int, d_out: int):
        self.fc1 = nn.Linear(rng, d_in, d_in)
        self.fc2 = nn.Linear(rng, d_in, d_out)

    def __call__(self, x: Tensor) -> Tensor:
        return nn.l2_normalize(self.fc2(ad.gelu(self.fc1(x))))


def info_nce(a: Tensor, b: Tensor, temp: float) -> Tensor:
    """Symmetric InfoNCE over matched unit-vector lists.

    Positives sit on the diagonal of the similarity matrix; both softmax
    directions are averaged. A batch of one has no negative, so the loss
    is exactly zero.
    """
    n = a.data.shape[0]
    if n == 0 or b.data.shape[0] != n:
        raise EmptyBatch("info_nce needs matched non-empty lists")
    sims = ad.mul(ad.matmul(a, ad.swapaxes(b, -1, -2)), ad.constant(1.0 / temp))
    diag = ad.constant(np.eye(n))
    pos = ad.sum_(ad.mul(sims, diag), axis=-1)  # (n,)
    row_lse = ad.logsumexp(sims, axis=-1)
    col_lse = ad.logsumexp(ad.swapaxes(sims, -1, -2), axis=-1)
    loss_ab = ad.mean(ad.sub(row_lse, pos))
    loss_ba = ad.mean(ad.sub(col_lse, pos))
    return ad.mul(ad.add(loss_ab, loss_ba), ad.constant(0.5))


def pool_and_project(tokens: Tensor, head: ProjectionHead) -> Tensor:
    """Mean over tokens, then the projection head: (..., T, D) -> (..., D_d)."""
    return head(ad.mean(tokens, axis=-2))


def alignment_loss(
    refined: dict,
    avail: np.ndarray,
    heads: dict,
    temp: float,
) -> Tensor:
    """Pairwise InfoNCE strictly over patients where both modalities are
    naturally observed; pairs with fewer than two such patients are skipped.

    ``refined``: modality -> (B, T_q, D) unaugmented refined blocks.
    ``avail``: (B, 3) bool natural availability.
    """
    terms = []
    for mi, ni in MODALITY_PAIRS:
        idx = np.where(avail[:, mi] & avail[:, ni])[0]
        if idx.size < 2:
            continue
        m, n_ = MODALITIES[mi], MODALITIES[ni]
        vm = pool_and_project(ad.take_rows(refined[m], idx), heads[m])
        vn = pool_and_project(ad.take_rows(refined[n_], idx), heads[n_])
        terms.append(info_nce(vm, vn, temp))
    if not terms:
        return ad.constant(0.0)
    acc = terms[0]
    for t in terms[1:]:
        acc = ad.add(acc, t)
    return ad.mul(acc, ad.constant(1.0 / len(terms)))


# ---------------------------------------------------------------------------
# structured-missingness augmentation


@dataclass
class AugmentationPolicy:
    p_mod: float = 0.2  # sample-wise modality dropout on observed modalities
    p_tok: float = 0.3  # token dropout within kept observed modalities
    k_s: int = 8  # top-K sparsification of the assignment before Dirichlet
    alpha: float = 50.0  # Dirichlet concentration
    replacement: str = "prototype"  # "prototype" | "zeros" (ablation)

    def validate(self, k_c: int) -> None:
        if not (0.0 <= self.p_mod < 1.0 and 0.0 <= self.p_tok < 1.0):
            raise InvalidConfig("dropout probabilities must lie in [0, 1)")
        if not (1 <= self.k_s <= k_c):
            raise InvalidConfig(f"k_s must lie in [1, {k_c}]")
        if self.alpha <= 0:
            raise InvalidConfig("alpha must be positive")
        if self.replacement not in ("prototype", "zeros"):
            raise InvalidConfig("replacement must be 'prototype' or 'zeros'")


def sparsify_top_k(q: np.ndarray, k_s: int) -> np.ndarray:
    """Keep the top-K_s probabilities (stable ties) and renormalize."""
    order = np.argsort(-q, kind="stable")[:k_s]
    out = np.zeros_like(q)
    out[order] = q[order]
    return out / out.sum()


def sample_prototype_mixture(q_hat: np.ndarray, alpha: float,
                             rng: np.random.Generator) -> np.ndarray:
    """Dirichlet(alpha * q_hat) via normalized Gamma draws.

    Components with exactly zero mass stay exactly zero; a single-support
    distribution degenerates to its one-hot corner.
    """
    support = np.where(q_hat > 0.0)[0]
    out = np.zeros_like(q_hat)
    if support.size == 1:
        out[support[0]] = 1.0
        return out
    draws = rng.gamma(shape=alpha * q_hat[support], scale=1.0)
    total = draws.sum()
    if total <= 0.0:  # all-zero gamma draws are possible only at tiny shapes
        out[support] = 1.0 / support.size
        return out
    out[support] = draws / total
    return out


@dataclass
class ViewDraws:
    """Frozen augmentation randomness for one batch and one view.

    Keeping the draws as plain arrays makes the loss a deterministic
    function of the parameters, which is what gradient checking needs.
    """

    keep: np.ndarray  # (B, 3, T_q) bool: observed token kept in the view
    replace: np.ndarray  # (B, 3, T_q) bool: observed token to be replaced
    mix_weights: np.ndarray  # (B, 3, K_c): mixture weights where replaced


def sample_view_draws(
    policy: AugmentationPolicy,
    avail: np.ndarray,
    q_values: np.ndarray,
    t_q: int,
    rngs,
) -> ViewDraws:
    """Draw modality/token dropout plus prototype-mixture weights.

    ``avail``: (B, 3) natural availability; ``q_values``: (B, 3, K_c)
    detached assignment values for observed modalities; ``rngs``: one
    Generator per patient (derived per patient/view/epoch, so the result
    is independent of batch scheduling). Repair rules guarantee at least
    one kept observed token per patient: modality masks are resampled up
    to 10 times then one observed modality is force-kept, and likewise
    for token masks.
    """
    b = avail.shape[0]
    k_c = q_values.shape[-1]
    keep = np.zeros((b, 3, t_q), dtype=bool)
    replace = np.zeros((b, 3, t_q), dtype=bool)
    mix = np.zeros((b, 3, k_c))
    for i in range(b):
        rng = rngs[i]
        obs = np.where(avail[i])[0]
        for _ in range(10):
            mod_keep = rng.random(obs.size) >= policy.p_mod
            if mod_keep.any():
                break
        else:
            mod_keep = np.zeros(obs.size, dtype=bool)
        if not mod_keep.any():
            mod_keep[rng.integers(obs.size)] = True

        kept_mods = obs[mod_keep]
        for _ in range(10):
            tok_keep = rng.random((kept_mods.size, t_q)) >= policy.p_tok
            if tok_keep.any():
                break
        else:
            tok_keep = np.zeros((kept_mods.size, t_q), dtype=bool)
        if not tok_keep.any():
            tok_keep[rng.integers(kept_mods.size), rng.integers(t_q)] = True

        for slot, mi in enumerate(kept_mods):
            keep[i, mi] = tok_keep[slot]
        for mi in obs:
            replace[i, mi] = ~keep[i, mi]
            q_hat = sparsify_top_k(q_values[i, mi], policy.k_s)
            mix[i, mi] = sample_prototype_mixture(q_hat, policy.alpha, rng)
    return ViewDraws(keep=keep, replace=replace, mix_weights=mix)


def build_view(
    refined: dict,
    avail: np.ndarray,
    bank: PrototypeBank,
    draws: ViewDraws,
    policy: AugmentationPolicy,
) -> tuple[dict, np.ndarray]:
    """Apply Eq.-style replacement per modality.

    Observed tokens marked ``replace`` become prototype mixtures (or zeros
    under the ablation); everything else, including the consensus-imputed
    blocks of naturally missing modalities, passes through. Returns the
    per-modality view tensors and the (B, 3, T_q) reliability keep-mask.
    """
    out = {}
    for mi, m in enumerate(MODALITIES):
        z = refined[m]  # (B, T_q, D)
        rep = draws.replace[:, mi, :]  # (B, T_q)
        if not rep.any():
            out[m] = z
            continue
        keep_f = ad.constant((~rep)[..., None].astype(np.float64))
        if policy.replacement == "prototype":
            repl = mixture_tokens(bank, ad.constant(draws.mix_weights[:, mi, :]))
        else:
            repl = ad.constant(np.zeros_like(z.data))
        rep_f = ad.constant(rep[..., None].astype(np.float64))
        out[m] = ad.add(ad.mul(keep_f, z), ad.mul(rep_f, repl))
    keep_mask = draws.keep & avail[:, :, None]
    return out, keep_mask


# ---------------------------------------------------------------------------
# pooling and the combined objective


def masked_pool(tokens: Tensor, reliable: np.ndarray) -> Tensor:
    """Mean of tokens where the reliability mask is set: (..., S, D) -> (..., D)."""
    w = np.asarray(reliable, dtype=np.float64)
    counts = w.sum(axis=-1)
    if np.any(counts < 1):
        raise NoReliableToken("masked_pool needs at least one reliable token")
    weighted = ad.sum_(ad.mul(tokens, ad.constant(w[..., None])), axis=-2)
    return ad.div(weighted, ad.constant(counts[..., None]))


def fusion_loss(h1: Tensor, h2: Tensor, temp: float) -> Tensor:
    """Inter-view consistency: symmetric InfoNCE between the two views'
    pooled, projected representations."""
    return info_nce(h1, h2, temp)


def total_loss(align: Tensor, fusion: Tensor, router: Tensor,
               lam: float, lam_router: float) -> Tensor:
    if not (0.0 <= lam <= 1.0):
        raise InvalidConfig("lambda must lie in [0, 1]")
    return ad.add(
        ad.add(ad.mul(align, ad.constant(lam)),
               ad.mul(fusion, ad.constant(1.0 - lam))),
        ad.mul(router, ad.constant(lam_router)),
    )
