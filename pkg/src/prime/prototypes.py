"""Shared sequence-level prototype memory: soft assignment, patient-level
consensus, latent imputation of missing modalities, and refinement."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .data import MODALITIES, Modality
from .errors import DimMismatch, NoObservedModality
from .tokenizer import TokenBlock


class PrototypeBank(nn.Module):
    """K_c learnable token sequences (K_c, T_q, D) shared across modalities."""

    def __init__(self, rng, k_c: int, t_q: int, d: int, tau: float = 0.07):
        if k_c < 1:
            raise DimMismatch("need at least one prototype")
        self.prototypes = nn.param(rng, (k_c, t_q, d), std=0.02)
        self.tau = float(tau)
        self.k_c = k_c

    def pooled_unit(self) -> Tensor:
        """Mean-pool each prototype over tokens and L2-normalize: (K_c, D)."""
        return nn.l2_normalize(ad.mean(self.prototypes, axis=1))

    def flat(self) -> Tensor:
        k, t, d = self.prototypes.data.shape
        return ad.reshape(self.prototypes, (k, t * d))


def assign_logits_core(bank: PrototypeBank, tokens: Tensor) -> Tensor:
    """Batched soft assignment: ``(..., T_q, D)`` tokens -> ``(..., K_c)``
    softmax over cosine similarity of pooled unit features, divided by tau."""
    pooled = nn.l2_normalize(ad.mean(tokens, axis=-2))
    sims = ad.matmul(pooled, ad.swapaxes(bank.pooled_unit(), -1, -2))
    return ad.softmax(ad.mul(sims, ad.constant(1.0 / bank.tau)), axis=-1)


def soft_assign(bank: PrototypeBank, block: TokenBlock) -> Tensor:
    """Assignment distribution for one observed token block: (K_c,) simplex."""
    if not block.provenance.all():
        raise NoObservedModality("soft assignment is defined on observed blocks")
    return assign_logits_core(bank, block.tokens)


def consensus(assignments: list[Tensor]) -> Tensor:
    """Arithmetic mean of per-modality assignments (patient-level anchor)."""
    if not assignments:
        raise NoObservedModality("consensus needs at least one assignment")
    acc = assignments[0]
    for a in assignments[1:]:
        acc = ad.add(acc, a)
    return ad.mul(acc, ad.constant(1.0 / len(assignments)))


def mixture_tokens(bank: PrototypeBank, weights: Tensor) -> Tensor:
    """Token-wise convex combination of prototypes: ``(..., K_c)`` weights
    -> ``(..., T_q, D)`` tokens."""
    k, t, d = bank.prototypes.data.shape
    flat = ad.matmul(weights, bank.flat())
    return ad.reshape(flat, weights.data.shape[:-1] + (t, d))


def impute_missing(bank: PrototypeBank, cons: Tensor, modality: Modality) -> TokenBlock:
    """Impute one missing modality from the consensus distribution."""
    tokens = mixture_tokens(bank, cons)
    t_q = bank.prototypes.data.shape[1]
    return TokenBlock(tokens, modality, np.zeros(t_q, dtype=bool))


class RefinementModule(nn.Module):
    """Per-modality transformer smoothing observed and imputed blocks into
    one aligned space; preserves (T_q, D)."""

    def __init__(self, rng, d: int, n_heads: int, depth: int = 1, ffn_mult: int = 4):
        self.blocks = [nn.EncoderBlock(rng, d, n_heads, ffn_mult) for _ in range(depth)]

    def __call__(self, tokens: Tensor) -> Tensor:
        for blk in self.blocks:
            tokens = blk(tokens)
        return tokens


def refine(module: RefinementModule, block: TokenBlock) -> TokenBlock:
    out = module(block.tokens)
    if out.data.shape != block.tokens.data.shape:
        raise DimMismatch("refinement must preserve token shape")
    return TokenBlock(out, block.modality, block.provenance.copy())


def complete_patient(
    bank: PrototypeBank,
    refiners: dict[Modality, RefinementModule],
    observed: dict[Modality, TokenBlock],
) -> dict[Modality, TokenBlock]:
    """Fill in all three modalities for one patient.

    Observed blocks pass through as-is; missing ones become consensus-
    weighted prototype mixtures. Every block is then refined by its
    modality's module.
    """
    if not observed:
        raise NoObservedModality("patient has no observed modality")
    assignments = [soft_assign(bank, observed[m]) for m in MODALITIES if m in observed]
    cons = consensus(assignments)
    out: dict[Modality, TokenBlock] = {}
    for m in MODALITIES:
        pre = observed[m] if m in observed else impute_missing(bank, cons, m)
        out[m] = refine(refiners[m], pre)
    return out
