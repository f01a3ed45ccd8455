"""Fusion backbone: fixed-order concatenation of the three modality blocks,
alternating vanilla transformer and sparse-MoE blocks with modality-aware
gating, plus the switch-style load-balance regularizer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .data import MODALITIES, Modality
from .errors import InvalidConfig
from .tokenizer import TokenBlock


@dataclass
class FusedSequence:
    tokens: Tensor  # (..., 3*T_q, D)
    modality_of_token: np.ndarray  # (3*T_q,) int codes into MODALITIES
    reliability: np.ndarray  # (..., 3*T_q) bool


@dataclass
class RouterStats:
    """Per-expert utilization for one MoE block on one batch.

    ``frac_tokens`` counts hard top-k slot assignments (sums to 1);
    ``mean_prob`` is the batch-mean softmax gate probability as a graph
    node so the balance loss stays differentiable.
    """

    frac_tokens: np.ndarray  # (E,)
    mean_prob: Tensor  # (E,)


def fuse_concat(
    blocks: dict[Modality, TokenBlock],
    keep_masks: dict[Modality, np.ndarray] | None = None,
) -> FusedSequence:
    """Concatenate I, R, T blocks in fixed order.

    Reliability per token = observed provenance AND the augmentation keep
    mask (all-ones when no augmentation is in play).
    """
    missing = [m.value for m in MODALITIES if m not in blocks]
    if missing:
        raise InvalidConfig(f"fuse_concat needs all three blocks, missing {missing}")
    toks = ad.concat([blocks[m].tokens for m in MODALITIES], axis=-2)
    labels = []
    rel = []
    for code, m in enumerate(MODALITIES):
        t_q = blocks[m].tokens.data.shape[-2]
        labels.append(np.full(t_q, code, dtype=np.intp))
        keep = (np.ones(t_q, dtype=bool) if keep_masks is None
                else np.asarray(keep_masks[m], dtype=bool))
        rel.append(blocks[m].provenance & keep)
    return FusedSequence(toks, np.concatenate(labels), np.concatenate(rel))


def split_by_modality(seq: FusedSequence) -> dict[Modality, Tensor]:
    """Inverse of fuse_concat on the token tensor (blocks are contiguous)."""
    out = {}
    for code, m in enumerate(MODALITIES):
        idx = np.where(seq.modality_of_token == code)[0]
        out[m] = ad.slice_axis(seq.tokens, -2, int(idx[0]), int(idx[-1]) + 1)
    return out


class MoeFeedForward(nn.Module):
    """Top-k mixture of expert FFNs with a modality-aware gate.

    Gate logits are ``W_g (x + b_m)`` where ``b_m`` is a learned embedding
    of the token's source modality. The top-k expert probabilities are
    renormalized to sum to 1; ties break toward the lower expert index.
    """

    def __init__(self, rng, d: int, n_experts: int, top_k: int, ffn_mult: int = 4):
        if not (1 <= top_k <= n_experts):
            raise InvalidConfig(f"top_k={top_k} out of range for {n_experts} experts")
        self.n_experts = n_experts
        self.top_k = top_k
        self.gate = nn.Linear(rng, d, n_experts, bias=False)
        self.modality_embed = nn.param(rng, (len(MODALITIES), d), std=0.02)
        self.experts = [nn.FeedForward(rng, d, ffn_mult) for _ in range(n_experts)]

    def __call__(self, x: Tensor, labels: np.ndarray) -> tuple[Tensor, RouterStats]:
        """x: (..., S, D); labels: (S,) modality codes."""
        b_m = ad.take_rows(self.modality_embed, labels)  # (S, D)
        logits = self.gate(ad.add(x, b_m))  # (..., S, E)
        probs = ad.softmax(logits, axis=-1)

        # hard top-k selection on current values, stable (lower index wins)
        p = probs.data
        order = np.argsort(-p, axis=-1, kind="stable")
        sel = order[..., : self.top_k]
        mask = np.zeros_like(p)
        np.put_along_axis(mask, sel, 1.0, axis=-1)

        picked = ad.mul(probs, ad.constant(mask))
        denom = ad.sum_(picked, axis=-1, keepdims=True)
        weights = ad.div(picked, denom)  # renormalized, sums to 1 per token

        # sparse dispatch: each expert sees only its routed tokens
        d = x.data.shape[-1]
        n_tokens = int(np.prod(p.shape[:-1]))
        flat_x = ad.reshape(x, (n_tokens, d))
        flat_w = ad.reshape(weights, (n_tokens, self.n_experts))
        flat_mask = mask.reshape(n_tokens, self.n_experts)
        out_flat = None
        for e, expert in enumerate(self.experts):
            idx = np.where(flat_mask[:, e] > 0)[0]
            if idx.size == 0:
                continue
            we = ad.slice_axis(ad.take_rows(flat_w, idx), -1, e, e + 1)
            term = ad.scatter_rows(ad.mul(we, expert(ad.take_rows(flat_x, idx))),
                                   idx, n_tokens)
            out_flat = term if out_flat is None else ad.add(out_flat, term)
        out = ad.reshape(out_flat, x.data.shape)

        frac = flat_mask.sum(axis=0) / (n_tokens * self.top_k)
        flat_probs = ad.reshape(probs, (n_tokens, self.n_experts))
        mean_prob = ad.mean(flat_probs, axis=0)
        return out, RouterStats(frac_tokens=frac, mean_prob=mean_prob)


class MoeBlock(nn.Module):
    """Pre-norm transformer block whose FFN is a sparse expert mixture."""

    def __init__(self, rng, d: int, n_heads: int, n_experts: int, top_k: int,
                 ffn_mult: int = 4):
        self.ln1 = nn.LayerNorm(d)
        self.attn = nn.MultiheadAttention(rng, d, n_heads)
        self.ln2 = nn.LayerNorm(d)
        self.moe = MoeFeedForward(rng, d, n_experts, top_k, ffn_mult)

    def __call__(self, x: Tensor, labels: np.ndarray) -> tuple[Tensor, RouterStats]:
        h = self.ln1(x)
        x = ad.add(x, self.attn(h, h))
        ffn_out, stats = self.moe(self.ln2(x), labels)
        return ad.add(x, ffn_out), stats


def router_loss(stats: list[RouterStats] | RouterStats) -> Tensor:
    """Switch-style balance loss: E * sum_e f_e p_e, averaged over blocks.

    Equals 1 at perfectly uniform utilization; E at full collapse.
    """
    if isinstance(stats, RouterStats):
        stats = [stats]
    if not stats:
        return ad.constant(0.0)
    total = None
    for st in stats:
        e_n = st.frac_tokens.shape[0]
        term = ad.mul(ad.sum_(ad.mul(st.mean_prob, ad.constant(st.frac_tokens))),
                      ad.constant(float(e_n)))
        total = term if total is None else ad.add(total, term)
    return ad.mul(total, ad.constant(1.0 / len(stats)))


class FusionBackbone(nn.Module):
    """Alternating vanilla / MoE blocks over the fused sequence.

    Depth counts blocks and must be even (vanilla+MoE pairs). An optional
    learned per-modality segment embedding is added at the input to break
    block symmetry.
    """

    def __init__(self, rng, d: int, n_heads: int, depth: int, n_experts: int,
                 top_k: int, ffn_mult: int = 4, segment_embed: bool = True):
        if depth % 2 != 0:
            raise InvalidConfig("backbone depth must be even (vanilla+MoE pairs)")
        self.segment = nn.param(rng, (len(MODALITIES), d), std=0.02) if segment_embed else None
        self.blocks = []
        for i in range(depth):
            if i % 2 == 0:
                self.blocks.append(nn.EncoderBlock(rng, d, n_heads, ffn_mult))
            else:
                self.blocks.append(MoeBlock(rng, d, n_heads, n_experts, top_k, ffn_mult))

    def __call__(self, seq: FusedSequence) -> tuple[FusedSequence, list[RouterStats]]:
        x = seq.tokens
        if self.segment is not None and self.blocks:
            x = ad.add(x, ad.take_rows(self.segment, seq.modality_of_token))
        stats: list[RouterStats] = []
        for blk in self.blocks:
            if isinstance(blk, MoeBlock):
                x, st = blk(x, seq.modality_of_token)
                stats.append(st)
            else:
                x = blk(x)
        return FusedSequence(x, seq.modality_of_token, seq.reliability), stats
