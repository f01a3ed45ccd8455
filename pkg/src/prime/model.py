"""The assembled pipeline: tokenize, assign, impute, refine, fuse, and the
pretraining objective over two augmented views."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .data import MODALITIES, Modality, PatientRecord
from .errors import NoObservedModality
from .moe import FusedSequence, FusionBackbone, RouterStats, router_loss
from .objectives import (
    AugmentationPolicy,
    ProjectionHead,
    ViewDraws,
    alignment_loss,
    build_view,
    fusion_loss,
    masked_pool,
    sample_view_draws,
    total_loss,
)
from .prototypes import PrototypeBank, RefinementModule, assign_logits_core, mixture_tokens
from .tokenizer import ModalityTokenizer, pad_mask_from_rows


@dataclass
class ModelConfig:
    t_q: int = 8
    d_model: int = 64
    d_proj: int = 32
    n_heads: int = 4
    ffn_mult: int = 2
    k_c: int = 128
    tau: float = 0.07
    refine_depth: int = 1
    backbone_depth: int = 2
    n_experts: int = 4
    top_k: int = 2
    segment_embed: bool = True


@dataclass
class EncodeResult:
    """Per-batch encoding state shared by the objectives.

    ``refined``: modality -> (B, T_q, D) refined blocks (observed patients
    tokenized, missing ones consensus-imputed). ``q``: per-modality soft
    assignments, rows meaningful where observed. ``q_values`` is a detached
    copy used to parameterize augmentation sampling.
    """

    refined: dict
    avail: np.ndarray
    q: dict
    consensus: Tensor
    q_values: np.ndarray


@dataclass
class PretrainStep:
    total: Tensor
    align: Tensor
    fusion: Tensor
    router: Tensor
    draws: tuple[ViewDraws, ViewDraws]
    stats: list[RouterStats]


class PrimeModel(nn.Module):
    def __init__(self, rng: np.random.Generator, cfg: ModelConfig,
                 dims: dict[Modality, tuple[int, int]]):
        self.cfg = cfg
        self.dims = dict(dims)
        self.tokenizers = {
            m: ModalityTokenizer(rng, m, dims[m][1], cfg.d_model, cfg.t_q,
                                 cfg.n_heads, cfg.ffn_mult)
            for m in MODALITIES
        }
        self.bank = PrototypeBank(rng, cfg.k_c, cfg.t_q, cfg.d_model, cfg.tau)
        self.refiners = {
            m: RefinementModule(rng, cfg.d_model, cfg.n_heads, cfg.refine_depth,
                                cfg.ffn_mult)
            for m in MODALITIES
        }
        self.backbone = FusionBackbone(
            rng, cfg.d_model, cfg.n_heads, cfg.backbone_depth, cfg.n_experts,
            cfg.top_k, cfg.ffn_mult, cfg.segment_embed,
        )
        self.align_heads = {m: ProjectionHead(rng, cfg.d_model, cfg.d_proj)
                            for m in MODALITIES}
        self.fusion_head = ProjectionHead(rng, cfg.d_model, cfg.d_proj)

    # -- encoding ----------------------------------------------------------

    def availability_matrix(self, records: list[PatientRecord],
                            override: np.ndarray | None = None) -> np.ndarray:
        avail = np.array(
            [[p.availability[m] for m in MODALITIES] for p in records], dtype=bool
        )
        if override is not None:
            avail = avail & np.asarray(override, dtype=bool)[None, :]
        if not avail.any(axis=1).all():
            raise NoObservedModality(
                "an availability override left a patient with no modality"
            )
        return avail

    def encode(self, records: list[PatientRecord],
               override: np.ndarray | None = None) -> EncodeResult:
        """Tokenize observed modalities, build the patient consensus, impute
        the missing blocks, and refine everything. Batched over patients."""
        b = len(records)
        avail = self.availability_matrix(records, override)
        t_q, k_c = self.cfg.t_q, self.cfg.k_c

        tokenized: dict[Modality, Tensor | None] = {}
        q_obs: dict[Modality, Tensor | None] = {}
        cons_sum = None
        for mi, m in enumerate(MODALITIES):
            idx = np.where(avail[:, mi])[0]
            if idx.size == 0:
                tokenized[m] = None
                q_obs[m] = None
                continue
            emb = np.stack([records[j].embeddings[m] for j in idx])
            pad = pad_mask_from_rows(emb)
            z = self.tokenizers[m].encode(ad.constant(emb),
                                          None if pad.all() else pad)
            tokenized[m] = z
            q = assign_logits_core(self.bank, z)
            q_obs[m] = q
            scattered = ad.scatter_rows(q, idx, b)
            cons_sum = scattered if cons_sum is None else ad.add(cons_sum, scattered)
        counts = avail.sum(axis=1).astype(np.float64)
        cons = ad.div(cons_sum, ad.constant(counts[:, None]))

        refined: dict[Modality, Tensor] = {}
        q_full: dict[Modality, Tensor] = {}
        q_values = np.zeros((b, 3, k_c))
        for mi, m in enumerate(MODALITIES):
            idx = np.where(avail[:, mi])[0]
            miss = np.where(~avail[:, mi])[0]
            parts = []
            if idx.size:
                parts.append(ad.scatter_rows(tokenized[m], idx, b))
            if miss.size:
                imputed = mixture_tokens(self.bank, ad.take_rows(cons, miss))
                parts.append(ad.scatter_rows(imputed, miss, b))
            pre = parts[0] if len(parts) == 1 else ad.add(parts[0], parts[1])
            refined[m] = self.refiners[m](pre)
            if idx.size:
                q_full[m] = ad.scatter_rows(q_obs[m], idx, b)
                q_values[idx, mi] = q_obs[m].data
            else:
                q_full[m] = ad.constant(np.zeros((b, k_c)))
        return EncodeResult(refined=refined, avail=avail, q=q_full,
                            consensus=cons, q_values=q_values)

    # -- fused forward ------------------------------------------------------

    def fused_forward(self, blocks: dict, reliability: np.ndarray
                      ) -> tuple[Tensor, list[RouterStats]]:
        """Concatenate per-modality (B, T_q, D) blocks in fixed order, run
        the backbone, and pool the reliable tokens. ``reliability`` is
        (B, 3, T_q) bool."""
        b = blocks[MODALITIES[0]].data.shape[0]
        t_q = self.cfg.t_q
        tokens = ad.concat([blocks[m] for m in MODALITIES], axis=-2)
        labels = np.repeat(np.arange(3, dtype=np.intp), t_q)
        seq = FusedSequence(tokens, labels, reliability.reshape(b, 3 * t_q))
        out, stats = self.backbone(seq)
        pooled = masked_pool(out.tokens, out.reliability)
        return pooled, stats

    def pooled_representation(self, records: list[PatientRecord],
                              override: np.ndarray | None = None
                              ) -> tuple[Tensor, list[RouterStats]]:
        """Downstream representation: reliability covers exactly the
        naturally observed (non-imputed) token blocks."""
        enc = self.encode(records, override)
        rel = np.repeat(enc.avail[:, :, None], self.cfg.t_q, axis=2)
        return self.fused_forward(enc.refined, rel)

    # -- pretraining objective ----------------------------------------------

    def pretrain_step(
        self,
        records: list[PatientRecord],
        policy: AugmentationPolicy,
        temp_align: float,
        temp_fusion: float,
        lam: float,
        lam_router: float,
        view_rngs: tuple[list, list] | None = None,
        frozen_draws: tuple[ViewDraws, ViewDraws] | None = None,
    ) -> PretrainStep:
        """Build the full objective for one batch.

        Augmentation randomness comes from per-patient generators in
        ``view_rngs`` unless ``frozen_draws`` replays an earlier step's
        draws (gradient checking needs the loss to be a deterministic
        function of the parameters).
        """
        enc = self.encode(records)
        align = alignment_loss(enc.refined, enc.avail, self.align_heads, temp_align)

        if frozen_draws is not None:
            draws_pair = frozen_draws
        else:
            draws_pair = tuple(
                sample_view_draws(policy, enc.avail, enc.q_values, self.cfg.t_q, rngs)
                for rngs in view_rngs
            )

        h = []
        stats: list[RouterStats] = []
        for draws in draws_pair:
            view, keep = build_view(enc.refined, enc.avail, self.bank, draws, policy)
            pooled, st = self.fused_forward(view, keep)
            h.append(self.fusion_head(pooled))
            stats.extend(st)
        fusion = fusion_loss(h[0], h[1], temp_fusion)
        router = router_loss(stats) if stats else ad.constant(0.0)
        total = total_loss(align, fusion, router, lam, lam_router)
        return PretrainStep(total=total, align=align, fusion=fusion,
                            router=router, draws=draws_pair, stats=stats)
