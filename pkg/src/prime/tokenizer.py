"""Query-based cross-attention tokenizers: variable-length modality
embeddings in, fixed-shape (T_q, D) token blocks out."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .data import Modality
from .errors import AllKeysMasked, DimMismatch


@dataclass
class TokenBlock:
    """Fixed-shape token sequence for one modality of one patient.

    ``provenance`` marks, per token, whether it came from observed data
    (True) or prototype imputation (False); it feeds the reliability mask
    of the pooled objective.
    """

    tokens: Tensor  # (T_q, D)
    modality: Modality
    provenance: np.ndarray  # (T_q,) bool

    def __post_init__(self):
        if self.provenance.shape != (self.tokens.data.shape[-2],):
            raise DimMismatch("provenance length must equal T_q")


class ModalityTokenizer(nn.Module):
    """T_q learnable queries cross-attend over projected input rows.

    The attention sublayer carries no residual (queries are extractors, so
    with a single key every output token equals that key's value); the FFN
    sublayer is residual with pre-norm.
    """

    def __init__(self, rng, modality: Modality, d_in: int, d_model: int,
                 t_q: int, n_heads: int, ffn_mult: int = 4):
        self.modality = modality
        self.d_in = d_in
        self.queries = nn.param(rng, (t_q, d_model), std=0.02)
        self.input_proj = nn.Linear(rng, d_in, d_model)
        self.ln_q = nn.LayerNorm(d_model)
        self.ln_kv = nn.LayerNorm(d_model)
        self.attn = nn.MultiheadAttention(rng, d_model, n_heads)
        self.ln_ffn = nn.LayerNorm(d_model)
        self.ffn = nn.FeedForward(rng, d_model, ffn_mult)

    def encode(self, emb: Tensor, pad_mask: np.ndarray | None = None) -> Tensor:
        """Batched core: ``(..., L, d_in)`` -> ``(..., T_q, D)``."""
        if emb.data.shape[-1] != self.d_in:
            raise DimMismatch(
                f"{self.modality.value}: input dim {emb.data.shape[-1]} != {self.d_in}"
            )
        if pad_mask is not None and not np.asarray(pad_mask, bool).any(axis=-1).all():
            raise AllKeysMasked(f"{self.modality.value}: a sample has no valid row")
        kv = self.ln_kv(self.input_proj(emb))
        attended = self.attn(self.ln_q(self.queries), kv, key_mask=pad_mask)
        return ad.add(attended, self.ffn(self.ln_ffn(attended)))


def pad_mask_from_rows(emb: np.ndarray) -> np.ndarray:
    """Treat all-zero rows as padding (the convention used by exporters
    that right-pad short inputs)."""
    return np.any(emb != 0.0, axis=-1)


def tokenize(tok: ModalityTokenizer, emb, pad_mask: np.ndarray | None = None) -> TokenBlock:
    """Tokenize one patient's modality matrix into an Observed TokenBlock."""
    t = emb if isinstance(emb, Tensor) else Tensor(np.asarray(emb, dtype=np.float64))
    if t.data.ndim != 2:
        raise DimMismatch("tokenize expects a single (L, d_in) matrix")
    out = tok.encode(t, pad_mask)
    t_q = out.data.shape[0]
    return TokenBlock(out, tok.modality, np.ones(t_q, dtype=bool))
