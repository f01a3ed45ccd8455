"""Small parameter-module system and the layers the pipeline is built from."""

from __future__ import annotations

import hashlib

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimMismatch


class Module:
    """Base class with recursive named-parameter discovery.

    Attribute insertion order fixes the parameter order, so state dicts and
    hashes are deterministic for a given construction path.
    """

    def named_parameters(self, prefix: str = ""):
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(prefix + name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{prefix}{name}.{i}", item
            elif isinstance(val, dict):
                for key in val:
                    label = getattr(key, "value", key)
                    item = val[key]
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{label}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{prefix}{name}.{label}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) ^ set(state))
            raise DimMismatch(f"state dict keys do not match parameters: {missing}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise DimMismatch(
                    f"{name}: checkpoint shape {arr.shape} != model shape {p.data.shape}"
                )
            p.data = arr.copy()
            p.grad = None


def params_hash(pairs) -> str:
    """sha256 over parameter names and exact bytes; order-sensitive."""
    h = hashlib.sha256()
    for name, p in pairs:
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def param(rng: np.random.Generator, shape, std: float = 0.02) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """Scale rows to unit norm; zero-norm rows are an error, not clamped."""
    from .errors import ZeroVector

    sq = ad.sum_(ad.mul(x, x), axis=axis, keepdims=True)
    if np.any(sq.data < 1e-24):
        raise ZeroVector("cannot normalize a zero vector")
    return ad.div(x, ad.sqrt(sq))


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, std: float | None = None,
                 bias: bool = True):
        if std is None:
            std = 1.0 / np.sqrt(d_in)
        self.w = param(rng, (d_in, d_out), std=std)
        if bias:
            self.b = Tensor(np.zeros(d_out), requires_grad=True)
        else:
            self.b = None

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.w)
        return ad.add(y, self.b) if self.b is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta, self.eps)


class FeedForward(Module):
    """Two-layer GELU MLP."""

    def __init__(self, rng, dim: int, mult: int = 4):
        self.fc1 = Linear(rng, dim, dim * mult)
        self.fc2 = Linear(rng, dim * mult, dim)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))


class MultiheadAttention(Module):
    """Projected multi-head attention over given keys/values."""

    def __init__(self, rng, dim: int, n_heads: int):
        self.n_heads = n_heads
        self.wq = Linear(rng, dim, dim)
        # a key-projection bias shifts every softmax row uniformly and cancels
        self.wk = Linear(rng, dim, dim, bias=False)
        self.wv = Linear(rng, dim, dim)
        self.wo = Linear(rng, dim, dim)

    def __call__(self, q_in: Tensor, kv_in: Tensor, key_mask=None) -> Tensor:
        ctx = ad.cross_attention(
            self.wq(q_in), self.wk(kv_in), self.wv(kv_in), self.n_heads, key_mask
        )
        return self.wo(ctx)


class EncoderBlock(Module):
    """Pre-norm transformer encoder block (self-attention + FFN, residuals)."""

    def __init__(self, rng, dim: int, n_heads: int, ffn_mult: int = 4):
        self.ln1 = LayerNorm(dim)
        self.attn = MultiheadAttention(rng, dim, n_heads)
        self.ln2 = LayerNorm(dim)
        self.ffn = FeedForward(rng, dim, ffn_mult)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.ln1(x)
        x = ad.add(x, self.attn(h, h))
        x = ad.add(x, self.ffn(self.ln2(x)))
        return x


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.wd:
                update = update + self.wd * p.data
            p.data -= self.lr * update
