"""Parameterised neural building blocks composed from the autodiff primitives."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = ["Linear", "LayerNorm", "MultiHeadAttention", "TransformerBlock", "TransformerStack"]

INIT_SCALE = 0.02


def _init_zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


class Linear:
    """Affine map; ``scale=None`` uses the transformer default, "fan_in"
    a 1/sqrt(d_in) init better suited to plain feed-forward heads."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float32,
                 scale: float | str | None = None):
        if scale == "fan_in":
            scale = 1.0 / np.sqrt(d_in)
        elif scale is None:
            scale = INIT_SCALE
        self.w = Tensor(rng.normal(0.0, scale, (d_in, d_out)).astype(dtype), requires_grad=True)
        self.b = _init_zeros((d_out,), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.w + self.b

    def named_params(self, prefix: str):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b


class LayerNorm:
    def __init__(self, d: int, dtype=np.float32, eps: float = 1e-5):
        self.gain = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
        self.bias = _init_zeros((d,), dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias, eps=self.eps)

    def named_params(self, prefix: str):
        yield f"{prefix}.gain", self.gain
        yield f"{prefix}.bias", self.bias


class MultiHeadAttention:
    """Self-attention over the second-to-last axis with full or causal masking."""

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator, dtype=np.float32):
        if d_model % n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.wq = Linear(d_model, d_model, rng, dtype)
        self.wk = Linear(d_model, d_model, rng, dtype)
        self.wv = Linear(d_model, d_model, rng, dtype)
        self.wo = Linear(d_model, d_model, rng, dtype)

    def __call__(self, x: Tensor, mask="full") -> Tensor:
        lead = x.shape[:-2]
        t, d = x.shape[-2], x.shape[-1]
        nl = len(lead)
        swap_mid = tuple(range(nl)) + (nl + 1, nl, nl + 2)

        def split(proj: Tensor) -> Tensor:
            # (..., T, d) -> (..., H, T, d_head)
            return proj.reshape(lead + (t, self.n_heads, self.d_head)).transpose(swap_mid)

        q = split(self.wq(x))
        k = split(self.wk(x))
        v = split(self.wv(x))
        out = ad.attention(q, k, v, mask=mask)
        # (..., H, T, d_head) -> (..., T, d); the middle swap is its own inverse
        out = out.transpose(swap_mid).reshape(lead + (t, d))
        return self.wo(out)

    def named_params(self, prefix: str):
        for sub in ("wq", "wk", "wv", "wo"):
            yield from getattr(self, sub).named_params(f"{prefix}.{sub}")


class TransformerBlock:
    """Pre-norm residual block: attention then a gated feed-forward."""

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator, dtype=np.float32, ff_mult: int = 4):
        self.ln1 = LayerNorm(d_model, dtype)
        self.attn = MultiHeadAttention(d_model, n_heads, rng, dtype)
        self.ln2 = LayerNorm(d_model, dtype)
        self.ff1 = Linear(d_model, ff_mult * d_model, rng, dtype)
        self.ff2 = Linear(ff_mult * d_model, d_model, rng, dtype)

    def __call__(self, x: Tensor, mask="full") -> Tensor:
        x = x + self.attn(self.ln1(x), mask=mask)
        return x + self.ff2(ad.gelu(self.ff1(self.ln2(x))))

    def named_params(self, prefix: str):
        yield from self.ln1.named_params(f"{prefix}.ln1")
        yield from self.attn.named_params(f"{prefix}.attn")
        yield from self.ln2.named_params(f"{prefix}.ln2")
        yield from self.ff1.named_params(f"{prefix}.ff1")
        yield from self.ff2.named_params(f"{prefix}.ff2")


class TransformerStack:
    """A stack of pre-norm blocks followed by a final normalisation."""

    def __init__(self, n_blocks: int, d_model: int, n_heads: int, rng: np.random.Generator, dtype=np.float32):
        self.blocks = [TransformerBlock(d_model, n_heads, rng, dtype) for _ in range(n_blocks)]
        self.ln_out = LayerNorm(d_model, dtype)

    def __call__(self, x: Tensor, mask="full") -> Tensor:
        for block in self.blocks:
            x = block(x, mask=mask)
        return self.ln_out(x)

    def named_params(self, prefix: str):
        for i, block in enumerate(self.blocks):
            yield from block.named_params(f"{prefix}.block{i}")
        yield from self.ln_out.named_params(f"{prefix}.ln_out")
