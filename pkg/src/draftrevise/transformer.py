"""Bidirectional sequence model over code stacks with a causal depth head.

A masked sequence of code stacks is embedded per position (sum of the code
embeddings, or a learned mask embedding when hidden), enriched with learned
position and class embeddings, and run through a full-attention stack to
produce context vectors. A second, causal stack then predicts the codes of
one stack depth by depth: depth d sees the context vector and the embeddings
of the codes shallower than d, never deeper ones.

Training draws a random mask whose size follows the quarter-cosine schedule
and minimises the negative log-likelihood of the hidden stacks only. The
forward path reads code content strictly through the masked view, so logits
and loss are bit-invariant to whatever sits beneath the mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import Linear, TransformerStack

__all__ = [
    "NULL_CONDITION",
    "TransformerConfig",
    "MaskedCodeSequence",
    "ContextualTransformer",
    "mask_count",
    "sample_training_mask",
    "condition_dropout",
    "masked_nll",
]

NULL_CONDITION = -1  # sentinel for the unconditional (dropped) class


@dataclass
class TransformerConfig:
    """Shape of the sequence model; ``n_classes`` includes the null row."""

    seq_len: int
    depth: int
    codebook_size: int
    d_model: int = 128
    n_heads: int = 2
    n_spatial_blocks: int = 4
    n_depth_blocks: int = 2
    d_embed: int = 16
    n_classes: int = 1

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if min(self.seq_len, self.depth, self.codebook_size, self.n_classes) < 1:
            raise ValueError("config dimensions must be positive")


@dataclass
class MaskedCodeSequence:
    """A code sequence plus its mask; hidden positions read as masked.

    ``base`` holds (N, depth) codes; wherever ``mask`` is set the content is
    treated as hidden regardless of what ``base`` stores there.
    """

    base: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.base = np.asarray(self.base, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.base.ndim != 2 or self.mask.shape != (self.base.shape[0],):
            raise ValueError("base must be (N, depth) with a length-N mask")

    @property
    def n_masked(self) -> int:
        return int(self.mask.sum())

    def context_codes(self) -> np.ndarray:
        """Codes with hidden positions zeroed; safe to embed."""
        return np.where(self.mask[:, None], 0, self.base)


def _condition_rows(cond: np.ndarray, n_classes: int) -> np.ndarray:
    cond = np.asarray(cond, dtype=np.int64)
    if (cond >= n_classes).any() or (cond < NULL_CONDITION).any():
        raise ValueError("condition id out of range")
    return np.where(cond == NULL_CONDITION, n_classes - 1, cond)


class ContextualTransformer:
    """Spatial full-attention encoder feeding a causal per-position depth decoder."""

    def __init__(self, config: TransformerConfig, rng: np.random.Generator,
                 dtype=np.float32, code_embed_init: np.ndarray | None = None,
                 freeze_code_embed: bool = False):
        self.config = config
        self.dtype = dtype
        c = config
        if code_embed_init is not None:
            init = np.asarray(code_embed_init, dtype=dtype)
            if init.shape != (c.codebook_size, c.d_embed):
                raise ValueError("code embedding init shape mismatch")
            self.code_emb = Tensor(init.copy(), requires_grad=not freeze_code_embed)
        else:
            self.code_emb = Tensor(
                rng.normal(0.0, 0.02, (c.codebook_size, c.d_embed)).astype(dtype),
                requires_grad=not freeze_code_embed,
            )
        self.mask_emb = Tensor(rng.normal(0.0, 0.02, (c.d_embed,)).astype(dtype), requires_grad=True)
        self.embed_proj = Linear(c.d_embed, c.d_model, rng, dtype)
        self.pos_spatial = Tensor(rng.normal(0.0, 0.02, (c.seq_len, c.d_model)).astype(dtype), requires_grad=True)
        self.pos_depth = Tensor(rng.normal(0.0, 0.02, (c.depth, c.d_model)).astype(dtype), requires_grad=True)
        self.class_emb = Tensor(rng.normal(0.0, 0.02, (c.n_classes, c.d_model)).astype(dtype), requires_grad=True)
        self.spatial = TransformerStack(c.n_spatial_blocks, c.d_model, c.n_heads, rng, dtype)
        self.depth_stack = TransformerStack(c.n_depth_blocks, c.d_model, c.n_heads, rng, dtype)
        self.head = Linear(c.d_model, c.codebook_size, rng, dtype)

    def named_parameters(self) -> dict[str, Tensor]:
        """All model state, frozen or not; the serialisation order is fixed."""
        out = {
            "code_emb": self.code_emb,
            "mask_emb": self.mask_emb,
            "pos_spatial": self.pos_spatial,
            "pos_depth": self.pos_depth,
            "class_emb": self.class_emb,
        }
        out.update(dict(self.embed_proj.named_params("embed_proj")))
        out.update(dict(self.spatial.named_params("spatial")))
        out.update(dict(self.depth_stack.named_params("depth")))
        out.update(dict(self.head.named_params("head")))
        return out

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_parameters().items() if v.requires_grad}

    # -- forward ----------------------------------------------------------
    def embed_masked(self, codes: np.ndarray, mask: np.ndarray, cond: np.ndarray) -> Tensor:
        """Per-position input embeddings for a batch of masked sequences.

        codes (B, N, depth) ints; mask (B, N) bools; cond (B,) class ids
        (NULL_CONDITION for unconditional). Hidden positions contribute a
        learned mask embedding; their stored codes are never read.
        """
        codes = np.asarray(codes, dtype=np.int64)
        mask = np.asarray(mask, dtype=bool)
        if codes.ndim != 3 or mask.shape != codes.shape[:2]:
            raise ValueError("codes must be (B, N, depth) with a (B, N) mask")
        c = self.config
        if codes.shape[1] != c.seq_len or codes.shape[2] != c.depth:
            raise ValueError("sequence geometry does not match the config")
        if codes.min() < 0 or codes.max() >= c.codebook_size:
            raise IndexError("code out of codebook range")
        rows = _condition_rows(cond, c.n_classes)

        ctx = np.where(mask[:, :, None], 0, codes)       # hidden codes never read
        summed = ad.embedding(self.code_emb, ctx).sum(axis=2)        # (B, N, d_embed)
        keep = (~mask)[:, :, None].astype(self.dtype)
        content = summed * keep + self.mask_emb * (1.0 - keep)
        u = self.embed_proj(content) + self.pos_spatial
        cls = ad.embedding(self.class_emb, rows).reshape((codes.shape[0], 1, c.d_model))
        return u + cls

    def spatial_forward(self, u: Tensor) -> Tensor:
        """Full bidirectional attention over positions: (B, N, d) -> (B, N, d)."""
        return self.spatial(u, mask="full")

    def context(self, codes: np.ndarray, mask: np.ndarray, cond: np.ndarray) -> Tensor:
        return self.spatial_forward(self.embed_masked(codes, mask, cond))

    def depth_logits(self, h: Tensor, teacher: np.ndarray) -> Tensor:
        """Teacher-forced per-depth logits.

        h (B, N, d_model); teacher (B, N, depth) codes conditioning depths
        2..D. Output (B, N, depth, K); the logits at depth d depend only on
        h and codes shallower than d.
        """
        c = self.config
        teacher = np.asarray(teacher, dtype=np.int64)
        b, n = h.shape[0], h.shape[1]
        rows = []
        for d in range(c.depth):
            pe = ad.embedding(self.pos_depth, np.int64(d))
            if d == 0:
                v = h + pe
            else:
                hist = ad.embedding(self.code_emb, teacher[:, :, :d]).sum(axis=2)
                v = self.embed_proj(hist) + pe
            rows.append(v)
        v_seq = ad.stack(rows, axis=2)                     # (B, N, depth, d_model)
        flat = v_seq.reshape((b * n, c.depth, c.d_model))
        out = self.depth_stack(flat, mask="causal")
        logits = self.head(out)
        return logits.reshape((b, n, c.depth, c.codebook_size))

    def depth_step(self, h_sel: Tensor, history: np.ndarray) -> np.ndarray:
        """Inference helper: logits for the next depth at selected positions.

        h_sel (B, P, d_model); history (B, P, d) codes already sampled at
        those positions. Returns (B, P, K) logits for depth d+1.
        """
        c = self.config
        b, p = h_sel.shape[0], h_sel.shape[1]
        d_done = history.shape[2]
        rows = [h_sel + ad.embedding(self.pos_depth, np.int64(0))]
        for d in range(1, d_done + 1):
            hist = ad.embedding(self.code_emb, history[:, :, :d]).sum(axis=2)
            rows.append(self.embed_proj(hist) + ad.embedding(self.pos_depth, np.int64(d)))
        v_seq = ad.stack(rows, axis=2)
        flat = v_seq.reshape((b * p, d_done + 1, c.d_model))
        out = self.depth_stack(flat, mask="causal")
        last = Tensor(out.data[:, d_done, :])
        return self.head(last).data.reshape(b, p, c.codebook_size)

    def logits(self, codes: np.ndarray, mask: np.ndarray, cond: np.ndarray,
               teacher: np.ndarray | None = None) -> Tensor:
        """Full teacher-forced logits for a batch of masked sequences."""
        teacher = np.asarray(codes if teacher is None else teacher, dtype=np.int64)
        h = self.context(codes, mask, cond)
        return self.depth_logits(h, teacher)


# ---------------------------------------------------------------------------
# training-mask distribution
# ---------------------------------------------------------------------------

def mask_count(r: float, n: int) -> int:
    """Mask size under the quarter-cosine schedule: ceil(cos(pi r / 2) * n)."""
    if not (0.0 <= r < 1.0):
        raise ValueError("schedule draw must lie in [0, 1)")
    return int(math.ceil(math.cos(math.pi * r / 2.0) * n))


def sample_training_mask(n: int, rng: np.random.Generator) -> np.ndarray:
    """Random mask: size from the cosine schedule, positions uniform without replacement."""
    if n < 1:
        raise ValueError("sequence length must be positive")
    size = mask_count(float(rng.random()), n)
    mask = np.zeros(n, dtype=bool)
    mask[rng.permutation(n)[:size]] = True
    return mask


def condition_dropout(cond, p_drop: float, rng: np.random.Generator):
    """Replace the condition with NULL_CONDITION with probability ``p_drop``."""
    if not (0.0 <= p_drop <= 1.0):
        raise ValueError("dropout probability must lie in [0, 1]")
    arr = np.asarray(cond, dtype=np.int64)
    drop = rng.random(arr.shape) < p_drop
    out = np.where(drop, NULL_CONDITION, arr)
    return int(out) if np.isscalar(cond) or arr.ndim == 0 else out


def masked_nll(model: ContextualTransformer, codes: np.ndarray, mask: np.ndarray,
               cond: np.ndarray, targets: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood of hidden stacks, teacher-forced over depth.

    ``codes`` provide the visible context through the masked view; ``targets``
    (default: the same array) provide the depth conditioning and labels at
    hidden positions. Unmasked positions contribute exactly zero, and the
    value is averaged over hidden (position, depth) slots.
    """
    mask = np.asarray(mask, dtype=bool)
    total_masked = int(mask.sum())
    if total_masked == 0:
        raise ValueError("every example needs at least one masked position")
    targets = np.asarray(codes if targets is None else targets, dtype=np.int64)
    logits = model.logits(codes, mask, cond, teacher=targets)
    nll = ad.cross_entropy_from_logits(logits, targets)   # (B, N, depth)
    weights = mask[:, :, None].astype(model.dtype)
    return (nll * weights).sum() * (1.0 / (total_masked * model.config.depth))
