"""Residual quantization against a single shared codebook.

A vector is encoded as an ordered stack of codes: at each depth the nearest
codebook embedding of the current residual is chosen and subtracted, so the
partial sums of the chosen embeddings approximate the vector coarse-to-fine.
The same codebook serves every depth. Codebook learning is gradient-free:
exponential moving averages of assignment counts and assigned residuals,
with Laplace-smoothed normalisation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, straight_through

__all__ = [
    "Codebook",
    "vq_nearest",
    "vq_nearest_batch",
    "rq_encode",
    "rq_encode_batch",
    "rq_partial_decode",
    "rq_partial_decode_batch",
    "commitment_loss",
    "straight_through",
    "ema_codebook_update",
    "reseed_dead_codes",
]


@dataclass
class Codebook:
    """Shared embedding table plus EMA statistics, one row per code.

    With ``pinned_zero`` the first row is held at the zero vector and
    exempted from learning, so "stop refining" is always an option and the
    per-depth residual norms can never increase.
    """

    embeddings: np.ndarray            # (K, n_z)
    ema_cluster_size: np.ndarray      # (K,)
    ema_embed_sum: np.ndarray         # (K, n_z)
    decay: float = 0.99
    laplace_eps: float = 1e-5
    pinned_zero: bool = False

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] < 2:
            raise ValueError("codebook needs at least 2 embedding rows")
        if not np.all(np.isfinite(self.embeddings)):
            raise ValueError("codebook embeddings must be finite")
        if not (0.0 < self.decay < 1.0):
            raise ValueError("EMA decay must lie in (0, 1)")
        self.ema_cluster_size = np.asarray(self.ema_cluster_size, dtype=self.embeddings.dtype)
        self.ema_embed_sum = np.asarray(self.ema_embed_sum, dtype=self.embeddings.dtype)
        if self.pinned_zero:
            self.embeddings = self.embeddings.copy()
            self.embeddings[0] = 0.0

    @property
    def size(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @classmethod
    def initialise(cls, size: int, dim: int, rng: np.random.Generator,
                   scale: float = 0.05, dtype=np.float32, decay: float = 0.99,
                   laplace_eps: float = 1e-5, pinned_zero: bool = False) -> "Codebook":
        emb = rng.normal(0.0, scale, (size, dim)).astype(dtype)
        return cls(
            embeddings=emb,
            ema_cluster_size=np.zeros(size, dtype=dtype),
            ema_embed_sum=np.zeros((size, dim), dtype=dtype),
            decay=decay,
            laplace_eps=laplace_eps,
            pinned_zero=pinned_zero,
        )


def _check_vector(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z)
    if not np.all(np.isfinite(z)):
        raise ValueError("quantizer input must be finite")
    return z


def vq_nearest(z, codebook: Codebook) -> int:
    """Index of the squared-distance-nearest embedding; ties pick the lowest index."""
    z = _check_vector(z)
    diff = z[None, :] - codebook.embeddings
    return int(np.argmin((diff * diff).sum(axis=1)))


def vq_nearest_batch(z: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Vectorised nearest-code lookup for rows of ``z`` (M, n_z)."""
    z = _check_vector(z)
    diff = z[:, None, :] - codebook.embeddings[None, :, :]
    return np.argmin((diff * diff).sum(axis=2), axis=1)


def rq_encode(z, codebook: Codebook, depth: int):
    """Recursively quantize residuals to ``depth`` codes.

    Returns (codes, residuals) where residuals[0] is the input and
    residuals[d] is what remains after subtracting the first d embeddings.
    """
    z = _check_vector(z)
    codes, residuals = rq_encode_batch(z[None, :], codebook, depth)
    return [int(c) for c in codes[0]], residuals[:, 0, :]


def rq_encode_batch(z: np.ndarray, codebook: Codebook, depth: int):
    """Encode rows of ``z`` (M, n_z); returns codes (M, depth) and residuals (depth+1, M, n_z)."""
    if depth < 1:
        raise ValueError("quantization depth must be at least 1")
    z = _check_vector(z)
    m = z.shape[0]
    codes = np.zeros((m, depth), dtype=np.int64)
    residuals = np.zeros((depth + 1,) + z.shape, dtype=z.dtype)
    residuals[0] = z
    r = z.copy()
    for d in range(depth):
        k = vq_nearest_batch(r, codebook)
        codes[:, d] = k
        r = r - codebook.embeddings[k]
        residuals[d + 1] = r
    return codes, residuals


def rq_partial_decode(codes, codebook: Codebook, upto: int) -> np.ndarray:
    """Sum of the first ``upto`` code embeddings of one stack."""
    codes = np.asarray(codes, dtype=np.int64)
    if not (1 <= upto <= len(codes)):
        raise ValueError("partial-decode depth out of range")
    return codebook.embeddings[codes[:upto]].sum(axis=0)


def rq_partial_decode_batch(codes: np.ndarray, codebook: Codebook, upto: int) -> np.ndarray:
    """Partial sums for stacked codes (M, depth) -> (M, n_z)."""
    codes = np.asarray(codes, dtype=np.int64)
    if not (1 <= upto <= codes.shape[1]):
        raise ValueError("partial-decode depth out of range")
    return codebook.embeddings[codes[:, :upto]].sum(axis=1)


def commitment_loss(z: Tensor, partial_sums) -> Tensor:
    """Sum over depths of the squared error against stop-gradient partial sums.

    Gradient flows only into ``z``; the partial sums are plain arrays.
    """
    total = None
    for zhat in partial_sums:
        target = np.asarray(zhat, dtype=z.data.dtype)
        diff = z - target
        term = (diff * diff).sum()
        total = term if total is None else total + term
    if total is None:
        raise ValueError("commitment loss needs at least one partial sum")
    return total


def ema_codebook_update(codebook: Codebook, residuals: np.ndarray, codes: np.ndarray) -> None:
    """Fold one batch of (pre-quantization residual, chosen code) pairs into the EMA state.

    Pairs from every depth are pooled into the one shared codebook. Rows
    whose EMA count is still exactly zero (never assigned) keep their
    current embedding.
    """
    k = codebook.size
    codes = np.asarray(codes, dtype=np.int64).reshape(-1)
    residuals = np.asarray(residuals, dtype=codebook.embeddings.dtype).reshape(codes.shape[0], codebook.dim)
    counts = np.bincount(codes, minlength=k).astype(codebook.embeddings.dtype)
    sums = np.zeros_like(codebook.ema_embed_sum)
    np.add.at(sums, codes, residuals)

    g = codebook.decay
    codebook.ema_cluster_size = g * codebook.ema_cluster_size + (1.0 - g) * counts
    codebook.ema_embed_sum = g * codebook.ema_embed_sum + (1.0 - g) * sums

    n = codebook.ema_cluster_size
    total = n.sum()
    live = n > 0
    if codebook.pinned_zero:
        live = live.copy()
        live[0] = False
    if total > 0 and live.any():
        smoothed = (n + codebook.laplace_eps) / (total + k * codebook.laplace_eps) * total
        new_emb = codebook.embeddings.copy()
        new_emb[live] = codebook.ema_embed_sum[live] / smoothed[live, None]
        codebook.embeddings = new_emb


def reseed_dead_codes(codebook: Codebook, residual_pool: np.ndarray,
                      rng: np.random.Generator, threshold: float = 0.1) -> int:
    """Re-seed codes whose EMA count fell below ``threshold`` to random pool residuals.

    Keeps tiny-scale codebooks from collapsing; returns how many codes moved.
    """
    pool = np.asarray(residual_pool, dtype=codebook.embeddings.dtype).reshape(-1, codebook.dim)
    if pool.shape[0] == 0:
        return 0
    dead = np.flatnonzero(codebook.ema_cluster_size < threshold)
    if codebook.pinned_zero:
        dead = dead[dead != 0]
    if dead.size == 0:
        return 0
    picks = rng.integers(0, pool.shape[0], size=dead.size)
    new_emb = codebook.embeddings.copy()
    new_emb[dead] = pool[picks]
    codebook.embeddings = new_emb
    codebook.ema_cluster_size = codebook.ema_cluster_size.copy()
    codebook.ema_cluster_size[dead] = 1.0
    codebook.ema_embed_sum = codebook.ema_embed_sum.copy()
    codebook.ema_embed_sum[dead] = pool[picks]
    return int(dead.size)
