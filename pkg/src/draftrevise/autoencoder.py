"""Patch autoencoder with a residual-quantized bottleneck.

The encoder embeds each f-by-f image patch with an affine map followed by a
two-layer nonlinear head, giving an (H, W, n_z) feature map; the decoder
mirrors it back to pixels. No convolutions: every patch is independent, so
perturbing one pixel touches exactly one feature vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .codemap import CodeStackMap
from .layers import Linear
from .optim import AdamW
from .quantize import (
    Codebook,
    commitment_loss,
    ema_codebook_update,
    reseed_dead_codes,
    rq_encode_batch,
    rq_partial_decode_batch,
    straight_through,
)

__all__ = ["PatchAutoencoder", "TrainStepReport"]


@dataclass
class TrainStepReport:
    total: float
    reconstruction: float
    commitment: float
    reseeded: int = 0


class PatchAutoencoder:
    """Affine patch embedding plus two-layer heads on both sides of the bottleneck."""

    def __init__(self, image_size: int, channels: int, factor: int, n_z: int,
                 hidden: int, rng: np.random.Generator, dtype=np.float32):
        if image_size % factor:
            raise ValueError("image size must be divisible by the downsampling factor")
        self.image_size = image_size
        self.channels = channels
        self.factor = factor
        self.n_z = n_z
        self.hidden = hidden
        self.dtype = dtype
        self.grid = image_size // factor
        patch_dim = factor * factor * channels
        self.enc_embed = Linear(patch_dim, hidden, rng, dtype, scale="fan_in")
        self.enc_h1 = Linear(hidden, hidden, rng, dtype, scale="fan_in")
        self.enc_h2 = Linear(hidden, n_z, rng, dtype, scale="fan_in")
        self.dec_h1 = Linear(n_z, hidden, rng, dtype, scale="fan_in")
        self.dec_h2 = Linear(hidden, hidden, rng, dtype, scale="fan_in")
        self.dec_embed = Linear(hidden, patch_dim, rng, dtype, scale="fan_in")

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for sub in ("enc_embed", "enc_h1", "enc_h2", "dec_h1", "dec_h2", "dec_embed"):
            out.update(dict(getattr(self, sub).named_params(sub)))
        return out

    # -- patch bookkeeping ----------------------------------------------
    def _patchify(self, images: Tensor) -> Tensor:
        b = images.shape[0]
        g, f, c = self.grid, self.factor, self.channels
        x = images.reshape((b, g, f, g, f, c))
        x = x.transpose((0, 1, 3, 2, 4, 5))
        return x.reshape((b, g, g, f * f * c))

    def _unpatchify(self, patches: Tensor) -> Tensor:
        b = patches.shape[0]
        g, f, c = self.grid, self.factor, self.channels
        x = patches.reshape((b, g, g, f, f, c))
        x = x.transpose((0, 1, 3, 2, 4, 5))
        return x.reshape((b, g * f, g * f, c))

    # -- forward pieces ---------------------------------------------------
    def encode(self, images) -> Tensor:
        """Images (B, H_o, W_o, C) in [0, 1] -> feature maps (B, H, W, n_z)."""
        arr = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self.dtype))
        if arr.ndim != 4:
            raise ValueError("expected a batch of images (B, H, W, C)")
        if arr.shape[1] % self.factor or arr.shape[2] % self.factor:
            raise ValueError("image sides must be divisible by the downsampling factor")
        if arr.shape[1] != self.image_size or arr.shape[2] != self.image_size or arr.shape[3] != self.channels:
            raise ValueError("image shape does not match the trained geometry")
        x = self._patchify(arr)
        h = ad.gelu(self.enc_h1(self.enc_embed(x)))
        return self.enc_h2(h)

    def quantize_map(self, features: Tensor, codebook: Codebook, depth: int):
        """Per-position residual quantization of a feature map batch.

        Returns (list of CodeStackMap, straight-through quantized Tensor,
        commitment loss Tensor, residual stack for EMA updates).
        """
        b, h, w, n_z = features.shape
        flat = features.reshape((b * h * w, n_z))
        codes, residuals = rq_encode_batch(flat.data, codebook, depth)
        partials = [rq_partial_decode_batch(codes, codebook, d) for d in range(1, depth + 1)]
        commit = commitment_loss(flat, partials)
        zq = straight_through(flat, partials[-1]).reshape((b, h, w, n_z))
        maps = [
            CodeStackMap(codes[i * h * w:(i + 1) * h * w].reshape(h, w, depth), codebook.size)
            for i in range(b)
        ]
        return maps, zq, commit, (codes, residuals)

    def decode(self, quantized) -> Tensor:
        """Quantized feature maps (B, H, W, n_z) -> images (B, H_o, W_o, C).

        Training keeps raw values; clamp to [0, 1] only when exporting.
        """
        zq = quantized if isinstance(quantized, Tensor) else Tensor(np.asarray(quantized, dtype=self.dtype))
        if zq.ndim != 4 or zq.shape[1] != self.grid or zq.shape[2] != self.grid or zq.shape[3] != self.n_z:
            raise ValueError("quantized map shape does not match the trained geometry")
        h = ad.gelu(self.dec_h2(ad.gelu(self.dec_h1(zq))))
        return self._unpatchify(self.dec_embed(h))

    def decode_codes(self, maps: list[CodeStackMap], codebook: Codebook) -> Tensor:
        """Decode stored code maps by summing their embeddings per position."""
        stacked = np.stack([m.codes for m in maps])          # (B, H, W, depth)
        zq = codebook.embeddings[stacked].sum(axis=3).astype(self.dtype)
        return self.decode(zq)

    def reconstruct(self, images, codebook: Codebook, depth: int) -> Tensor:
        features = self.encode(images)
        _, zq, _, _ = self.quantize_map(features, codebook, depth)
        return self.decode(zq)


def autoencoder_train_step(model: PatchAutoencoder, optimizer: AdamW, codebook: Codebook,
                           images: np.ndarray, depth: int, lr: float,
                           beta: float = 0.25,
                           reseed_rng: np.random.Generator | None = None,
                           reseed_threshold: float = 0.1) -> TrainStepReport:
    """One gradient step on reconstruction + commitment, then the EMA codebook step.

    The commitment term is averaged per feature entry and depth so the loss
    scale does not depend on batch or map size; ``beta`` weights it against
    the mean-squared reconstruction error.
    """
    if beta <= 0:
        raise ValueError("commitment weight must be positive")
    x = Tensor(np.asarray(images, dtype=model.dtype))
    features = model.encode(x)
    _, zq, commit, (codes, residuals) = model.quantize_map(features, codebook, depth)
    recon = model.decode(zq)
    diff = recon - x.data
    recon_loss = (diff * diff).mean()
    commit_mean = commit * (1.0 / (features.size * depth))
    loss = recon_loss + beta * commit_mean
    ad.assert_finite(loss.data, "training loss")

    optimizer.zero_grad()
    loss.backward()
    optimizer.step(lr)

    # EMA statistics pool the (pre-quantization residual, code) pairs of all depths
    pre = residuals[:-1].reshape(-1, model.n_z)
    ema_codebook_update(codebook, pre, codes.T.reshape(-1))
    moved = 0
    if reseed_rng is not None:
        moved = reseed_dead_codes(codebook, pre, reseed_rng, threshold=reseed_threshold)
    return TrainStepReport(
        total=float(loss.data),
        reconstruction=float(recon_loss.data),
        commitment=float(commit.data),
        reseeded=moved,
    )
