"""Residual code-stack modelling with two-phase mask-infilling generation.

The package is organised as a small numpy library:

- ``autodiff`` / ``layers`` / ``optim``: recorded-graph reverse-mode
  differentiation and the transformer building blocks.
- ``quantize``: shared-codebook residual quantization with EMA learning.
- ``codemap`` / ``autoencoder``: patch autoencoder producing code-stack maps.
- ``transformer``: bidirectional spatial encoder with a causal depth head,
  trained by random-mask code-stack infilling.
- ``decoding``: balanced-partition update passes, draft and revise phases,
  guidance/temperature sampling, confidence baselines, and inpainting.
- ``data`` / ``train`` / ``evaluate`` / ``checkpoint`` / ``config`` /
  ``cli``: datasets, training loops, exact-oracle evaluation, and the
  command-line pipeline.
"""

from .autodiff import Tensor, no_grad
from .quantize import Codebook

__all__ = ["Tensor", "no_grad", "Codebook"]
__version__ = "0.1.0"
