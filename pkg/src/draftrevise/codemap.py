"""Spatial maps of code stacks and their raster-scan flattening."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["CodeStackMap"]


@dataclass
class CodeStackMap:
    """An (H, W, depth) grid of code indices drawn from a K-entry codebook.

    Raster-scan flattening walks rows left to right, top to bottom, giving
    the (N, depth) sequence form used by the sequence model; flatten and
    unflatten are exact inverses.
    """

    codes: np.ndarray           # (H, W, depth) integer array
    codebook_size: int

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int64)
        if self.codes.ndim != 3:
            raise ValueError("code map must have shape (H, W, depth)")
        if self.codes.size and (self.codes.min() < 0 or self.codes.max() >= self.codebook_size):
            raise ValueError("code index out of codebook range")

    @property
    def height(self) -> int:
        return self.codes.shape[0]

    @property
    def width(self) -> int:
        return self.codes.shape[1]

    @property
    def depth(self) -> int:
        return self.codes.shape[2]

    @property
    def n_positions(self) -> int:
        return self.codes.shape[0] * self.codes.shape[1]

    def flatten(self) -> np.ndarray:
        """Raster-scan sequence view, shape (H*W, depth)."""
        return self.codes.reshape(self.n_positions, self.depth)

    @classmethod
    def from_flat(cls, flat: np.ndarray, height: int, width: int, codebook_size: int) -> "CodeStackMap":
        flat = np.asarray(flat, dtype=np.int64)
        if flat.ndim != 2 or flat.shape[0] != height * width:
            raise ValueError("flat code sequence shape does not match the grid")
        return cls(flat.reshape(height, width, flat.shape[1]), codebook_size)

    def copy(self) -> "CodeStackMap":
        return CodeStackMap(self.codes.copy(), self.codebook_size)

    def __eq__(self, other) -> bool:
        if not isinstance(other, CodeStackMap):
            return NotImplemented
        return (
            self.codebook_size == other.codebook_size
            and self.codes.shape == other.codes.shape
            and bool((self.codes == other.codes).all())
        )
