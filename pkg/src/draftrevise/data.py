"""Datasets: procedural sprites and an exactly-enumerable synthetic code source.

The synthetic source exists so the sequence model can be checked against a
closed-form oracle: the whole state space of small code maps is enumerated
and the generating distribution is returned as an explicit probability
table, making every conditional computable exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "SPRITE_SIZE",
    "SPRITE_CLASSES",
    "make_sprites",
    "SyntheticCodeDistribution",
    "make_synthetic_codes",
    "MAX_ENUMERABLE_STATES",
]

SPRITE_SIZE = 16
SPRITE_SHAPES = ("square", "disk", "cross", "triangle")
SPRITE_COLORS = (
    np.array([0.90, 0.25, 0.20]),
    np.array([0.15, 0.65, 0.95]),
)
SPRITE_CLASSES = len(SPRITE_SHAPES) * len(SPRITE_COLORS)

MAX_ENUMERABLE_STATES = 1_000_000


def _draw_shape(canvas: np.ndarray, shape: str, cy: int, cx: int, color: np.ndarray) -> None:
    size = canvas.shape[0]
    ys, xs = np.mgrid[0:size, 0:size]
    if shape == "square":
        hit = (np.abs(ys - cy) <= 3) & (np.abs(xs - cx) <= 3)
    elif shape == "disk":
        hit = (ys - cy) ** 2 + (xs - cx) ** 2 <= 3.5 ** 2
    elif shape == "cross":
        hit = ((np.abs(ys - cy) <= 1) & (np.abs(xs - cx) <= 4)) | (
            (np.abs(xs - cx) <= 1) & (np.abs(ys - cy) <= 4)
        )
    elif shape == "triangle":
        rel = ys - (cy - 3)
        hit = (rel >= 0) & (rel <= 6) & (np.abs(xs - cx) <= rel // 2 + 1) & (rel <= 6)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    canvas[hit] = color


def make_sprites(count: int, seed: int):
    """Deterministic labelled sprites: shape-times-color classes with jitter.

    Returns (images (count, 16, 16, 3) float32 in [0, 1], labels (count,)).
    Labels cycle through the classes, so their frequencies are exactly
    balanced up to one sprite.
    """
    if count < 1:
        raise ValueError("sprite count must be positive")
    images = np.zeros((count, SPRITE_SIZE, SPRITE_SIZE, 3), dtype=np.float32)
    labels = (np.arange(count) % SPRITE_CLASSES).astype(np.int64)
    for i in range(count):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=(i,))))
        label = int(labels[i])
        shape = SPRITE_SHAPES[label % len(SPRITE_SHAPES)]
        base = SPRITE_COLORS[label // len(SPRITE_SHAPES)]
        background = rng.uniform(0.05, 0.12)
        canvas = np.full((SPRITE_SIZE, SPRITE_SIZE, 3), background)
        cy = 8 + int(rng.integers(-2, 3))
        cx = 8 + int(rng.integers(-2, 3))
        color = np.clip(base * rng.uniform(0.85, 1.0), 0.0, 1.0)
        _draw_shape(canvas, shape, cy, cx, color)
        images[i] = canvas.astype(np.float32)
    return images, labels


# ---------------------------------------------------------------------------
# enumerable synthetic code maps
# ---------------------------------------------------------------------------

@dataclass
class SyntheticCodeDistribution:
    """An exact probability table over all K^(N*depth) code maps.

    ``states`` lists every map as (S, N, depth) codes in lexicographic
    order, so ``state_index`` is a radix computation and every conditional
    reduces to filtering and renormalising the table.
    """

    probs: np.ndarray        # (S,)
    n_positions: int
    depth: int
    codebook_size: int

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self._cdf = np.cumsum(self.probs)
        digits = self.n_positions * self.depth
        grids = np.indices((self.codebook_size,) * digits)
        self.states = (
            grids.reshape(digits, -1).T.reshape(-1, self.n_positions, self.depth).astype(np.int64)
        )

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    def state_index(self, codes: np.ndarray) -> np.ndarray:
        """Radix index of one map (N, depth) or a batch (B, N, depth)."""
        codes = np.asarray(codes, dtype=np.int64)
        flat = codes.reshape(codes.shape[:-2] + (-1,))
        weights = self.codebook_size ** np.arange(flat.shape[-1] - 1, -1, -1)
        return (flat * weights).sum(axis=-1)

    def stack_index(self, stack: np.ndarray) -> int:
        weights = self.codebook_size ** np.arange(self.depth - 1, -1, -1)
        return int((np.asarray(stack) * weights).sum())

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        """Inverse-CDF draws; returns (count, N, depth) code maps."""
        u = rng.random(count)
        idx = np.minimum(np.searchsorted(self._cdf, u, side="right"), self.n_states - 1)
        return self.states[idx]

    def position_marginal(self, position: int) -> np.ndarray:
        """Distribution over the K^depth stacks at one position."""
        out = np.zeros(self.codebook_size ** self.depth)
        idx = self.state_index_of_position(position)
        np.add.at(out, idx, self.probs)
        return out

    def state_index_of_position(self, position: int) -> np.ndarray:
        weights = self.codebook_size ** np.arange(self.depth - 1, -1, -1)
        return (self.states[:, position, :] * weights).sum(axis=-1)

    def conditional_stack_probs(self, context: np.ndarray, mask: np.ndarray, position: int) -> np.ndarray:
        """Oracle p(stack at ``position`` | visible context), marginalising hidden positions.

        ``mask`` marks hidden positions; ``context`` supplies codes at the
        visible ones (hidden entries are ignored). The result renormalises
        over the K^depth candidate stacks.
        """
        mask = np.asarray(mask, dtype=bool)
        if not mask[position]:
            raise ValueError("the probed position must be masked")
        context = np.asarray(context, dtype=np.int64)
        match = np.ones(self.n_states, dtype=bool)
        for n in np.flatnonzero(~mask):
            match &= (self.states[:, n, :] == context[n]).all(axis=-1)
        weights = self.probs * match
        total = weights.sum()
        if total <= 0:
            raise ValueError("context has zero probability under the table")
        out = np.zeros(self.codebook_size ** self.depth)
        np.add.at(out, self.state_index_of_position(position), weights)
        return out / total

    def entropy(self) -> float:
        p = self.probs[self.probs > 0]
        return float(-(p * np.log(p)).sum())

    def empirical_table(self, codes: np.ndarray) -> np.ndarray:
        """Normalised state histogram of a batch of sampled maps."""
        idx = self.state_index(codes)
        counts = np.bincount(idx, minlength=self.n_states)
        return counts / counts.sum()


def _template_mixture_table(states: np.ndarray, templates: np.ndarray,
                            weights: np.ndarray, noise: float, k: int) -> np.ndarray:
    digits = states.shape[1] * states.shape[2]
    flat = states.reshape(states.shape[0], digits)
    table = np.zeros(states.shape[0])
    for template, w in zip(templates, weights):
        matches = (flat == template.reshape(-1)).sum(axis=1)
        table += w * (1.0 - noise) ** matches * (noise / (k - 1)) ** (digits - matches)
    return table


def make_synthetic_codes(n_positions: int, depth: int, codebook_size: int, structure_seed: int,
                         count: int = 0, sample_seed: int = 0,
                         n_templates: int = 3, noise: float = 0.15,
                         coupling: float = 0.1):
    """Fixed low-entropy distribution over full code maps, with its exact table.

    The base is a mixture of a few noisy templates; it is then blended with
    the product of its own position marginals so that positions are only
    weakly coupled (weight ``coupling`` on the fully coupled component).
    Returns (sampled dataset (count, N, depth), SyntheticCodeDistribution).
    """
    n_states = codebook_size ** (n_positions * depth)
    if n_states > MAX_ENUMERABLE_STATES:
        raise ValueError(
            f"state space {n_states} exceeds the enumerable limit {MAX_ENUMERABLE_STATES}"
        )
    if codebook_size < 2:
        raise ValueError("codebook size must be at least 2")
    rng = np.random.default_rng(structure_seed)
    templates = rng.integers(0, codebook_size, size=(n_templates, n_positions, depth))
    raw_w = rng.uniform(0.5, 1.5, size=n_templates)
    weights = raw_w / raw_w.sum()

    dist = SyntheticCodeDistribution(
        probs=np.full(n_states, 1.0 / n_states),
        n_positions=n_positions,
        depth=depth,
        codebook_size=codebook_size,
    )
    mixture = _template_mixture_table(dist.states, templates, weights, noise, codebook_size)
    mixture /= mixture.sum()

    # product of the mixture's own position marginals: same marginals,
    # cross-position coupling removed
    factorised = np.ones(n_states)
    for n in range(n_positions):
        marg = np.zeros(codebook_size ** depth)
        np.add.at(marg, dist.state_index_of_position(n), mixture)
        factorised *= marg[dist.state_index_of_position(n)]
    table = (1.0 - coupling) * factorised + coupling * mixture
    table /= table.sum()
    dist.probs = table
    dist._cdf = np.cumsum(table)

    samples = np.zeros((0, n_positions, depth), dtype=np.int64)
    if count > 0:
        samples = dist.sample(np.random.default_rng(sample_seed), count)
    return samples, dist
