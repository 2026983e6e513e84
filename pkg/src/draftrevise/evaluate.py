"""Exact-oracle evaluation: conditional and joint total-variation matching,
strategy entropies, and reconstruction error.

Total variation is always computed against explicit probability tables,
never kernel estimates, so the numbers carry no estimator bias.
"""

from __future__ import annotations

import csv
import time
from pathlib import Path

import numpy as np

from .autodiff import Tensor, no_grad
from .autoencoder import PatchAutoencoder
from .data import SyntheticCodeDistribution
from .decoding import DecodePlan, DecodeStats, generate_batch, generate_draft_batch
from .quantize import Codebook
from .transformer import ContextualTransformer

__all__ = [
    "EvalReport",
    "model_stack_conditional",
    "conditional_tv_probes",
    "sample_match_tv",
    "strategy_sample_entropy",
    "empirical_entropy",
    "mean_sampling_entropy",
    "reconstruction_mse",
    "sample_wall_clock",
]


class EvalReport:
    """Ordered metric -> value mapping with a fixed CSV serialisation."""

    HEADER = ("metric", "value")

    def __init__(self):
        self.metrics: dict[str, float] = {}

    def add(self, name: str, value: float) -> None:
        value = float(value)
        if not np.isfinite(value):
            raise ValueError(f"metric {name!r} is not finite")
        self.metrics[name] = value

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.HEADER)
            for name, value in self.metrics.items():
                writer.writerow([name, f"{value:.10e}"])

    def __getitem__(self, name: str) -> float:
        return self.metrics[name]


# ---------------------------------------------------------------------------
# exact model conditionals
# ---------------------------------------------------------------------------

def _all_stacks(codebook_size: int, depth: int) -> np.ndarray:
    grids = np.indices((codebook_size,) * depth)
    return grids.reshape(depth, -1).T.astype(np.int64)


def model_stack_conditional(model: ContextualTransformer, codes: np.ndarray,
                            mask: np.ndarray, condition: int, position: int) -> np.ndarray:
    """Exact model distribution over whole stacks at one masked position.

    Enumerates every K^depth candidate stack and chains the per-depth
    softmax probabilities under teacher forcing.
    """
    c = model.config
    mask = np.asarray(mask, dtype=bool)
    if not mask[position]:
        raise ValueError("the probed position must be masked")
    stacks = _all_stacks(c.codebook_size, c.depth)           # (C, depth)
    n_cand = stacks.shape[0]
    with no_grad():
        h = model.context(np.asarray(codes)[None], mask[None], np.array([condition])).data
        h_n = np.repeat(h[:, position:position + 1, :], n_cand, axis=0)   # (C, 1, d_model)
        teacher = stacks[:, None, :]                                      # (C, 1, depth)
        logits = model.depth_logits(Tensor(h_n), teacher).data[:, 0]      # (C, depth, K)
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    log_probs = (logits - m) - np.log(e.sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(log_probs, stacks[:, :, None], axis=-1)[:, :, 0]
    return np.exp(picked.sum(axis=-1))


def conditional_tv_probes(model: ContextualTransformer, dist: SyntheticCodeDistribution,
                          condition: int, n_probes: int, seed: int):
    """Max/mean TV between model and oracle stack conditionals over fixed probes."""
    rng = np.random.default_rng(seed)
    n = dist.n_positions
    worst = 0.0
    total = 0.0
    for _ in range(n_probes):
        state = dist.sample(rng, 1)[0]
        n_masked = int(rng.integers(1, n + 1))
        order = rng.permutation(n)
        mask = np.zeros(n, dtype=bool)
        mask[order[:n_masked]] = True
        position = int(order[0])
        oracle = dist.conditional_stack_probs(state, mask, position)
        predicted = model_stack_conditional(model, state, mask, condition, position)
        tv = 0.5 * float(np.abs(oracle - predicted).sum())
        worst = max(worst, tv)
        total += tv
    return worst, total / n_probes


def sample_match_tv(model: ContextualTransformer, dist: SyntheticCodeDistribution,
                    plan: DecodePlan, condition: int, n_samples: int,
                    batch: int = 1000) -> float:
    """TV between the empirical pipeline distribution and the oracle joint."""
    counts = np.zeros(dist.n_states, dtype=np.int64)
    for start in range(0, n_samples, batch):
        indices = range(start, min(start + batch, n_samples))
        codes = generate_batch(model, plan, condition, indices)
        counts += np.bincount(dist.state_index(codes), minlength=dist.n_states)
    empirical = counts / counts.sum()
    return 0.5 * float(np.abs(empirical - dist.probs).sum())


# ---------------------------------------------------------------------------
# entropies
# ---------------------------------------------------------------------------

def empirical_entropy(counts: np.ndarray) -> float:
    p = np.asarray(counts, dtype=np.float64)
    p = p / p.sum()
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def strategy_sample_entropy(model: ContextualTransformer, dist: SyntheticCodeDistribution,
                            strategy: str, t_draft: int, condition: int, seed: int,
                            n_samples: int, batch: int = 1000) -> float:
    """Empirical entropy of draft-phase outputs under one unmasking strategy."""
    counts = np.zeros(dist.n_states, dtype=np.int64)
    for start in range(0, n_samples, batch):
        indices = range(start, min(start + batch, n_samples))
        codes = generate_draft_batch(model, t_draft, strategy, condition, seed, indices)
        counts += np.bincount(dist.state_index(codes), minlength=dist.n_states)
    return empirical_entropy(counts)


def mean_sampling_entropy(logits_list, temperature: float) -> float:
    """Mean softmax entropy of collected sampling logits at a given temperature."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    total = 0.0
    rows = 0
    for logits in logits_list:
        scaled = np.asarray(logits, dtype=np.float64) / temperature
        m = scaled.max(axis=-1, keepdims=True)
        e = np.exp(scaled - m)
        p = e / e.sum(axis=-1, keepdims=True)
        ent = -(p * np.log(np.maximum(p, 1e-300))).sum(axis=-1)
        total += float(ent.sum())
        rows += int(np.prod(ent.shape))
    if rows == 0:
        raise ValueError("no sampling logits were collected")
    return total / rows


def collect_revise_logits(model: ContextualTransformer, plan: DecodePlan, condition: int,
                          n_samples: int) -> list:
    """Gather the raw pre-temperature logits used during revise-phase sampling."""
    stats = DecodeStats(collect_logits=True)
    draft_passes = None
    for i in range(n_samples):
        single = DecodeStats(collect_logits=True)
        generate_batch(model, plan, condition, [i], stats=single)
        # draft-phase draws precede revise draws; drop them
        per_pass = len(single.sampling_logits)
        if draft_passes is None:
            total_draws = per_pass
            revise_draws = plan.revise_iters * plan.t_revise * model.config.depth
            draft_passes = total_draws - revise_draws
        stats.sampling_logits.extend(single.sampling_logits[draft_passes:])
    return stats.sampling_logits


# ---------------------------------------------------------------------------
# reconstruction and timing
# ---------------------------------------------------------------------------

def reconstruction_mse(model: PatchAutoencoder, codebook: Codebook, images: np.ndarray,
                       depth: int, batch: int = 256) -> float:
    total = 0.0
    count = 0
    with no_grad():
        for start in range(0, images.shape[0], batch):
            chunk = np.asarray(images[start:start + batch], dtype=model.dtype)
            recon = model.reconstruct(chunk, codebook, depth).data
            total += float(((recon - chunk) ** 2).sum())
            count += chunk.size
    return total / count


def sample_wall_clock(model: ContextualTransformer, plan: DecodePlan, condition: int,
                      n_samples: int, batch: int = 64) -> float:
    """Mean seconds per generated sample."""
    start = time.perf_counter()
    for begin in range(0, n_samples, batch):
        indices = range(begin, min(begin + batch, n_samples))
        generate_batch(model, plan, condition, indices)
    return (time.perf_counter() - start) / n_samples
