"""Two-phase mask-infilling generation over code-stack maps.

One UPDATE pass walks the chunks of a balanced random partition: each chunk
is re-masked (even if it currently holds codes), one forward pass reads the
rest of the map, and fresh stacks are sampled for the whole chunk in
parallel. The draft phase runs a single pass over a fully masked map with a
plain conditional sampler; the revise phase repeats passes with temperature
scaling and classifier-free guidance active. Restricting partitions to a
region turns the same machinery into inpainting: everything outside the
region stays byte-identical.

Every sample owns an independent RNG stream derived from (seed, sample
index), so batching and worker fan-out never change output bytes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, assert_finite, no_grad
from .codemap import CodeStackMap
from .transformer import NULL_CONDITION, ContextualTransformer

__all__ = [
    "Partition",
    "DecodePlan",
    "Sampler",
    "InpaintRegion",
    "DecodeStats",
    "sample_partition",
    "guided_tempered_logits",
    "confidence_schedule",
    "update_pass",
    "draft",
    "revise",
    "draft_and_revise",
    "draft_with_strategy",
    "inpaint",
    "generate_batch",
    "sample_rng",
]

STRATEGIES = ("random", "topc", "topc50")


@dataclass
class Partition:
    """Pairwise-disjoint balanced masks covering a region exactly once."""

    masks: np.ndarray                 # (T, N) bool
    region: np.ndarray | None = None  # (N,) bool; None means all positions

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=bool)
        if self.masks.ndim != 2 or self.masks.shape[0] < 1:
            raise ValueError("a partition needs at least one mask over positions")
        region = np.ones(self.masks.shape[1], dtype=bool) if self.region is None else np.asarray(self.region, dtype=bool)
        self.region = region
        cover = self.masks.sum(axis=0)
        if (cover[region] != 1).any() or cover[~region].any():
            raise ValueError("partition must cover the region exactly once")
        sizes = self.masks.sum(axis=1)
        if sizes.max() - sizes.min() > 1:
            raise ValueError("partition must be balanced (sizes differ by at most 1)")

    @property
    def n_chunks(self) -> int:
        return self.masks.shape[0]

    @property
    def n_positions(self) -> int:
        return self.masks.shape[1]

    def chunk_ids(self) -> np.ndarray:
        """Per-position chunk index; -1 outside the region."""
        ids = np.full(self.n_positions, -1, dtype=np.int64)
        for t in range(self.n_chunks):
            ids[self.masks[t]] = t
        return ids


@dataclass
class Sampler:
    """Per-draw sampling knobs; temperature 0 means the argmax limit."""

    temperature: float = 1.0
    guidance_scale: float = 1.0

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")
        if self.guidance_scale < 0:
            raise ValueError("guidance scale must be non-negative")


@dataclass
class DecodePlan:
    """The full decoding configuration; temperature and guidance act in revise only."""

    t_draft: int
    t_revise: int
    revise_iters: int
    temperature: float = 1.0
    guidance_scale: float = 1.0
    strategy: str = "random"
    seed: int = 0

    def __post_init__(self):
        if self.t_draft < 1 or self.t_revise < 1:
            raise ValueError("partition sizes must be at least 1")
        if self.revise_iters < 0:
            raise ValueError("the revise iteration count must be non-negative")
        if self.temperature <= 0:
            raise ValueError("plan temperature must be positive")
        if self.guidance_scale < 0:
            raise ValueError("guidance scale must be non-negative")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")

    def revise_sampler(self) -> Sampler:
        return Sampler(temperature=self.temperature, guidance_scale=self.guidance_scale)


@dataclass
class InpaintRegion:
    """Positions to regenerate; the remainder stays fixed as context."""

    mask: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.ndim != 1 or not self.mask.any():
            raise ValueError("inpainting needs a non-empty position region")


@dataclass
class DecodeStats:
    """Instrumentation counters filled in by the decode passes."""

    forward_passes: int = 0
    writes: int = 0
    sampling_logits: list = field(default_factory=list)
    collect_logits: bool = False


def sample_rng(seed: int, sample_index: int = 0) -> np.random.Generator:
    """Independent per-sample stream: a pure function of (seed, sample index)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=(sample_index,))))


# ---------------------------------------------------------------------------
# partitions
# ---------------------------------------------------------------------------

def _chunk_sizes(count: int, t: int) -> list[int]:
    base, rem = divmod(count, t)
    return [base + 1] * rem + [base] * (t - rem)


def sample_partition(n: int, t: int, rng: np.random.Generator,
                     restrict_to: np.ndarray | None = None) -> Partition:
    """Uniform balanced partition: shuffle the region, cut into T chunks."""
    region = np.ones(n, dtype=bool) if restrict_to is None else np.asarray(restrict_to, dtype=bool)
    positions = np.flatnonzero(region)
    if t < 1 or t > positions.size:
        raise ValueError("partition size must lie in [1, region size]")
    perm = positions[rng.permutation(positions.size)]
    masks = np.zeros((t, n), dtype=bool)
    start = 0
    for i, size in enumerate(_chunk_sizes(positions.size, t)):
        masks[i, perm[start:start + size]] = True
        start += size
    return Partition(masks, region=None if restrict_to is None else region)


# ---------------------------------------------------------------------------
# sampling distributions
# ---------------------------------------------------------------------------

def _softmax_np(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=-1, keepdims=True)


def _combine_guided(logits_cond: np.ndarray, logits_uncond: np.ndarray | None, scale: float) -> np.ndarray:
    # scale 1 must reproduce the conditional logits bit for bit
    if scale == 1.0 or logits_uncond is None:
        return logits_cond
    return logits_uncond + scale * (logits_cond - logits_uncond)


def guided_tempered_logits(logits_cond: np.ndarray, logits_uncond: np.ndarray,
                           scale: float, temperature: float) -> np.ndarray:
    """Sampling distribution after guidance extrapolation and temperature scaling.

    scale 0 recovers the unconditional softmax, scale 1 the conditional one.
    """
    logits_cond = np.asarray(logits_cond)
    logits_uncond = np.asarray(logits_uncond)
    if logits_cond.shape != logits_uncond.shape:
        raise ValueError("conditional/unconditional logits must share a shape")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if scale < 0:
        raise ValueError("guidance scale must be non-negative")
    combined = _combine_guided(logits_cond, logits_uncond, scale)
    if temperature != 1.0:
        combined = combined / temperature
    return _softmax_np(combined)


def _draw_categorical(probs: np.ndarray, rngs: list[np.random.Generator]) -> np.ndarray:
    """Inverse-CDF draws, one uniform per (sample, position) from each sample's stream."""
    b, p, k = probs.shape
    u = np.empty((b, p), dtype=probs.dtype)
    for i in range(b):
        u[i] = rngs[i].random(p)
    cdf = np.cumsum(probs, axis=-1)
    idx = (cdf <= u[..., None]).sum(axis=-1)
    return np.minimum(idx, k - 1).astype(np.int64)


def _sample_stacks(model: ContextualTransformer, h_data: np.ndarray, positions: np.ndarray,
                   sampler: Sampler, rngs: list[np.random.Generator],
                   stats: DecodeStats | None = None):
    """Sample full stacks at ``positions`` from context vectors, depth by depth.

    ``h_data`` is (B, N, d_model), or (2B, N, d_model) when guidance doubles
    the batch with the unconditional stream. Returns (codes (B, P, depth),
    per-position log-probability of the sampled stack).
    """
    guided = sampler.guidance_scale != 1.0
    b, p = positions.shape
    rows = np.arange(h_data.shape[0])[:, None]
    pos_full = np.concatenate([positions, positions]) if guided else positions
    h_sel = Tensor(h_data[rows, pos_full])
    depth = model.config.depth
    history = np.zeros((h_sel.shape[0], p, 0), dtype=np.int64)
    logprob = np.zeros((b, p))
    with no_grad():
        for _ in range(depth):
            logits = model.depth_step(h_sel, history)
            assert_finite(logits, "sampling logits")
            if guided:
                dist = guided_tempered_logits(
                    logits[:b], logits[b:], sampler.guidance_scale,
                    sampler.temperature if sampler.temperature > 0 else 1.0,
                )
                combined = _combine_guided(logits[:b], logits[b:], sampler.guidance_scale)
            else:
                combined = logits
                temp = sampler.temperature
                dist = _softmax_np(combined if temp in (0.0, 1.0) else combined / temp)
            if sampler.temperature == 0.0:
                codes_d = combined.argmax(axis=-1).astype(np.int64)
            else:
                codes_d = _draw_categorical(dist, rngs)
            if stats is not None and stats.collect_logits:
                stats.sampling_logits.append(combined.copy())
            logprob += np.log(np.take_along_axis(dist, codes_d[..., None], axis=-1)[..., 0])
            step = np.concatenate([codes_d, codes_d]) if guided else codes_d
            history = np.concatenate([history, step[..., None]], axis=2)
    return history[:b], logprob


# ---------------------------------------------------------------------------
# update passes
# ---------------------------------------------------------------------------

def _forward_context(model: ContextualTransformer, codes: np.ndarray, mask: np.ndarray,
                     cond: np.ndarray, guided: bool) -> np.ndarray:
    with no_grad():
        if guided:
            doubled = np.concatenate([codes, codes])
            mask2 = np.concatenate([mask, mask])
            cond2 = np.concatenate([cond, np.full_like(cond, NULL_CONDITION)])
            return model.context(doubled, mask2, cond2).data
        return model.context(codes, mask, cond).data


def _update_batch(codes: np.ndarray, unfilled: np.ndarray, chunk_ids: np.ndarray, n_chunks: int,
                  cond: np.ndarray, model: ContextualTransformer, sampler: Sampler,
                  rngs: list[np.random.Generator], stats: DecodeStats | None = None) -> None:
    """One full pass over a batch of per-sample partitions, in place.

    Chunk sizes are equal across the batch (balanced partitions of equal
    regions), so each step samples a rectangular block of positions.
    """
    guided = sampler.guidance_scale != 1.0
    b = codes.shape[0]
    for t in range(n_chunks):
        chunk = chunk_ids == t                         # (B, N)
        view_mask = unfilled | chunk                   # re-mask the chunk under update
        h = _forward_context(model, codes, view_mask, cond, guided)
        if stats is not None:
            stats.forward_passes += 1
        positions = np.stack([np.flatnonzero(chunk[i]) for i in range(b)])
        sampled, _ = _sample_stacks(model, h, positions, sampler, rngs, stats)
        rows = np.arange(b)[:, None]
        codes[rows, positions] = sampled
        unfilled[rows, positions] = False
        if stats is not None:
            stats.writes += int(positions.size)


def update_pass(code_map: CodeStackMap, partition: Partition, condition: int,
                model: ContextualTransformer, sampler: Sampler,
                rng: np.random.Generator, unfilled: np.ndarray | None = None,
                stats: DecodeStats | None = None) -> CodeStackMap:
    """Resample every position covered by ``partition`` exactly once.

    ``unfilled`` marks positions that are still empty (draft phase); they
    stay hidden from the context until their own chunk writes them.
    """
    flat = code_map.flatten().copy()[None, ...]
    n = flat.shape[1]
    if partition.n_positions != n:
        raise ValueError("partition length does not match the code map")
    state_unfilled = np.zeros((1, n), dtype=bool) if unfilled is None else np.asarray(unfilled, dtype=bool).copy()[None, :]
    chunk_ids = partition.chunk_ids()[None, :]
    cond = np.asarray([condition], dtype=np.int64)
    _update_batch(flat, state_unfilled, chunk_ids, partition.n_chunks, cond, model, sampler, [rng], stats)
    return CodeStackMap.from_flat(flat[0], code_map.height, code_map.width, code_map.codebook_size)


# ---------------------------------------------------------------------------
# draft / revise pipeline
# ---------------------------------------------------------------------------

def _empty_state(b: int, n: int, depth: int):
    return np.zeros((b, n, depth), dtype=np.int64), np.ones((b, n), dtype=bool)


def _pipeline_batch(codes: np.ndarray, unfilled: np.ndarray, region: np.ndarray,
                    plan: DecodePlan, cond: np.ndarray, model: ContextualTransformer,
                    rngs: list[np.random.Generator], stats: DecodeStats | None = None,
                    collect_stages: list | None = None) -> None:
    """Draft then revise, restricted to ``region``, all in place."""
    b, n, _ = codes.shape
    region_size = int(region.sum())
    t_draft = min(plan.t_draft, region_size)
    t_revise = min(plan.t_revise, region_size)
    restrict = None if region.all() else region

    if plan.strategy == "random":
        chunk_ids = np.stack([sample_partition(n, t_draft, rng, restrict).chunk_ids() for rng in rngs])
        _update_batch(codes, unfilled, chunk_ids, t_draft, cond, model, Sampler(), rngs, stats)
    else:
        _strategy_draft_batch(codes, unfilled, region, t_draft, plan.strategy, cond, model, rngs, stats)
    if unfilled[:, region].any():
        raise RuntimeError("draft phase left unfilled positions")
    if collect_stages is not None:
        collect_stages.append(codes.copy())

    sampler = plan.revise_sampler()
    for _ in range(plan.revise_iters):
        chunk_ids = np.stack([sample_partition(n, t_revise, rng, restrict).chunk_ids() for rng in rngs])
        _update_batch(codes, unfilled, chunk_ids, t_revise, cond, model, sampler, rngs, stats)
        if collect_stages is not None:
            collect_stages.append(codes.copy())


def draft(condition: int, t_draft: int, model: ContextualTransformer,
          rng: np.random.Generator, grid: tuple[int, int] | None = None,
          stats: DecodeStats | None = None) -> CodeStackMap:
    """Infill a fully masked map with one partition pass; no temperature, no guidance."""
    c = model.config
    h, w = grid if grid is not None else (1, c.seq_len)
    if h * w != c.seq_len:
        raise ValueError("grid does not match the model sequence length")
    codes, unfilled = _empty_state(1, c.seq_len, c.depth)
    partition = sample_partition(c.seq_len, t_draft, rng)
    chunk_ids = partition.chunk_ids()[None, :]
    cond = np.asarray([condition], dtype=np.int64)
    _update_batch(codes, unfilled, chunk_ids, t_draft, cond, model, Sampler(), [rng], stats)
    if unfilled.any():
        raise RuntimeError("draft phase left unfilled positions")
    return CodeStackMap.from_flat(codes[0], h, w, c.codebook_size)


def revise(code_map: CodeStackMap, condition: int, t_revise: int, n_iters: int,
           model: ContextualTransformer, sampler: Sampler, rng: np.random.Generator,
           stats: DecodeStats | None = None) -> CodeStackMap:
    """Apply ``n_iters`` update passes with fresh partitions of size ``t_revise``."""
    out = code_map.copy()
    for _ in range(n_iters):
        partition = sample_partition(out.n_positions, t_revise, rng)
        out = update_pass(out, partition, condition, model, sampler, rng, stats=stats)
    return out


def draft_and_revise(plan: DecodePlan, condition: int, model: ContextualTransformer,
                     grid: tuple[int, int] | None = None, stats: DecodeStats | None = None,
                     collect_stages: list | None = None,
                     sample_index: int = 0) -> CodeStackMap:
    """The full two-phase pipeline; a pure function of (plan, condition, weights, seed)."""
    c = model.config
    h, w = grid if grid is not None else (1, c.seq_len)
    if h * w != c.seq_len:
        raise ValueError("grid does not match the model sequence length")
    if plan.t_draft > c.seq_len or plan.t_revise > c.seq_len:
        raise ValueError("partition sizes cannot exceed the position count")
    rng = sample_rng(plan.seed, sample_index)
    codes, unfilled = _empty_state(1, c.seq_len, c.depth)
    region = np.ones(c.seq_len, dtype=bool)
    cond = np.asarray([condition], dtype=np.int64)
    _pipeline_batch(codes, unfilled, region, plan, cond, model, [rng], stats, collect_stages)
    return CodeStackMap.from_flat(codes[0], h, w, c.codebook_size)


# ---------------------------------------------------------------------------
# confidence-ordered baselines
# ---------------------------------------------------------------------------

def confidence_schedule(strategy: str, confidences: np.ndarray, chunk_size: int,
                        masked: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
    """Pick which still-masked positions to commit next.

    topc keeps the ``chunk_size`` most confident positions (ties: lowest
    index). topc50 drops the bottom half by confidence and picks uniformly
    among the survivors; when the survivors are exactly the chunk the pick
    is forced and consumes no randomness. random ignores confidences.
    """
    masked_idx = np.flatnonzero(np.asarray(masked, dtype=bool))
    if chunk_size > masked_idx.size:
        raise ValueError("chunk size exceeds the masked position count")
    if strategy == "random":
        if rng is None:
            raise ValueError("the random strategy needs an rng")
        return np.sort(masked_idx[rng.permutation(masked_idx.size)[:chunk_size]])
    conf = np.asarray(confidences)[masked_idx]
    order = np.argsort(-conf, kind="stable")
    if strategy == "topc":
        return np.sort(masked_idx[order[:chunk_size]])
    if strategy == "topc50":
        half = masked_idx.size - masked_idx.size // 2
        keep = max(chunk_size, half)
        survivors = masked_idx[order[:keep]]
        if keep == chunk_size:
            return np.sort(survivors)
        if rng is None:
            raise ValueError("topc50 needs an rng")
        return np.sort(survivors[rng.permutation(keep)[:chunk_size]])
    raise ValueError(f"unknown strategy {strategy!r}")


def _strategy_draft_batch(codes: np.ndarray, unfilled: np.ndarray, region: np.ndarray,
                          t_draft: int, strategy: str, cond: np.ndarray,
                          model: ContextualTransformer, rngs: list[np.random.Generator],
                          stats: DecodeStats | None = None) -> None:
    """Confidence-ordered draft: resample all masked positions, commit the chosen chunk."""
    b = codes.shape[0]
    sizes = _chunk_sizes(int(region.sum()), t_draft)
    sampler = Sampler()
    for size in sizes:
        h = _forward_context(model, codes, unfilled, cond, guided=False)
        if stats is not None:
            stats.forward_passes += 1
        positions = np.stack([np.flatnonzero(unfilled[i] & region) for i in range(b)])
        sampled, logprob = _sample_stacks(model, h, positions, sampler, rngs, stats)
        for i in range(b):
            conf = np.full(codes.shape[1], -np.inf)
            conf[positions[i]] = logprob[i]
            chosen = confidence_schedule(strategy, conf, size, unfilled[i] & region, rngs[i])
            where = np.searchsorted(positions[i], chosen)
            codes[i, chosen] = sampled[i, where]
            unfilled[i, chosen] = False
            if stats is not None:
                stats.writes += int(chosen.size)


def draft_with_strategy(condition: int, t_draft: int, strategy: str,
                        model: ContextualTransformer, rng: np.random.Generator,
                        grid: tuple[int, int] | None = None,
                        stats: DecodeStats | None = None) -> CodeStackMap:
    """Draft a full map with a confidence-ordered (or random) unmasking order."""
    if strategy == "random":
        return draft(condition, t_draft, model, rng, grid=grid, stats=stats)
    c = model.config
    h, w = grid if grid is not None else (1, c.seq_len)
    codes, unfilled = _empty_state(1, c.seq_len, c.depth)
    region = np.ones(c.seq_len, dtype=bool)
    cond = np.asarray([condition], dtype=np.int64)
    _strategy_draft_batch(codes, unfilled, region, t_draft, strategy, cond, model, [rng], stats)
    return CodeStackMap.from_flat(codes[0], h, w, c.codebook_size)


# ---------------------------------------------------------------------------
# inpainting
# ---------------------------------------------------------------------------

def inpaint(code_map: CodeStackMap, region: InpaintRegion | np.ndarray, condition: int,
            plan: DecodePlan, model: ContextualTransformer,
            stats: DecodeStats | None = None, sample_index: int = 0,
            collect_stages: list | None = None) -> CodeStackMap:
    """Regenerate only the region's stacks; fixed positions are visible context.

    Partition sizes larger than the region clamp to the region size, so a
    one-position region sees exactly 1 + revise_iters resamplings.
    """
    region_mask = region.mask if isinstance(region, InpaintRegion) else InpaintRegion(region).mask
    flat = code_map.flatten()
    if region_mask.shape[0] != flat.shape[0]:
        raise ValueError("region length does not match the code map")
    rng = sample_rng(plan.seed, sample_index)
    codes = flat.copy()[None, ...]
    unfilled = region_mask.copy()[None, :]
    cond = np.asarray([condition], dtype=np.int64)
    _pipeline_batch(codes, unfilled, region_mask, plan, cond, model, [rng], stats, collect_stages)
    out = CodeStackMap.from_flat(codes[0], code_map.height, code_map.width, code_map.codebook_size)
    if (out.flatten()[~region_mask] != flat[~region_mask]).any():
        raise RuntimeError("inpainting touched codes outside the region")
    return out


# ---------------------------------------------------------------------------
# batched generation (shared by evaluation and the pipeline commands)
# ---------------------------------------------------------------------------

def generate_batch(model: ContextualTransformer, plan: DecodePlan, condition: int,
                   sample_indices, grid: tuple[int, int] | None = None,
                   stats: DecodeStats | None = None,
                   collect_stages: list | None = None) -> np.ndarray:
    """Run the full pipeline for many independent samples in one vectorised batch.

    Returns (B, N, depth) codes; sample i depends only on (plan, condition,
    weights, plan.seed, sample_indices[i]). ``collect_stages`` receives a
    snapshot after the draft and after each revise pass.
    """
    c = model.config
    indices = [int(i) for i in sample_indices]
    b = len(indices)
    if b == 0:
        return np.zeros((0, c.seq_len, c.depth), dtype=np.int64)
    rngs = [sample_rng(plan.seed, i) for i in indices]
    codes, unfilled = _empty_state(b, c.seq_len, c.depth)
    region = np.ones(c.seq_len, dtype=bool)
    cond = np.full(b, condition, dtype=np.int64)
    _pipeline_batch(codes, unfilled, region, plan, cond, model, rngs, stats, collect_stages)
    return codes


def generate_draft_batch(model: ContextualTransformer, t_draft: int, strategy: str,
                         condition: int, seed: int, sample_indices,
                         stats: DecodeStats | None = None) -> np.ndarray:
    """Draft-phase-only batch generation under a chosen unmasking strategy."""
    c = model.config
    indices = [int(i) for i in sample_indices]
    b = len(indices)
    if b == 0:
        return np.zeros((0, c.seq_len, c.depth), dtype=np.int64)
    rngs = [sample_rng(seed, i) for i in indices]
    codes, unfilled = _empty_state(b, c.seq_len, c.depth)
    region = np.ones(c.seq_len, dtype=bool)
    cond = np.full(b, condition, dtype=np.int64)
    if strategy == "random":
        chunk_ids = np.stack([sample_partition(c.seq_len, t_draft, rng).chunk_ids() for rng in rngs])
        _update_batch(codes, unfilled, chunk_ids, t_draft, cond, model, Sampler(), rngs, stats)
    else:
        _strategy_draft_batch(codes, unfilled, region, t_draft, strategy, cond, model, rngs, stats)
    return codes
