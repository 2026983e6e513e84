"""Sequence-model contracts: embedding structure, bidirectionality, depth
causality, masking soundness (bit-exact), the mask-size law, and the
end-to-end gradient of the training loss."""

import math

import numpy as np
import pytest
from scipy import stats as scipy_stats

from draftrevise import autodiff as ad
from draftrevise.autodiff import Tensor
from draftrevise.transformer import (
    NULL_CONDITION,
    ContextualTransformer,
    MaskedCodeSequence,
    TransformerConfig,
    condition_dropout,
    mask_count,
    masked_nll,
    sample_training_mask,
)

from helpers import check_grads


def make_model(seed=0, dtype=np.float64, **overrides):
    base = dict(seq_len=4, depth=3, codebook_size=5, d_model=32, n_heads=2,
                n_spatial_blocks=2, n_depth_blocks=2, d_embed=8, n_classes=3)
    base.update(overrides)
    cfg = TransformerConfig(**base)
    return ContextualTransformer(cfg, np.random.default_rng(seed), dtype=dtype)


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------

def test_fully_masked_embeddings_differ_only_by_position():
    model = make_model()
    codes = np.zeros((1, 4, 3), dtype=np.int64)
    mask = np.ones((1, 4), dtype=bool)
    u = model.embed_masked(codes, mask, np.array([0])).data
    without_pe = u[0] - model.pos_spatial.data
    # identical content embedding at every position once PE is removed
    assert np.abs(without_pe - without_pe[0]).max() < 1e-12


def test_unmasked_stack_embedding_is_additive():
    model = make_model()
    k = 3
    codes = np.full((1, 4, 3), k, dtype=np.int64)
    mask = np.zeros((1, 4), dtype=bool)
    u = model.embed_masked(codes, mask, np.array([1])).data
    expected_content = 3 * model.code_emb.data[k]       # depth copies of one embedding
    projected = expected_content @ model.embed_proj.w.data + model.embed_proj.b.data
    expected = model.pos_spatial.data[2] + projected + model.class_emb.data[1]
    np.testing.assert_allclose(u[0, 2], expected, atol=1e-12)


def test_single_masked_bit_changes_exactly_one_embedding():
    model = make_model()
    rng = np.random.default_rng(1)
    codes = rng.integers(0, 5, size=(1, 4, 3))
    mask_a = np.array([[False, False, True, False]])
    mask_b = np.array([[False, True, True, False]])
    ua = model.embed_masked(codes, mask_a, np.array([0])).data
    ub = model.embed_masked(codes, mask_b, np.array([0])).data
    diff = np.abs(ua - ub).sum(axis=2)[0]
    assert diff[1] > 0
    assert (diff[[0, 2, 3]] == 0).all()


def test_null_condition_uses_dedicated_row():
    model = make_model()
    codes = np.zeros((2, 4, 3), dtype=np.int64)
    mask = np.zeros((2, 4), dtype=bool)
    u = model.embed_masked(codes, mask, np.array([NULL_CONDITION, 2])).data
    np.testing.assert_array_equal(u[0], u[1])  # class rows 2 and NULL coincide (n_classes=3)
    with pytest.raises(ValueError):
        model.embed_masked(codes, mask, np.array([3, 0]))


def test_code_out_of_range_rejected():
    model = make_model()
    codes = np.full((1, 4, 3), 5, dtype=np.int64)
    with pytest.raises(IndexError):
        model.embed_masked(codes, np.zeros((1, 4), dtype=bool), np.array([0]))


# ---------------------------------------------------------------------------
# spatial stack
# ---------------------------------------------------------------------------

def test_single_position_context_is_deterministic_function():
    model = make_model(seq_len=1)
    u = Tensor(np.random.default_rng(2).normal(size=(1, 1, 32)))
    a = model.spatial_forward(u).data
    b = model.spatial_forward(u).data
    assert (a == b).all()


def test_bidirectionality_last_position_reaches_first():
    model = make_model()
    rng = np.random.default_rng(3)
    u = rng.normal(size=(1, 4, 32))
    base = model.spatial_forward(Tensor(u)).data
    bumped = u.copy()
    bumped[0, 3, 5] += 1.0    # one channel; a whole-row shift would be LN-invariant
    out = model.spatial_forward(Tensor(bumped)).data
    assert np.abs(out[0, 0] - base[0, 0]).max() > 1e-8


def test_permutation_equivariance_of_spatial_stack():
    model = make_model()
    rng = np.random.default_rng(4)
    u = rng.normal(size=(1, 4, 32))
    perm = np.array([2, 0, 3, 1])
    out = model.spatial_forward(Tensor(u)).data
    out_perm = model.spatial_forward(Tensor(u[:, perm])).data
    np.testing.assert_allclose(out[:, perm], out_perm, atol=1e-12)


# ---------------------------------------------------------------------------
# depth head
# ---------------------------------------------------------------------------

def test_depth_causality_exact():
    model = make_model()
    rng = np.random.default_rng(5)
    h = Tensor(rng.normal(size=(1, 4, 32)))
    teacher = rng.integers(0, 5, size=(1, 4, 3))
    base = model.depth_logits(h, teacher).data
    for d in range(3):
        perturbed = teacher.copy()
        perturbed[:, :, d:] = rng.integers(0, 5, size=(1, 4, 3 - d))
        out = model.depth_logits(h, perturbed).data
        assert (out[:, :, :d + 1] == base[:, :, :d + 1]).all(), f"depth {d} saw deeper codes"


def test_depth_one_code_history_inert():
    model = make_model(depth=1)
    rng = np.random.default_rng(6)
    h = Tensor(rng.normal(size=(1, 4, 32)))
    teacher = rng.integers(0, 5, size=(1, 4, 1))
    base = model.depth_logits(h, teacher).data
    # scrambling every weight on the code-history path must change nothing
    model.code_emb.data = rng.normal(size=model.code_emb.data.shape)
    out = model.depth_logits(h, rng.integers(0, 5, size=(1, 4, 1))).data
    assert (out == base).all()


def test_depth_logit_rows_normalise():
    model = make_model()
    rng = np.random.default_rng(7)
    h = Tensor(rng.normal(size=(2, 4, 32)))
    teacher = rng.integers(0, 5, size=(2, 4, 3))
    logits = model.depth_logits(h, teacher)
    probs = ad.softmax(logits).data
    np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-12)


# ---------------------------------------------------------------------------
# masking soundness
# ---------------------------------------------------------------------------

def test_logits_and_loss_bit_invariant_to_hidden_codes():
    model = make_model()
    rng = np.random.default_rng(8)
    for _ in range(25):
        codes = rng.integers(0, 5, size=(2, 4, 3))
        mask = rng.random((2, 4)) < 0.5
        mask[:, 0] = True                      # at least one masked position
        scrambled = codes.copy()
        noise = rng.integers(0, 5, size=codes.shape)
        scrambled[mask] = noise[mask]
        cond = rng.integers(0, 3, size=2)

        base_logits = model.logits(codes, mask, cond, teacher=codes).data
        scr_logits = model.logits(scrambled, mask, cond, teacher=codes).data
        assert (base_logits == scr_logits).all()

        base_loss = masked_nll(model, codes, mask, cond, targets=codes).data
        scr_loss = masked_nll(model, scrambled, mask, cond, targets=codes).data
        assert (base_loss == scr_loss).all()


def test_unmasked_positions_contribute_zero():
    model = make_model()
    rng = np.random.default_rng(9)
    codes = rng.integers(0, 5, size=(1, 4, 3))
    mask = np.array([[True, False, False, False]])
    cond = np.array([0])
    loss = masked_nll(model, codes, mask, cond)
    logits = model.logits(codes, mask, cond)
    # direct evaluation over the masked position only
    direct = 0.0
    for d in range(3):
        row = logits.data[0, 0, d]
        direct += math.log(np.exp(row - row.max()).sum()) + row.max() - row[codes[0, 0, d]]
    assert abs(float(loss.data) - direct / 3.0) < 1e-10


def test_masked_sequence_view():
    seq = MaskedCodeSequence(base=np.array([[1, 2], [3, 4]]), mask=np.array([True, False]))
    assert seq.n_masked == 1
    np.testing.assert_array_equal(seq.context_codes(), [[0, 0], [3, 4]])
    with pytest.raises(ValueError):
        MaskedCodeSequence(base=np.zeros((2, 2)), mask=np.zeros(3, dtype=bool))


def test_masked_nll_requires_masked_positions():
    model = make_model()
    codes = np.zeros((1, 4, 3), dtype=np.int64)
    with pytest.raises(ValueError):
        masked_nll(model, codes, np.zeros((1, 4), dtype=bool), np.array([0]))


def test_untrained_loss_near_log_k():
    model = make_model(seed=10)
    rng = np.random.default_rng(11)
    codes = rng.integers(0, 5, size=(8, 4, 3))
    mask = np.ones((8, 4), dtype=bool)
    loss = float(masked_nll(model, codes, mask, np.zeros(8, dtype=np.int64)).data)
    assert abs(loss - math.log(5)) < 0.05


def test_masked_nll_gradient_end_to_end():
    model = make_model(seed=12, seq_len=3, depth=2, codebook_size=4,
                       d_model=16, n_heads=2, n_spatial_blocks=1, n_depth_blocks=1, d_embed=4)
    rng = np.random.default_rng(13)
    codes = rng.integers(0, 4, size=(2, 3, 2))
    mask = np.array([[True, False, True], [False, True, True]])
    cond = np.array([0, NULL_CONDITION])

    params = model.named_parameters()
    probe = {name: params[name] for name in (
        "code_emb", "mask_emb", "pos_spatial", "pos_depth", "class_emb",
        "embed_proj.w", "spatial.block0.attn.wq.w", "spatial.block0.ff1.w",
        "depth.block0.attn.wv.w", "head.w", "head.b", "spatial.ln_out.gain",
    )}
    check_grads(lambda: masked_nll(model, codes, mask, cond), probe, rng, max_coords=4)


# ---------------------------------------------------------------------------
# mask distribution
# ---------------------------------------------------------------------------

def test_mask_count_examples():
    assert mask_count(0.0, 16) == 16            # fully masked at r = 0
    assert mask_count(0.999999, 16) == 1        # never an empty mask
    assert mask_count(0.5, 16) == 12            # ceil(16 cos(pi/4)) = ceil(11.31)
    with pytest.raises(ValueError):
        mask_count(1.0, 16)


def test_sampled_masks_match_schedule_pushforward():
    n = 16
    rng = np.random.default_rng(14)
    draws = 10_000
    sizes = np.zeros(draws, dtype=int)
    freq = np.zeros(n)
    for i in range(draws):
        m = sample_training_mask(n, rng)
        sizes[i] = m.sum()
        freq += m
    assert sizes.min() >= 1 and sizes.max() <= n
    # exact pushforward of ceil(cos(pi r / 2) n) under uniform r
    expected = np.array([
        (2 / math.pi) * (math.acos((s - 1) / n) - math.acos(s / n)) for s in range(1, n + 1)
    ])
    observed = np.bincount(sizes, minlength=n + 1)[1:]
    chi = scipy_stats.chisquare(observed, expected * draws)
    assert chi.pvalue > 0.01, f"mask-size law rejected, p={chi.pvalue:.4f}"
    # every position masked equally often
    chi_pos = scipy_stats.chisquare(freq, np.full(n, freq.sum() / n))
    assert chi_pos.pvalue > 0.01, f"position uniformity rejected, p={chi_pos.pvalue:.4f}"


def test_condition_dropout_limits():
    rng = np.random.default_rng(15)
    assert condition_dropout(3, 0.0, rng) == 3
    assert condition_dropout(3, 1.0, rng) == NULL_CONDITION
    with pytest.raises(ValueError):
        condition_dropout(3, 1.5, rng)


def test_condition_dropout_monte_carlo_rate():
    rng = np.random.default_rng(16)
    draws = condition_dropout(np.full(10_000, 2), 0.1, rng)
    rate = float((draws == NULL_CONDITION).mean())
    assert abs(rate - 0.1) < 0.01


def test_forward_is_deterministic():
    model = make_model(dtype=np.float32)
    rng = np.random.default_rng(17)
    codes = rng.integers(0, 5, size=(2, 4, 3))
    mask = rng.random((2, 4)) < 0.5
    cond = np.array([0, 1])
    a = model.logits(codes, mask, cond).data
    b = model.logits(codes, mask, cond).data
    assert (a == b).all()
