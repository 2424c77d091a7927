import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from msp_dst.heads import (
    predict_categorical,
    predict_hit_type,
    predict_span,
    select_mentioned,
)
from msp_dst.msp import MentionedSlotPool, PoolEntry


def _pool(reps, K=4):
    entries, mask = [], []
    for i, rep in enumerate(reps):
        entries.append(PoolEntry(f"s{i}", f"v{i}", i + 1,
                                 torch.tensor(rep, dtype=torch.float32)))
        mask.append(True)
    while len(entries) < K:
        entries.append(PoolEntry("", "", 0))
        mask.append(False)
    return MentionedSlotPool(entries=entries, mask=mask, K=K)


# ---------------------------------------------------------------------------
# hit type
# ---------------------------------------------------------------------------

def test_zero_parameters_give_uniform_type_distribution():
    p = predict_hit_type(torch.zeros(4), torch.zeros(4),
                         torch.zeros(4, 4), torch.zeros(4))
    assert torch.allclose(p, torch.full((4,), 0.25))


def test_large_bias_dominates():
    p = predict_hit_type(torch.zeros(4), torch.zeros(4), torch.zeros(4, 4),
                         torch.tensor([0.0, 0.0, 0.0, 10.0]))
    # e^10 / (e^10 + 3) = 0.9998638...
    assert abs(float(p[3]) - math.exp(10) / (math.exp(10) + 3)) < 1e-6
    assert float(p[3]) > 0.999
    # class order is (none, dontcare, mentioned, hit)
    assert p.argmax() == 3


@settings(max_examples=50)
@given(st.integers(min_value=0, max_value=1000))
def test_type_distribution_sums_to_one(seed):
    gen = torch.Generator().manual_seed(seed)
    p = predict_hit_type(torch.randn(6, generator=gen, dtype=torch.float64),
                         torch.randn(6, generator=gen, dtype=torch.float64),
                         torch.randn(4, 6, generator=gen, dtype=torch.float64),
                         torch.randn(4, generator=gen, dtype=torch.float64))
    assert abs(float(p.sum()) - 1.0) < 1e-9
    assert (p >= 0).all()


def test_type_shift_invariance():
    gen = torch.Generator().manual_seed(3)
    m, r = torch.randn(5, generator=gen), torch.randn(5, generator=gen)
    W = torch.randn(4, 5, generator=gen)
    b = torch.randn(4, generator=gen)
    base = predict_hit_type(m, r, W, b)
    shifted = predict_hit_type(m, r, W, b + 7.0)
    assert torch.allclose(base, shifted, atol=1e-9)
    assert base.argmax() == shifted.argmax()


def test_type_dimension_mismatch():
    with pytest.raises(ValueError):
        predict_hit_type(torch.zeros(3), torch.zeros(4),
                         torch.zeros(4, 4), torch.zeros(4))


# ---------------------------------------------------------------------------
# mentioned value selection
# ---------------------------------------------------------------------------

def test_selection_two_way_scores():
    # scores (2, 0) over two real entries: softmax gives (0.8808, 0.1192)
    pool = _pool([[1.0, 0.0], [0.0, 1.0]])
    r_cls = torch.tensor([1.0, 1.0])
    W = torch.tensor([[2.0, 0.0], [0.0, 0.0]])
    probs, index = select_mentioned(r_cls, pool, W)
    e2 = math.exp(2)
    expect = torch.tensor([e2 / (e2 + 1), 1 / (e2 + 1), 0.0, 0.0])
    assert torch.allclose(probs, expect, atol=1e-4)
    assert index == 0


def test_padded_entries_probability_exactly_zero():
    pool = _pool([[1.0, 0.0]])
    probs, index = select_mentioned(torch.ones(2), pool, torch.eye(2))
    assert float(probs[0]) == 1.0
    assert probs[1:].tolist() == [0.0, 0.0, 0.0]
    assert index == 0


def test_equal_scores_select_lowest_index():
    pool = _pool([[1.0, 0.0], [1.0, 0.0]])
    probs, index = select_mentioned(torch.ones(2), pool, torch.eye(2))
    assert index == 0
    assert abs(float(probs[0] - probs[1])) < 1e-9


def test_all_masked_pool_yields_no_selection():
    pool = MentionedSlotPool(entries=[PoolEntry("", "", 0)] * 4,
                             mask=[False] * 4, K=4)
    probs, index = select_mentioned(torch.ones(2), pool, torch.eye(2))
    assert index is None
    assert torch.equal(probs, torch.zeros(4))


# ---------------------------------------------------------------------------
# categorical value
# ---------------------------------------------------------------------------

def test_categorical_zero_parameters_uniform_first_value():
    ontology = ("yes", "no")
    probs, value = predict_categorical(torch.zeros(3), torch.zeros(3),
                                       torch.zeros(2, 3), torch.zeros(2), ontology)
    assert torch.allclose(probs, torch.tensor([0.5, 0.5]))
    assert value == "yes"


def test_categorical_peaked_logits():
    # logits (3, 0, 0): probability of the first value is e^3/(e^3+2)
    ontology = ("a", "b", "c")
    probs, value = predict_categorical(
        torch.zeros(2), torch.zeros(2), torch.zeros(3, 2),
        torch.tensor([3.0, 0.0, 0.0]), ontology)
    expect = math.exp(3) / (math.exp(3) + 2)
    assert abs(float(probs[0]) - expect) < 1e-6
    assert abs(expect - 0.90944) < 2e-4
    assert value == "a"


@settings(max_examples=50)
@given(st.integers(min_value=0, max_value=1000))
def test_categorical_distribution_sums_to_one(seed):
    gen = torch.Generator().manual_seed(seed)
    probs, _ = predict_categorical(
        torch.randn(4, generator=gen, dtype=torch.float64),
        torch.randn(4, generator=gen, dtype=torch.float64),
        torch.randn(5, 4, generator=gen, dtype=torch.float64),
        torch.randn(5, generator=gen, dtype=torch.float64),
        ("a", "b", "c", "d", "e"))
    assert abs(float(probs.sum()) - 1.0) < 1e-9


def test_categorical_ontology_shape_mismatch():
    with pytest.raises(ValueError):
        predict_categorical(torch.zeros(2), torch.zeros(2),
                            torch.zeros(3, 2), torch.zeros(3), ("a", "b"))


# ---------------------------------------------------------------------------
# span extraction
# ---------------------------------------------------------------------------

def _span_inputs(n_tokens=10, dim=4, seed=0):
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(n_tokens, dim, generator=gen)


def test_span_peaked_at_six():
    tokens = torch.zeros(10, 2)
    tokens[6, 0] = 5.0
    tokens[6, 1] = 5.0
    weight = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    p_start, p_end, span = predict_span(tokens, weight, torch.zeros(2))
    assert span == (6, 6)
    assert p_start.argmax() == 6 and p_end.argmax() == 6


def test_span_start_after_end_is_none():
    tokens = torch.zeros(10, 2)
    tokens[9, 0] = 5.0  # start peak at 9
    tokens[4, 1] = 5.0  # end peak at 4
    weight = torch.eye(2)
    _, _, span = predict_span(tokens, weight, torch.zeros(2))
    assert span is None


def test_span_uniform_ties_to_zero():
    tokens = torch.zeros(8, 3)
    p_start, p_end, span = predict_span(tokens, torch.zeros(2, 3), torch.zeros(2))
    assert span == (0, 0)
    assert torch.allclose(p_start, torch.full((8,), 0.125))


def test_span_distributions_sum_to_one():
    gen = torch.Generator().manual_seed(4)
    tokens = torch.randn(10, 4, generator=gen, dtype=torch.float64)
    p_start, p_end, _ = predict_span(
        tokens, torch.randn(2, 4, generator=gen, dtype=torch.float64),
        torch.randn(2, generator=gen, dtype=torch.float64))
    assert abs(float(p_start.sum()) - 1.0) < 1e-9
    assert abs(float(p_end.sum()) - 1.0) < 1e-9


def test_span_none_iff_start_exceeds_end():
    for seed in range(25):
        tokens = _span_inputs(seed=seed)
        gen = torch.Generator().manual_seed(seed + 100)
        p_start, p_end, span = predict_span(
            tokens, torch.randn(2, 4, generator=gen), torch.randn(2, generator=gen))
        start, end = int(p_start.argmax()), int(p_end.argmax())
        assert (span is None) == (start > end)


def test_span_requires_tokens():
    with pytest.raises(ValueError):
        predict_span(torch.zeros(0, 4), torch.zeros(2, 4), torch.zeros(2))
