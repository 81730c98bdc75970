import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from regressformer.masking import (
    EmptyMask,
    FactorizationOrder,
    Layout,
    MaskPlan,
    NoPropertyBlock,
    build_attention_masks,
    sample_cgen_order,
    sample_mask_plan,
    sample_plm_order,
    sample_property_order,
    target_count,
)
from regressformer.tokenizer import PropertySpec, Vocabulary, encode_sequence


def brute_force_masks(z):
    T = len(z)
    idx = {}
    for rank, pos in enumerate(z):
        idx[pos] = rank
    content = [[idx[j] <= idx[i] for j in range(T)] for i in range(T)]
    query = [[idx[j] < idx[i] for j in range(T)] for i in range(T)]
    return np.array(content), np.array(query)


@pytest.fixture
def vocab():
    return Vocabulary.build([PropertySpec("qed", 1, 3), PropertySpec("b", 1, 1)], list("ABCD"))


def test_masks_match_oracle_for_all_small_permutations():
    checked = 0
    for T in range(1, 6):
        for z in itertools.permutations(range(T)):
            masks = build_attention_masks(FactorizationOrder(np.array(z), 0))
            content, query = brute_force_masks(z)
            assert np.array_equal(masks.content, content)
            assert np.array_equal(masks.query, query)
            assert not masks.query.diagonal().any() and masks.content.diagonal().all()
            assert np.all(masks.content | ~masks.query)
            checked += 1
    assert checked == 1 + 2 + 6 + 24 + 120 == 153


def test_masks_examples():
    masks = build_attention_masks(FactorizationOrder(np.arange(4), 0))
    assert np.array_equal(masks.content, np.tril(np.ones((4, 4), bool)))
    assert np.array_equal(masks.query, np.tril(np.ones((4, 4), bool), -1))
    # z = (3, 1, 2) in 1-based positions
    q = build_attention_masks(FactorizationOrder(np.array([2, 0, 1]), 0)).query
    assert q[0].tolist() == [False, False, True]
    assert q[1].tolist() == [True, False, True]
    assert q[2].tolist() == [False, False, False]


def test_order_validation():
    with pytest.raises(ValueError):
        FactorizationOrder(np.array([0, 0, 1]), 0)
    with pytest.raises(ValueError):
        FactorizationOrder(np.array([0, 1]), 2)


def test_plm_target_counts():
    rng = np.random.default_rng(0)
    assert len(sample_plm_order(4, 0.25, rng).targets) == 1
    assert len(sample_plm_order(10, 0.4, rng).targets) == 4
    assert target_count(5, 0.01) == 1
    with pytest.raises(ValueError):
        sample_plm_order(1, 0.5, rng)


def test_plm_positions_are_targets_uniformly():
    rng = np.random.default_rng(7)
    T, draws = 10, 10_000
    hits = np.zeros(T)
    for _ in range(draws):
        hits[sample_plm_order(T, 0.4, rng).targets] += 1
    p = 0.4
    sigma = np.sqrt(draws * p * (1 - p))
    assert np.all(np.abs(hits - draws * p) <= 3 * sigma)


def test_property_order_targets_numerals(vocab):
    rng = np.random.default_rng(0)
    seq = encode_sequence({"qed": 0.297}, ["A", "B", "C"], vocab)
    order = sample_property_order(seq, rng)
    assert order.targets.tolist() == [1, 2, 3, 4, 5]
    assert sorted(order.z[:3].tolist()) == [7, 8, 9]
    two = encode_sequence({"qed": 0.5, "b": 0.5}, ["A"], vocab)
    targets = sample_property_order(two, rng).targets.tolist()
    assert targets == two.numeral_positions()
    with pytest.raises(NoPropertyBlock):
        sample_property_order(encode_sequence({}, ["A", "B"], vocab), rng)


def test_cgen_order_examples(vocab):
    rng = np.random.default_rng(0)
    seq = encode_sequence({"b": 0.5}, list("ABCD"), vocab)  # <b> 0_0 . 5_-1 | = 5 tokens
    seq3 = type(seq)(seq.prop_tokens[:2] + seq.prop_tokens[-1:], seq.text_tokens)
    order = sample_cgen_order(Layout.of(seq3), MaskPlan(np.array([0, 1, 1, 0], np.int8)), rng)
    assert order.c == 5
    assert order.targets.tolist() == [4, 5]
    full = sample_cgen_order(seq, MaskPlan(np.ones(4, np.int8)), rng)
    assert full.c == seq.k
    with pytest.raises(EmptyMask):
        sample_cgen_order(seq, MaskPlan(np.zeros(4, np.int8)), rng)


def test_objective_targets_stay_in_their_region(vocab):
    rng = np.random.default_rng(3)
    seq = encode_sequence({"qed": 0.123, "b": 0.4}, list("ABCDABCDAB"), vocab)
    lay = Layout.of(seq)
    text = set(lay.text.tolist())
    for _ in range(10_000):
        prop = sample_property_order(lay, rng)
        assert not text & set(prop.targets.tolist())
        plan = sample_mask_plan(lay.l, 0.4, 3, rng)
        cgen = sample_cgen_order(lay, plan, rng)
        assert set(cgen.targets.tolist()) <= text
        assert np.all(np.diff(cgen.targets) > 0)


def test_mask_plan_examples():
    rng = np.random.default_rng(0)
    assert sample_mask_plan(9, 1.0, 3, rng).m.all()
    plan = sample_mask_plan(20, 0.4, 7, rng)
    assert plan.m.sum() == 8 and plan.longest_run() <= 7


def test_mask_plan_budget_over_many_draws():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        plan = sample_mask_plan(20, 0.4, 7, rng)
        assert abs(int(plan.m.sum()) - 8) <= 1
        assert plan.longest_run() <= 7


@given(
    st.integers(1, 40),
    st.floats(0.05, 0.95),
    st.integers(1, 8),
    st.integers(0, 2**32 - 1),
)
def test_mask_plan_respects_max_span(l, f, max_span, seed):
    plan = sample_mask_plan(l, f, max_span, np.random.default_rng(seed))
    budget = min(l, max(1, int(np.floor(f * l + 0.5))))
    assert plan.m.sum() >= 1
    if budget < l:
        assert plan.longest_run() <= max_span
        assert plan.m.sum() <= budget
