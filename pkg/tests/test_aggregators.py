"""Aggregator semantics: frozen small-case values, bounds, permutation
invariance, and the frozen-selection rule of the nonlocal pooler."""

import math

import numpy as np
import pytest

import milalign.autodiff as ad
from milalign.autodiff import ContractError, Var
from milalign.aggregators import (
    GLOBAL_KINDS,
    LOCAL_KINDS,
    SENTENCE_KINDS,
    GlobalAggregatorSpec,
    LocalAggregatorSpec,
    SentenceAggregatorSpec,
    aggregate_global,
    aggregate_local,
    aggregate_local_axis,
    aggregate_sentences,
    bind_global_spec,
    global_spec_from_dict,
    local_spec_from_dict,
    sentence_spec_from_dict,
    spec_to_dict,
)


def lse(scores, gamma):
    return float(np.log(np.sum(np.exp(gamma * np.asarray(scores)))) / gamma)


def test_local_kind_validation():
    with pytest.raises(ContractError):
        LocalAggregatorSpec(kind="Mean")
    with pytest.raises(ContractError):
        LocalAggregatorSpec(kind="LSE")           # gamma missing
    with pytest.raises(ContractError):
        LocalAggregatorSpec(kind="LSE", gamma=0.0)
    with pytest.raises(ContractError):
        LocalAggregatorSpec(kind="NAND", nand_slope=-1.0)
    with pytest.raises(ContractError):
        GlobalAggregatorSpec(kind="Pool")
    with pytest.raises(ContractError):
        SentenceAggregatorSpec(kind="LSE")


def test_local_max_sum_avg():
    scores = np.asarray([0.2, -0.4, 0.9])
    assert aggregate_local(LocalAggregatorSpec(kind="Max"), scores).value == 0.9
    assert abs(aggregate_local(LocalAggregatorSpec(kind="Sum"), scores).value
               - 0.7) < 1e-15
    assert abs(aggregate_local(LocalAggregatorSpec(kind="Avg"), scores).value
               - 0.7 / 3) < 1e-15


def test_local_lse_frozen_values():
    spec1 = LocalAggregatorSpec(kind="LSE", gamma=1.0)
    out = aggregate_local(spec1, np.asarray([1.0, 0.0]))
    assert abs(out.value - 1.3132616875182228) < 1e-15
    spec01 = LocalAggregatorSpec(kind="LSE", gamma=0.1)
    out = aggregate_local(spec01, np.asarray([1.0, 0.0]))
    assert abs(out.value - 7.44396660073571) < 1e-12


def test_local_lse_bounds_random_sets():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(1, 9))
        scores = rng.uniform(-1.0, 1.0, size=n)
        gamma = float(rng.choice([0.1, 1.0, 5.0]))
        out = aggregate_local(LocalAggregatorSpec(kind="LSE", gamma=gamma),
                              scores).value
        top = scores.max()
        assert out >= top - 1e-12
        assert out <= top + math.log(n) / gamma + 1e-12


def test_local_lse_approaches_max_at_large_gamma():
    rng = np.random.default_rng(1)
    spec = LocalAggregatorSpec(kind="LSE", gamma=1000.0)
    for _ in range(50):
        scores = rng.uniform(-1.0, 1.0, size=6)
        out = aggregate_local(spec, scores).value
        assert abs(out - scores.max()) <= math.log(6) / 1000.0 + 1e-12


def test_local_nor_absorbing_and_neutral():
    spec = LocalAggregatorSpec(kind="NOR")
    # a certain instance (score 1) forces the bag to 1 regardless of the rest
    assert aggregate_local(spec, np.asarray([1.0, 0.0])).value == 1.0
    assert aggregate_local(spec, np.asarray([1.0, -1.0, 0.3])).value == 1.0
    # two half-probability instances: 1 - 2 * 0.5 * 0.5
    assert abs(aggregate_local(spec, np.asarray([0.0, 0.0])).value - 0.5) < 1e-15
    # p = 0.75 and 0.25: 1 - 2 * 0.25 * 0.75 = 0.625
    assert abs(aggregate_local(spec, np.asarray([0.5, -0.5])).value
               - 0.625) < 1e-15
    # all-background bag stays at the lower end
    assert aggregate_local(spec, np.asarray([-1.0, -1.0])).value == -1.0


def test_local_nor_matches_product_formula():
    rng = np.random.default_rng(3)
    spec = LocalAggregatorSpec(kind="NOR")
    for _ in range(50):
        scores = rng.uniform(-1.0, 1.0, size=int(rng.integers(1, 7)))
        p = (scores + 1.0) / 2.0
        want = 1.0 - 2.0 * np.prod(1.0 - p)
        assert abs(aggregate_local(spec, scores).value - want) < 1e-12


def test_local_nand_endpoints_and_midpoint():
    spec = LocalAggregatorSpec(kind="NAND")
    assert abs(aggregate_local(spec, np.asarray([1.0, 1.0])).value - 1.0) < 1e-15
    assert abs(aggregate_local(spec, np.asarray([-1.0, -1.0])).value
               + 1.0) < 1e-15
    # mean probability 0.5 sits exactly at the sigmoid center
    assert abs(aggregate_local(spec, np.asarray([0.0, 0.0])).value) < 1e-15
    assert abs(aggregate_local(spec, np.asarray([1.0, -1.0])).value) < 1e-15


def test_local_nand_is_monotone_in_mean_score():
    spec = LocalAggregatorSpec(kind="NAND")
    grid = np.linspace(-1.0, 1.0, 21)
    outs = [aggregate_local(spec, np.asarray([g, g])).value for g in grid]
    assert all(b > a for a, b in zip(outs, outs[1:]))


def test_local_aggregators_permutation_invariant():
    rng = np.random.default_rng(7)
    specs = [
        LocalAggregatorSpec(kind="Max"),
        LocalAggregatorSpec(kind="Sum"),
        LocalAggregatorSpec(kind="Avg"),
        LocalAggregatorSpec(kind="LSE", gamma=0.1),
        LocalAggregatorSpec(kind="NOR"),
        LocalAggregatorSpec(kind="NAND"),
    ]
    for _ in range(50):
        scores = rng.uniform(-1.0, 1.0, size=int(rng.integers(2, 9)))
        perm = rng.permutation(scores.size)
        for spec in specs:
            a = aggregate_local(spec, scores).value
            b = aggregate_local(spec, scores[perm]).value
            assert abs(a - b) <= 1e-10


def test_local_rejects_out_of_range_scores():
    with pytest.raises(ContractError):
        aggregate_local(LocalAggregatorSpec(kind="Avg"), np.asarray([1.5]))
    with pytest.raises(ContractError):
        aggregate_local(LocalAggregatorSpec(kind="Avg"), np.asarray([]))


def test_local_axis_matches_columnwise_loop():
    rng = np.random.default_rng(8)
    sm = rng.uniform(-1.0, 1.0, size=(5, 3))
    for spec in [LocalAggregatorSpec(kind="LSE", gamma=0.1),
                 LocalAggregatorSpec(kind="NOR")]:
        cols = aggregate_local_axis(spec, sm, axis=0).value
        for j in range(3):
            want = aggregate_local(spec, sm[:, j]).value
            assert abs(cols[j] - want) < 1e-12


def test_sentence_aggregators():
    s = np.asarray([0.1, 0.5, -0.2])
    assert abs(aggregate_sentences(SentenceAggregatorSpec(kind="Avg"), s).value
               - s.mean()) < 1e-15
    assert abs(aggregate_sentences(SentenceAggregatorSpec(kind="Sum"), s).value
               - s.sum()) < 1e-15
    assert aggregate_sentences(SentenceAggregatorSpec(kind="Max"), s).value == 0.5
    got = aggregate_sentences(SentenceAggregatorSpec(kind="LSE", gamma=2.0), s)
    assert abs(got.value - lse(s, 2.0)) < 1e-12
    assert aggregate_sentences(SentenceAggregatorSpec(kind="Id"),
                               np.asarray([0.3])).value == 0.3
    with pytest.raises(ContractError):
        aggregate_sentences(SentenceAggregatorSpec(kind="Id"), s)


def test_global_avg_is_row_mean():
    rng = np.random.default_rng(10)
    bag = rng.standard_normal((6, 4))
    out = aggregate_global(GlobalAggregatorSpec(kind="Avg"), bag)
    assert np.allclose(out.value, bag.mean(axis=0), atol=1e-14)


def test_global_att_matches_naive_softmax_pool():
    rng = np.random.default_rng(11)
    bag = rng.standard_normal((5, 4))
    proj = rng.standard_normal((3, 4))
    vec = rng.standard_normal(3)
    spec = bind_global_spec(GlobalAggregatorSpec(kind="Att"),
                            att_proj=proj, att_vec=vec)
    out = aggregate_global(spec, bag)
    logits = np.tanh(bag @ proj.T) @ vec
    w = np.exp(logits - logits.max())
    w = w / w.sum()
    assert np.allclose(out.value, w @ bag, atol=1e-12)


def test_global_att_requires_parameters():
    with pytest.raises(ContractError):
        aggregate_global(GlobalAggregatorSpec(kind="Att"), np.ones((2, 3)))


def test_global_nl_weights_follow_similarity_to_critical_region():
    rng = np.random.default_rng(12)
    bag = rng.standard_normal((6, 4))
    scores = rng.uniform(-1.0, 1.0, size=6)
    amat = np.eye(4) + 0.01 * rng.standard_normal((4, 4))
    spec = bind_global_spec(
        GlobalAggregatorSpec(kind="NL", gamma=math.e), sim_map=amat)
    out = aggregate_global(spec, bag, region_scores=scores)
    k = int(np.argmax(scores))
    mapped = bag @ amat.T
    sims = mapped @ mapped[k]
    w = np.exp(math.e * (sims - sims.max()))
    w = w / w.sum()
    assert np.allclose(out.value, w @ bag, atol=1e-12)


def test_global_nl_selection_is_frozen():
    # perturbing the top score moves nothing through the argmax itself:
    # the gradient with respect to region_scores is exactly zero
    rng = np.random.default_rng(13)
    bag = Var(rng.standard_normal((4, 3)))
    scores = Var(np.asarray([0.1, 0.9, -0.2, 0.3]))
    spec = bind_global_spec(
        GlobalAggregatorSpec(kind="NL", gamma=1.0), sim_map=np.eye(3))
    pooled = aggregate_global(spec, bag, region_scores=scores)
    ad.vsum(pooled).backward()
    assert scores.grad is None or np.allclose(scores.grad, 0.0)


def test_global_nl_requires_scores_and_map():
    spec = GlobalAggregatorSpec(kind="NL", gamma=1.0)
    with pytest.raises(ContractError):
        aggregate_global(spec, np.ones((2, 3)), region_scores=np.ones(2))
    bound = bind_global_spec(spec, sim_map=np.eye(3))
    with pytest.raises(ContractError):
        aggregate_global(bound, np.ones((2, 3)))


def test_global_ca_weights_by_cosine_to_condition():
    rng = np.random.default_rng(14)
    bag = rng.standard_normal((5, 4))
    cond = rng.standard_normal(4)
    spec = GlobalAggregatorSpec(kind="CA")
    out = aggregate_global(spec, bag, condition=cond)
    u = bag / np.linalg.norm(bag, axis=1, keepdims=True)
    logits = u @ (cond / np.linalg.norm(cond))
    w = np.exp(logits - logits.max())
    w = w / w.sum()
    assert np.allclose(out.value, w @ bag, atol=1e-12)


def test_global_ca_condition_scale_invariant():
    rng = np.random.default_rng(15)
    bag = rng.standard_normal((5, 4))
    cond = rng.standard_normal(4)
    spec = GlobalAggregatorSpec(kind="CA")
    a = aggregate_global(spec, bag, condition=cond).value
    b = aggregate_global(spec, bag, condition=100.0 * cond).value
    assert np.allclose(a, b, atol=1e-12)


def test_global_aggregators_permutation_invariant():
    rng = np.random.default_rng(16)
    for _ in range(30):
        n = int(rng.integers(2, 7))
        bag = rng.standard_normal((n, 4))
        cond = rng.standard_normal(4)
        scores = rng.uniform(-1.0, 1.0, size=n)
        # keep the argmax unique so the frozen selection is stable
        scores[int(rng.integers(0, n))] = 0.999
        perm = rng.permutation(n)
        amat = np.eye(4) + 0.01 * rng.standard_normal((4, 4))
        proj = rng.standard_normal((4, 4))
        vec = rng.standard_normal(4)
        specs = [
            GlobalAggregatorSpec(kind="Avg"),
            bind_global_spec(GlobalAggregatorSpec(kind="Att"),
                             att_proj=proj, att_vec=vec),
            bind_global_spec(GlobalAggregatorSpec(kind="NL", gamma=2.0),
                             sim_map=amat),
            GlobalAggregatorSpec(kind="CA"),
        ]
        for spec in specs:
            a = aggregate_global(spec, bag, condition=cond,
                                 region_scores=scores).value
            b = aggregate_global(spec, bag[perm], condition=cond,
                                 region_scores=scores[perm]).value
            assert np.max(np.abs(a - b)) <= 1e-10


def test_spec_dict_roundtrip():
    local = LocalAggregatorSpec(kind="LSE", gamma=0.1)
    assert local_spec_from_dict(spec_to_dict(local)) == local
    nand = LocalAggregatorSpec(kind="NAND", nand_slope=5.0, nand_offset=0.25)
    assert local_spec_from_dict(spec_to_dict(nand)) == nand
    glob = GlobalAggregatorSpec(kind="NL", gamma=math.e)
    back = global_spec_from_dict(spec_to_dict(glob))
    assert back.kind == "NL" and back.gamma == math.e
    sent = SentenceAggregatorSpec(kind="LSE", gamma=2.0)
    assert sentence_spec_from_dict(spec_to_dict(sent)) == sent
    assert spec_to_dict(None) is None
    assert local_spec_from_dict(None) is None
    assert sentence_spec_from_dict(None) == SentenceAggregatorSpec(kind="Avg")


def test_kind_tables_are_frozen():
    assert LOCAL_KINDS == ("Max", "Sum", "Avg", "LSE", "NOR", "NAND")
    assert GLOBAL_KINDS == ("Avg", "Att", "NL", "CA")
    assert SENTENCE_KINDS == ("Avg", "Sum", "Max", "LSE", "Id")
