"""Finite-difference verification suite for every backward rule.

Each named case draws random instances of one differentiable operation,
wraps it as a scalar function of a flat parameter vector, and compares
the analytic gradient against central differences. Operations with
frozen selections (Max, the NL critical region) resample until the
selection has enough margin that the probe steps cannot flip it; the
kink would otherwise make the numeric gradient meaningless.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Var, finite_difference_check
from .aggregators import (
    GlobalAggregatorSpec,
    LocalAggregatorSpec,
    SentenceAggregatorSpec,
    aggregate_global,
    aggregate_local,
    aggregate_sentences,
    bind_global_spec,
)
from .encoders import EncoderParams, ModelConfig, encode_bag, flatten_params, \
    init_model, unflatten_params
from .numeric import cosine_similarity, linear_transform, stable_logsumexp, \
    stable_softmax
from .objective import Temperature, combined_loss, infonce
from .scoring import ScoreFunctionConfig, ScoreVector, score_matrix

_MAX_DRAWS = 200
_COSINE_CEILING = 0.99   # keep clamps inactive around probe points
_SELECTION_MARGIN = 1e-3  # top-2 gap shielding frozen argmax selections


def _draw(rng, build, accept):
    for _ in range(_MAX_DRAWS):
        candidate = build(rng)
        if accept(candidate):
            return candidate
    raise ContractError("could not draw an instance satisfying the "
                        "margin constraints")


def _split(leaf: Var, sizes):
    parts = []
    offset = 0
    for size in sizes:
        parts.append(leaf[offset:offset + size])
        offset += size
    return parts


def _case_cosine(rng):
    dim = int(rng.integers(3, 7))

    def build(r):
        return np.concatenate([r.normal(0.0, 1.0, dim),
                               r.normal(0.0, 1.0, dim)])

    def accept(point):
        x, y = point[:dim], point[dim:]
        nx, ny = np.linalg.norm(x), np.linalg.norm(y)
        if min(nx, ny) < 0.5:
            return False
        return abs(float(x @ y) / (nx * ny)) < _COSINE_CEILING

    point = _draw(rng, build, accept)

    def f(leaf):
        x, y = _split(leaf, [dim, dim])
        return cosine_similarity(x, y)

    return f, point


def _case_logsumexp(rng):
    n = int(rng.integers(2, 9))
    gamma = float(rng.choice([0.1, 1.0, 2.5]))
    point = rng.normal(0.0, 1.0, n)
    return (lambda leaf: stable_logsumexp(leaf, gamma)), point


def as_constant(array) -> Var:
    return Var(np.asarray(array, dtype=np.float64))


def _case_softmax(rng):
    n = int(rng.integers(2, 9))
    gamma = float(rng.choice([0.5, 1.0, 3.0]))
    mix = rng.normal(0.0, 1.0, n)
    point = rng.normal(0.0, 1.0, n)

    def f(leaf):
        return ad.matmul(stable_softmax(leaf, gamma), as_constant(mix))

    return f, point


def _case_linear(rng):
    rows = int(rng.integers(2, 5))
    cols = int(rng.integers(2, 5))
    mix = rng.normal(0.0, 1.0, rows)
    point = rng.normal(0.0, 1.0, rows * cols + rows + cols)

    def f(leaf):
        w_flat, b, x = _split(leaf, [rows * cols, rows, cols])
        w = ad.reshape(w_flat, (rows, cols))
        return ad.matmul(linear_transform(w, x, b), as_constant(mix))

    return f, point


def _case_encode(rng):
    d_in, hidden, d_out, count = 3, 4, 3, 2
    sizes = [hidden * d_in, hidden, d_out * hidden, d_out, count * d_in]
    point = rng.normal(0.0, 0.6, sum(sizes))
    mix = rng.normal(0.0, 1.0, (count, d_out))

    def f(leaf):
        w1, b1, w2, b2, obs = _split(leaf, sizes)
        params = EncoderParams(
            W1=ad.reshape(w1, (hidden, d_in)),
            b1=b1,
            W2=ad.reshape(w2, (d_out, hidden)),
            b2=b2,
        )
        out = encode_bag(params, ad.reshape(obs, (count, d_in)))
        return ad.vsum(ad.mul(out, as_constant(mix)), axis=None)

    return f, point


def _scores_in_range(rng, n):
    return rng.uniform(-0.95, 0.95, n)


def _local_case(kind, **kwargs):
    def case(rng):
        n = int(rng.integers(2, 9))
        spec = LocalAggregatorSpec(kind=kind, **kwargs)
        if kind == "Max":
            def accept(v):
                top = np.sort(v)[-2:]
                return top[1] - top[0] >= _SELECTION_MARGIN
            point = _draw(rng, lambda r: _scores_in_range(r, n), accept)
        else:
            point = _scores_in_range(rng, n)
        return (lambda leaf: aggregate_local(spec, leaf)), point

    return case


def _sentence_case(kind, **kwargs):
    def case(rng):
        n = 1 if kind == "Id" else int(rng.integers(2, 7))
        spec = SentenceAggregatorSpec(kind=kind, **kwargs)
        if kind == "Max":
            def accept(v):
                top = np.sort(v)[-2:]
                return top[1] - top[0] >= _SELECTION_MARGIN
            point = _draw(rng, lambda r: _scores_in_range(r, n), accept)
        else:
            point = _scores_in_range(rng, n)
        return (lambda leaf: aggregate_sentences(spec, leaf)), point

    return case


def _bag_and_sentence(rng, n, dim):
    return np.concatenate([rng.normal(0.0, 1.0, n * dim),
                           rng.normal(0.0, 1.0, dim)])


def _bag_cosines(point, n, dim):
    bag = point[:n * dim].reshape(n, dim)
    sent = point[n * dim:]
    norms = np.linalg.norm(bag, axis=1) * np.linalg.norm(sent)
    return bag @ sent / np.maximum(norms, 1e-12)


def _accept_bag(point, n, dim, need_margin):
    bag = point[:n * dim].reshape(n, dim)
    sent = point[n * dim:]
    if min(np.linalg.norm(bag, axis=1).min(), np.linalg.norm(sent)) < 0.5:
        return False
    cosines = _bag_cosines(point, n, dim)
    if np.abs(cosines).max() >= _COSINE_CEILING:
        return False
    if need_margin:
        top = np.sort(cosines)[-2:]
        if top[1] - top[0] < _SELECTION_MARGIN:
            return False
    return True


def _global_case(kind):
    def case(rng):
        n = int(rng.integers(2, 5))
        dim = int(rng.integers(3, 5))
        sizes = {"Att": dim * dim + dim, "NL": dim * dim}.get(kind, 0)
        base = _draw(rng, lambda r: _bag_and_sentence(r, n, dim),
                     lambda p: _accept_bag(p, n, dim, kind == "NL"))
        extra = rng.normal(0.0, 0.5, sizes)
        if kind == "NL":
            extra = (np.eye(dim) + 0.1 * rng.normal(0.0, 1.0, (dim, dim))).ravel()
        point = np.concatenate([base, extra]) if sizes else base

        def f(leaf):
            bag = ad.reshape(leaf[:n * dim], (n, dim))
            sent = leaf[n * dim:n * dim + dim]
            spec = GlobalAggregatorSpec(
                kind=kind, gamma=math.e if kind == "NL" else None)
            kwargs = {}
            if kind == "Att":
                proj_flat, vec = _split(leaf[n * dim + dim:], [dim * dim, dim])
                spec = bind_global_spec(spec,
                                        att_proj=ad.reshape(proj_flat, (dim, dim)),
                                        att_vec=vec)
            elif kind == "NL":
                amat = ad.reshape(leaf[n * dim + dim:], (dim, dim))
                spec = bind_global_spec(spec, sim_map=amat)
                table = score_matrix(bag, ad.reshape(sent, (1, dim)))
                kwargs["region_scores"] = ad.reshape(table, (n,))
            elif kind == "CA":
                kwargs["condition"] = sent
            pooled = aggregate_global(spec, bag, **kwargs)
            return cosine_similarity(pooled, sent)

        return f, point

    return case


def _case_infonce(rng):
    k = int(rng.integers(1, 6))
    scores = rng.uniform(-0.9, 0.9, 1 + k)
    log_gamma = math.log(rng.uniform(1.0, 5.0))
    point = np.concatenate([scores, [log_gamma]])

    def f(leaf):
        pos = leaf[0]
        negs = leaf[1:1 + k]
        temp = Temperature(log_gamma=leaf[1 + k])
        return infonce(ScoreVector(positive=pos, negatives=negs), temp)

    return f, point


_E2E_CONFIG = ModelConfig(region_input_dim=3, sentence_input_dim=3,
                          hidden_dim=4, embed_dim=4, use_nl=True)
_E2E_REGIONS = 3
_E2E_SENTENCES = 2
_E2E_NEGATIVES = 2


def _e2e_margins_ok(point, obs_sets):
    params = unflatten_params(_E2E_CONFIG, np.asarray(point))
    sent_feats = encode_bag(params.sentence_encoder, obs_sets["document"]).value
    for key in ("matched", "mismatched_0", "mismatched_1"):
        feats = encode_bag(params.region_encoder, obs_sets[key]).value
        norms = np.linalg.norm(feats, axis=1)[:, None] \
            * np.linalg.norm(sent_feats, axis=1)[None, :]
        if norms.min() < 1e-3:
            return False
        cosines = feats @ sent_feats.T / np.maximum(norms, 1e-12)
        if np.abs(cosines).max() >= _COSINE_CEILING:
            return False
        gaps = np.sort(cosines, axis=0)
        if (gaps[-1] - gaps[-2]).min() < _SELECTION_MARGIN:
            return False
    return True


def _case_combined_loss(rng):
    params = init_model(_E2E_CONFIG, gamma_init=float(rng.uniform(1.0, 5.0)),
                        seed=int(rng.integers(0, 2 ** 31)))
    flat = flatten_params(_E2E_CONFIG, params)
    point = flat + rng.normal(0.0, 0.05, flat.shape)

    def build(r):
        return {
            "document": r.normal(0.0, 1.0, (_E2E_SENTENCES, 3)),
            "matched": r.normal(0.0, 1.0, (_E2E_REGIONS, 3)),
            "mismatched_0": r.normal(0.0, 1.0, (_E2E_REGIONS, 3)),
            "mismatched_1": r.normal(0.0, 1.0, (_E2E_REGIONS, 3)),
        }

    obs = _draw(rng, build, lambda o: _e2e_margins_ok(point, o))

    def f(leaf):
        model = unflatten_params(_E2E_CONFIG, leaf)
        doc = encode_bag(model.sentence_encoder, obs["document"])
        matched = encode_bag(model.region_encoder, obs["matched"])
        mism = [encode_bag(model.region_encoder, obs["mismatched_0"]),
                encode_bag(model.region_encoder, obs["mismatched_1"])]
        local_config = ScoreFunctionConfig(
            mode="local", local_agg=LocalAggregatorSpec(kind="LSE", gamma=0.1))
        global_config = ScoreFunctionConfig(
            mode="global",
            global_agg=bind_global_spec(
                GlobalAggregatorSpec(kind="NL", gamma=math.e),
                sim_map=model.sim_map))
        return combined_loss(local_config, global_config, doc, matched, mism,
                             Temperature(log_gamma=model.log_gamma))

    return f, point


@dataclass(eq=False)
class CheckResult:
    name: str
    instances: int
    max_relative_error: float
    passed: bool


SUITE = [
    ("cosine_similarity", _case_cosine),
    ("stable_logsumexp", _case_logsumexp),
    ("stable_softmax", _case_softmax),
    ("linear_transform", _case_linear),
    ("encode_bag", _case_encode),
    ("local_Max", _local_case("Max")),
    ("local_Sum", _local_case("Sum")),
    ("local_Avg", _local_case("Avg")),
    ("local_LSE", _local_case("LSE", gamma=0.1)),
    ("local_NOR", _local_case("NOR")),
    ("local_NAND", _local_case("NAND")),
    ("sentence_Avg", _sentence_case("Avg")),
    ("sentence_Sum", _sentence_case("Sum")),
    ("sentence_Max", _sentence_case("Max")),
    ("sentence_LSE", _sentence_case("LSE", gamma=2.0)),
    ("sentence_Id", _sentence_case("Id")),
    ("global_Avg", _global_case("Avg")),
    ("global_Att", _global_case("Att")),
    ("global_NL", _global_case("NL")),
    ("global_CA", _global_case("CA")),
    ("infonce", _case_infonce),
    ("combined_loss_end_to_end", _case_combined_loss),
]


def run_suite(step: float = 1e-5, tolerance: float = 1e-4,
              instances: int = 20, seed: int = 0) -> list:
    """Run every case; returns one CheckResult per operation."""
    if instances < 1:
        raise ContractError("gradient check needs at least one instance")
    results = []
    for index, (name, case) in enumerate(SUITE):
        rng = np.random.default_rng([seed, index])
        worst = 0.0
        ok = True
        for _ in range(instances):
            f, point = case(rng)
            report = finite_difference_check(f, point, step=step,
                                             tolerance=tolerance)
            worst = max(worst, report.max_relative_error)
            ok = ok and report.passed
        results.append(CheckResult(name=name, instances=instances,
                                   max_relative_error=worst, passed=ok))
    return results


def suite_passed(results) -> bool:
    return all(r.passed for r in results)
