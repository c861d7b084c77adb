"""Permutation-invariant aggregators over score sets and feature bags.

Local aggregators reduce the per-region scores of one sentence to a
scalar. Global aggregators pool a bag of region features into a single
vector, optionally conditioned on the sentence being scored. Sentence
aggregators reduce per-sentence scores to the document score. Every
aggregator treats its inputs as an unordered set: reordering the inputs
reorders nothing but the floating-point reassociation.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .autodiff import ContractError, Var, as_var

LOCAL_KINDS = ("Max", "Sum", "Avg", "LSE", "NOR", "NAND")
GLOBAL_KINDS = ("Avg", "Att", "NL", "CA")
SENTENCE_KINDS = ("Avg", "Sum", "Max", "LSE", "Id")

# Score range allowed at the local-aggregator boundary; NOR and NAND map
# scores through probabilities and rely on it. A little slack absorbs
# clamp-level rounding from upstream cosines.
_SCORE_SLACK = 1e-9


@dataclass(frozen=True)
class LocalAggregatorSpec:
    """How to reduce one sentence's region scores to a scalar."""

    kind: str
    gamma: float | None = None
    nand_slope: float = 10.0
    nand_offset: float = 0.5

    def __post_init__(self):
        if self.kind not in LOCAL_KINDS:
            raise ContractError(f"unknown local aggregator kind: {self.kind!r}")
        if self.kind == "LSE":
            if self.gamma is None or not np.isfinite(self.gamma) or self.gamma <= 0.0:
                raise ContractError("local LSE requires a positive finite gamma")
        if self.kind == "NAND":
            if not self.nand_slope > 0.0:
                raise ContractError("NAND slope must be positive")
            if not 0.0 <= self.nand_offset <= 1.0:
                raise ContractError("NAND offset must lie in [0, 1]")


@dataclass(frozen=True, eq=False)
class GlobalAggregatorSpec:
    """How to pool region features into one conditioning vector.

    `sim_map` (NL) and `att_proj`/`att_vec` (Att) hold the learned
    parameters; configs carry the spec unbound and the model binds its
    parameter values in before scoring.
    """

    kind: str
    gamma: float | None = None
    sim_map: object = None
    att_proj: object = None
    att_vec: object = None

    def __post_init__(self):
        if self.kind not in GLOBAL_KINDS:
            raise ContractError(f"unknown global aggregator kind: {self.kind!r}")
        if self.kind == "NL" and self.gamma is not None:
            if not np.isfinite(self.gamma) or self.gamma < 0.0:
                raise ContractError("NL gamma must be finite and >= 0")


@dataclass(frozen=True)
class SentenceAggregatorSpec:
    """How to reduce per-sentence scores to the document score."""

    kind: str
    gamma: float | None = None

    def __post_init__(self):
        if self.kind not in SENTENCE_KINDS:
            raise ContractError(f"unknown sentence aggregator kind: {self.kind!r}")
        if self.kind == "LSE":
            if self.gamma is None or not np.isfinite(self.gamma) or self.gamma <= 0.0:
                raise ContractError("sentence LSE requires a positive finite gamma")


def spec_to_dict(spec) -> dict | None:
    if spec is None:
        return None
    d = {"kind": spec.kind}
    if getattr(spec, "gamma", None) is not None:
        d["gamma"] = float(spec.gamma)
    if isinstance(spec, LocalAggregatorSpec) and spec.kind == "NAND":
        d["nand_slope"] = float(spec.nand_slope)
        d["nand_offset"] = float(spec.nand_offset)
    return d


def local_spec_from_dict(d: dict | None) -> LocalAggregatorSpec | None:
    if d is None:
        return None
    return LocalAggregatorSpec(
        kind=d["kind"],
        gamma=d.get("gamma"),
        nand_slope=d.get("nand_slope", 10.0),
        nand_offset=d.get("nand_offset", 0.5),
    )


def global_spec_from_dict(d: dict | None) -> GlobalAggregatorSpec | None:
    if d is None:
        return None
    return GlobalAggregatorSpec(kind=d["kind"], gamma=d.get("gamma"))


def sentence_spec_from_dict(d: dict | None) -> SentenceAggregatorSpec:
    if d is None:
        return SentenceAggregatorSpec(kind="Avg")
    return SentenceAggregatorSpec(kind=d["kind"], gamma=d.get("gamma"))


def bind_global_spec(spec: GlobalAggregatorSpec, sim_map=None, att_proj=None,
                     att_vec=None) -> GlobalAggregatorSpec:
    """Attach model parameter values to an unbound global spec."""
    return dataclasses.replace(
        spec, sim_map=sim_map, att_proj=att_proj, att_vec=att_vec
    )


def _local_core(spec: LocalAggregatorSpec, scores: Var, axis: int) -> Var:
    if spec.kind == "Max":
        return ad.vmax(scores, axis=axis)
    if spec.kind == "Sum":
        return ad.vsum(scores, axis=axis)
    if spec.kind == "Avg":
        return ad.vmean(scores, axis=axis)
    if spec.kind == "LSE":
        return ad.logsumexp(scores, spec.gamma, axis=axis)
    if spec.kind == "NOR":
        # noisy-or on p = (score+1)/2, mapped back to the score range;
        # the explicit product keeps a score of +1 absorbing exactly
        p = ad.mul(ad.add(scores, 1.0), 0.5)
        survive = ad.vprod(ad.sub(1.0, p), axis=axis)
        return ad.sub(1.0, ad.mul(survive, 2.0))
    if spec.kind == "NAND":
        a, b = spec.nand_slope, spec.nand_offset
        p = ad.mul(ad.add(scores, 1.0), 0.5)
        pbar = ad.vmean(p, axis=axis)
        lo = float(expit(-a * b))
        hi = float(expit(a * (1.0 - b)))
        q = ad.div(ad.sub(ad.sigmoid(ad.mul(ad.sub(pbar, b), a)), lo), hi - lo)
        return ad.sub(ad.mul(q, 2.0), 1.0)
    raise ContractError(f"unknown local aggregator kind: {spec.kind!r}")


def aggregate_local_axis(spec: LocalAggregatorSpec, scores, axis: int) -> Var:
    """Vectorized local aggregation along one axis of a score array."""
    if spec.kind not in LOCAL_KINDS:
        raise ContractError(f"unknown local aggregator kind: {spec.kind!r}")
    return _local_core(spec, as_var(scores), axis)


def aggregate_local(spec: LocalAggregatorSpec, scores) -> Var:
    """Reduce a non-empty vector of region scores in [-1, 1] to a scalar."""
    v = as_var(scores)
    if v.value.ndim != 1 or v.value.size == 0:
        raise ContractError("aggregate_local expects a non-empty score vector")
    if v.value.min() < -1.0 - _SCORE_SLACK or v.value.max() > 1.0 + _SCORE_SLACK:
        raise ContractError("aggregate_local scores must lie in [-1, 1]")
    return aggregate_local_axis(spec, v, axis=0)


def aggregate_global(spec: GlobalAggregatorSpec, regions, condition=None,
                     region_scores=None) -> Var:
    """Pool a (N, D) bag of region features into one (D,) vector.

    Avg and Att ignore the sentence entirely. NL attends around the
    highest-scoring region (the argmax is frozen: no gradient flows
    through the selection, only through the selected features). CA
    weights regions by the softmax of their cosine scores against the
    conditioning sentence.
    """
    r = as_var(regions)
    if r.value.ndim != 2 or r.value.shape[0] == 0:
        raise ContractError("aggregate_global expects a non-empty (N, D) feature bag")
    n, dim = r.value.shape

    if spec.kind == "Avg":
        return ad.vmean(r, axis=0)

    if spec.kind == "Att":
        if spec.att_proj is None or spec.att_vec is None:
            raise ContractError("Att aggregator requires att_proj and att_vec")
        proj = as_var(spec.att_proj)
        vec = as_var(spec.att_vec)
        if proj.value.ndim != 2 or proj.value.shape[1] != dim:
            raise ContractError("att_proj must be (H, D) for D-dim regions")
        if vec.value.ndim != 1 or vec.value.shape[0] != proj.value.shape[0]:
            raise ContractError("att_vec length must match att_proj rows")
        logits = ad.matmul(ad.tanh(ad.matmul(r, ad.transpose(proj))), vec)
        weights = ad.softmax(logits, 1.0, axis=0)
        return ad.matmul(weights, r)

    if spec.kind == "NL":
        if spec.sim_map is None:
            raise ContractError("NL aggregator requires the learned sim_map matrix")
        if region_scores is None:
            raise ContractError("NL aggregator requires region_scores to pick "
                                "the critical region")
        if spec.gamma is None:
            raise ContractError("NL aggregator requires gamma")
        amat = as_var(spec.sim_map)
        if amat.value.ndim != 2 or amat.value.shape[1] != dim:
            raise ContractError("sim_map columns must match the region dimension")
        sv = as_var(region_scores)
        if sv.value.ndim != 1 or sv.value.shape[0] != n:
            raise ContractError("region_scores must have one score per region")
        k = int(np.argmax(sv.value))  # first maximal index; selection is frozen
        mapped = ad.matmul(r, ad.transpose(amat))
        sims = ad.matmul(mapped, mapped[k])
        weights = ad.softmax(sims, spec.gamma, axis=0)
        return ad.matmul(weights, r)

    if spec.kind == "CA":
        if condition is None:
            raise ContractError("CA aggregator requires the conditioning sentence")
        cond = as_var(condition)
        if cond.value.ndim != 1 or cond.value.shape[0] != dim:
            raise ContractError("conditioning sentence dimension mismatch")
        # attention logits are the cosine region scores, so rescaling the
        # sentence leaves the pooled feature unchanged
        from .numeric import NORM_EPS, unit_rows

        cn = ad.div(cond, ad.clip_min(ad.l2norm(cond), NORM_EPS))
        logits = ad.clamp(ad.matmul(unit_rows(r), cn), -1.0, 1.0)
        weights = ad.softmax(logits, 1.0, axis=0)
        return ad.matmul(weights, r)

    raise ContractError(f"unknown global aggregator kind: {spec.kind!r}")


def _sentence_core(spec: SentenceAggregatorSpec, scores: Var, axis: int) -> Var:
    if spec.kind == "Avg":
        return ad.vmean(scores, axis=axis)
    if spec.kind == "Sum":
        return ad.vsum(scores, axis=axis)
    if spec.kind == "Max":
        return ad.vmax(scores, axis=axis)
    if spec.kind == "LSE":
        return ad.logsumexp(scores, spec.gamma, axis=axis)
    if spec.kind == "Id":
        if scores.value.shape[axis] != 1:
            raise ContractError("sentence aggregator Id is only valid for "
                                "single-sentence documents")
        return ad.vsum(scores, axis=axis)
    raise ContractError(f"unknown sentence aggregator kind: {spec.kind!r}")


def aggregate_sentences_axis(spec: SentenceAggregatorSpec, scores, axis: int) -> Var:
    if spec.kind not in SENTENCE_KINDS:
        raise ContractError(f"unknown sentence aggregator kind: {spec.kind!r}")
    return _sentence_core(spec, as_var(scores), axis)


def aggregate_sentences(spec: SentenceAggregatorSpec, scores) -> Var:
    """Reduce a non-empty vector of per-sentence scores to a scalar."""
    v = as_var(scores)
    if v.value.ndim != 1 or v.value.size == 0:
        raise ContractError("aggregate_sentences expects a non-empty score vector")
    return aggregate_sentences_axis(spec, v, axis=0)
