"""Image-document score functions over unordered feature bags.

An image is a bag of N region features and a document a bag of M
sentence features, both already in the shared embedding space. The local
route aggregates per-region cosine scores per sentence; the global route
pools the regions into one vector per sentence and scores that vector.
Either way the per-sentence scores are reduced by a sentence aggregator
to a single scalar in [-1, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Var, as_var
from .aggregators import (
    GlobalAggregatorSpec,
    LocalAggregatorSpec,
    SentenceAggregatorSpec,
    aggregate_global,
    aggregate_local_axis,
    aggregate_sentences,
    aggregate_sentences_axis,
)
from .numeric import NORM_EPS, cosine_similarity, unit_rows

MODES = ("local", "global")


@dataclass(frozen=True, eq=False)
class ScoreFunctionConfig:
    """One fully specified image-document score function."""

    mode: str
    local_agg: LocalAggregatorSpec | None = None
    global_agg: GlobalAggregatorSpec | None = None
    sentence_agg: SentenceAggregatorSpec = SentenceAggregatorSpec(kind="Avg")

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"unknown score mode: {self.mode!r}")
        if self.mode == "local" and self.local_agg is None:
            raise ContractError("local mode requires a local aggregator spec")
        if self.mode == "global" and self.global_agg is None:
            raise ContractError("global mode requires a global aggregator spec")


def _as_bag(x, name: str) -> Var:
    v = as_var(x)
    if v.value.ndim != 2 or v.value.shape[0] == 0:
        raise ContractError(f"{name} must be a non-empty (count, dim) feature bag")
    return v


def score_matrix(regions, sentences) -> Var:
    """(N, M) cosine table between region and sentence features."""
    r = _as_bag(regions, "regions")
    s = _as_bag(sentences, "sentences")
    if r.value.shape[1] != s.value.shape[1]:
        raise ContractError(
            f"feature dimension mismatch: regions have {r.value.shape[1]}, "
            f"sentences have {s.value.shape[1]}"
        )
    return ad.clamp(ad.matmul(unit_rows(r), ad.transpose(unit_rows(s))), -1.0, 1.0)


def image_sentence_scores_local(local_agg: LocalAggregatorSpec, sm) -> Var:
    """Aggregate each sentence's column of region scores; returns (M,)."""
    v = as_var(sm)
    if v.value.ndim != 2 or v.value.size == 0:
        raise ContractError("expected a non-empty (N, M) score matrix")
    return aggregate_local_axis(local_agg, v, axis=0)


def image_sentence_scores_global(global_agg: GlobalAggregatorSpec, regions,
                                 sentences, sm=None) -> Var:
    """Score each sentence against a pooled region feature; returns (M,).

    Unconditioned aggregators (Avg, Att) pool once and reuse the vector
    for every sentence; NL and CA pool per sentence, NL from the score
    matrix column and CA from the sentence itself.
    """
    r = _as_bag(regions, "regions")
    s = _as_bag(sentences, "sentences")
    m = s.value.shape[0]
    if global_agg.kind == "NL":
        if sm is None:
            raise ContractError("NL scoring requires the region score matrix")
        smv = as_var(sm)
        if smv.value.shape != (r.value.shape[0], m):
            raise ContractError("score matrix shape must be (N, M)")
    scores = []
    if global_agg.kind in ("Avg", "Att"):
        pooled = aggregate_global(global_agg, r)
        for j in range(m):
            scores.append(cosine_similarity(pooled, s[j]))
    else:
        for j in range(m):
            column = as_var(sm)[:, j] if global_agg.kind == "NL" else None
            pooled = aggregate_global(global_agg, r, condition=s[j],
                                      region_scores=column)
            scores.append(cosine_similarity(pooled, s[j]))
    return ad.stack(scores, axis=0)


def image_document_score(config: ScoreFunctionConfig, regions, sentences) -> Var:
    """Scalar score of one image bag against one document bag."""
    if config.mode == "local":
        sm = score_matrix(regions, sentences)
        per_sentence = image_sentence_scores_local(config.local_agg, sm)
    else:
        sm = None
        if config.global_agg.kind == "NL":
            sm = score_matrix(regions, sentences)
        per_sentence = image_sentence_scores_global(
            config.global_agg, regions, sentences, sm=sm
        )
    return aggregate_sentences(config.sentence_agg, per_sentence)


@dataclass(frozen=True, eq=False)
class ScoreVector:
    """A matched score and the mismatched scores it is contrasted against."""

    positive: Var
    negatives: Var

    def __post_init__(self):
        if self.positive.value.ndim != 0:
            raise ContractError("positive score must be a scalar")
        if self.negatives.value.ndim != 1 or self.negatives.value.size == 0:
            raise ContractError("need at least one mismatched score")


def assemble_contrastive_scores(config: ScoreFunctionConfig, document,
                                matched, mismatched) -> ScoreVector:
    """Score one document against its matched image and K mismatched ones."""
    doc = _as_bag(document, "document")
    if len(mismatched) == 0:
        raise ContractError("need at least one mismatched image")
    pos = image_document_score(config, matched, doc)
    negs = [image_document_score(config, bag, doc) for bag in mismatched]
    return ScoreVector(positive=pos, negatives=ad.stack(negs, axis=0))


def _column_cosines(pooled_cols: Var, unit_sent_cols: Var) -> Var:
    # pooled_cols: (D, Q) one pooled feature per sentence column;
    # unit_sent_cols: (D, Q) unit-norm sentence features
    num = ad.vsum(ad.mul(pooled_cols, unit_sent_cols), axis=0)
    den = ad.clip_min(ad.l2norm(pooled_cols, axis=0), NORM_EPS)
    return ad.clamp(ad.div(num, den), -1.0, 1.0)


def pairwise_score_tables(regions_all, n_regions: int, sentences_all,
                          m_sentences: int,
                          local_agg: LocalAggregatorSpec | None,
                          global_agg: GlobalAggregatorSpec | None,
                          sentence_agg: SentenceAggregatorSpec):
    """All image-document scores for a batch, sharing one cosine table.

    `regions_all` stacks the B_i image bags into (B_i * N, D) and
    `sentences_all` the B_d document bags into (B_d * M, D). Returns
    (local_table, global_table), each (B_i, B_d) or None if that route is
    disabled. Row j column i is the score of image j against document i,
    identical (up to rounding reassociation) to calling
    image_document_score on the individual bags.
    """
    r = _as_bag(regions_all, "regions_all")
    s = _as_bag(sentences_all, "sentences_all")
    if r.value.shape[0] % n_regions:
        raise ContractError("regions_all rows must be a multiple of n_regions")
    if s.value.shape[0] % m_sentences:
        raise ContractError("sentences_all rows must be a multiple of m_sentences")
    bi = r.value.shape[0] // n_regions
    bd = s.value.shape[0] // m_sentences
    dim = r.value.shape[1]

    sn = unit_rows(s)
    sm_all = ad.clamp(ad.matmul(unit_rows(r), ad.transpose(sn)), -1.0, 1.0)

    table_l = None
    if local_agg is not None:
        cube = ad.reshape(sm_all, (bi, n_regions, bd, m_sentences))
        per_sentence = aggregate_local_axis(local_agg, cube, axis=1)
        table_l = aggregate_sentences_axis(sentence_agg, per_sentence, axis=2)

    table_g = None
    if global_agg is not None:
        if global_agg.kind in ("Avg", "Att"):
            if global_agg.kind == "Avg":
                pooled = ad.vmean(ad.reshape(r, (bi, n_regions, dim)), axis=1)
            else:
                rows = [
                    aggregate_global(global_agg, r[j * n_regions:(j + 1) * n_regions])
                    for j in range(bi)
                ]
                pooled = ad.stack(rows, axis=0)
            gmat = ad.clamp(
                ad.matmul(unit_rows(pooled), ad.transpose(sn)), -1.0, 1.0
            )
        else:
            if global_agg.kind == "NL" and global_agg.sim_map is None:
                raise ContractError("NL aggregator requires the learned sim_map matrix")
            blocks = sm_all.value.reshape(bi, n_regions, bd * m_sentences)
            critical = np.argmax(blocks, axis=1)  # first maximal row per column
            sent_cols = ad.transpose(sn)
            rows = []
            for j in range(bi):
                bag = r[j * n_regions:(j + 1) * n_regions]
                if global_agg.kind == "NL":
                    mapped = ad.matmul(bag, ad.transpose(as_var(global_agg.sim_map)))
                    gram = ad.matmul(mapped, ad.transpose(mapped))
                    picked = ad.take(gram, critical[j], axis=1)
                    weights = ad.softmax(picked, global_agg.gamma, axis=0)
                else:  # CA: cosine logits, one column per sentence
                    logits = ad.clamp(
                        ad.matmul(unit_rows(bag), ad.transpose(sn)), -1.0, 1.0
                    )
                    weights = ad.softmax(logits, 1.0, axis=0)
                pooled_cols = ad.matmul(ad.transpose(bag), weights)
                rows.append(_column_cosines(pooled_cols, sent_cols))
            gmat = ad.stack(rows, axis=0)
        cube_g = ad.reshape(gmat, (bi, bd, m_sentences))
        table_g = aggregate_sentences_axis(sentence_agg, cube_g, axis=2)

    return table_l, table_g
