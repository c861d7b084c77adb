"""Downstream evaluation of a trained model on held-out documents.

Four task families, all operating on frozen parameters:

* zero-shot classification against noise-free concept prompts,
* linear probing of mean-pooled region features,
* visual grounding of sentences (score maps, contrast-to-noise ratio,
  thresholded mean IoU, critical-region hit rate),
* cross-modal retrieval between box features and sentences,

plus the aggregator ablation grid that retrains one model per aggregator
combination and compares the routes on a normalized table.
"""

from __future__ import annotations

import dataclasses
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import softmax as _softmax
from scipy.stats import rankdata

from . import jsonio
from .autodiff import ContractError
from .aggregators import (
    GlobalAggregatorSpec,
    LocalAggregatorSpec,
    aggregate_local_axis,
)
from .encoders import ModelParams, encode_bag, unflatten_params
from .numeric import cosine_matrix, population_stats
from .scoring import score_matrix
from .trainer import NonFiniteLossError, TrainConfig, train

VARIANCE_GUARD = 1e-8
IOU_THRESHOLDS = np.arange(-20, 21) * 5 / 100.0  # -1.00 .. 1.00 in 0.05 steps


# ---------------------------------------------------------------------------
# feature extraction


def encode_regions(params: ModelParams, observations) -> np.ndarray:
    return encode_bag(params.region_encoder, np.asarray(observations)).value


def encode_sentences(params: ModelParams, observations) -> np.ndarray:
    return encode_bag(params.sentence_encoder, np.asarray(observations)).value


def pooled_image_features(params: ModelParams, documents) -> np.ndarray:
    """Mean of encoded region features per image, stacked (len(docs), D)."""
    if not documents:
        raise ContractError("no documents to pool features from")
    rows = [encode_regions(params, doc.region_observations).mean(axis=0)
            for doc in documents]
    return np.stack(rows, axis=0)


def single_concept_documents(documents) -> list:
    """Documents whose non-background regions all share one concept."""
    kept = []
    for doc in documents:
        present = {c for c in doc.region_concepts if c is not None}
        if len(present) == 1:
            kept.append(doc)
    return kept


def document_label(doc) -> int:
    present = sorted({c for c in doc.region_concepts if c is not None})
    if len(present) != 1:
        raise ContractError(f"document {doc.image_id} does not have exactly "
                            "one concept")
    return present[0]


# ---------------------------------------------------------------------------
# zero-shot classification


@dataclass(eq=False)
class ZeroShotResult:
    accuracy: float
    predictions: np.ndarray     # (n_images,) predicted concept ids
    labels: np.ndarray          # (n_images,) ground-truth concept ids
    raw_scores: np.ndarray      # (n_images, concepts) aggregated scores
    probabilities: np.ndarray   # (n_images, concepts) after min-max + softmax


def prompt_matrix(prompts: dict) -> np.ndarray:
    """Stack a {concept_id: vector} prompt bank into concept-id order."""
    ids = sorted(prompts)
    if ids != list(range(len(ids))):
        raise ContractError("prompt bank must cover concept ids 0..C-1")
    if len(ids) < 2:
        raise ContractError("zero-shot classification needs at least 2 concepts")
    return np.stack([np.asarray(prompts[c], dtype=np.float64) for c in ids])


def zero_shot_score_table(params: ModelParams, local_agg: LocalAggregatorSpec,
                          prompts: dict, documents) -> np.ndarray:
    """(n_images, concepts) image-prompt scores through the local route."""
    mat = prompt_matrix(prompts)
    prompt_feats = encode_sentences(params, mat)
    rows = []
    for doc in documents:
        feats = encode_regions(params, doc.region_observations)
        sm = score_matrix(feats, prompt_feats)
        rows.append(aggregate_local_axis(local_agg, sm, axis=0).value)
    return np.stack(rows, axis=0)


def minmax_normalize_columns(table: np.ndarray) -> np.ndarray:
    """Map each column onto [0, 1]; constant columns become all 0.5."""
    t = np.asarray(table, dtype=np.float64)
    lo = t.min(axis=0)
    hi = t.max(axis=0)
    out = np.empty_like(t)
    for j in range(t.shape[1]):
        if hi[j] > lo[j]:
            out[:, j] = (t[:, j] - lo[j]) / (hi[j] - lo[j])
        else:
            warnings.warn(f"score column {j} is constant; normalizing to 0.5",
                          RuntimeWarning, stacklevel=2)
            out[:, j] = 0.5
    return out


def zero_shot_classify(params: ModelParams, local_agg: LocalAggregatorSpec,
                       prompts: dict, documents) -> ZeroShotResult:
    """Predict each image's concept from per-concept prompt scores."""
    if not documents:
        raise ContractError("zero-shot classification needs at least one image")
    raw = zero_shot_score_table(params, local_agg, prompts, documents)
    probs = _softmax(minmax_normalize_columns(raw), axis=1)
    predictions = np.argmax(probs, axis=1)
    labels = np.array([document_label(doc) for doc in documents])
    accuracy = float(np.mean(predictions == labels))
    return ZeroShotResult(accuracy=accuracy, predictions=predictions,
                          labels=labels, raw_scores=raw, probabilities=probs)


# ---------------------------------------------------------------------------
# linear probe


@dataclass(eq=False)
class ProbeResult:
    accuracy: float
    auc: float
    weights: np.ndarray
    bias: np.ndarray


def rank_auc(scores, positive_mask) -> float:
    """Rank-based (Mann-Whitney) area under the ROC curve, ties averaged."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive_mask, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ContractError("AUC needs at least one positive and one negative")
    ranks = rankdata(scores)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0)
                 / (n_pos * n_neg))


def linear_probe(train_features, train_labels, test_features, test_labels,
                 num_classes: int | None = None, iterations: int = 500,
                 lr: float = 0.1) -> ProbeResult:
    """Softmax regression on frozen features via full-batch gradient descent.

    Weights start at zero: the objective is convex, so initialization
    only shifts the early iterates, and zero keeps the probe seed-free.
    """
    x_tr = np.asarray(train_features, dtype=np.float64)
    y_tr = np.asarray(train_labels, dtype=np.int64)
    x_te = np.asarray(test_features, dtype=np.float64)
    y_te = np.asarray(test_labels, dtype=np.int64)
    if x_tr.ndim != 2 or x_te.ndim != 2 or x_tr.shape[1] != x_te.shape[1]:
        raise ContractError("probe features must be 2-D with a shared dim")
    if y_tr.shape != (x_tr.shape[0],) or y_te.shape != (x_te.shape[0],):
        raise ContractError("probe labels must align with the feature rows")
    classes = num_classes if num_classes is not None else int(y_tr.max()) + 1
    if np.unique(y_tr).size < 2:
        raise ContractError("probe training set must contain at least two classes")
    if y_tr.min() < 0 or y_tr.max() >= classes or y_te.min() < 0 \
            or y_te.max() >= classes:
        raise ContractError("probe labels out of range")

    n, dim = x_tr.shape
    weights = np.zeros((classes, dim))
    bias = np.zeros(classes)
    onehot = np.eye(classes)[y_tr]
    for _ in range(iterations):
        probs = _softmax(x_tr @ weights.T + bias, axis=1)
        delta = (probs - onehot) / n
        weights -= lr * (delta.T @ x_tr)
        bias -= lr * delta.sum(axis=0)

    test_probs = _softmax(x_te @ weights.T + bias, axis=1)
    accuracy = float(np.mean(np.argmax(test_probs, axis=1) == y_te))
    aucs = []
    for c in range(classes):
        positive = y_te == c
        if positive.any() and (~positive).any():
            aucs.append(rank_auc(test_probs[:, c], positive))
    if not aucs:
        raise ContractError("no class with both positives and negatives in "
                            "the probe test set")
    return ProbeResult(accuracy=accuracy, auc=float(np.mean(aucs)),
                       weights=weights, bias=bias)


# ---------------------------------------------------------------------------
# visual grounding


@dataclass(eq=False)
class GroundingCase:
    image_id: int
    sentence_index: int
    region_observations: np.ndarray
    sentence_observation: np.ndarray
    box: tuple  # ground-truth region indices

    def __post_init__(self):
        n = self.region_observations.shape[0]
        if len(self.box) == 0:
            raise ContractError("grounding box must be non-empty")
        if len(set(self.box)) != len(self.box):
            raise ContractError("grounding box has duplicate region indices")
        if min(self.box) < 0 or max(self.box) >= n:
            raise ContractError("grounding box index out of range")
        if len(self.box) >= n:
            raise ContractError("grounding box must be a proper subset of "
                                "the regions")


def grounding_cases(documents) -> list:
    cases = []
    for doc in documents:
        for j, box in enumerate(doc.boxes):
            cases.append(GroundingCase(
                image_id=doc.image_id,
                sentence_index=j,
                region_observations=doc.region_observations,
                sentence_observation=doc.sentence_observations[j],
                box=tuple(box),
            ))
    return cases


def grounding_score_map(params: ModelParams, case: GroundingCase) -> np.ndarray:
    """Raw region-sentence cosine per region, no smoothing; values in [-1, 1]."""
    feats = encode_regions(params, case.region_observations)
    sent = encode_sentences(params, case.sentence_observation[None, :])
    return score_matrix(feats, sent).value[:, 0]


def _check_box(score_map: np.ndarray, box) -> np.ndarray:
    mask = np.zeros(score_map.shape[0], dtype=bool)
    indices = list(box)
    if not indices:
        raise ContractError("box must be non-empty")
    if min(indices) < 0 or max(indices) >= score_map.shape[0]:
        raise ContractError("box index out of range")
    mask[indices] = True
    if mask.all():
        raise ContractError("box must not cover every region")
    return mask


def cnr(score_map, box) -> float:
    """Contrast between in-box and out-of-box scores, noise-normalized."""
    scores = np.asarray(score_map, dtype=np.float64)
    mask = _check_box(scores, box)
    mean_in, var_in = population_stats(scores[mask])
    mean_out, var_out = population_stats(scores[~mask])
    return abs(mean_in - mean_out) / math.sqrt(var_in + var_out + VARIANCE_GUARD)


def miou(score_map, box) -> float:
    """Mean IoU of thresholded score maps over the fixed threshold grid."""
    scores = np.asarray(score_map, dtype=np.float64)
    mask = _check_box(scores, box)
    total = 0.0
    for t in IOU_THRESHOLDS:
        predicted = scores >= t
        union = np.logical_or(predicted, mask).sum()
        inter = np.logical_and(predicted, mask).sum()
        total += inter / union if union else 0.0
    return total / IOU_THRESHOLDS.size


def grounding_hit(score_map, box) -> bool:
    """Whether the single highest-scoring region lies inside the box."""
    scores = np.asarray(score_map, dtype=np.float64)
    _check_box(scores, box)
    return int(np.argmax(scores)) in set(box)


@dataclass(eq=False)
class GroundingSummary:
    per_case_cnr: np.ndarray
    per_case_miou: np.ndarray
    per_case_hit: np.ndarray
    mean_cnr: float
    mean_miou: float
    hit_rate: float


def evaluate_grounding(params: ModelParams, cases) -> GroundingSummary:
    if not cases:
        raise ContractError("no grounding cases")
    cnrs, mious, hits = [], [], []
    for case in cases:
        score_map = grounding_score_map(params, case)
        cnrs.append(cnr(score_map, case.box))
        mious.append(miou(score_map, case.box))
        hits.append(grounding_hit(score_map, case.box))
    cnrs = np.asarray(cnrs)
    mious = np.asarray(mious)
    hits = np.asarray(hits, dtype=bool)
    return GroundingSummary(
        per_case_cnr=cnrs, per_case_miou=mious, per_case_hit=hits,
        mean_cnr=float(cnrs.mean()), mean_miou=float(mious.mean()),
        hit_rate=float(hits.mean()),
    )


def export_score_maps(path, params: ModelParams, cases) -> None:
    maps = [
        {
            "image_id": case.image_id,
            "sentence_index": case.sentence_index,
            "scores": grounding_score_map(params, case),
        }
        for case in cases
    ]
    payload = {"kind": "score-maps", "format_version": 1, "maps": maps}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(jsonio.dumps_canonical(payload) + "\n")


# ---------------------------------------------------------------------------
# cross-modal retrieval


@dataclass(eq=False)
class RetrievalResult:
    count: int
    k_values: tuple
    box_to_sentence_ranks: np.ndarray
    sentence_to_box_ranks: np.ndarray
    box_to_sentence_medr: float
    sentence_to_box_medr: float
    box_to_sentence_recall: dict
    sentence_to_box_recall: dict


def retrieval_features(params: ModelParams, cases):
    """Paired (box features, sentence features), one row per case.

    The box feature is the mean of the encoded region features over the
    box's member indices.
    """
    if len(cases) < 2:
        raise ContractError("retrieval needs at least 2 cases")
    seen = set()
    for case in cases:
        key = (case.image_id, case.sentence_index)
        if key in seen:
            raise ContractError(f"duplicate retrieval pairing {key}")
        seen.add(key)
    boxes = []
    sentences = []
    for case in cases:
        feats = encode_regions(params, case.region_observations)
        boxes.append(feats[list(case.box)].mean(axis=0))
        sentences.append(
            encode_sentences(params, case.sentence_observation[None, :])[0])
    return np.stack(boxes), np.stack(sentences)


def rank_of_match(score_table: np.ndarray) -> np.ndarray:
    """1-based rank of the diagonal entry per row under descending-score
    order, ties broken by candidate index ascending."""
    t = np.asarray(score_table, dtype=np.float64)
    if t.ndim != 2 or t.shape[0] != t.shape[1]:
        raise ContractError("retrieval score table must be square")
    q = t.shape[0]
    ranks = np.empty(q, dtype=np.int64)
    idx = np.arange(q)
    for i in range(q):
        row = t[i]
        better = row > row[i]
        tied_earlier = (row == row[i]) & (idx < i)
        ranks[i] = 1 + int(np.count_nonzero(better | tied_earlier))
    return ranks


def lower_median(values) -> float:
    v = np.sort(np.asarray(values))
    if v.size == 0:
        raise ContractError("median of empty rank list")
    return float(v[(v.size - 1) // 2])


def scaled_k_values(count: int) -> tuple:
    return tuple(sorted({1, math.ceil(count / 20), math.ceil(count / 10)}))


def retrieval_eval(params: ModelParams, cases) -> RetrievalResult:
    box_feats, sent_feats = retrieval_features(params, cases)
    table = cosine_matrix(box_feats, sent_feats)
    b2s = rank_of_match(table)
    s2b = rank_of_match(table.T)
    count = len(cases)
    ks = scaled_k_values(count)
    return RetrievalResult(
        count=count,
        k_values=ks,
        box_to_sentence_ranks=b2s,
        sentence_to_box_ranks=s2b,
        box_to_sentence_medr=lower_median(b2s),
        sentence_to_box_medr=lower_median(s2b),
        box_to_sentence_recall={k: float(np.mean(b2s <= k)) for k in ks},
        sentence_to_box_recall={k: float(np.mean(s2b <= k)) for k in ks},
    )


# ---------------------------------------------------------------------------
# aggregator ablation grid


@dataclass(frozen=True)
class GridEntry:
    name: str
    local_agg: LocalAggregatorSpec | None = None
    global_agg: GlobalAggregatorSpec | None = None


def default_grid(local_gamma: float = 0.1,
                 global_gamma: float = math.e) -> list:
    """Five local-only, three global-only, three combined configurations."""
    lse = LocalAggregatorSpec(kind="LSE", gamma=local_gamma)
    entries = [
        GridEntry("Max", local_agg=LocalAggregatorSpec(kind="Max")),
        GridEntry("Avg", local_agg=LocalAggregatorSpec(kind="Avg")),
        GridEntry("LSE", local_agg=lse),
        GridEntry("NOR", local_agg=LocalAggregatorSpec(kind="NOR")),
        GridEntry("NAND", local_agg=LocalAggregatorSpec(kind="NAND")),
        GridEntry("g-Avg", global_agg=GlobalAggregatorSpec(kind="Avg")),
        GridEntry("g-Att", global_agg=GlobalAggregatorSpec(kind="Att")),
        GridEntry("g-NL",
                  global_agg=GlobalAggregatorSpec(kind="NL", gamma=global_gamma)),
        GridEntry("LSE+Avg", local_agg=lse,
                  global_agg=GlobalAggregatorSpec(kind="Avg")),
        GridEntry("LSE+Att", local_agg=lse,
                  global_agg=GlobalAggregatorSpec(kind="Att")),
        GridEntry("LSE+NL", local_agg=lse,
                  global_agg=GlobalAggregatorSpec(kind="NL", gamma=global_gamma)),
    ]
    return entries


@dataclass(eq=False)
class AblationRow:
    name: str
    trained: bool
    probe_auc: float | None = None
    mean_cnr: float | None = None
    retrieval_medr: float | None = None
    error: str = ""


def _row_config(base: TrainConfig, entry: GridEntry, seed: int) -> TrainConfig:
    needs_nl = entry.global_agg is not None and entry.global_agg.kind == "NL"
    needs_att = entry.global_agg is not None and entry.global_agg.kind == "Att"
    model = dataclasses.replace(base.model, use_nl=needs_nl, use_att=needs_att)
    return dataclasses.replace(base, model=model, local_agg=entry.local_agg,
                               global_agg=entry.global_agg, seed=seed)


def _row_metrics(params: ModelParams, train_docs, test_docs,
                 retrieval_limit: int | None = None) -> dict:
    probe_train = single_concept_documents(train_docs)
    probe_test = single_concept_documents(test_docs)
    if not probe_train or not probe_test:
        raise ContractError("ablation probe needs single-concept documents "
                            "in both splits")
    probe = linear_probe(
        pooled_image_features(params, probe_train),
        [document_label(d) for d in probe_train],
        pooled_image_features(params, probe_test),
        [document_label(d) for d in probe_test],
    )
    grounding = evaluate_grounding(params, grounding_cases(test_docs))
    retrieval = retrieval_eval(params,
                               retrieval_cases(test_docs, retrieval_limit))
    medr = 0.5 * (retrieval.box_to_sentence_medr
                  + retrieval.sentence_to_box_medr)
    return {
        "probe_auc": probe.auc,
        "mean_cnr": grounding.mean_cnr,
        "retrieval_medr": medr,
    }


def retrieval_cases(documents, limit: int | None = None) -> list:
    cases = grounding_cases(documents)
    if limit is not None:
        cases = cases[:limit]
    return cases


def ablation_grid(train_docs, test_docs, grid, base_config: TrainConfig,
                  seed: int, retrieval_limit: int | None = None) -> list:
    """Train one model per grid entry and collect its comparison metrics.

    A configuration that fails to train (non-finite loss) contributes a
    failed row rather than aborting the grid.
    """
    rows = []
    for entry in grid:
        config = _row_config(base_config, entry, seed)
        try:
            result = train(train_docs, config)
            params = unflatten_params(config.model, result.params_flat)
            metrics = _row_metrics(params, train_docs, test_docs,
                                   retrieval_limit)
            rows.append(AblationRow(name=entry.name, trained=True, **metrics))
        except NonFiniteLossError as exc:
            rows.append(AblationRow(name=entry.name, trained=False,
                                    error=str(exc)))
    return rows


def normalize_grid(rows) -> list:
    """Min-max normalize each metric across successful rows; the median
    rank flips so larger is uniformly better. Equal columns map to 0.5."""
    metrics = ("probe_auc", "mean_cnr", "retrieval_medr")
    flipped = {"retrieval_medr"}
    table = []
    for name in metrics:
        values = [getattr(r, name) for r in rows if r.trained]
        lo = min(values) if values else 0.0
        hi = max(values) if values else 0.0
        column = {}
        for r in rows:
            if not r.trained:
                column[r.name] = None
                continue
            v = getattr(r, name)
            norm = 0.5 if hi == lo else (v - lo) / (hi - lo)
            if name in flipped:
                norm = 0.5 if hi == lo else 1.0 - norm
            column[r.name] = norm
        table.append((name, column))
    out = []
    for r in rows:
        out.append({
            "name": r.name,
            "trained": r.trained,
            "error": r.error,
            **{name: column[r.name] for name, column in table},
        })
    return out


# ---------------------------------------------------------------------------
# report plumbing


def write_report_csv(path, rows, config_fingerprint: str, seed: int) -> None:
    """CSV of (task, metric, value) rows stamped with fingerprint and seed."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("task,metric,value,config_fingerprint,seed\n")
        for task, metric, value in rows:
            if not np.isfinite(value):
                raise ContractError(f"non-finite metric {task}/{metric}")
            fh.write(f"{task},{metric},{jsonio.format_float(float(value))},"
                     f"{config_fingerprint},{seed}\n")
