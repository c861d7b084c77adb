"""Synthetic latent-concept corpus with paired region and sentence bags.

Each document is an image of N region observations plus up to
`sentences_per_doc` sentence observations. Every sentence describes one
concept that is guaranteed to occupy at least one region (its box); the
remaining regions are background noise, so a sentence is a positive bag
label in the multiple-instance sense. Region and sentence observations
live in separate spaces tied by a fixed orthogonal rotation: sentence
prototypes are the rotated region prototypes, and a fraction
(`noise_coupling`) of each concept's per-document noise is shared across
the two modalities through the same rotation. The shared part is what
makes individual pairs distinguishable within a concept; with matching
dimensions (the default) the marginal observation distribution is still
exactly prototype + isotropic gaussian, and with a strictly larger
sentence space the directions outside the rotated region subspace carry
the independent share of the noise only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import ContractError
from . import jsonio

FORMAT_VERSION = 1


@dataclass(frozen=True)
class CorpusSpec:
    concepts: int = 8
    region_dim: int = 12
    sentence_dim: int = 12
    regions_per_image: int = 16
    sentences_per_doc: int = 3
    documents: int = 2000
    noise_sigma: float = 0.1
    concepts_min: int = 1
    concepts_max: int = 3
    box_min: int = 2
    box_max: int = 4
    noise_coupling: float = 0.75
    train_fraction: float = 0.65
    seed: int = 0

    def __post_init__(self):
        if self.concepts < 2:
            raise ContractError("corpus.concepts must be >= 2")
        if self.concepts > min(self.region_dim, self.sentence_dim):
            raise ContractError("corpus.concepts cannot exceed either feature "
                                "dimension (prototypes are orthonormal)")
        if self.sentence_dim < self.region_dim:
            raise ContractError("corpus.sentence_dim must be >= corpus.region_dim "
                                "(the modality rotation preserves norms)")
        if self.documents < 1:
            raise ContractError("corpus.documents must be >= 1")
        if self.sentences_per_doc < 1:
            raise ContractError("corpus.sentences_per_doc must be >= 1")
        if not (1 <= self.concepts_min <= self.concepts_max <= self.concepts):
            raise ContractError("corpus concepts_per_image range is invalid")
        if not (1 <= self.box_min <= self.box_max):
            raise ContractError("corpus box size range is invalid")
        if self.concepts_max * self.box_max > self.regions_per_image:
            raise ContractError("corpus.regions_per_image is too small for the "
                                "largest concept/box combination")
        if self.box_max >= self.regions_per_image:
            raise ContractError("boxes must be proper subsets of the regions")
        if not self.noise_sigma >= 0.0:
            raise ContractError("corpus.noise_sigma must be >= 0")
        if not 0.0 <= self.noise_coupling <= 1.0:
            raise ContractError("corpus.noise_coupling must lie in [0, 1]")
        if not 0.0 < self.train_fraction < 1.0:
            raise ContractError("corpus.train_fraction must lie in (0, 1)")

    def to_dict(self) -> dict:
        return {
            "concepts": self.concepts,
            "region_dim": self.region_dim,
            "sentence_dim": self.sentence_dim,
            "regions_per_image": self.regions_per_image,
            "sentences_per_doc": self.sentences_per_doc,
            "documents": self.documents,
            "noise_sigma": self.noise_sigma,
            "concepts_min": self.concepts_min,
            "concepts_max": self.concepts_max,
            "box_min": self.box_min,
            "box_max": self.box_max,
            "noise_coupling": self.noise_coupling,
            "train_fraction": self.train_fraction,
            "seed": self.seed,
        }


def spec_from_dict(d: dict) -> CorpusSpec:
    return CorpusSpec(**d)


@dataclass(eq=False)
class ConceptBank:
    """Fixed concept geometry: orthonormal prototypes per modality plus the
    rotation that carries region space onto sentence space."""

    region_prototypes: np.ndarray    # (C, region_dim), orthonormal rows
    sentence_prototypes: np.ndarray  # (C, sentence_dim), rotated region rows
    modality_rotation: np.ndarray    # (sentence_dim, region_dim), orthonormal cols
    seed: int

    @property
    def concepts(self) -> int:
        return self.region_prototypes.shape[0]


@dataclass(eq=False)
class SyntheticDocument:
    image_id: int
    region_observations: np.ndarray   # (N, region_dim)
    region_concepts: list             # concept id per region, None = background
    sentence_observations: np.ndarray # (M_doc, sentence_dim)
    sentence_concepts: list           # concept id per sentence
    boxes: list                       # per sentence, sorted tuple of region indices


@dataclass(eq=False)
class Corpus:
    spec: CorpusSpec
    bank: ConceptBank
    documents: list = field(default_factory=list)


def _orthonormal_rows(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    raw = rng.standard_normal((dim, count))
    q, r = np.linalg.qr(raw)
    signs = np.sign(np.diag(r))
    signs[signs == 0.0] = 1.0
    return (q * signs).T


def _rotation(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    # orthonormal columns (rows >= cols is enforced by CorpusSpec)
    raw = rng.standard_normal((rows, cols))
    q, r = np.linalg.qr(raw)
    signs = np.sign(np.diag(r))
    signs[signs == 0.0] = 1.0
    return q * signs


def _background(rng: np.random.Generator, dim: int) -> np.ndarray:
    # raw gaussian direction scaled to norm 0.5, half the prototype norm
    v = rng.standard_normal(dim)
    return 0.5 * v / max(float(np.sqrt(np.sum(v * v))), 1e-300)


def generate_corpus(spec: CorpusSpec) -> Corpus:
    """Deterministically generate the bank and all documents from spec.seed."""
    rng = np.random.default_rng(spec.seed)
    protos = _orthonormal_rows(rng, spec.concepts, spec.region_dim)
    rotation = _rotation(rng, spec.sentence_dim, spec.region_dim)
    bank = ConceptBank(
        region_prototypes=protos,
        sentence_prototypes=protos @ rotation.T,
        modality_rotation=rotation,
        seed=spec.seed,
    )
    shared_scale = math.sqrt(spec.noise_coupling)
    own_scale = math.sqrt(1.0 - spec.noise_coupling)
    documents = []
    for image_id in range(spec.documents):
        count = int(rng.integers(spec.concepts_min, spec.concepts_max + 1))
        concepts = [int(c) for c in rng.choice(spec.concepts, size=count,
                                               replace=False)]
        sizes = [int(s) for s in rng.integers(spec.box_min, spec.box_max + 1,
                                              size=count)]
        order = rng.permutation(spec.regions_per_image)
        boxes = []
        offset = 0
        owner = [None] * spec.regions_per_image
        for which, size in enumerate(sizes):
            members = sorted(int(i) for i in order[offset:offset + size])
            offset += size
            boxes.append(tuple(members))
            for idx in members:
                owner[idx] = which
        shared = rng.standard_normal((count, spec.region_dim))
        regions = np.empty((spec.regions_per_image, spec.region_dim))
        concept_of_region = []
        for idx in range(spec.regions_per_image):
            which = owner[idx]
            if which is None:
                regions[idx] = _background(rng, spec.region_dim)
                concept_of_region.append(None)
            else:
                noise = shared_scale * shared[which] \
                    + own_scale * rng.standard_normal(spec.region_dim)
                regions[idx] = protos[concepts[which]] + spec.noise_sigma * noise
                concept_of_region.append(concepts[which])
        described = min(count, spec.sentences_per_doc)
        sentences = np.empty((described, spec.sentence_dim))
        for which in range(described):
            noise = shared_scale * (rotation @ shared[which]) \
                + own_scale * rng.standard_normal(spec.sentence_dim)
            sentences[which] = bank.sentence_prototypes[concepts[which]] \
                + spec.noise_sigma * noise
        documents.append(SyntheticDocument(
            image_id=image_id,
            region_observations=regions,
            region_concepts=concept_of_region,
            sentence_observations=sentences,
            sentence_concepts=concepts[:described],
            boxes=boxes[:described],
        ))
    return Corpus(spec=spec, bank=bank, documents=documents)


def split_corpus(corpus: Corpus, train_fraction: float, seed: int):
    """Deterministic shuffle-split into disjoint train/test corpora."""
    n = len(corpus.documents)
    if not 0.0 < train_fraction < 1.0:
        raise ContractError("train_fraction must lie in (0, 1)")
    k = int(math.floor(train_fraction * n))
    if k < 1 or n - k < 1:
        raise ContractError(f"degenerate split: {k} train / {n - k} test documents")
    order = np.random.default_rng(seed).permutation(n)
    train = [corpus.documents[int(i)] for i in order[:k]]
    test = [corpus.documents[int(i)] for i in order[k:]]
    return (Corpus(spec=corpus.spec, bank=corpus.bank, documents=train),
            Corpus(spec=corpus.spec, bank=corpus.bank, documents=test))


def prompt_bank(bank: ConceptBank) -> dict:
    """Noise-free sentence observation per concept id."""
    return {c: bank.sentence_prototypes[c].copy() for c in range(bank.concepts)}


def _doc_to_dict(doc: SyntheticDocument) -> dict:
    return {
        "image_id": doc.image_id,
        "regions": doc.region_observations,
        "region_concepts": doc.region_concepts,
        "sentences": doc.sentence_observations,
        "sentence_concepts": doc.sentence_concepts,
        "boxes": [list(b) for b in doc.boxes],
    }


def _doc_from_dict(d: dict) -> SyntheticDocument:
    return SyntheticDocument(
        image_id=int(d["image_id"]),
        region_observations=np.asarray(d["regions"], dtype=np.float64),
        region_concepts=[None if c is None else int(c)
                         for c in d["region_concepts"]],
        sentence_observations=np.asarray(d["sentences"], dtype=np.float64),
        sentence_concepts=[int(c) for c in d["sentence_concepts"]],
        boxes=[tuple(int(i) for i in b) for b in d["boxes"]],
    )


def write_corpus(path, corpus: Corpus, config_fingerprint: str = "") -> None:
    """One JSON object per line: a header, then one line per document."""
    header = {
        "kind": "corpus-header",
        "format_version": FORMAT_VERSION,
        "spec": corpus.spec.to_dict(),
        "seed": corpus.spec.seed,
        "config_fingerprint": config_fingerprint,
        "concept_bank": {
            "seed": corpus.bank.seed,
            "region_prototypes": corpus.bank.region_prototypes,
            "sentence_prototypes": corpus.bank.sentence_prototypes,
            "modality_rotation": corpus.bank.modality_rotation,
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(jsonio.dumps_canonical(header) + "\n")
        for doc in corpus.documents:
            fh.write(jsonio.dumps_canonical(_doc_to_dict(doc)) + "\n")


def read_corpus(path) -> Corpus:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ContractError(f"{path}: missing corpus header line")
    try:
        header = jsonio.loads(lines[0])
    except ValueError as exc:
        raise ContractError(f"{path}: line 1: malformed header: {exc}") from exc
    if not isinstance(header, dict) or header.get("kind") != "corpus-header":
        raise ContractError(f"{path}: line 1 is not a corpus header")
    if header.get("format_version") != FORMAT_VERSION:
        raise ContractError(f"{path}: unsupported corpus format_version "
                            f"{header.get('format_version')!r}")
    spec = spec_from_dict(header["spec"])
    raw_bank = header["concept_bank"]
    bank = ConceptBank(
        region_prototypes=np.asarray(raw_bank["region_prototypes"], dtype=np.float64),
        sentence_prototypes=np.asarray(raw_bank["sentence_prototypes"],
                                       dtype=np.float64),
        modality_rotation=np.asarray(raw_bank["modality_rotation"], dtype=np.float64),
        seed=int(raw_bank["seed"]),
    )
    documents = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            raise ContractError(f"{path}: line {lineno}: blank line in corpus")
        try:
            documents.append(_doc_from_dict(jsonio.loads(line)))
        except (ValueError, KeyError, TypeError) as exc:
            raise ContractError(
                f"{path}: line {lineno}: malformed document: {exc}"
            ) from exc
    return Corpus(spec=spec, bank=bank, documents=documents)


def write_prompts(path, bank: ConceptBank, config_fingerprint: str = "") -> None:
    payload = {
        "kind": "prompt-bank",
        "format_version": FORMAT_VERSION,
        "config_fingerprint": config_fingerprint,
        "prompts": {str(c): v for c, v in prompt_bank(bank).items()},
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(jsonio.dumps_canonical(payload) + "\n")
