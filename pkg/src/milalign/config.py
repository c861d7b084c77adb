"""Experiment configuration: defaults, strict parsing, fingerprinting.

One JSON document determines an entire run. Parsing is strict: any key
that is not part of the schema is rejected with its dotted path, so a
typo in an aggregator name cannot silently fall back to a default.
Aggregator sub-objects replace their default wholesale (merging would
leak the default LSE gamma into, say, a Max override); everything else
merges field by field on top of the defaults.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

from . import jsonio
from .autodiff import ContractError
from .aggregators import (
    global_spec_from_dict,
    local_spec_from_dict,
    sentence_spec_from_dict,
)
from .encoders import ModelConfig
from .synthgen import CorpusSpec
from .trainer import TrainConfig

_AGG_PATHS = ("train.local_agg", "train.global_agg", "train.sentence_agg")
_AGG_KEYS = {
    "train.local_agg": {"kind", "gamma", "nand_slope", "nand_offset"},
    "train.global_agg": {"kind", "gamma"},
    "train.sentence_agg": {"kind", "gamma"},
}

_CORPUS_INT_FIELDS = ("concepts", "region_dim", "sentence_dim",
                      "regions_per_image", "sentences_per_doc", "documents",
                      "concepts_min", "concepts_max", "box_min", "box_max",
                      "seed")
_CORPUS_FLOAT_FIELDS = ("noise_sigma", "noise_coupling", "train_fraction")


def default_config() -> dict:
    """The fully specified desk-scale experiment."""
    return {
        "corpus": CorpusSpec().to_dict(),
        "model": {"hidden_dim": 32, "embed_dim": 16},
        "train": {
            "local_agg": {"kind": "LSE", "gamma": 0.1},
            "global_agg": {"kind": "NL", "gamma": math.e},
            "sentence_agg": {"kind": "Avg"},
            "batch_size": 32,
            "sentences_per_bag": 5,
            "epochs": 15,
            "peak_lr": 0.02,
            "warmup_steps": 50,
            "weight_decay": 0.01,
            "betas": [0.9, 0.999],
            "adam_eps": 1e-8,
            "gamma_init": 14.0,
            "seed": 0,
        },
        "eval": {
            "zero_shot_documents": 200,
            "retrieval_cases": 200,
            "export_score_maps": False,
        },
        "ablation": {"seeds": [0, 1, 2], "epochs": None},
    }


def _merge(defaults, override, path=""):
    if not isinstance(override, dict) or not isinstance(defaults, dict) \
            or path in _AGG_PATHS:
        return override
    merged = dict(defaults)
    for key, value in override.items():
        dotted = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ContractError(f"unknown config key: {dotted}")
        merged[key] = _merge(defaults[key], value, dotted)
    return merged


def merge_config(data: dict) -> dict:
    if not isinstance(data, dict):
        raise ContractError("config document must be a JSON object")
    merged = _merge(default_config(), data)
    for path in _AGG_PATHS:
        section, key = path.split(".")
        _check_agg(merged[section][key], path)
    return merged


def _check_agg(value, path: str) -> None:
    if value is None:
        return
    if not isinstance(value, dict):
        raise ContractError(f"{path} must be an object or null")
    if "kind" not in value:
        raise ContractError(f"{path}.kind is required")
    for key in value:
        if key not in _AGG_KEYS[path]:
            raise ContractError(f"unknown config key: {path}.{key}")


def _require_int(section: dict, name: str, path: str, minimum=None) -> int:
    value = section[name]
    if isinstance(value, bool) or not isinstance(value, int):
        raise ContractError(f"{path}.{name} must be an integer")
    if minimum is not None and value < minimum:
        raise ContractError(f"{path}.{name} must be >= {minimum}")
    return value


def _require_number(section: dict, name: str, path: str) -> float:
    value = section[name]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ContractError(f"{path}.{name} must be a number")
    return float(value)


@dataclass(eq=False)
class EvalOptions:
    zero_shot_documents: int = 200
    retrieval_cases: int | None = 200
    export_score_maps: bool = False


@dataclass(eq=False)
class AblationOptions:
    seeds: tuple = (0, 1, 2)
    epochs: int | None = None


@dataclass(eq=False)
class ExperimentConfig:
    corpus: CorpusSpec
    train: TrainConfig
    eval_options: EvalOptions
    ablation: AblationOptions
    merged: dict

    @property
    def fingerprint(self) -> str:
        return jsonio.fingerprint(self.merged)

    def serialize(self) -> str:
        return jsonio.dumps_canonical(self.merged)


def experiment_from_dict(data: dict) -> ExperimentConfig:
    merged = merge_config(data)

    corpus_raw = merged["corpus"]
    for name in _CORPUS_INT_FIELDS:
        _require_int(corpus_raw, name, "corpus")
    for name in _CORPUS_FLOAT_FIELDS:
        _require_number(corpus_raw, name, "corpus")
    corpus = CorpusSpec(**corpus_raw)

    model_raw = merged["model"]
    hidden = _require_int(model_raw, "hidden_dim", "model", minimum=1)
    embed = _require_int(model_raw, "embed_dim", "model", minimum=1)

    train_raw = merged["train"]
    local_agg = local_spec_from_dict(train_raw["local_agg"])
    global_agg = global_spec_from_dict(train_raw["global_agg"])
    sentence_agg = sentence_spec_from_dict(train_raw["sentence_agg"])
    model = ModelConfig(
        region_input_dim=corpus.region_dim,
        sentence_input_dim=corpus.sentence_dim,
        hidden_dim=hidden,
        embed_dim=embed,
        use_nl=global_agg is not None and global_agg.kind == "NL",
        use_att=global_agg is not None and global_agg.kind == "Att",
    )
    train = TrainConfig(
        model=model,
        local_agg=local_agg,
        global_agg=global_agg,
        sentence_agg=sentence_agg,
        batch_size=_require_int(train_raw, "batch_size", "train"),
        sentences_per_bag=_require_int(train_raw, "sentences_per_bag", "train"),
        epochs=_require_int(train_raw, "epochs", "train"),
        peak_lr=_require_number(train_raw, "peak_lr", "train"),
        warmup_steps=_require_int(train_raw, "warmup_steps", "train"),
        weight_decay=_require_number(train_raw, "weight_decay", "train"),
        betas=tuple(float(b) for b in train_raw["betas"]),
        adam_eps=_require_number(train_raw, "adam_eps", "train"),
        gamma_init=_require_number(train_raw, "gamma_init", "train"),
        seed=_require_int(train_raw, "seed", "train"),
    )

    eval_raw = merged["eval"]
    retrieval_cases = eval_raw["retrieval_cases"]
    if retrieval_cases is not None:
        retrieval_cases = _require_int(eval_raw, "retrieval_cases", "eval",
                                       minimum=2)
    options = EvalOptions(
        zero_shot_documents=_require_int(eval_raw, "zero_shot_documents",
                                         "eval", minimum=1),
        retrieval_cases=retrieval_cases,
        export_score_maps=bool(eval_raw["export_score_maps"]),
    )

    abl_raw = merged["ablation"]
    seeds = abl_raw["seeds"]
    if not isinstance(seeds, list) or not seeds \
            or not all(isinstance(s, int) and not isinstance(s, bool)
                       for s in seeds):
        raise ContractError("ablation.seeds must be a non-empty list of "
                            "integers")
    epochs = abl_raw["epochs"]
    if epochs is not None:
        epochs = _require_int(abl_raw, "epochs", "ablation", minimum=1)
    ablation = AblationOptions(seeds=tuple(seeds), epochs=epochs)

    return ExperimentConfig(corpus=corpus, train=train, eval_options=options,
                            ablation=ablation, merged=merged)


def parse_config(path) -> ExperimentConfig:
    if not os.path.exists(path):
        raise ContractError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    try:
        data = jsonio.loads(text)
    except ValueError as exc:
        raise ContractError(f"{path}: malformed JSON: {exc}") from exc
    return experiment_from_dict(data)
