"""Strict config parsing: defaults, dotted-path rejection of unknown keys,
wholesale aggregator overrides, and derived model dimensions."""

import numpy as np
import pytest

from milalign import jsonio
from milalign.autodiff import ContractError
from milalign.config import (
    default_config,
    experiment_from_dict,
    merge_config,
    parse_config,
)


def test_default_fingerprint_is_stable():
    cfg = experiment_from_dict({})
    assert cfg.fingerprint == "bb5814d7c3f8f5e6"
    assert cfg.fingerprint == jsonio.fingerprint(default_config())


def test_small_override_fingerprint_is_stable():
    cfg = experiment_from_dict({"ablation": {"seeds": [0], "epochs": 2},
                                "train": {"warmup_steps": 10}})
    assert cfg.fingerprint == "9c31c7bf72c2ad11"


def test_defaults_round_trip_through_serialize():
    cfg = experiment_from_dict({})
    assert jsonio.loads(cfg.serialize()) == cfg.merged
    assert cfg.merged["train"]["epochs"] == 15
    assert cfg.merged["train"]["batch_size"] == 32
    assert cfg.corpus.documents == 2000
    assert cfg.train.model.hidden_dim == 32
    assert cfg.train.model.embed_dim == 16
    assert cfg.eval_options.zero_shot_documents == 200
    assert cfg.ablation.seeds == (0, 1, 2)
    assert cfg.ablation.epochs is None


def test_unknown_keys_are_rejected_with_dotted_path():
    with pytest.raises(ContractError, match="unknown config key: trian"):
        merge_config({"trian": {}})
    with pytest.raises(ContractError, match="unknown config key: train.bogus"):
        merge_config({"train": {"bogus": 1}})
    with pytest.raises(ContractError,
                       match="unknown config key: corpus.regions"):
        merge_config({"corpus": {"regions": 5}})
    with pytest.raises(ContractError,
                       match="unknown config key: train.local_agg.bogus"):
        merge_config({"train": {"local_agg": {"kind": "LSE", "bogus": 1}}})


def test_scalar_overrides_merge_on_top_of_defaults():
    merged = merge_config({"train": {"epochs": 3}})
    assert merged["train"]["epochs"] == 3
    assert merged["train"]["batch_size"] == 32
    assert merged["corpus"]["documents"] == 2000


def test_aggregator_override_replaces_wholesale():
    # the default LSE gamma must not leak into a Max override
    merged = merge_config({"train": {"local_agg": {"kind": "Max"}}})
    assert merged["train"]["local_agg"] == {"kind": "Max"}
    cfg = experiment_from_dict({"train": {"local_agg": {"kind": "Max"}}})
    assert cfg.train.local_agg.kind == "Max"
    assert cfg.train.local_agg.gamma is None


def test_aggregator_null_disables_route():
    cfg = experiment_from_dict({"train": {"global_agg": None}})
    assert cfg.train.global_agg is None
    assert not cfg.train.model.use_nl
    assert not cfg.train.model.use_att


def test_aggregator_requires_kind():
    with pytest.raises(ContractError, match="train.local_agg.kind"):
        merge_config({"train": {"local_agg": {"gamma": 0.5}}})
    with pytest.raises(ContractError, match="must be an object or null"):
        merge_config({"train": {"global_agg": "NL"}})


def test_global_kind_selects_model_parameters():
    cfg = experiment_from_dict({})
    assert cfg.train.model.use_nl
    assert not cfg.train.model.use_att
    cfg = experiment_from_dict({"train": {"global_agg": {"kind": "Att"}}})
    assert cfg.train.model.use_att
    assert not cfg.train.model.use_nl
    cfg = experiment_from_dict({"train": {"global_agg": {"kind": "Avg"}}})
    assert not cfg.train.model.use_att
    assert not cfg.train.model.use_nl


def test_model_dims_follow_corpus():
    cfg = experiment_from_dict({"corpus": {"region_dim": 9,
                                           "sentence_dim": 11}})
    assert cfg.train.model.region_input_dim == 9
    assert cfg.train.model.sentence_input_dim == 11


def test_booleans_are_not_integers():
    with pytest.raises(ContractError, match="train.batch_size"):
        experiment_from_dict({"train": {"batch_size": True}})
    with pytest.raises(ContractError, match="corpus.seed"):
        experiment_from_dict({"corpus": {"seed": False}})
    with pytest.raises(ContractError, match="train.peak_lr"):
        experiment_from_dict({"train": {"peak_lr": True}})


def test_type_errors_name_the_field():
    with pytest.raises(ContractError, match="model.hidden_dim"):
        experiment_from_dict({"model": {"hidden_dim": 2.5}})
    with pytest.raises(ContractError, match="train.epochs"):
        experiment_from_dict({"train": {"epochs": "15"}})
    with pytest.raises(ContractError, match="corpus.noise_sigma"):
        experiment_from_dict({"corpus": {"noise_sigma": "small"}})


def test_ablation_validation():
    with pytest.raises(ContractError, match="ablation.seeds"):
        experiment_from_dict({"ablation": {"seeds": []}})
    with pytest.raises(ContractError, match="ablation.seeds"):
        experiment_from_dict({"ablation": {"seeds": [0, True]}})
    with pytest.raises(ContractError, match="ablation.epochs"):
        experiment_from_dict({"ablation": {"epochs": 0}})
    cfg = experiment_from_dict({"ablation": {"seeds": [5], "epochs": 2}})
    assert cfg.ablation.seeds == (5,)
    assert cfg.ablation.epochs == 2


def test_eval_options():
    cfg = experiment_from_dict({"eval": {"retrieval_cases": None}})
    assert cfg.eval_options.retrieval_cases is None
    with pytest.raises(ContractError, match="eval.retrieval_cases"):
        experiment_from_dict({"eval": {"retrieval_cases": 1}})
    cfg = experiment_from_dict({"eval": {"export_score_maps": True}})
    assert cfg.eval_options.export_score_maps is True


def test_document_must_be_object():
    with pytest.raises(ContractError, match="JSON object"):
        merge_config([1, 2, 3])


def test_fingerprint_changes_with_content():
    base = experiment_from_dict({}).fingerprint
    other = experiment_from_dict({"train": {"seed": 1}}).fingerprint
    assert base != other
    again = experiment_from_dict({"train": {"seed": 0}}).fingerprint
    assert base == again  # explicit default equals implicit default


def test_parse_config_files(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text('{"train": {"epochs": 2}}')
    cfg = parse_config(path)
    assert cfg.train.epochs == 2

    with pytest.raises(ContractError, match="not found"):
        parse_config(tmp_path / "missing.json")

    bad = tmp_path / "bad.json"
    bad.write_text("{")
    with pytest.raises(ContractError, match="malformed JSON"):
        parse_config(bad)


def test_train_section_feeds_train_config():
    cfg = experiment_from_dict({"train": {"batch_size": 8, "epochs": 2,
                                          "peak_lr": 0.005,
                                          "warmup_steps": 7,
                                          "gamma_init": 10.0,
                                          "betas": [0.8, 0.99]}})
    assert cfg.train.batch_size == 8
    assert cfg.train.epochs == 2
    assert cfg.train.peak_lr == 0.005
    assert cfg.train.warmup_steps == 7
    assert cfg.train.gamma_init == 10.0
    assert cfg.train.betas == (0.8, 0.99)
    assert np.isclose(cfg.train.weight_decay, 0.01)
