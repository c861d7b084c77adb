"""Two small tanh encoders and the flat parameter layout shared by the
optimizer, the checkpoints and the gradient checks."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Var, as_var


@dataclass(frozen=True)
class ModelConfig:
    """Shapes and optional aggregator parameters of one model."""

    region_input_dim: int
    sentence_input_dim: int
    hidden_dim: int
    embed_dim: int
    use_nl: bool = False
    use_att: bool = False

    def __post_init__(self):
        for name in ("region_input_dim", "sentence_input_dim", "hidden_dim",
                     "embed_dim"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")

    def to_dict(self) -> dict:
        return {
            "region_input_dim": self.region_input_dim,
            "sentence_input_dim": self.sentence_input_dim,
            "hidden_dim": self.hidden_dim,
            "embed_dim": self.embed_dim,
            "use_nl": self.use_nl,
            "use_att": self.use_att,
        }


def model_config_from_dict(d: dict) -> ModelConfig:
    return ModelConfig(**d)


@dataclass(eq=False)
class EncoderParams:
    """Weights of one two-layer tanh encoder: W2 @ tanh(W1 @ v + b1) + b2."""

    W1: object
    b1: object
    W2: object
    b2: object


@dataclass(eq=False)
class ModelParams:
    region_encoder: EncoderParams
    sentence_encoder: EncoderParams
    log_gamma: object
    sim_map: object = None   # NL similarity metric over embedded regions
    att_proj: object = None  # Att projection into the attention space
    att_vec: object = None   # Att scoring vector


def encode_bag(params: EncoderParams, observations) -> Var:
    """Encode a (N, D_in) bag of observations row by row; rows never mix,
    so reordering inputs reorders outputs bit for bit."""
    obs = as_var(observations)
    if obs.value.ndim != 2 or obs.value.shape[0] == 0:
        raise ContractError("encode_bag expects a non-empty (count, dim) array")
    w1 = as_var(params.W1)
    if obs.value.shape[1] != w1.value.shape[1]:
        raise ContractError(
            f"encoder input dim mismatch: got {obs.value.shape[1]}, "
            f"expected {w1.value.shape[1]}"
        )
    hidden = ad.tanh(ad.add(ad.matmul(obs, ad.transpose(w1)), params.b1))
    return ad.add(ad.matmul(hidden, ad.transpose(as_var(params.W2))), params.b2)


def param_template(config: ModelConfig) -> tuple:
    """Flat parameter layout: (name, shape, weight_decay) per field, in the
    fixed order used everywhere parameters are serialized."""
    h, d = config.hidden_dim, config.embed_dim
    dr, ds = config.region_input_dim, config.sentence_input_dim
    entries = [
        ("region.W1", (h, dr), True),
        ("region.b1", (h,), False),
        ("region.W2", (d, h), True),
        ("region.b2", (d,), False),
        ("sentence.W1", (h, ds), True),
        ("sentence.b1", (h,), False),
        ("sentence.W2", (d, h), True),
        ("sentence.b2", (d,), False),
    ]
    if config.use_nl:
        entries.append(("sim_map", (d, d), True))
    if config.use_att:
        entries.append(("att_proj", (d, d), True))
        entries.append(("att_vec", (d,), True))
    entries.append(("log_gamma", (), False))
    return tuple(entries)


def param_count(config: ModelConfig) -> int:
    return sum(int(np.prod(shape, dtype=np.int64)) for _, shape, _ in
               param_template(config))


def decay_mask(config: ModelConfig) -> np.ndarray:
    """1.0 where weight decay applies, 0.0 for biases and the temperature."""
    parts = []
    for _, shape, decay in param_template(config):
        size = int(np.prod(shape, dtype=np.int64))
        parts.append(np.full(size, 1.0 if decay else 0.0))
    return np.concatenate(parts) if parts else np.zeros(0)


def _glorot(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    if len(shape) == 1:
        fan_in, fan_out = shape[0], 1
    else:
        fan_out, fan_in = shape
    r = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-r, r, size=shape)


def init_model(config: ModelConfig, gamma_init: float, seed: int) -> ModelParams:
    """Deterministic initialization; draws happen in template order."""
    if not gamma_init > 0.0:
        raise ContractError("gamma_init must be positive")
    rng = np.random.default_rng(seed)
    h, d = config.hidden_dim, config.embed_dim

    def encoder(input_dim: int) -> EncoderParams:
        return EncoderParams(
            W1=_glorot(rng, (h, input_dim)),
            b1=np.zeros(h),
            W2=_glorot(rng, (d, h)),
            b2=np.zeros(d),
        )

    region = encoder(config.region_input_dim)
    sentence = encoder(config.sentence_input_dim)
    sim_map = None
    if config.use_nl:
        sim_map = np.eye(d) + 0.01 * rng.standard_normal((d, d))
    att_proj = att_vec = None
    if config.use_att:
        att_proj = _glorot(rng, (d, d))
        att_vec = _glorot(rng, (d,))
    return ModelParams(
        region_encoder=region,
        sentence_encoder=sentence,
        log_gamma=np.asarray(math.log(gamma_init)),
        sim_map=sim_map,
        att_proj=att_proj,
        att_vec=att_vec,
    )


def _fields(params: ModelParams) -> dict:
    fields = {
        "region.W1": params.region_encoder.W1,
        "region.b1": params.region_encoder.b1,
        "region.W2": params.region_encoder.W2,
        "region.b2": params.region_encoder.b2,
        "sentence.W1": params.sentence_encoder.W1,
        "sentence.b1": params.sentence_encoder.b1,
        "sentence.W2": params.sentence_encoder.W2,
        "sentence.b2": params.sentence_encoder.b2,
        "log_gamma": params.log_gamma,
    }
    if params.sim_map is not None:
        fields["sim_map"] = params.sim_map
    if params.att_proj is not None:
        fields["att_proj"] = params.att_proj
        fields["att_vec"] = params.att_vec
    return fields


def flatten_params(config: ModelConfig, params: ModelParams) -> np.ndarray:
    """Concatenate every trainable scalar once, in template order (C order
    within each field). Bitwise inverse of unflatten_params."""
    fields = _fields(params)
    parts = []
    for name, shape, _ in param_template(config):
        if name not in fields:
            raise ContractError(f"model is missing parameter field {name!r}")
        arr = np.asarray(fields[name], dtype=np.float64)
        if arr.shape != shape:
            raise ContractError(
                f"parameter {name!r} has shape {arr.shape}, expected {shape}"
            )
        parts.append(arr.ravel())
    return np.concatenate(parts)


def unflatten_params(config: ModelConfig, flat) -> ModelParams:
    """Rebuild structured parameters from a flat vector.

    Accepts a plain ndarray or a Var; with a Var the fields are views in
    the same tape, so a loss built from them differentiates with respect
    to the flat vector.
    """
    template = param_template(config)
    total = param_count(config)
    is_var = isinstance(flat, Var)
    length = flat.value.shape[0] if is_var else np.asarray(flat).shape[0]
    if length != total:
        raise ContractError(
            f"flat parameter vector has length {length}, expected {total}"
        )
    fields = {}
    offset = 0
    for name, shape, _ in template:
        size = int(np.prod(shape, dtype=np.int64))
        chunk = flat[offset:offset + size]
        if is_var:
            fields[name] = ad.reshape(chunk, shape)
        else:
            fields[name] = np.asarray(chunk, dtype=np.float64).reshape(shape)
        offset += size
    region = EncoderParams(W1=fields["region.W1"], b1=fields["region.b1"],
                           W2=fields["region.W2"], b2=fields["region.b2"])
    sentence = EncoderParams(W1=fields["sentence.W1"], b1=fields["sentence.b1"],
                             W2=fields["sentence.W2"], b2=fields["sentence.b2"])
    return ModelParams(
        region_encoder=region,
        sentence_encoder=sentence,
        log_gamma=fields["log_gamma"],
        sim_map=fields.get("sim_map"),
        att_proj=fields.get("att_proj"),
        att_vec=fields.get("att_vec"),
    )
