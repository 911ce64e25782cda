"""Experiment configuration: one JSON document, schema-checked on load."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import jsonschema

from .corpus import AugmentConfig, CorpusConfig
from .decoder import VARIANTS, DecoderConfig
from .encoder import EncoderConfig
from .nn import LoraConfig
from .train import OptimizerConfig, PhaseConfig

SCHEMA_VERSION = 1
MASKS = ("causal", "prefix_full")


class ConfigError(ValueError):
    pass


def _ctc_default():
    return PhaseConfig(steps=600, batch_size=8, warmup_steps=100, peak_lr=2e-3, floor_lr=5e-5,
                       eval_every=300, eval_samples=40)


def _lm_default():
    return PhaseConfig(steps=800, batch_size=16, warmup_steps=100, peak_lr=2e-3, floor_lr=5e-5,
                       eval_every=400, eval_samples=200, augment=False)


def _ft_default():
    return PhaseConfig(steps=1500, batch_size=8, warmup_steps=100, peak_lr=3e-3, floor_lr=2e-5,
                       eval_every=0, eval_samples=40)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    ctc: PhaseConfig = field(default_factory=_ctc_default)
    lm: PhaseConfig = field(default_factory=_lm_default)
    finetune: PhaseConfig = field(default_factory=_ft_default)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    augment: AugmentConfig | None = None
    context_in_training: bool = True
    context_in_eval: bool = True
    mask_scheme: str = "causal"
    variant: str = "decoder_only"
    eval_batch_size: int = 50
    paths: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mask_scheme not in MASKS:
            raise ConfigError(f"mask_scheme must be one of {MASKS}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if self.decoder.variant != self.variant:
            object.__setattr__(self, "decoder", replace(self.decoder, variant=self.variant))
        if self.encoder.decoder_dim != self.decoder.model_dim:
            raise ConfigError("encoder.decoder_dim must equal decoder.model_dim")
        if self.encoder.feat_dim != self.corpus.feat_dim:
            raise ConfigError("encoder.feat_dim must equal corpus.feat_dim")
        for name in ("ctc", "lm", "finetune"):
            try:
                getattr(self, name).schedule
            except ValueError as e:
                raise ConfigError(f"{name}: {e}") from None
        if self.augment is None:
            object.__setattr__(self, "augment", AugmentConfig.scaled(self.corpus.feat_dim))

    @property
    def finetune_phase(self) -> PhaseConfig:
        return replace(self.finetune, context_in_training=self.context_in_training, mask=self.mask_scheme)

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("ctc", "lm", "finetune"):
            d[k].pop("context_in_training")
            d[k].pop("mask")
        # round-trip so tuples come back as lists, as they would from a file
        return json.loads(json.dumps({"schema_version": SCHEMA_VERSION, **d}))

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True)

    def with_(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)


# ---------------------------------------------------------------- schema

_PHASE_SKIP = {"context_in_training", "mask"}
_SECTIONS = {"corpus": CorpusConfig, "encoder": EncoderConfig, "decoder": DecoderConfig,
             "ctc": PhaseConfig, "lm": PhaseConfig, "finetune": PhaseConfig,
             "optimizer": OptimizerConfig, "augment": AugmentConfig, "lora": LoraConfig}


def _json_type(v):
    if isinstance(v, bool):
        return {"type": "boolean"}
    if isinstance(v, int):
        return {"type": "integer"}
    if isinstance(v, float):
        return {"type": "number"}
    if isinstance(v, str):
        return {"type": "string"}
    if isinstance(v, (tuple, list)):
        return {"type": "array"}
    return {}


def _object_schema(cls, skip=()) -> dict:
    inst = cls()
    props = {}
    for f in dataclasses.fields(cls):
        if not f.init or f.name in skip:
            continue
        if f.name == "lora":
            props[f.name] = _object_schema(LoraConfig)
            continue
        props[f.name] = _json_type(getattr(inst, f.name))
    return {"type": "object", "properties": props, "additionalProperties": False}


def schema() -> dict:
    props = {"schema_version": {"const": SCHEMA_VERSION}}
    for k, cls in _SECTIONS.items():
        if k == "lora":
            continue
        props[k] = _object_schema(cls, _PHASE_SKIP if cls is PhaseConfig else ())
    props["augment"] = {"anyOf": [props["augment"], {"type": "null"}]}
    props.update({
        "seed": {"type": "integer", "minimum": 0},
        "context_in_training": {"type": "boolean"},
        "context_in_eval": {"type": "boolean"},
        "mask_scheme": {"enum": list(MASKS)},
        "variant": {"enum": list(VARIANTS)},
        "eval_batch_size": {"type": "integer", "minimum": 1},
        "paths": {"type": "object", "additionalProperties": {"type": "string"}},
    })
    return {"type": "object", "properties": props, "required": ["schema_version"], "additionalProperties": False}


def _build(cls, d: dict):
    kw = {}
    for k, v in d.items():
        if isinstance(v, list):
            v = tuple(v)
        if k == "lora":
            v = _build(LoraConfig, v)
        kw[k] = v
    return cls(**kw)


def from_dict(d: dict) -> ExperimentConfig:
    try:
        jsonschema.validate(d, schema())
    except jsonschema.ValidationError as e:
        path = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {path}: {e.message}") from None
    kw = {}
    for k, v in d.items():
        if k == "schema_version":
            continue
        if k in _SECTIONS and v is not None:
            v = _build(_SECTIONS[k], v)
        kw[k] = v
    try:
        return ExperimentConfig(**kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def load_config(path) -> ExperimentConfig:
    try:
        d = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from None
    return from_dict(d)
