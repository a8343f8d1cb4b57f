"""Run configuration: JSON file plus dotted-key command-line overrides."""

import copy
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, Iterable, Optional

import config
from generators import PARADIGMS
from reasoner import CONDITION_MODES

logger = logging.getLogger(__name__)

VLM_MODES = ("two_stage", "frozen", "joint")
STAGES = ("all", "data", "rvq", "vae", "stage1", "stage2", "evaluator", "eval")
# "stage1" decodes the reasoner's own token stream through the RVQ decoder
RUN_PARADIGMS = PARADIGMS + ("stage1",)

DATASET_DEFAULTS = {
    "path": None,
    "num_samples": 1000,
    "seed": 0,
    "skeleton": config.DEFAULT_SKELETON,
    "workers": config.NUM_WORKERS,
}

EVAL_DEFAULTS = {
    "retrieval_batch": config.RETRIEVAL_BATCH,
    "temperature": 0.0,
    "top_k": None,
    "max_samples": None,
    "latency_samples": 8,
}


class ConfigError(ValueError):
    """Invalid run configuration."""


@dataclass
class RunConfig:
    name: str = "default"
    stage: str = "all"
    paradigm: str = "fm_latent"
    vlm_mode: str = "two_stage"
    condition_mode: str = "full"
    seed: int = 0
    device: str = config.DEVICE
    experiment_root: str = config.EXPERIMENT_ROOT
    dataset: Dict = field(default_factory=lambda: dict(DATASET_DEFAULTS))
    rvq: Dict = field(default_factory=lambda: dict(config.RVQ_DEFAULTS))
    vae: Dict = field(default_factory=lambda: dict(config.VAE_DEFAULTS))
    reasoner: Dict = field(default_factory=lambda: dict(config.REASONER_DEFAULTS))
    generator: Dict = field(default_factory=lambda: dict(config.GENERATOR_DEFAULTS))
    evaluator: Dict = field(default_factory=lambda: dict(config.EVALUATOR_DEFAULTS))
    optim: Dict = field(default_factory=lambda: dict(config.TRAINING_DEFAULTS))
    eval: Dict = field(default_factory=lambda: dict(EVAL_DEFAULTS))

    def validate(self) -> "RunConfig":
        if self.stage not in STAGES:
            raise ConfigError(f"Unknown stage '{self.stage}', expected one of {STAGES}")
        if self.paradigm not in RUN_PARADIGMS:
            raise ConfigError(f"Unknown paradigm '{self.paradigm}', expected one of {RUN_PARADIGMS}")
        if self.vlm_mode not in VLM_MODES:
            raise ConfigError(f"Unknown vlm_mode '{self.vlm_mode}', expected one of {VLM_MODES}")
        if self.condition_mode not in CONDITION_MODES:
            raise ConfigError(f"Unknown condition_mode '{self.condition_mode}'")
        if self.paradigm == "stage1" and self.vlm_mode != "two_stage":
            raise ConfigError("The stage1 paradigm has no stage II; use vlm_mode two_stage")
        for key in ("codec_steps", "stage1_steps", "stage2_steps", "evaluator_steps", "batch_size"):
            if int(self.optim[key]) <= 0:
                raise ConfigError(f"optim.{key} must be positive, got {self.optim[key]}")
        for key in ("codec_lr", "stage_lr", "evaluator_lr"):
            if float(self.optim[key]) <= 0:
                raise ConfigError(f"optim.{key} must be positive")
        if int(self.dataset["num_samples"]) < 10:
            raise ConfigError("dataset.num_samples must be at least 10")
        return self

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "RunConfig":
        """Merge a (possibly partial) dict over the defaults; unknown keys are an error."""
        base = cls()
        known = {f.name for f in fields(cls)}
        for key, value in data.items():
            if key not in known:
                raise ConfigError(f"Unknown config key '{key}'")
            current = getattr(base, key)
            if isinstance(current, dict):
                if not isinstance(value, dict):
                    raise ConfigError(f"Config section '{key}' must be an object")
                unknown = set(value) - set(current)
                if unknown:
                    raise ConfigError(f"Unknown keys in '{key}': {sorted(unknown)}")
                merged = dict(current)
                merged.update(value)
                setattr(base, key, merged)
            else:
                setattr(base, key, value)
        return base


def parse_override(text: str):
    """'a.b=value' -> (['a', 'b'], value); values are JSON, falling back to strings."""
    if "=" not in text:
        raise ConfigError(f"Override '{text}' is not of the form key=value")
    key, raw = text.split("=", 1)
    path = [part for part in key.strip().split(".") if part]
    if not path:
        raise ConfigError(f"Override '{text}' has an empty key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return path, value


def apply_overrides(data: Dict, overrides: Iterable[str]) -> Dict:
    data = copy.deepcopy(data)
    for text in overrides or ():
        path, value = parse_override(text)
        node = data
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"Override '{text}' descends into a non-object")
        node[path[-1]] = value
    return data


def load_run_config(path: Optional[str] = None, overrides: Iterable[str] = ()) -> RunConfig:
    """Read a JSON run config (or start from defaults) and apply overrides."""
    data: Dict = {}
    if path:
        try:
            with open(path, 'r', encoding='utf-8') as f:
                data = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"Config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config file {path} is not valid JSON: {e}")
    data = apply_overrides(data, overrides)
    cfg = RunConfig.from_dict(data).validate()
    logger.info(f"Run config '{cfg.name}': paradigm={cfg.paradigm} vlm_mode={cfg.vlm_mode} seed={cfg.seed}")
    return cfg


def save_run_config(cfg: RunConfig, path: str) -> None:
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(cfg.to_dict(), f, indent=2)
