"""
Experiment configuration
One YAML document per experiment, validated before the section dataclasses are built
"""

import copy
import os
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import jsonschema
import yaml
from dotenv import load_dotenv

from attention_controller import ENERGY_PER_BIT_RANGE, LinkEnergyModel
from esim_evaluator import EvaluatorSpec
from event_metrics import DEFAULT_THRESHOLD, DEFAULT_WINDOWS
from event_predictor import ModelSpec, PredictorTrainConfig
from pipeline_errors import ConfigurationError
from scene_synth import DatasetConfig
from spiking_layers import TrainConfig

OUTPUT_ROOT_ENV = "PATTN_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "runs"

_NUMBER_LIST = {"type": "array", "items": {"type": "number"}}

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["seed"],
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "dataset": {"type": "object"},
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "predictor_spec": {"type": "string"},
                "evaluator_spec": {"type": "string"},
            },
        },
        "training": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "epochs": {"type": "integer", "minimum": 1},
                "unroll": {"type": "integer", "minimum": 1},
                "grad_clip": {"type": ["number", "null"]},
                "class_weights": {"oneOf": [{"type": "null"}, {**_NUMBER_LIST, "minItems": 3, "maxItems": 3}]},
                "evaluator_epochs": {"type": "integer", "minimum": 1},
                "evaluator_samples": {"type": "integer", "minimum": 2},
                "max_horizon": {"type": "integer", "minimum": 1},
            },
        },
        "metrics": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "windows": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                "th": {"type": "number", "exclusiveMinimum": 0},
                "noise_levels": _NUMBER_LIST,
            },
        },
        "attention": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "threshold": {"type": "number", "minimum": 0, "maximum": 1},
                "thresholds": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}},
                "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                "warmup": {"type": "integer", "minimum": 1},
                "noise_level": {"type": "number", "minimum": 0},
                "energy_per_bit": {"type": "number", "exclusiveMinimum": 0},
                "energy_override": {"type": "boolean"},
                "n_sequences": {"type": "integer", "minimum": 1},
            },
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "root": {"type": "string"},
                "data_dir": {"type": "string"},
                "checkpoint_dir": {"type": "string"},
            },
        },
    },
}


@dataclass
class TrainingConfig:
    lr: float = 1e-3
    batch_size: int = 8
    epochs: int = 200
    unroll: int = 8
    grad_clip: Optional[float] = None
    class_weights: Optional[List[float]] = None
    evaluator_epochs: int = 50
    evaluator_samples: int = 512
    max_horizon: int = 10

    def predictor_config(self, seed: int, show_progress: bool = False) -> PredictorTrainConfig:
        return PredictorTrainConfig(
            lr=self.lr, batch_size=self.batch_size, epochs=self.epochs, seed=seed,
            grad_clip=self.grad_clip, show_progress=show_progress,
            unroll=self.unroll, class_weights=self.class_weights,
        )

    def evaluator_config(self, seed: int, show_progress: bool = False) -> TrainConfig:
        return TrainConfig(
            lr=self.lr, batch_size=self.batch_size, epochs=self.evaluator_epochs, seed=seed,
            grad_clip=self.grad_clip, show_progress=show_progress,
        )


@dataclass
class MetricConfig:
    windows: List[int] = field(default_factory=lambda: list(DEFAULT_WINDOWS))
    th: float = DEFAULT_THRESHOLD
    noise_levels: List[float] = field(default_factory=lambda: [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9])


@dataclass
class AttentionConfig:
    threshold: float = 0.5
    thresholds: List[float] = field(default_factory=lambda: [0.3, 0.4, 0.5, 0.6, 0.7])
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    warmup: int = 3
    noise_level: float = 0.0
    energy_per_bit: float = ENERGY_PER_BIT_RANGE[0]
    energy_override: bool = False
    n_sequences: int = 10

    def energy_model(self) -> LinkEnergyModel:
        return LinkEnergyModel(energy_per_bit=self.energy_per_bit, override=self.energy_override)


@dataclass
class OutputConfig:
    root: str = DEFAULT_OUTPUT_ROOT
    data_dir: Optional[str] = None
    checkpoint_dir: Optional[str] = None

    @property
    def dataset_dir(self) -> str:
        return self.data_dir or os.path.join(self.root, "data")

    @property
    def checkpoints(self) -> str:
        return self.checkpoint_dir or os.path.join(self.root, "checkpoints")


@dataclass
class ExperimentConfig:
    """Configuration of one experiment; every command reads the same document"""
    seed: int
    dataset: DatasetConfig
    predictor: ModelSpec
    evaluator: EvaluatorSpec
    training: TrainingConfig = field(default_factory=TrainingConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    source: Optional[str] = None

    @classmethod
    def bouncing_ball_64(cls, seed: int = 0) -> "ExperimentConfig":
        return cls.from_document({"seed": seed, "dataset": {"preset": "bouncingball64"}})

    @classmethod
    def from_env(cls) -> "ExperimentConfig":
        """Defaults for a quick run; the seed comes from PATTN_SEED"""
        load_dotenv()
        return cls.bouncing_ball_64(seed=int(os.getenv("PATTN_SEED", "0")))

    @classmethod
    def load(cls, path: str, overrides: Sequence[str] = ()) -> "ExperimentConfig":
        if not os.path.exists(path):
            raise ConfigurationError(f"Config file not found: {path}")
        with open(path, "r", encoding="utf-8") as f:
            try:
                document = yaml.safe_load(f) or {}
            except yaml.YAMLError as e:
                raise ConfigurationError(f"{path}: invalid YAML: {e}") from e
        document = apply_overrides(document, overrides)
        config = cls.from_document(document, base_dir=os.path.dirname(os.path.abspath(path)))
        config.source = path
        return config

    @classmethod
    def from_document(cls, document: Dict[str, Any], base_dir: str = ".") -> "ExperimentConfig":
        try:
            jsonschema.validate(document, CONFIG_SCHEMA)
        except jsonschema.ValidationError as e:
            where = ".".join(str(p) for p in e.absolute_path) or "<root>"
            raise ConfigurationError(f"Invalid config at {where}: {e.message}") from e

        seed = int(document["seed"])
        dataset_section = dict(document.get("dataset") or {"preset": "bouncingball64"})
        dataset_section.setdefault("seed", seed)
        if not dataset_section.get("preset") and "name" not in dataset_section:
            dataset_section["preset"] = "bouncingball64"
        dataset = DatasetConfig.from_dict(dataset_section)

        model = document.get("model") or {}
        predictor = cls._load_spec(model.get("predictor_spec"), base_dir, ModelSpec.from_file)
        if predictor is None:
            predictor = ModelSpec(width=dataset.width, height=dataset.height)
        evaluator = cls._load_spec(model.get("evaluator_spec"), base_dir, _evaluator_spec_from_file)
        if evaluator is None:
            evaluator = EvaluatorSpec(width=dataset.width, height=dataset.height)
        if (predictor.width, predictor.height) != (dataset.width, dataset.height):
            raise ConfigurationError(
                f"Predictor geometry {predictor.width}x{predictor.height} differs from dataset {dataset.width}x{dataset.height}"
            )

        output = dict(document.get("output") or {})
        load_dotenv()
        output.setdefault("root", os.getenv(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT))

        return cls(
            seed=seed,
            dataset=dataset,
            predictor=predictor,
            evaluator=evaluator,
            training=TrainingConfig(**(document.get("training") or {})),
            metrics=MetricConfig(**(document.get("metrics") or {})),
            attention=AttentionConfig(**(document.get("attention") or {})),
            output=OutputConfig(**output),
        )

    @staticmethod
    def _load_spec(path: Optional[str], base_dir: str, loader):
        if path is None:
            return None
        resolved = path if os.path.isabs(path) else os.path.join(base_dir, path)
        if not os.path.exists(resolved):
            raise ConfigurationError(f"Referenced spec file not found: {path}")
        return loader(resolved)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        updated = copy.deepcopy(self)
        updated.seed = seed
        updated.dataset.seed = seed
        return updated

    def to_dict(self) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "dataset": asdict(self.dataset),
            "predictor": self.predictor.to_dict(),
            "evaluator": self.evaluator.to_dict(),
            "training": asdict(self.training),
            "metrics": asdict(self.metrics),
            "attention": asdict(self.attention),
            "output": asdict(self.output),
        }


def _evaluator_spec_from_file(path: str) -> EvaluatorSpec:
    with open(path, "r", encoding="utf-8") as f:
        return EvaluatorSpec.from_dict(yaml.safe_load(f) or {})


def apply_overrides(document: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """Apply `section.key=value` overrides; values are parsed as YAML scalars/lists"""
    document = copy.deepcopy(document)
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"Override '{item}' is not of the form section.key=value")
        dotted, raw = item.split("=", 1)
        keys = [k for k in dotted.strip().split(".") if k]
        if not keys:
            raise ConfigurationError(f"Override '{item}' has an empty key")
        value = yaml.safe_load(raw) if raw.strip() else None
        node = document
        for key in keys[:-1]:
            child = node.get(key)
            if child is None:
                child = node[key] = {}
            elif not isinstance(child, dict):
                raise ConfigurationError(f"Override '{item}': '{key}' is not a section")
            node = child
        node[keys[-1]] = value
    return document
