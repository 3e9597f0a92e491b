"""
Esim Evaluator - small spiking regressor that estimates how well a prediction
still matches reality, given the last sensed reference frame
"""

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from loguru import logger
from scipy.stats import spearmanr
from tqdm import tqdm

from event_core import EventFrame, FrameSequence, Geometry
from event_metrics import DEFAULT_THRESHOLD, region_esim
from event_predictor import PredictorModel, encode_cells, predict_next, sample_events
from model_checkpoint import load_checkpoint, save_checkpoint
from pipeline_errors import ConfigurationError, DimensionError
from spiking_layers import ConvLayerSpec, LifConv2d, LifParams, TrainConfig, TrainResult, bptt_train


@dataclass
class EvaluatorSpec:
    width: int = 64
    height: int = 64
    channels: Tuple[int, ...] = (8, 16, 32)
    time_steps: int = 10
    tau: float = 0.5
    v_th: float = 1.0
    alpha: float = 2.0

    @property
    def geometry(self) -> Geometry:
        return Geometry(self.width, self.height)

    def to_dict(self) -> Dict:
        return {
            "width": self.width,
            "height": self.height,
            "channels": list(self.channels),
            "time_steps": self.time_steps,
            "tau": self.tau,
            "v_th": self.v_th,
            "alpha": self.alpha,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "EvaluatorSpec":
        data = dict(data)
        if "channels" in data:
            data["channels"] = tuple(int(c) for c in data["channels"])
        try:
            return cls(**data)
        except TypeError as e:
            raise ConfigurationError(f"Invalid evaluator spec: {e}") from e


class EvaluatorModel(nn.Module):
    """Reference and prediction planes (4 channels) are presented for `time_steps`
    steps to a spiking conv stack; the pooled spike rate feeds a linear readout."""

    def __init__(self, spec: EvaluatorSpec):
        super().__init__()
        self.spec = spec
        lif = LifParams(tau=spec.tau, v_th=spec.v_th, alpha=spec.alpha)
        layers = []
        c_in = 4
        for c_out in spec.channels:
            layers.append(LifConv2d(ConvLayerSpec(c_in, c_out, 3, 2, 1, "spiking-conv", bias=True), lif))
            c_in = c_out
        self.layers = nn.ModuleList(layers)
        self.readout = nn.Linear(c_in, 1)

    @property
    def geometry(self) -> Geometry:
        return self.spec.geometry

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x: (N, 4, H, W) -> (N,) estimates in [0, 1]"""
        batch = x.shape[0]
        states = []
        h, w = x.shape[-2:]
        for layer in self.layers:
            state = layer.initial_state(batch, h, w, x.dtype)
            states.append(state)
            h, w = state.u.shape[-2:]

        rate = torch.zeros(batch, self.readout.in_features, dtype=x.dtype)
        for _ in range(self.spec.time_steps):
            s = x
            for i, layer in enumerate(self.layers):
                s, states[i] = layer(s, states[i])
            rate = rate + s.mean(dim=(-2, -1))
        rate = rate / self.spec.time_steps
        return torch.sigmoid(self.readout(rate)).squeeze(-1)


def build_evaluator(spec: EvaluatorSpec) -> EvaluatorModel:
    return EvaluatorModel(spec)


def encode_pair(reference_cells, predicted_cells) -> torch.Tensor:
    return torch.cat([encode_cells(reference_cells), encode_cells(predicted_cells)], dim=-3)


def estimate_esim(model: EvaluatorModel, reference: EventFrame, predicted: EventFrame) -> float:
    if reference.geometry != predicted.geometry:
        raise DimensionError("Reference and predicted frames differ in geometry")
    if reference.geometry != model.geometry:
        raise DimensionError(
            f"Frames {reference.width}x{reference.height} do not match evaluator "
            f"{model.geometry.width}x{model.geometry.height}"
        )
    with torch.no_grad():
        score = model(encode_pair(reference.cells, predicted.cells).unsqueeze(0))
    return float(score.clamp(0.0, 1.0).item())


# ---------------- training corpus ----------------

@dataclass
class EvaluatorSample:
    reference: np.ndarray
    predicted: np.ndarray
    target: float
    horizon: int


def build_evaluator_corpus(
    predictor: PredictorModel,
    sequences: Sequence[FrameSequence],
    n_samples: int,
    seed: int = 0,
    max_horizon: int = 10,
    warmup: int = 3,
    n: int = 4,
    th: float = DEFAULT_THRESHOLD,
    show_progress: bool = False,
) -> List[EvaluatorSample]:
    """Label self-fed rollouts of `predictor` with their true Region Esim.

    The predictor consumes sensed frames 0..s (s >= warmup - 1), frame s becomes
    the reference, then it runs h self-fed steps; the label compares that
    prediction with the true frame s + h.
    """
    usable = [seq for seq in sequences if len(seq) > warmup + 1]
    if not usable:
        raise ConfigurationError(f"Evaluator corpus needs sequences longer than {warmup + 1} frames")
    rng = np.random.default_rng(seed)
    samples = []
    for _ in tqdm(range(n_samples), desc="evaluator corpus", disable=not show_progress):
        sequence = usable[int(rng.integers(len(usable)))]
        s = int(rng.integers(warmup - 1, len(sequence) - 1))
        h = int(rng.integers(1, min(max_horizon, len(sequence) - 1 - s) + 1))

        state = None
        prob = None
        for k in range(s + 1):
            state, prob = predict_next(predictor, state, sequence[k])
        prediction = sample_events(prob, "argmax")
        for _ in range(h - 1):
            state, prob = predict_next(predictor, state, prediction)
            prediction = sample_events(prob, "argmax")

        target = region_esim(prediction, sequence[s + h], n, th).value
        samples.append(EvaluatorSample(np.asarray(sequence[s].cells), np.asarray(prediction.cells), target, h))
    logger.info(f"Built evaluator corpus of {len(samples)} samples (mean target {np.mean([x.target for x in samples]):.3f})")
    return samples


def _batch_loss(model: EvaluatorModel, batch: List[EvaluatorSample]) -> torch.Tensor:
    x = torch.stack([encode_pair(b.reference, b.predicted) for b in batch])
    y = torch.tensor([b.target for b in batch], dtype=torch.float32)
    return F.mse_loss(model(x), y)


def train_evaluator(model: EvaluatorModel, samples: Sequence[EvaluatorSample], config: TrainConfig,
                    on_epoch=None) -> TrainResult:
    logger.info(f"Training evaluator on {len(samples)} samples")
    return bptt_train(model, list(samples), _batch_loss, config, on_epoch=on_epoch)


@dataclass
class EvaluatorQuality:
    spearman: float
    mae: float
    baseline_mae: float  # always predicting the mean label
    n_samples: int


def evaluator_quality(model: EvaluatorModel, samples: Sequence[EvaluatorSample],
                      label_mean: Optional[float] = None) -> EvaluatorQuality:
    """Rank correlation and MAE of estimates against true labels on held-out samples"""
    if len(samples) < 2:
        raise ConfigurationError("Evaluator quality needs at least two samples")
    model.eval()
    with torch.no_grad():
        x = torch.stack([encode_pair(s.reference, s.predicted) for s in samples])
        estimates = model(x).numpy().astype(np.float64)
    targets = np.array([s.target for s in samples], dtype=np.float64)
    mean = float(targets.mean()) if label_mean is None else float(label_mean)
    rho, _ = spearmanr(estimates, targets)
    return EvaluatorQuality(
        spearman=float(rho) if np.isfinite(rho) else 0.0,
        mae=float(np.abs(estimates - targets).mean()),
        baseline_mae=float(np.abs(mean - targets).mean()),
        n_samples=len(samples),
    )


EVALUATOR_KIND = "evaluator"


def save_evaluator(model: EvaluatorModel, path: str) -> None:
    save_checkpoint(model, path, EVALUATOR_KIND, model.spec.to_dict())


def load_evaluator(path: str) -> EvaluatorModel:
    kind, spec, state = load_checkpoint(path)
    if kind != EVALUATOR_KIND:
        raise ConfigurationError(f"{path} holds a '{kind}' checkpoint, expected '{EVALUATOR_KIND}'")
    model = build_evaluator(EvaluatorSpec.from_dict(spec))
    model.load_state_dict(state)
    model.eval()
    return model
