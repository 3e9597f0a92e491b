"""
Event Predictor - hybrid SNN-encoder / ANN-decoder next-frame predictor
Forward prediction, event sampling, CE loss, closed-loop rollout and training helpers
"""

import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
import yaml
from loguru import logger

from event_core import EventFrame, FrameSequence, Geometry, inject_noise_sequence
from event_metrics import DEFAULT_THRESHOLD, region_esim, relative_esim, spurious_event_count
from model_checkpoint import load_checkpoint, save_checkpoint
from pipeline_errors import ConfigurationError, DimensionError
from spiking_layers import (
    AnalogConv,
    ConvLayerSpec,
    LifConv2d,
    LifLayerState,
    LifParams,
    SpikeRecorder,
    TrainConfig,
    TrainResult,
    bptt_train,
)

N_CLASSES = 3  # no-event, positive, negative
LOG_FLOOR = 1e-12


@dataclass
class ModelSpec:
    """Layer stack of the predictor; loaded from a small YAML key-value file"""
    width: int = 64
    height: int = 64
    encoder_channels: List[int] = field(default_factory=lambda: [16, 32, 64])
    residual_blocks: int = 2
    kernel_size: int = 3
    tau: float = 0.5
    v_th: float = 1.0
    alpha: float = 2.0
    input_skip: bool = True
    relaxed: bool = False
    detach_reset: bool = True

    def __post_init__(self):
        self.encoder_channels = [int(c) for c in self.encoder_channels]
        scale = 2 ** len(self.encoder_channels)
        if self.width % scale or self.height % scale:
            raise ConfigurationError(
                f"Geometry {self.width}x{self.height} must be divisible by {scale} for {len(self.encoder_channels)} stride-2 layers"
            )

    @property
    def geometry(self) -> Geometry:
        return Geometry(self.width, self.height)

    @property
    def lif(self) -> LifParams:
        return LifParams(
            tau=self.tau, v_th=self.v_th, alpha=self.alpha, relaxed=self.relaxed, detach_reset=self.detach_reset
        )

    def to_dict(self) -> Dict:
        return {
            "width": self.width,
            "height": self.height,
            "encoder_channels": list(self.encoder_channels),
            "residual_blocks": self.residual_blocks,
            "kernel_size": self.kernel_size,
            "tau": self.tau,
            "v_th": self.v_th,
            "alpha": self.alpha,
            "input_skip": self.input_skip,
            "relaxed": self.relaxed,
            "detach_reset": self.detach_reset,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "ModelSpec":
        try:
            return cls(**data)
        except TypeError as e:
            raise ConfigurationError(f"Invalid model spec: {e}") from e

    @classmethod
    def from_file(cls, path: str) -> "ModelSpec":
        if not os.path.exists(path):
            raise ConfigurationError(f"Model spec file not found: {path}")
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(yaml.safe_load(f) or {})


@dataclass
class PredictorState:
    """Encoder membrane state carried across predictor calls"""
    layers: List[LifLayerState]
    step: int = 0


@dataclass(frozen=True)
class ProbFrame:
    """H x W x 3 per-pixel probabilities of (no-event, positive, negative)"""
    probs: np.ndarray
    frame_index: int = 0

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 3 or probs.shape[2] != N_CLASSES:
            raise DimensionError(f"ProbFrame must be H x W x 3, got {probs.shape}")
        if (probs < 0).any() or not np.allclose(probs.sum(axis=2), 1.0, rtol=0, atol=1e-6):
            raise ValueError("ProbFrame rows must be non-negative and sum to 1")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @property
    def geometry(self) -> Geometry:
        return Geometry(self.probs.shape[1], self.probs.shape[0])


class ResidualBlock(nn.Module):
    def __init__(self, channels: int, kernel_size: int):
        super().__init__()
        pad = kernel_size // 2
        self.conv1 = AnalogConv(ConvLayerSpec(channels, channels, kernel_size, 1, pad, "analog-conv", bias=True))
        self.conv2 = AnalogConv(ConvLayerSpec(channels, channels, kernel_size, 1, pad, "analog-conv", bias=True))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.conv2(F.relu(self.conv1(x)))


class PredictorModel(nn.Module):
    """Spiking conv encoder -> analog residual blocks -> analog deconv decoder.

    Decoder layer i receives the (1x1-projected) spike map of the encoder layer
    with the same spatial size; the last layer also gets a projection of the
    input planes. The output is 3 logits per pixel.
    """

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        channels = spec.encoder_channels
        depth = len(channels)
        k, pad = spec.kernel_size, spec.kernel_size // 2
        lif = spec.lif

        self.encoder = nn.ModuleList([
            LifConv2d(ConvLayerSpec(2 if i == 0 else channels[i - 1], channels[i], k, 2, pad, "spiking-conv"), lif)
            for i in range(depth)
        ])
        self.residual = nn.ModuleList([ResidualBlock(channels[-1], k) for _ in range(spec.residual_blocks)])

        decoder = []
        skips = []
        for i in range(depth):
            c_in = channels[depth - 1 - i]
            c_out = channels[depth - 2 - i] if i < depth - 1 else N_CLASSES
            decoder.append(AnalogConv(ConvLayerSpec(c_in, c_out, k, 2, pad, "analog-deconv", output_padding=1, bias=True)))
            if i < depth - 1:
                skips.append(AnalogConv(ConvLayerSpec(c_out, c_out, 1, 1, 0, "analog-conv", bias=True)))
        self.decoder = nn.ModuleList(decoder)
        self.skips = nn.ModuleList(skips)
        self.input_proj = (
            AnalogConv(ConvLayerSpec(2, N_CLASSES, 1, 1, 0, "analog-conv", bias=True)) if spec.input_skip else None
        )

    @property
    def geometry(self) -> Geometry:
        return self.spec.geometry

    def initial_state(self, batch: int = 1, dtype=torch.float32) -> PredictorState:
        layers = []
        h, w = self.spec.height, self.spec.width
        for layer in self.encoder:
            state = layer.initial_state(batch, h, w, dtype)
            layers.append(state)
            h, w = state.u.shape[-2:]
        return PredictorState(layers=layers, step=0)

    def zero_output_head(self) -> None:
        """Zero the final logits so an untrained model predicts uniform probabilities"""
        with torch.no_grad():
            for module in (self.decoder[-1], self.input_proj):
                if module is None:
                    continue
                module.weight.zero_()
                if module.bias is not None:
                    module.bias.zero_()

    def forward_step(
        self, x: torch.Tensor, state: PredictorState, recorder: Optional[SpikeRecorder] = None
    ) -> Tuple[torch.Tensor, PredictorState]:
        spikes = []
        h = x
        new_layers = []
        for i, (layer, layer_state) in enumerate(zip(self.encoder, state.layers)):
            h, layer_state = layer(h, layer_state)
            spikes.append(h)
            new_layers.append(layer_state)
            if recorder is not None:
                recorder.record(f"encoder.{i}", state.step, h)

        r = spikes[-1]
        for block in self.residual:
            r = block(r)

        depth = len(self.encoder)
        d = r
        for i, deconv in enumerate(self.decoder):
            d = deconv(d)
            if i < depth - 1:
                d = F.relu(d + self.skips[i](spikes[depth - 2 - i]))
        if self.input_proj is not None:
            d = d + self.input_proj(x)
        return d, PredictorState(layers=new_layers, step=state.step + 1)


def build_predictor(spec: ModelSpec, zero_head: bool = False) -> PredictorModel:
    model = PredictorModel(spec)
    if zero_head:
        model.zero_output_head()
    return model


# ---------------- encoding ----------------

def encode_cells(cells) -> torch.Tensor:
    """Ternary (..., H, W) -> float (..., 2, H, W) positive/negative planes"""
    cells = torch.as_tensor(np.asarray(cells))
    return torch.stack([(cells > 0), (cells < 0)], dim=-3).to(torch.float32)


def encode_frame(frame: EventFrame) -> torch.Tensor:
    return encode_cells(frame.cells)


def cells_to_classes(cells) -> torch.Tensor:
    """0 -> class 0 (no-event), +1 -> class 1, -1 -> class 2"""
    cells = torch.as_tensor(np.asarray(cells)).to(torch.int64)
    classes = torch.zeros_like(cells)
    classes[cells > 0] = 1
    classes[cells < 0] = 2
    return classes


# ---------------- inference ----------------

def _check_geometry(model: PredictorModel, frame: EventFrame) -> None:
    if frame.geometry != model.geometry:
        raise DimensionError(
            f"Frame {frame.width}x{frame.height} does not match model {model.geometry.width}x{model.geometry.height}"
        )


def predict_next(
    model: PredictorModel,
    state: Optional[PredictorState],
    input_frame: EventFrame,
    recorder: Optional[SpikeRecorder] = None,
) -> Tuple[PredictorState, ProbFrame]:
    """One forward pass; the LIF state carries the temporal context"""
    _check_geometry(model, input_frame)
    if state is None:
        state = model.initial_state(1)
    with torch.no_grad():
        logits, state = model.forward_step(encode_frame(input_frame).unsqueeze(0), state, recorder)
        probs = torch.softmax(logits.double(), dim=1)[0].permute(1, 2, 0).numpy()
    return state, ProbFrame(probs, input_frame.frame_index + 1)


def sample_events(prob: ProbFrame, mode: str = "argmax", seed: Optional[int] = None) -> EventFrame:
    """argmax (a shared maximum maps to no-event) or a seeded per-pixel categorical draw"""
    p = prob.probs
    if mode == "argmax":
        best = p.argmax(axis=2)
        tied = (p == p.max(axis=2, keepdims=True)).sum(axis=2) > 1
        best[tied] = 0
    elif mode == "sample":
        rng = np.random.default_rng(seed)
        u = rng.random(p.shape[:2])[..., None]
        best = (u >= np.cumsum(p, axis=2)[..., :-1]).sum(axis=2)
    else:
        raise ValueError(f"Unknown sampling mode '{mode}'")
    cells = np.zeros(best.shape, dtype=np.int8)
    cells[best == 1] = 1
    cells[best == 2] = -1
    return EventFrame(cells, prob.frame_index)


def ce_loss(prob: ProbFrame, target: EventFrame) -> float:
    """-(1 / HW) sum_i sum_j y_ij log yhat_ij with one-hot targets"""
    if prob.probs.shape[:2] != target.cells.shape:
        raise DimensionError(f"Prediction {prob.probs.shape[:2]} vs target {target.cells.shape}")
    classes = cells_to_classes(target.cells).numpy()
    picked = np.take_along_axis(prob.probs, classes[..., None], axis=2)[..., 0]
    return float(-np.log(np.maximum(picked, LOG_FLOOR)).mean())


def ce_loss_logits(logits: torch.Tensor, target_cells, class_weights: Optional[Sequence[float]] = None) -> torch.Tensor:
    weight = None
    if class_weights is not None:
        weight = torch.as_tensor(class_weights, dtype=logits.dtype)
    return F.cross_entropy(logits, cells_to_classes(target_cells), weight=weight)


def persistence_baseline(input_frame: EventFrame) -> EventFrame:
    """Predict that nothing moves"""
    return input_frame


def rollout(
    model: PredictorModel,
    seed_frames: FrameSequence,
    horizon: int,
    feedback: str = "sensed",
    sensed_frames: Optional[Sequence[EventFrame]] = None,
    recorder: Optional[SpikeRecorder] = None,
) -> FrameSequence:
    """Predict `horizon` frames after the seed frames.

    sensed: step h consumes sensed_frames[h], the true frame prediction h aimed at.
    self: step h consumes its own argmax prediction; sensed_frames is never read.
    """
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    if len(seed_frames) == 0:
        raise ValueError("rollout needs at least one seed frame")
    if feedback not in ("sensed", "self"):
        raise ValueError(f"Unknown feedback mode '{feedback}'")
    if feedback == "sensed" and sensed_frames is None:
        raise ValueError("sensed feedback needs the sensed frame stream")

    state = model.initial_state(1)
    prob = None
    for frame in seed_frames:
        state, prob = predict_next(model, state, frame, recorder)

    predictions = []
    for h in range(horizon):
        prediction = sample_events(prob, "argmax").with_index(h)
        predictions.append(prediction)
        if h == horizon - 1:
            break
        nxt = sensed_frames[h] if feedback == "sensed" else prediction
        state, prob = predict_next(model, state, nxt, recorder)
    return FrameSequence(tuple(predictions), seed_frames.dt, seed_frames.geometry)


# ---------------- training ----------------

@dataclass
class PredictorTrainConfig(TrainConfig):
    unroll: int = 8
    class_weights: Optional[List[float]] = None


def unroll_windows(sequences: Sequence[FrameSequence], unroll: int) -> List[np.ndarray]:
    """Non-overlapping (unroll + 1)-frame windows; the LIF state is reset at each window"""
    windows = []
    for sequence in sequences:
        cells = sequence.as_array()
        for start in range(0, len(sequence) - unroll, unroll):
            windows.append(cells[start:start + unroll + 1])
    return windows


def window_loss(model: PredictorModel, batch: List[np.ndarray], class_weights=None) -> torch.Tensor:
    """Mean per-step cross-entropy of a batch of unrolled windows, in the model's dtype"""
    cells = np.stack(batch)  # (B, T + 1, H, W)
    dtype = next(model.parameters()).dtype
    state = model.initial_state(cells.shape[0], dtype)
    steps = cells.shape[1] - 1
    loss = torch.zeros((), dtype=dtype)
    for t in range(steps):
        logits, state = model.forward_step(encode_cells(cells[:, t]).to(dtype), state)
        loss = loss + ce_loss_logits(logits, cells[:, t + 1], class_weights)
    return loss / steps


def train_predictor(model: PredictorModel, sequences: Sequence[FrameSequence], config: PredictorTrainConfig,
                    on_epoch=None) -> TrainResult:
    windows = unroll_windows(sequences, config.unroll)
    if not windows:
        raise ConfigurationError(f"Sequences are shorter than unroll + 1 = {config.unroll + 1} frames")
    logger.info(f"Training predictor on {len(windows)} windows of {config.unroll} steps")
    return bptt_train(
        model, windows, lambda m, b: window_loss(m, b, config.class_weights), config, on_epoch=on_epoch
    )


def validation_loss(model: PredictorModel, sequences: Sequence[FrameSequence], unroll: int = 8) -> float:
    windows = unroll_windows(sequences, unroll)
    if not windows:
        raise ConfigurationError(f"Sequences are shorter than unroll + 1 = {unroll + 1} frames")
    model.eval()
    with torch.no_grad():
        losses = [float(window_loss(model, [w]).item()) for w in windows]
    return float(np.mean(losses))


# ---------------- evaluation ----------------

@dataclass
class OneStepScores:
    predictor: float
    persistence: float
    n_pairs: int


def one_step_predictions(model: PredictorModel, inputs: FrameSequence) -> List[EventFrame]:
    """Sensed-mode argmax prediction of frame k + 1 after consuming frames 0..k"""
    state = model.initial_state(1)
    predictions = []
    for frame in list(inputs)[:-1]:
        state, prob = predict_next(model, state, frame)
        predictions.append(sample_events(prob, "argmax"))
    return predictions


def one_step_scores(
    model: PredictorModel,
    sequences: Sequence[FrameSequence],
    n: int = 4,
    th: float = DEFAULT_THRESHOLD,
    warmup: int = 3,
) -> OneStepScores:
    """Mean Region Esim of one-step predictions and of the persistence baseline (frames >= warmup)"""
    predicted, persisted = [], []
    for sequence in sequences:
        predictions = one_step_predictions(model, sequence)
        for k, prediction in enumerate(predictions):
            target = sequence[k + 1]
            if k + 1 < warmup:
                continue
            predicted.append(region_esim(prediction, target, n, th).value)
            persisted.append(region_esim(persistence_baseline(sequence[k]), target, n, th).value)
    if not predicted:
        raise ConfigurationError("No frames left to score after warmup")
    return OneStepScores(float(np.mean(predicted)), float(np.mean(persisted)), len(predicted))


def noise_robustness(
    model: PredictorModel,
    sequences: Sequence[FrameSequence],
    levels: Sequence[float],
    seed: int = 0,
    n: int = 4,
    th: float = DEFAULT_THRESHOLD,
    warmup: int = 3,
) -> pd.DataFrame:
    """Prediction quality and spurious events as the input noise level grows"""
    clean_predictions = [one_step_predictions(model, seq) for seq in sequences]
    rows = []
    for level in levels:
        clean_scores, noisy_scores = [], []
        spurious_in = spurious_out = 0
        for i, sequence in enumerate(sequences):
            noisy = inject_noise_sequence(sequence, level, seed + i)
            noisy_predictions = one_step_predictions(model, noisy)
            for k, (clean_pred, noisy_pred) in enumerate(zip(clean_predictions[i], noisy_predictions)):
                if k + 1 < warmup:
                    continue
                target = sequence[k + 1]
                clean_scores.append(region_esim(clean_pred, target, n, th).value)
                noisy_scores.append(region_esim(noisy_pred, target, n, th).value)
                spurious_in += spurious_event_count(noisy[k], sequence[k])
                spurious_out += spurious_event_count(noisy_pred, target)
        esim_clean = float(np.mean(clean_scores)) if clean_scores else 0.0
        esim_noisy = float(np.mean(noisy_scores)) if noisy_scores else 0.0
        rows.append({
            "noise_level": float(level),
            "esim_clean": esim_clean,
            "esim_noisy": esim_noisy,
            "relative_esim": relative_esim(esim_noisy, esim_clean) if esim_clean > 0 else float("nan"),
            "spurious_input": spurious_in,
            "spurious_output": spurious_out,
        })
    return pd.DataFrame(rows)


# ---------------- checkpoints ----------------

PREDICTOR_KIND = "predictor"


def save_predictor(model: PredictorModel, path: str) -> None:
    save_checkpoint(model, path, PREDICTOR_KIND, model.spec.to_dict())


def load_predictor(path: str) -> PredictorModel:
    kind, spec, state = load_checkpoint(path)
    if kind != PREDICTOR_KIND:
        raise ConfigurationError(f"{path} holds a '{kind}' checkpoint, expected '{PREDICTOR_KIND}'")
    model = build_predictor(ModelSpec.from_dict(spec))
    model.load_state_dict(state)
    model.eval()
    return model
