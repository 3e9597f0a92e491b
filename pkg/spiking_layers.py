"""
Spiking Layers - LIF neurons, arctan surrogate gradient, conv/deconv layers,
BPTT training loop and spike-activity accounting
"""

import math
import random
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from loguru import logger
from tqdm import tqdm

from pipeline_errors import DimensionError, TrainingDivergedError

LAYER_KINDS = ("spiking-conv", "analog-conv", "analog-deconv")


def seed_everything(seed: int) -> None:
    """Seed python, numpy and torch and pin torch to one deterministic thread"""
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)


@dataclass(frozen=True)
class LifParams:
    tau: float = 0.5
    v_th: float = 1.0
    alpha: float = 2.0
    relaxed: bool = False  # forward with the smooth surrogate instead of the step (gradient checks)
    detach_reset: bool = True  # reset gate (1 - y) is a constant in the backward pass

    def __post_init__(self):
        if not 0 < self.tau < 1:
            raise ValueError(f"tau must be in (0, 1), got {self.tau}")
        if self.v_th <= 0:
            raise ValueError(f"v_th must be positive, got {self.v_th}")
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")


@dataclass
class LifLayerState:
    u: torch.Tensor
    y_prev: torch.Tensor

    @classmethod
    def zeros(cls, shape, dtype=torch.float32, device=None) -> "LifLayerState":
        return cls(torch.zeros(shape, dtype=dtype, device=device), torch.zeros(shape, dtype=dtype, device=device))

    def detach(self) -> "LifLayerState":
        return LifLayerState(self.u.detach(), self.y_prev.detach())


# ---------------- surrogate ----------------

def surrogate_forward(x, alpha: float = 2.0):
    """y = arctan(pi/2 * alpha * x) / pi + 1/2"""
    if isinstance(x, torch.Tensor):
        return torch.atan(math.pi / 2 * alpha * x) / math.pi + 0.5
    return np.arctan(math.pi / 2 * alpha * np.asarray(x, dtype=np.float64)) / math.pi + 0.5


def surrogate_grad(x, alpha: float = 2.0):
    """dy/dx = alpha / (2 * (1 + (pi/2 * alpha * x)^2))"""
    if isinstance(x, torch.Tensor):
        return alpha / (2 * (1 + (math.pi / 2 * alpha * x) ** 2))
    x = np.asarray(x, dtype=np.float64)
    return alpha / (2 * (1 + (math.pi / 2 * alpha * x) ** 2))


class ArctanSpike(torch.autograd.Function):
    """Heaviside step (strict, x > 0) forward; arctan surrogate derivative backward"""

    @staticmethod
    def forward(ctx, x, alpha):
        ctx.save_for_backward(x)
        ctx.alpha = alpha
        return (x > 0).to(x.dtype)

    @staticmethod
    def backward(ctx, grad_output):
        (x,) = ctx.saved_tensors
        return grad_output * surrogate_grad(x, ctx.alpha), None


def fire(x: torch.Tensor, params: LifParams) -> torch.Tensor:
    if params.relaxed:
        return surrogate_forward(x, params.alpha)
    return ArctanSpike.apply(x, params.alpha)


def lif_step(state: LifLayerState, input_current: torch.Tensor, params: LifParams) -> Tuple[LifLayerState, torch.Tensor]:
    """u^t = I + tau * u^{t-1} * (1 - y^{t-1});  y^t = [u^t > V_th]"""
    if input_current.shape != state.u.shape:
        raise DimensionError(f"LIF input shape {tuple(input_current.shape)} != state shape {tuple(state.u.shape)}")
    gate = 1 - state.y_prev
    if params.detach_reset:
        gate = gate.detach()
    u = input_current + params.tau * state.u * gate
    spikes = fire(u - params.v_th, params)
    return LifLayerState(u, spikes), spikes


# ---------------- conv layers ----------------

@dataclass
class ConvLayerSpec:
    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int = 1
    padding: int = 0
    kind: str = "analog-conv"
    output_padding: int = 0
    bias: bool = False
    weights: Optional[torch.Tensor] = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"Unknown layer kind '{self.kind}', expected one of {LAYER_KINDS}")

    def output_hw(self, in_h: int, in_w: int) -> Tuple[int, int]:
        k, s, p = self.kernel_size, self.stride, self.padding
        if self.kind == "analog-deconv":
            op = self.output_padding
            return ((in_h - 1) * s - 2 * p + k + op, (in_w - 1) * s - 2 * p + k + op)
        return ((in_h + 2 * p - k) // s + 1, (in_w + 2 * p - k) // s + 1)

    def weight_shape(self) -> Tuple[int, int, int, int]:
        if self.kind == "analog-deconv":
            return (self.in_channels, self.out_channels, self.kernel_size, self.kernel_size)
        return (self.out_channels, self.in_channels, self.kernel_size, self.kernel_size)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel_size": self.kernel_size,
            "stride": self.stride,
            "padding": self.padding,
            "kind": self.kind,
            "output_padding": self.output_padding,
            "bias": self.bias,
        }


def _check_input(spec: ConvLayerSpec, x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if x.dim() != 4 or x.shape[1] != spec.in_channels:
        raise DimensionError(f"Layer expects (N, {spec.in_channels}, H, W) input, got {tuple(x.shape)}")
    if spec.weights is None:
        raise DimensionError("ConvLayerSpec has no weights")
    if tuple(spec.weights.shape) != spec.weight_shape():
        raise DimensionError(f"Weights {tuple(spec.weights.shape)} do not match declared {spec.weight_shape()}")
    return x


def conv_forward(spec: ConvLayerSpec, x: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Cross-correlation with the declared stride/padding"""
    x = _check_input(spec, x)
    out = F.conv2d(x, spec.weights, bias, stride=spec.stride, padding=spec.padding)
    if out.shape[-2:] != torch.Size(spec.output_hw(x.shape[-2], x.shape[-1])):
        raise DimensionError(f"Computed output {tuple(out.shape)} differs from declared shape")
    return out


def deconv_forward(spec: ConvLayerSpec, x: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Transposed cross-correlation with the declared stride/padding/output_padding"""
    x = _check_input(spec, x)
    out = F.conv_transpose2d(
        x, spec.weights, bias, stride=spec.stride, padding=spec.padding, output_padding=spec.output_padding
    )
    if out.shape[-2:] != torch.Size(spec.output_hw(x.shape[-2], x.shape[-1])):
        raise DimensionError(f"Computed output {tuple(out.shape)} differs from declared shape")
    return out


class AnalogConv(nn.Module):
    """Analog (non-spiking) conv or deconv layer built from a ConvLayerSpec"""

    def __init__(self, spec: ConvLayerSpec):
        super().__init__()
        if spec.kind == "spiking-conv":
            raise ValueError("AnalogConv cannot host a spiking layer")
        self.spec = spec
        self.weight = nn.Parameter(torch.empty(spec.weight_shape()))
        self.bias = nn.Parameter(torch.zeros(spec.out_channels)) if spec.bias else None
        nn.init.kaiming_uniform_(self.weight, a=0.0, nonlinearity="relu")
        spec.weights = self.weight

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self.spec.weights = self.weight
        if self.spec.kind == "analog-deconv":
            return deconv_forward(self.spec, x, self.bias)
        return conv_forward(self.spec, x, self.bias)


class LifConv2d(nn.Module):
    """Spiking conv layer: cross-correlation feeds lif_step as input current"""

    def __init__(self, spec: ConvLayerSpec, params: LifParams):
        super().__init__()
        if spec.kind != "spiking-conv":
            raise ValueError(f"LifConv2d needs a spiking-conv spec, got {spec.kind}")
        self.spec = spec
        self.params = params
        self.weight = nn.Parameter(torch.empty(spec.weight_shape()))
        self.bias = nn.Parameter(torch.zeros(spec.out_channels)) if spec.bias else None
        nn.init.kaiming_uniform_(self.weight, a=0.0, nonlinearity="relu")
        spec.weights = self.weight

    def initial_state(self, batch: int, in_h: int, in_w: int, dtype=torch.float32) -> LifLayerState:
        out_h, out_w = self.spec.output_hw(in_h, in_w)
        return LifLayerState.zeros((batch, self.spec.out_channels, out_h, out_w), dtype=dtype)

    def forward(self, x: torch.Tensor, state: LifLayerState) -> Tuple[torch.Tensor, LifLayerState]:
        self.spec.weights = self.weight
        current = conv_forward(self.spec, x, self.bias)
        state, spikes = lif_step(state, current, self.params)
        return spikes, state


# ---------------- spike accounting ----------------

@dataclass
class SpikeTally:
    total: int
    per_layer: Dict[str, int]
    per_step: List[int]


class SpikeRecorder:
    """Per-layer, per-step counts of emitted spikes (y = 1)"""

    def __init__(self):
        self.counts: Dict[str, Dict[int, int]] = defaultdict(dict)

    def record(self, layer: str, step: int, spikes: torch.Tensor) -> None:
        n = int(torch.count_nonzero(spikes.detach() > 0.5).item())
        self.counts[layer][step] = self.counts[layer].get(step, 0) + n

    def step_total(self, step: int) -> int:
        return sum(per_step.get(step, 0) for per_step in self.counts.values())

    def steps(self) -> List[int]:
        return sorted({s for per_step in self.counts.values() for s in per_step})


def spike_count(trace: SpikeRecorder) -> SpikeTally:
    per_layer = {layer: sum(steps.values()) for layer, steps in trace.counts.items()}
    per_step = [trace.step_total(s) for s in trace.steps()]
    return SpikeTally(total=sum(per_layer.values()), per_layer=per_layer, per_step=per_step)


# ---------------- BPTT ----------------

@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 8
    epochs: int = 200
    seed: int = 0
    grad_clip: Optional[float] = None
    show_progress: bool = False


@dataclass
class TrainResult:
    model: nn.Module
    loss_curve: List[float] = field(default_factory=list)


def _first_non_finite_grad(model: nn.Module) -> Optional[str]:
    for name, param in model.named_parameters():
        if param.grad is not None and not torch.isfinite(param.grad).all():
            return name.rsplit(".", 1)[0]
    return None


def bptt_train(
    model: nn.Module,
    samples: Sequence[Any],
    loss_fn: Callable[[nn.Module, List[Any]], torch.Tensor],
    config: TrainConfig,
    on_epoch: Optional[Callable[[int, float], None]] = None,
) -> TrainResult:
    """Minibatch Adam over unrolled samples; loss_fn runs the time unroll and returns a scalar.

    Gradients reach earlier steps through the membrane recurrence and cross
    spikes through the arctan surrogate. The batch order per epoch comes from a
    numpy generator seeded with (seed, epoch).
    """
    if not samples:
        raise ValueError("bptt_train needs at least one sample")
    seed_everything(config.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    result = TrainResult(model=model)

    epochs = tqdm(range(config.epochs), desc="bptt", disable=not config.show_progress)
    for epoch in epochs:
        order = np.random.default_rng([config.seed, epoch]).permutation(len(samples))
        model.train()
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(order), config.batch_size):
            batch = [samples[i] for i in order[start:start + config.batch_size]]
            optimizer.zero_grad()
            loss = loss_fn(model, batch)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss {loss.item()}", epoch, "loss")
            loss.backward()
            bad_layer = _first_non_finite_grad(model)
            if bad_layer is not None:
                raise TrainingDivergedError("non-finite gradient", epoch, bad_layer)
            if config.grad_clip:
                nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            optimizer.step()
            epoch_loss += float(loss.item())
            n_batches += 1

        mean_loss = epoch_loss / n_batches
        result.loss_curve.append(mean_loss)
        logger.debug(f"epoch {epoch}: loss {mean_loss:.6f}")
        if config.show_progress:
            epochs.set_postfix(loss=f"{mean_loss:.4f}")
        if on_epoch is not None:
            on_epoch(epoch, mean_loss)

    model.eval()
    return result
