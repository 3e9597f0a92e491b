"""
Event-frame similarity measures
MSS (1 - MSE), Esim, polarity-intensity polarization, Region Esim and relative Esim
"""

from dataclasses import dataclass
from typing import Dict, Iterable, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from event_core import EventFrame
from pipeline_errors import DimensionError, MetricRangeError, UndefinedRatioError

DEFAULT_THRESHOLD = 0.2501
DEFAULT_WINDOWS = (2, 4)


@dataclass(frozen=True)
class SimilarityScore:
    value: float
    kind: str  # "MSS", "Esim" or "Esim<n>"

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise MetricRangeError(f"{self.kind} score {self.value} outside [0, 1]")

    def __float__(self) -> float:
        return float(self.value)


@dataclass(frozen=True)
class PolarizedFrame:
    """Output of polarize(); remembers the window size and threshold it was built with"""
    cells: np.ndarray
    n: int
    th: float
    frame_index: int = 0

    @property
    def shape(self):
        return self.cells.shape


FrameLike = Union[EventFrame, PolarizedFrame]


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"Frame geometry mismatch: {a.shape} vs {b.shape}")


def esim_cells(a: np.ndarray, b: np.ndarray) -> float:
    """|A ∩ B| / |A ∪ B| over ternary arrays; two empty arrays score 1.0"""
    _check_same_shape(a, b)
    active_a = a != 0
    active_b = b != 0
    union = int(np.count_nonzero(active_a | active_b))
    if union == 0:
        return 1.0
    common = int(np.count_nonzero(active_a & (a == b)))
    return common / union


def esim(f1: FrameLike, f2: FrameLike) -> SimilarityScore:
    """Ratio of common visual events (same cell, same polarity) to all events"""
    if type(f1) is not type(f2):
        raise TypeError(f"esim compares frames of one kind, got {type(f1).__name__} and {type(f2).__name__}")
    if isinstance(f1, PolarizedFrame):
        if (f1.n, f1.th) != (f2.n, f2.th):
            raise ValueError(f"Polarized frames built with different (n, th): {(f1.n, f1.th)} vs {(f2.n, f2.th)}")
        kind = f"Esim{f1.n}"
    else:
        kind = "Esim"
    return SimilarityScore(esim_cells(f1.cells, f2.cells), kind)


def mss(f1: EventFrame, f2: EventFrame) -> SimilarityScore:
    """Mean Square Similarity, 1 - MSE over all H*W cells"""
    _check_same_shape(f1.cells, f2.cells)
    diff = f1.cells.astype(np.int64) - f2.cells.astype(np.int64)
    mse = float(np.mean(diff * diff)) if diff.size else 0.0
    if mse > 1.0:
        raise MetricRangeError(f"MSE {mse:.4f} exceeds 1, MSS would be negative")
    return SimilarityScore(1.0 - mse, "MSS")


def _window_pads(size: int):
    # even sizes put the extra row/column below/right of the anchor pixel
    return (size - 1) // 2, size // 2


def window_sums(cells: np.ndarray, h: int, w: int) -> np.ndarray:
    """Per-pixel sum of an h x w zero-padded sliding window (same size as input)"""
    if h < 1 or w < 1:
        raise ValueError(f"Window must be at least 1x1, got {h}x{w}")
    top, bottom = _window_pads(h)
    left, right = _window_pads(w)
    padded = np.pad(cells.astype(np.int64), ((top, bottom), (left, right)), mode="constant")
    return sliding_window_view(padded, (h, w)).sum(axis=(-2, -1))


def polarity_intensity(f: EventFrame, x: int, y: int, h: int, w: int) -> float:
    """(|E_pos| - |E_neg|) / (h*w) for the window anchored at (x, y); outside cells count as 0"""
    if not f.geometry.contains(x, y):
        raise DimensionError(f"Pixel ({x}, {y}) outside {f.width}x{f.height} frame")
    if h < 1 or w < 1:
        raise ValueError(f"Window must be at least 1x1, got {h}x{w}")
    up, down = _window_pads(h)
    lft, rgt = _window_pads(w)
    rows = slice(max(0, y - up), min(f.height, y + down + 1))
    cols = slice(max(0, x - lft), min(f.width, x + rgt + 1))
    return float(f.cells[rows, cols].astype(np.int64).sum()) / (h * w)


def polarize(f: EventFrame, n: int = 4, th: float = DEFAULT_THRESHOLD) -> PolarizedFrame:
    """+1 where PI > th, -1 where PI < -th, 0 where |PI| <= th"""
    if n < 1:
        raise ValueError(f"Polarization window must be >= 1, got {n}")
    if th <= 0:
        raise ValueError(f"Polarization threshold must be positive, got {th}")
    pi = window_sums(f.cells, n, n) / float(n * n)
    cells = np.zeros(f.cells.shape, dtype=np.int8)
    cells[pi > th] = 1
    cells[pi < -th] = -1
    cells.setflags(write=False)
    return PolarizedFrame(cells, n, th, f.frame_index)


def region_esim(f1: EventFrame, f2: EventFrame, n: int = 4, th: float = DEFAULT_THRESHOLD) -> SimilarityScore:
    _check_same_shape(f1.cells, f2.cells)
    return esim(polarize(f1, n, th), polarize(f2, n, th))


def relative_esim(esim_noisy: Union[float, SimilarityScore], esim_clean: Union[float, SimilarityScore]) -> float:
    noisy, clean = float(esim_noisy), float(esim_clean)
    if clean <= 0:
        raise UndefinedRatioError("Relative Esim is undefined for a clean score of 0")
    return noisy / clean


def score_pair(
    f1: EventFrame,
    f2: EventFrame,
    windows: Iterable[int] = DEFAULT_WINDOWS,
    th: float = DEFAULT_THRESHOLD,
) -> Dict[str, float]:
    """MSS, Esim and one Region Esim per window size, keyed by metric name"""
    scores = {"MSS": mss(f1, f2).value, "Esim": esim(f1, f2).value}
    for n in windows:
        scores[f"Esim{n}"] = region_esim(f1, f2, n, th).value
    return scores


def spurious_event_count(frame: EventFrame, clean_frame: EventFrame, radius: int = 2) -> int:
    """Events of `frame` farther than `radius` px (chessboard) from every clean event"""
    _check_same_shape(frame.cells, clean_frame.cells)
    support = clean_frame.cells != 0
    if radius > 0 and support.any():
        structure = np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)
        support = ndimage.binary_dilation(support, structure=structure)
    return int(np.count_nonzero((frame.cells != 0) & ~support))
