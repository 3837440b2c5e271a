"""Keypoint-transfer evaluation (PCK), the identity-mapping baseline, and
the 4D-convolution benchmark harness.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import backend, kernels
from .errors import InvalidArgumentError
from .features import PairAnnotation
from .matching import argmax_match, refine_subcell, to_pixel
from .model import ModelConfig, ModelParams, predict_probability
from .losses import nearest_cell
from .tensor_core import Rng
from .training import TrainingPair


@dataclass(frozen=True)
class PckConfig:
    alpha: float = 0.1
    reference: str = "image"  # or "bounding_box"

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise InvalidArgumentError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.reference not in ("image", "bounding_box"):
            raise InvalidArgumentError(f"unknown reference {self.reference!r}")


def pck(predicted: np.ndarray, expected: np.ndarray,
        reference_extent: tuple[float, float], cfg: PckConfig) -> float:
    """Fraction of keypoints within alpha * max(w_r, h_r) pixels, inclusive."""
    predicted = np.asarray(predicted, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    if predicted.shape != expected.shape or predicted.ndim != 2 or predicted.shape[1] != 2:
        raise InvalidArgumentError(
            f"prediction/ground-truth shapes differ: {predicted.shape} vs {expected.shape}"
        )
    if len(predicted) < 1:
        raise InvalidArgumentError("need at least one keypoint")
    w_r, h_r = reference_extent
    threshold = cfg.alpha * max(w_r, h_r)
    err = np.linalg.norm(predicted - expected, axis=1)
    return float((err <= threshold).mean())


def _reference_extent(ann: PairAnnotation, cfg: PckConfig) -> tuple[float, float]:
    if cfg.reference == "image":
        return float(ann.target.width), float(ann.target.height)
    kps = ann.target.keypoints
    span = kps.max(axis=0) - kps.min(axis=0)
    return float(span[0]), float(span[1])


def identity_baseline(annotations: Sequence[PairAnnotation], cfg: PckConfig) -> float:
    """Mean PCK when each source keypoint predicts its own coordinates,
    proportionally rescaled if the image sizes differ."""
    if not annotations:
        raise InvalidArgumentError("no annotated pairs")
    scores = []
    for ann in annotations:
        sx = ann.target.width / ann.source.width
        sy = ann.target.height / ann.source.height
        pred = ann.source.keypoints * np.array([sx, sy])
        scores.append(pck(pred, ann.target.keypoints, _reference_extent(ann, cfg), cfg))
    return float(np.mean(scores))


def predict_keypoints(params: ModelParams, cfg: ModelConfig,
                      pair: TrainingPair, window: int = 3) -> np.ndarray:
    """Predicted target pixels for each annotated source keypoint."""
    v = predict_probability(params, cfg, pair.source, pair.target)
    hs, ws = v.values.shape[:2]
    preds = np.empty((len(pair.annotation.source.keypoints), 2), dtype=np.float64)
    for r, (x, y) in enumerate(pair.annotation.source.keypoints):
        cell = nearest_cell((x, y), (hs, ws), cfg.stride)
        ck, cl = refine_subcell(v, cell, window=window)
        preds[r] = (to_pixel(cl, cfg.stride), to_pixel(ck, cfg.stride))
    return preds


def evaluate_pairs(params: ModelParams, cfg: ModelConfig,
                   dataset: Sequence[TrainingPair], pck_cfg: PckConfig,
                   reference_extent: tuple[float, float] | None = None) -> dict:
    """Mean PCK of the model over annotated pairs (fixed aggregation order)."""
    if not dataset:
        raise InvalidArgumentError("dataset is empty")
    scores = []
    for pair in dataset:
        pred = predict_keypoints(params, cfg, pair)
        extent = reference_extent or _reference_extent(pair.annotation, pck_cfg)
        scores.append(pck(pred, pair.annotation.target.keypoints, extent, pck_cfg))
    return {
        "schema_version": 1,
        "pck": float(np.mean(scores)),
        "alpha": pck_cfg.alpha,
        "reference": pck_cfg.reference,
        "pairs": len(dataset),
    }


# ---------------------------------------------------------------------------
# conv4d benchmark


@dataclass
class BenchRow:
    extent: int
    channels: int
    kernel_shape: tuple[int, int, int, int]
    backend: str
    naive_s: float
    fast_s: float
    speedup: float
    max_abs_diff: float

    def to_dict(self) -> dict:
        return {
            "extent": self.extent,
            "channels": self.channels,
            "kernel_shape": list(self.kernel_shape),
            "backend": self.backend,
            "naive_seconds": self.naive_s,
            "fast_seconds": self.fast_s,
            "speedup": self.speedup,
            "max_abs_diff": self.max_abs_diff,
        }


def _median_time(fn, repetitions: int) -> float:
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def bench_conv4d(sizes: Sequence[int] = (6, 10, 16), channels: Sequence[int] = (1, 16),
                 repetitions: int = 5,
                 kernel_shapes: Sequence[tuple[int, int, int, int]] = ((5, 5, 5, 5), (3, 3, 5, 5)),
                 backends: Sequence[str] | None = None,
                 seed: int = 0) -> list[BenchRow]:
    """Timed naive-vs-fast comparison with verified equivalence per config."""
    if repetitions < 3:
        raise InvalidArgumentError(f"repetitions must be >= 3, got {repetitions}")
    if backends is None:
        backends = ["numba", "numpy"] if backend.active_backend() == "numba" else ["numpy"]
    rng = Rng(seed)
    rows = []
    previous = backend.active_backend()
    try:
        for extent in sizes:
            for ch in channels:
                for shape in kernel_shapes:
                    x = rng.normal(0, 1, (ch, extent, extent, extent, extent))
                    w = rng.normal(0, 0.2, (ch, ch) + tuple(shape))
                    b = rng.normal(0, 0.1, (ch,))
                    ref = kernels.conv4d_naive(x, w, b)
                    naive_t = _median_time(lambda: kernels.conv4d_naive(x, w, b),
                                           repetitions)
                    for bk in backends:
                        backend.set_backend(bk)
                        fast = kernels.conv4d_fast(x, w, b)
                        fast_t = _median_time(lambda: kernels.conv4d_fast(x, w, b),
                                              repetitions)
                        rows.append(BenchRow(
                            extent=extent,
                            channels=ch,
                            kernel_shape=tuple(shape),
                            backend=bk,
                            naive_s=naive_t,
                            fast_s=fast_t,
                            speedup=naive_t / fast_t if fast_t > 0 else float("inf"),
                            max_abs_diff=float(np.abs(fast - ref).max()),
                        ))
    finally:
        backend.set_backend(previous)
    return rows
