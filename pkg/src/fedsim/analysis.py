"""Model similarity (linear CKA), learning efficiency, entropy histograms."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .data import Dataset
from .errors import ParameterError, ShapeError
from .federation import RoundReport
from .selection import entropy_rows

LAYER_LEVELS = ("low", "mid", "up")


@dataclass
class CkaMatrix:
    """Symmetric K x K similarity matrix between client models."""

    values: np.ndarray
    layer_level: str


def linear_cka(x: np.ndarray, y: np.ndarray) -> float:
    """Linear centered kernel alignment between two activation matrices.

    Rows are samples (must match), columns are features (may differ). The
    score is ||Yc' Xc||_F^2 / (||Xc' Xc||_F ||Yc' Yc||_F) with column-centered
    inputs; 1 means identical representations up to rotation/scale, 0 means
    unrelated. Returns NaN when either input has no variance.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2:
        raise ShapeError("linear_cka expects 2-D activation matrices")
    if x.shape[0] != y.shape[0]:
        raise ShapeError(f"row counts differ: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 2:
        raise ParameterError("need at least 2 rows to center and compare")
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    x_norm = np.linalg.norm(xc.T @ xc)
    y_norm = np.linalg.norm(yc.T @ yc)
    if x_norm == 0.0 or y_norm == 0.0:
        return float("nan")
    cross = np.linalg.norm(yc.T @ xc) ** 2
    return float(cross / (x_norm * y_norm))


def probe_activations(model: nn.Model, features: np.ndarray, layer_level: str) -> np.ndarray:
    """Activations at a named depth: low/mid after the first/second relu,
    up at the input of the final (logits) layer."""
    if layer_level not in LAYER_LEVELS:
        raise ParameterError(f"layer_level must be one of {LAYER_LEVELS}, got {layer_level!r}")
    _, activations = nn.forward(model, features)
    relu_positions = [
        i for i, layer in enumerate(model.layers) if isinstance(layer, nn.ReluLayer)
    ]
    dense_positions = [
        i for i, layer in enumerate(model.layers) if isinstance(layer, nn.DenseLayer)
    ]
    if layer_level == "low":
        pos = relu_positions[0] if relu_positions else dense_positions[0]
        return activations[pos]
    if layer_level == "mid":
        pos = relu_positions[1] if len(relu_positions) > 1 else (
            relu_positions[0] if relu_positions else dense_positions[0]
        )
        return activations[pos]
    last_dense = dense_positions[-1]
    return activations[last_dense - 1] if last_dense > 0 else np.asarray(features, dtype=np.float64)


def pairwise_cka(models: list[nn.Model], probe: Dataset, layer_level: str) -> CkaMatrix:
    """CKA between every pair of models' activations on a shared probe set."""
    if len(models) < 2:
        raise ParameterError("pairwise_cka needs at least 2 models")
    signature = [
        (layer.kind, layer.weights.shape if isinstance(layer, nn.DenseLayer) else None)
        for layer in models[0].layers
    ]
    for k, model in enumerate(models[1:], start=1):
        other = [
            (layer.kind, layer.weights.shape if isinstance(layer, nn.DenseLayer) else None)
            for layer in model.layers
        ]
        if other != signature:
            raise ParameterError(f"model {k} architecture differs from model 0")
    acts = [probe_activations(m, probe.features, layer_level) for m in models]
    k = len(models)
    values = np.empty((k, k))
    for i in range(k):
        for j in range(i, k):
            score = linear_cka(acts[i], acts[j])
            values[i, j] = score
            values[j, i] = score
    return CkaMatrix(values=values, layer_level=layer_level)


def mean_offdiagonal(matrix: CkaMatrix) -> float:
    """Average similarity between distinct model pairs."""
    values = matrix.values
    k = values.shape[0]
    mask = ~np.eye(k, dtype=bool)
    return float(values[mask].mean())


def learning_efficiency(reports: list[RoundReport]) -> float:
    """Best accuracy (percentage points) per second of summed client effort.

    NaN when no client time was spent.
    """
    if not reports:
        raise ParameterError("learning_efficiency needs at least one round report")
    best_acc_points = 100.0 * max(r.test_accuracy for r in reports)
    total_time = reports[-1].cumulative_client_train_time
    if total_time <= 0.0:
        return float("nan")
    return best_acc_points / total_time


def entropy_histogram(
    model: nn.Model, data: Dataset, rho: float, num_bins: int
) -> np.ndarray:
    """Counts of per-sample prediction entropies over [0, ln num_classes]."""
    if num_bins < 2:
        raise ParameterError(f"num_bins must be >= 2, got {num_bins}")
    logits, _ = nn.forward(model, data.features)
    probs = nn.softmax_with_temperature(logits, rho)
    entropies = entropy_rows(probs)
    upper = math.log(data.num_classes) if data.num_classes > 1 else 1.0
    edges = np.linspace(0.0, upper, num_bins + 1)
    counts, _ = np.histogram(np.clip(entropies, 0.0, upper), bins=edges)
    return counts


def histogram_edges(num_classes: int, num_bins: int) -> np.ndarray:
    """Bin edges matching entropy_histogram."""
    upper = math.log(num_classes) if num_classes > 1 else 1.0
    return np.linspace(0.0, upper, num_bins + 1)
