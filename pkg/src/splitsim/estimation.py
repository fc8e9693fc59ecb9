"""Estimate the bound's constants from a model and data.

Smoothness comes from finite differences rather than Hessians: perturb
the parameters, compare gradients, take the ratio. Per-layer gradient
statistics come from one or more epochs of mini-batch gradient norms.
The loss gap is measured against the best loss seen in a short
calibration run, since the true optimum is unknowable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import draw_batch
from .types import ModelStatistics, ValidationError

Shard = tuple[np.ndarray, np.ndarray]

DISTINCT_MODEL_TOL = 1e-12


@dataclass(frozen=True)
class EstimationReport:
    """Calibrated constants plus the flags that qualify them."""

    beta_local: float
    beta_cross: float
    beta: float
    sigma_sq: tuple[float, ...]
    g_sq: tuple[float, ...]
    vartheta: float
    calibration_steps: int
    cross_degenerate: bool = False
    single_batch: bool = False

    def check(self) -> None:
        values = (
            self.beta_local,
            self.beta_cross,
            self.beta,
            self.vartheta,
            *self.sigma_sq,
            *self.g_sq,
        )
        if not all(np.isfinite(v) and v >= 0.0 for v in values):
            raise ValidationError("estimates must be finite and >= 0")
        if self.beta != max(self.beta_local, self.beta_cross):
            raise ValidationError(
                "beta must be the max of the local and cross estimates"
            )
        if len(self.sigma_sq) != len(self.g_sq):
            raise ValidationError("per-layer sequences disagree on length")

    def to_model_statistics(self) -> ModelStatistics:
        return ModelStatistics(
            num_layers=len(self.sigma_sq),
            grad_variance=self.sigma_sq,
            grad_second_moment=self.g_sq,
            smoothness=self.beta,
            loss_gap=self.vartheta,
        )

    def to_config_lines(self) -> list[str]:
        """Flat key=value lines the experiment config parser accepts."""
        join = lambda seq: ",".join(repr(float(v)) for v in seq)
        return [
            f"stats.beta = {self.beta!r}",
            f"stats.sigma_sq = {join(self.sigma_sq)}",
            f"stats.g_sq = {join(self.g_sq)}",
            f"stats.vartheta = {self.vartheta!r}",
            f"stats.beta_local = {self.beta_local!r}",
            f"stats.beta_cross = {self.beta_cross!r}",
            f"stats.calibration_steps = {self.calibration_steps}",
            f"stats.cross_degenerate = {str(self.cross_degenerate).lower()}",
            f"stats.single_batch = {str(self.single_batch).lower()}",
        ]


def _flat_gradient(model, points: np.ndarray, labels: np.ndarray) -> np.ndarray:
    _, chunks = model.loss_and_layer_grads(points, labels)
    return np.concatenate(chunks)


def default_perturbation_scale(model) -> float:
    """One part in a thousand of the parameter norm, floored for zeros."""
    norm = float(np.linalg.norm(model.params))
    return 1e-3 * norm if norm > 0.0 else 1e-3


def estimate_beta_local(
    model,
    shards: Sequence[Shard],
    rng: np.random.Generator,
    perturbation_scale: float | None = None,
) -> float:
    """Sample-size-weighted mean of per-client finite-difference ratios."""
    if perturbation_scale is None:
        perturbation_scale = default_perturbation_scale(model)
    if perturbation_scale <= 0.0:
        raise ValidationError("perturbation scale must be > 0")
    total_weight = 0.0
    total = 0.0
    for points, labels in shards:
        direction = rng.normal(size=model.params.size)
        direction *= perturbation_scale / np.linalg.norm(direction)
        base_grad = _flat_gradient(model, points, labels)
        probe = model.copy()
        probe.params[:] = probe.params + direction
        moved_grad = _flat_gradient(probe, points, labels)
        ratio = float(
            np.linalg.norm(moved_grad - base_grad) / perturbation_scale
        )
        total += ratio * len(labels)
        total_weight += len(labels)
    if total_weight == 0.0:
        raise ValidationError("no data to estimate smoothness from")
    return total / total_weight


def estimate_beta_cross(
    models: Sequence, points: np.ndarray, labels: np.ndarray
) -> tuple[float, bool]:
    """Max pairwise gradient-difference ratio on shared data.

    Returns the estimate and a degenerate flag; the flag is set (and the
    estimate reported as 0) when fewer than two models are distinct.
    """
    grads = [_flat_gradient(m, points, labels) for m in models]
    best = 0.0
    found = False
    for i in range(len(models)):
        for z in range(i + 1, len(models)):
            gap = float(
                np.linalg.norm(models[i].params - models[z].params)
            )
            if gap < DISTINCT_MODEL_TOL:
                continue
            found = True
            ratio = float(np.linalg.norm(grads[i] - grads[z]) / gap)
            best = max(best, ratio)
    return (best, False) if found else (0.0, True)


def estimate_layer_stats(
    model,
    points: np.ndarray,
    labels: np.ndarray,
    epochs: int,
    rng: np.random.Generator,
    batch_size: int = 32,
) -> tuple[tuple[float, ...], tuple[float, ...], bool]:
    """Per-layer variance and max of squared gradient norms over batches.

    Returns (sigma_sq, g_sq, single_batch). Variance is the population
    variance across mini-batches; a single batch yields zero variance and
    sets the degenerate flag.
    """
    if epochs < 1:
        raise ValidationError("epochs must be >= 1")
    per_layer: list[list[float]] = [[] for _ in range(model.num_layers)]
    for _ in range(epochs):
        order = rng.permutation(len(labels))
        for start in range(0, len(labels), batch_size):
            take = order[start : start + batch_size]
            _, chunks = model.loss_and_layer_grads(points[take], labels[take])
            for j, chunk in enumerate(chunks):
                per_layer[j].append(float(np.sum(chunk**2)))
    single_batch = len(per_layer[0]) == 1
    sigma_sq = tuple(float(np.var(norms)) for norms in per_layer)
    g_sq = tuple(float(np.max(norms)) for norms in per_layer)
    return sigma_sq, g_sq, single_batch


def estimate_loss_gap(
    model,
    points: np.ndarray,
    labels: np.ndarray,
    steps: int,
    learning_rate: float,
    rng: np.random.Generator,
    batch_size: int = 32,
) -> float:
    """Initial loss minus the best loss seen in a short SGD run."""
    probe = model.copy()
    start = probe.loss(points, labels)
    best = start
    for _ in range(steps):
        batch = draw_batch(rng, len(labels), batch_size)
        grad = _flat_gradient(probe, points[batch], labels[batch])
        probe.params[:] = probe.params - learning_rate * grad
        best = min(best, probe.loss(points, labels))
    return start - best


def calibrate(
    model,
    shards: Sequence[Shard],
    rng: np.random.Generator,
    adapt_steps: int = 25,
    learning_rate: float = 0.05,
    batch_size: int = 32,
    epochs: int = 1,
    perturbation_scale: float | None = None,
) -> EstimationReport:
    """Full calibration pass from an initial model and per-client shards.

    Cross-model smoothness needs distinct models, so each client's copy is
    adapted with a few local SGD steps before the pairwise comparison.
    """
    points = np.concatenate([shard[0] for shard in shards])
    labels = np.concatenate([shard[1] for shard in shards])

    beta_local = estimate_beta_local(model, shards, rng, perturbation_scale)
    adapted = []
    for shard_points, shard_labels in shards:
        probe = model.copy()
        for _ in range(adapt_steps):
            batch = draw_batch(rng, len(shard_labels), batch_size)
            grad = _flat_gradient(
                probe, shard_points[batch], shard_labels[batch]
            )
            probe.params[:] = probe.params - learning_rate * grad
        adapted.append(probe)
    beta_cross, cross_degenerate = estimate_beta_cross(adapted, points, labels)
    sigma_sq, g_sq, single_batch = estimate_layer_stats(
        model, points, labels, epochs, rng, batch_size
    )
    vartheta = estimate_loss_gap(
        model, points, labels, adapt_steps, learning_rate, rng, batch_size
    )
    report = EstimationReport(
        beta_local=beta_local,
        beta_cross=beta_cross,
        beta=max(beta_local, beta_cross),
        sigma_sq=sigma_sq,
        g_sq=g_sq,
        vartheta=vartheta,
        calibration_steps=adapt_steps,
        cross_degenerate=cross_degenerate,
        single_batch=single_batch,
    )
    report.check()
    return report
