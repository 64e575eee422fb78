"""Accuracy of bias estimates and bias maps against the ground-truth field.

All RMSEs here pool the two vector components: ``sqrt(mean(|err|^2) / 2)``,
which equals ``sqrt((rmse_x^2 + rmse_y^2) / 2)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .field import BiasFieldSpec, eval_bias_many
from .gpr import GpModel
from .sbe import BiasEstimateSet


@dataclass(frozen=True)
class RmseRecord:
    time: float
    solver_rmse: Optional[float]
    map_rmse: float
    n_deltas: int
    n_nodes: int


def pooled_rmse(estimated, truth) -> float:
    err = np.asarray(estimated, dtype=float).reshape(-1, 2) - np.asarray(truth, dtype=float).reshape(-1, 2)
    if len(err) == 0:
        raise ValueError("RMSE of an empty set")
    return float(np.sqrt(np.mean(np.sum(err ** 2, axis=1)) / 2.0))


def solver_rmse(estimates: BiasEstimateSet, truth: BiasFieldSpec, truth_positions=None) -> float:
    """RMSE of reachable node biases against the field.

    ``truth_positions`` (one per node) gives where each node's reading was
    actually taken; by default the field is evaluated at the node positions.
    """
    mask = np.asarray(estimates.reachable, dtype=bool)
    if not mask.any():
        raise ValueError("no reachable bias estimates")
    where = estimates.positions if truth_positions is None else np.asarray(truth_positions, dtype=float)
    return pooled_rmse(estimates.biases[mask], eval_bias_many(truth, where[mask]))


def map_rmse(model: Optional[GpModel], truth: BiasFieldSpec, grid) -> float:
    """RMSE of the predicted mean over ``grid``; ``model=None`` scores the all-zero map."""
    pts = np.asarray(grid, dtype=float).reshape(-1, 2)
    if len(pts) == 0:
        raise ValueError("empty evaluation grid")
    mean = np.zeros_like(pts) if model is None else model.predict_mean(pts)
    return pooled_rmse(mean, eval_bias_many(truth, pts))
