"""Pose-quality metrics (ADD, ADD-S, accuracy, AUC) and the correspondence loss."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .cloud import NeighborIndex, OrientedCloud, as_positions
from .errors import EmptyInput, EmptyModel, InputError, LengthMismatch
from .geom3d import RigidTransform, geodesic_angle

DEFAULT_AUC_MAX = 0.10
DEFAULT_AUC_STEPS = 1000
DEFAULT_LAMBDA = 0.05
ADDS_2CM = 0.02
DIAMETER_FRACTION = 0.10


@dataclass(frozen=True)
class MetricConfig:
    auc_max_threshold: float = DEFAULT_AUC_MAX
    auc_steps: int = DEFAULT_AUC_STEPS
    # absolute meters, or a fraction of the model diameter when relative=True
    accuracy_threshold: float = DIAMETER_FRACTION
    accuracy_relative: bool = True
    lam: float = DEFAULT_LAMBDA

    def __post_init__(self):
        if not (self.auc_max_threshold > 0 and self.accuracy_threshold > 0):
            raise InputError("metric thresholds must be positive")
        if self.auc_steps < 2:
            raise InputError("auc_steps must be >= 2")
        if not self.lam > 0:
            raise InputError("lambda must be positive")

    def threshold_for(self, model_diameter: float) -> float:
        if self.accuracy_relative:
            return self.accuracy_threshold * model_diameter
        return self.accuracy_threshold


def _model(points) -> np.ndarray:
    x = as_positions(points)
    if not len(x):
        raise EmptyModel("metric needs at least one model point")
    return x


def add(pred: RigidTransform, gt: RigidTransform, model_points) -> float:
    """Mean distance between corresponding model points under the two poses."""
    x = _model(model_points)
    return float(np.mean(np.linalg.norm(gt.apply(x) - pred.apply(x), axis=1)))


def adds(pred: RigidTransform, gt: RigidTransform, model_points) -> float:
    """Mean distance from each gt-posed point to the closest pred-posed point."""
    x = _model(model_points)
    g, p = gt.apply(x), pred.apply(x)
    _, nn = NeighborIndex(p).query(g)
    # the closest point can be no farther than the matched one
    matched = np.linalg.norm(g - p, axis=1)
    return float(np.mean(np.minimum(nn, matched)))


def rotation_error_deg(pred: RigidTransform, gt: RigidTransform) -> float:
    return math.degrees(geodesic_angle(pred.rotation, gt.rotation))


def translation_error(pred: RigidTransform, gt: RigidTransform) -> float:
    return float(np.linalg.norm(pred.translation - gt.translation))


def accuracy_at(errors, threshold: float) -> float:
    """Fraction of errors strictly below ``threshold``."""
    e = np.asarray(errors, dtype=float).reshape(-1)
    if not len(e):
        raise EmptyInput("accuracy_at needs at least one error")
    if not threshold > 0:
        raise InputError("threshold must be positive")
    return float(np.count_nonzero(e < threshold)) / len(e)


def auc(errors, config: MetricConfig | None = None) -> float:
    """Area under the accuracy-threshold curve on ``[0, auc_max]``, in percent.

    Trapezoid rule on ``auc_steps`` uniform intervals. The curve is sampled in
    its right-continuous form (``error <= threshold``), which differs from the
    strict accuracy only on a measure-zero set of thresholds but makes the
    all-zero case integrate to exactly 100.
    """
    cfg = config or MetricConfig()
    e = np.asarray(errors, dtype=float).reshape(-1)
    if not len(e):
        raise EmptyInput("auc needs at least one error")
    steps = cfg.auc_steps
    grid = np.linspace(0.0, cfg.auc_max_threshold, steps + 1)
    counts = np.searchsorted(np.sort(e), grid, side="right").astype(float)
    area = counts.sum() - 0.5 * (counts[0] + counts[-1])
    return float(100.0 * area / (steps * len(e)))


def bcm_loss(generated: OrientedCloud, target: OrientedCloud, lam: float = DEFAULT_LAMBDA) -> float:
    """Mean position residual plus ``lam`` times mean normal residual."""
    if len(generated) != len(target):
        raise LengthMismatch(f"{len(generated)} generated vs {len(target)} target points")
    if not len(target):
        raise EmptyInput("bcm_loss on empty clouds")
    pos = np.linalg.norm(generated.positions - target.positions, axis=1)
    nrm = np.linalg.norm(generated.normals - target.normals, axis=1)
    return float(np.mean(pos) + lam * np.mean(nrm))


def pose_metrics(pred: RigidTransform, gt: RigidTransform, model_points) -> dict:
    return {
        "add_m": add(pred, gt, model_points),
        "adds_m": adds(pred, gt, model_points),
        "rot_deg": rotation_error_deg(pred, gt),
        "trans_m": translation_error(pred, gt),
    }
