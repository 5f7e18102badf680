"""Rigid 6D pose from oriented point-pair correspondences."""

from .errors import ComputationError, InputError, PairPoseError
from .geom3d import RigidTransform, pair_pose, rotation_mean
from .metrics import add, adds, auc
from .solver import CorrespondenceSet, PoseSet, ensemble, filter_candidates, generate_candidates, kabsch, ransac, solve

__version__ = "0.1.0"

__all__ = [
    "ComputationError", "CorrespondenceSet", "InputError", "PairPoseError", "PoseSet", "RigidTransform",
    "add", "adds", "auc", "ensemble", "filter_candidates", "generate_candidates", "kabsch", "pair_pose",
    "ransac", "rotation_mean", "solve",
]
