"""Pose solving from oriented correspondences.

The point-pair pipeline turns every ordered pair of FPS-selected
correspondences into a pose candidate, scores each candidate by its mean
residual over all correspondences, keeps the best fraction per branch and
averages the pooled survivors. Least-squares (Kabsch) and RANSAC fits are
provided as baselines.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

from .cloud import OrientedCloud, diameter, farthest_point_sampling
from .errors import (
    AllPairsDegenerate,
    ComputationError,
    DegenerateConfiguration,
    EmptyInput,
    InputError,
    LengthMismatch,
    NoValidHypothesis,
    ParseError,
    TooFewPoints,
    ZOutOfRange,
)
from .geom3d import RigidTransform, matrix_from_quat, pair_poses, quat_from_matrix, rotation_mean

BCM_S = "BCM-S"
BCM_M = "BCM-M"
PR = "PR"
SOURCES = (PR, BCM_S, BCM_M)

DEFAULT_Z = 100
DEFAULT_KEEP = 0.10
RANSAC_ITERATIONS = 500

CSV_HEADER = ["sx", "sy", "sz", "snx", "sny", "snz", "mx", "my", "mz", "mnx", "mny", "mnz"]

_SCORE_CHUNK = 32


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """Row ``i`` pairs ``camera[i]`` with ``model[i]``."""

    camera: OrientedCloud
    model: OrientedCloud

    def __post_init__(self):
        if len(self.camera) != len(self.model):
            raise LengthMismatch(f"camera side has {len(self.camera)} rows, model side {len(self.model)}")
        if len(self.camera) < 1:
            raise EmptyInput("correspondence set is empty")
        if self.camera.frame != "camera" or self.model.frame != "model":
            raise InputError("correspondence frames must be (camera, model)")

    def __len__(self):
        return len(self.camera)

    @classmethod
    def from_arrays(cls, cam_pos, cam_nrm, mod_pos, mod_nrm) -> "CorrespondenceSet":
        return cls(OrientedCloud(cam_pos, cam_nrm, "camera"), OrientedCloud(mod_pos, mod_nrm, "model"))

    def concat(self, other: "CorrespondenceSet") -> "CorrespondenceSet":
        return CorrespondenceSet.from_arrays(
            np.vstack([self.camera.positions, other.camera.positions]),
            np.vstack([self.camera.normals, other.camera.normals]),
            np.vstack([self.model.positions, other.model.positions]),
            np.vstack([self.model.normals, other.model.normals]),
        )


def load_correspondences(path) -> CorrespondenceSet:
    rows = []
    try:
        f = open(path, newline="")
    except OSError as exc:
        raise ParseError(str(exc.strerror or exc), path=path) from exc
    with f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != CSV_HEADER:
            raise ParseError(f"header must be {','.join(CSV_HEADER)}", path, 1)
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 12:
                raise ParseError(f"expected 12 fields, got {len(row)}", path, reader.line_num)
            try:
                vals = [float(c) for c in row]
            except ValueError:
                raise ParseError("non-numeric field", path, reader.line_num) from None
            if not all(math.isfinite(v) for v in vals):
                raise ParseError("non-finite field", path, reader.line_num)
            sn, mn = np.array(vals[3:6]), np.array(vals[9:12])
            if np.linalg.norm(sn) < 1e-12 or np.linalg.norm(mn) < 1e-12:
                raise ParseError("zero-length normal", path, reader.line_num)
            rows.append(vals)
    if not rows:
        raise ParseError("no correspondence rows", path)
    a = np.asarray(rows)
    sn = a[:, 3:6] / np.linalg.norm(a[:, 3:6], axis=1, keepdims=True)
    mn = a[:, 9:12] / np.linalg.norm(a[:, 9:12], axis=1, keepdims=True)
    return CorrespondenceSet.from_arrays(a[:, 0:3], sn, a[:, 6:9], mn)


def save_correspondences(corr: CorrespondenceSet, path) -> None:
    block = np.hstack([corr.camera.positions, corr.camera.normals, corr.model.positions, corr.model.normals])
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for row in block:
            w.writerow([repr(float(v)) for v in row])


@dataclass(frozen=True)
class PoseCandidate:
    transform: RigidTransform
    error: float
    pair: tuple[int, int]


class Candidates(Sequence[PoseCandidate]):
    """Array-backed collection of pose candidates from one branch."""

    def __init__(self, rotations, translations, errors, pairs, source: str = BCM_S):
        self.rotations = np.asarray(rotations, dtype=float).reshape(-1, 3, 3)
        self.translations = np.asarray(translations, dtype=float).reshape(-1, 3)
        self.errors = np.asarray(errors, dtype=float).reshape(-1)
        self.pairs = np.asarray(pairs, dtype=np.intp).reshape(-1, 2)
        self.source = source

    @classmethod
    def from_list(cls, candidates: Iterable[PoseCandidate], source: str = BCM_S) -> "Candidates":
        cands = list(candidates)
        return cls(
            [c.transform.rotation for c in cands],
            [c.transform.translation for c in cands],
            [c.error for c in cands],
            [c.pair for c in cands],
            source,
        )

    def __len__(self):
        return len(self.errors)

    def __getitem__(self, k):
        if isinstance(k, slice):
            return [self[j] for j in range(*k.indices(len(self)))]
        return PoseCandidate(
            RigidTransform(self.rotations[k], self.translations[k]),
            float(self.errors[k]),
            (int(self.pairs[k, 0]), int(self.pairs[k, 1])),
        )

    def __iter__(self) -> Iterator[PoseCandidate]:
        return (self[k] for k in range(len(self)))


class PoseSet:
    def __init__(self, rotations, translations, source: str):
        if source not in SOURCES:
            raise InputError(f"pose set source must be one of {SOURCES}")
        self.rotations = np.asarray(rotations, dtype=float).reshape(-1, 3, 3)
        self.translations = np.asarray(translations, dtype=float).reshape(-1, 3)
        self.source = source

    @classmethod
    def from_poses(cls, poses: Iterable[RigidTransform], source: str) -> "PoseSet":
        poses = list(poses)
        return cls([T.rotation for T in poses], [T.translation for T in poses], source)

    @property
    def poses(self) -> list[RigidTransform]:
        return [RigidTransform(r, t) for r, t in zip(self.rotations, self.translations)]

    def __len__(self):
        return len(self.rotations)


# -- scoring -------------------------------------------------------------------


def score_candidate(T: RigidTransform, corr: CorrespondenceSet) -> float:
    """Mean model-space residual ``|R^-1 (s_i - t) - m_i|`` over all rows."""
    back = (corr.camera.positions - T.translation) @ T.rotation
    return float(np.mean(np.linalg.norm(back - corr.model.positions, axis=1)))


def score_transforms(rotations, translations, corr: CorrespondenceSet) -> np.ndarray:
    """:func:`score_candidate` for a stack of transforms.

    Uses the camera-space form ``|R m_i + t - s_i|``, equal to the model-space
    residual because rotations preserve length. On centred coordinates the
    residual of every row is one product ``[R | u | -I] @ [m_i; 1; s_i]``, so a
    chunk of transforms costs a single matrix multiply.
    """
    R = np.asarray(rotations, dtype=float).reshape(-1, 3, 3)
    t = np.asarray(translations, dtype=float).reshape(-1, 3)
    m, s = corr.model.positions, corr.camera.positions
    m_mean, s_mean = m.mean(axis=0), s.mean(axis=0)
    feats = np.concatenate([(m - m_mean).T, np.ones((1, len(m))), (s - s_mean).T])
    u = np.einsum("kij,j->ki", R, m_mean) + t - s_mean
    k = len(R)
    A = np.concatenate([R, u[:, :, None], np.broadcast_to(-np.eye(3), (k, 3, 3))], axis=2).reshape(3 * k, 7)
    out = np.empty(k)
    for a in range(0, k, _SCORE_CHUNK):
        d = A[3 * a:3 * (a + _SCORE_CHUNK)] @ feats
        d *= d
        d = d.reshape(-1, 3, d.shape[1]).sum(axis=1)
        np.sqrt(d, out=d)
        out[a:a + _SCORE_CHUNK] = d.mean(axis=1)
    return out


# -- point-pair pipeline -------------------------------------------------------


def generate_candidates(corr: CorrespondenceSet, Z: int = DEFAULT_Z, seed=0, direction: str = BCM_S) -> Candidates:
    """All ordered-pair pose candidates over ``Z`` FPS-selected rows.

    The FPS runs on the observed side (camera for BCM-S, model for BCM-M).
    Self-pairs are skipped, so at most ``Z * (Z - 1)`` candidates result.
    Every candidate maps model to camera coordinates.
    """
    if direction not in (BCM_S, BCM_M):
        raise InputError(f"direction must be {BCM_S} or {BCM_M}")
    n = len(corr)
    if Z < 2 or n < Z:
        raise TooFewPoints(f"need 2 <= Z <= {n} correspondences, got Z={Z}")
    observed = corr.camera if direction == BCM_S else corr.model
    sel = farthest_point_sampling(observed, Z, seed)
    rr, ii = np.meshgrid(np.arange(Z), np.arange(Z), indexing="ij")
    off = rr != ii
    r, i = sel[rr[off]], sel[ii[off]]
    mp, mn = corr.model.positions, corr.model.normals
    cp, cn = corr.camera.positions, corr.camera.normals
    if direction == BCM_S:
        R, t, valid = pair_poses(mp[r], mn[r], mp[i], cp[r], cn[r], cp[i])
    else:
        Rinv, tinv, valid = pair_poses(cp[r], cn[r], cp[i], mp[r], mn[r], mp[i])
        R = np.swapaxes(Rinv, 1, 2)
        t = -np.einsum("kij,kj->ki", R, tinv)
    if not np.any(valid):
        raise AllPairsDegenerate(f"all {len(valid)} {direction} pairs are degenerate")
    R, t = R[valid], t[valid]
    pairs = np.stack([r[valid], i[valid]], axis=1)
    return Candidates(R, t, score_transforms(R, t, corr), pairs, direction)


def _n_keep(count: int, keep_fraction: float) -> int:
    # guard against 0.1 * 100 = 10.000000000000002 style round-up
    return max(1, min(count, math.ceil(keep_fraction * count - 1e-9)))


def filter_candidates(candidates, keep_fraction: float = DEFAULT_KEEP) -> PoseSet:
    """Keep the ``ceil(keep_fraction * count)`` lowest-error candidates.

    Ties in error are broken by the (anchor, other) index pair.
    """
    if not isinstance(candidates, Candidates):
        candidates = Candidates.from_list(candidates)
    if not len(candidates):
        raise EmptyInput("no candidates to filter")
    if not 0 < keep_fraction <= 1:
        raise InputError("keep_fraction must lie in (0, 1]")
    order = np.lexsort((candidates.pairs[:, 1], candidates.pairs[:, 0], candidates.errors))
    kept = order[:_n_keep(len(candidates), keep_fraction)]
    source = candidates.source if candidates.source in SOURCES else BCM_S
    return PoseSet(candidates.rotations[kept], candidates.translations[kept], source)


def ensemble(sets: Sequence[PoseSet]) -> RigidTransform:
    """Equal-weight average of every pose in the union of ``sets``."""
    sets = [s for s in sets if s is not None and len(s)]
    if not sets:
        raise EmptyInput("ensemble needs at least one non-empty pose set")
    R = np.concatenate([s.rotations for s in sets])
    t = np.concatenate([s.translations for s in sets])
    # round-trip through the quaternion so the output is orthonormal
    rot = matrix_from_quat(quat_from_matrix(rotation_mean(R)))
    return RigidTransform(rot, t.mean(axis=0))


# -- baselines -----------------------------------------------------------------


def _check_spread(model_pts: np.ndarray) -> None:
    if len(model_pts) < 3:
        raise DegenerateConfiguration(f"need at least 3 correspondences, got {len(model_pts)}")
    sv = np.linalg.svd(model_pts - model_pts.mean(axis=0), compute_uv=False)
    if sv[0] <= 1e-12 or sv[1] <= 1e-9 * sv[0]:
        raise DegenerateConfiguration("model-side points are coincident or collinear")


def kabsch_points(model_pts, camera_pts) -> RigidTransform:
    """Least-squares ``R, t`` minimising ``sum |R m_i + t - s_i|^2``."""
    m = np.asarray(model_pts, dtype=float)
    s = np.asarray(camera_pts, dtype=float)
    _check_spread(m)
    mc, sc = m.mean(axis=0), s.mean(axis=0)
    H = (m - mc).T @ (s - sc)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d if d != 0 else 1.0]) @ U.T
    return RigidTransform(R, sc - R @ mc)


def kabsch(corr: CorrespondenceSet) -> RigidTransform:
    return kabsch_points(corr.model.positions, corr.camera.positions)


def _kabsch_triples(m: np.ndarray, s: np.ndarray):
    """Batched Kabsch on ``(I, 3, 3)`` point triples; also returns a validity mask."""
    e1, e2 = m[:, 1] - m[:, 0], m[:, 2] - m[:, 0]
    area = np.linalg.norm(np.cross(e1, e2), axis=1)
    scale = np.maximum(np.sum(e1 * e1, axis=1), np.sum(e2 * e2, axis=1))
    valid = (scale > 1e-24) & (area > 1e-9 * scale)
    mc, sc = m.mean(axis=1), s.mean(axis=1)
    H = np.einsum("kni,knj->kij", m - mc[:, None], s - sc[:, None])
    U, _, Vt = np.linalg.svd(H)
    V = np.swapaxes(Vt, 1, 2)
    d = np.sign(np.linalg.det(V @ np.swapaxes(U, 1, 2)))
    d[d == 0] = 1.0
    D = np.zeros((len(m), 3, 3))
    D[:, 0, 0] = D[:, 1, 1] = 1.0
    D[:, 2, 2] = d
    R = V @ D @ np.swapaxes(U, 1, 2)
    t = sc - np.einsum("kij,kj->ki", R, mc)
    return R, t, valid


def default_inlier_threshold(corr: CorrespondenceSet) -> float:
    """Half of 10% of the model-side diameter."""
    return 0.5 * 0.1 * diameter(corr.model.positions)


def ransac(corr: CorrespondenceSet, inlier_threshold: float | None = None,
           iterations: int = RANSAC_ITERATIONS, seed=0, return_inliers: bool = False):
    """Least-squares RANSAC over minimal 3-point samples.

    The hypothesis with the most inliers wins (ties: smaller summed inlier
    residual, then earlier iteration) and is refit on its inlier set.
    """
    n = len(corr)
    if n < 3:
        raise DegenerateConfiguration("ransac needs at least 3 correspondences")
    if iterations < 1:
        raise InputError("iterations must be >= 1")
    tau = default_inlier_threshold(corr) if inlier_threshold is None else float(inlier_threshold)
    if not tau > 0:
        raise InputError("inlier threshold must be positive")
    m, s = corr.model.positions, corr.camera.positions
    rng = np.random.default_rng(seed)
    samples = np.stack([rng.choice(n, 3, replace=False) for _ in range(iterations)])
    R, t, valid = _kabsch_triples(m[samples], s[samples])
    if not np.any(valid):
        raise NoValidHypothesis(f"all {iterations} samples were degenerate")
    R, t = R[valid], t[valid]
    res = np.sqrt(np.sum((np.einsum("kij,nj->kni", R, m) + t[:, None, :] - s[None]) ** 2, axis=-1))
    inl = res < tau
    counts = inl.sum(axis=1)
    cost = np.where(inl, res, 0.0).sum(axis=1)
    best = np.lexsort((np.arange(len(counts)), cost, -counts))[0]
    mask = inl[best]
    T = RigidTransform(R[best], t[best])
    if mask.sum() >= 3:
        try:
            T = kabsch_points(m[mask], s[mask])
        except DegenerateConfiguration:
            pass
    if return_inliers:
        return T, mask
    return T


# -- full pipeline -------------------------------------------------------------


def _quantiles(x: np.ndarray) -> dict:
    q = np.quantile(x, [0.0, 0.1, 0.5, 0.9, 1.0])
    return dict(zip(("min", "q10", "median", "q90", "max"), (float(v) for v in q)))


def branch_diagnostics(cands: Candidates, kept: PoseSet) -> dict:
    kept_err = np.sort(cands.errors)[: len(kept)]
    return {
        "candidates": len(cands),
        "kept": len(kept),
        "error_quantiles": _quantiles(cands.errors),
        "mean_error": float(cands.errors.mean()),
        "mean_kept_error": float(kept_err.mean()),
        "mean_pose": ensemble([kept]).to_dict(),
    }


def solve(scene: OrientedCloud | None, model: OrientedCloud | None,
          bcm_s: CorrespondenceSet | None, bcm_m: CorrespondenceSet | None,
          pr_poses: PoseSet | None = None, Z: int = DEFAULT_Z, seed=0,
          keep_fraction: float = DEFAULT_KEEP):
    """Full point-pair pipeline; returns ``(pose, diagnostics)``.

    A branch that is missing or fails is reported in ``diagnostics["warnings"]``
    and the remaining pose sets are still ensembled.
    """
    if Z < 2:
        raise InputError("Z must be >= 2")
    diag = {"Z": int(Z), "keep_fraction": float(keep_fraction), "seed": seed,
            "branches": {}, "warnings": []}
    if scene is not None:
        diag["scene_points"] = len(scene)
    if model is not None:
        diag["model_points"] = len(model)
    sets = []
    for name, corr in ((BCM_S, bcm_s), (BCM_M, bcm_m)):
        if corr is None:
            diag["warnings"].append(f"{name}: no correspondences supplied")
            continue
        try:
            cands = generate_candidates(corr, Z, seed, name)
        except (ComputationError, TooFewPoints, ZOutOfRange) as exc:
            diag["warnings"].append(f"{name}: {exc}")
            continue
        kept = filter_candidates(cands, keep_fraction)
        diag["branches"][name] = branch_diagnostics(cands, kept)
        sets.append(kept)
    if pr_poses is not None and len(pr_poses):
        diag["pr_poses"] = len(pr_poses)
        sets.append(pr_poses)
    if not sets:
        raise AllPairsDegenerate("no branch produced a pose: " + "; ".join(diag["warnings"]))
    diag["pooled_poses"] = int(sum(len(s) for s in sets))
    pose = ensemble(sets)
    return pose, diag
