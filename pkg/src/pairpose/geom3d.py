"""SE(3) primitives and the oriented point-pair pose construction.

Rotations are plain ``(3, 3)`` float arrays; quaternions are ``(w, x, y, z)``.
A :class:`RigidTransform` maps model coordinates into camera coordinates as
``p_cam = R @ p_model + t``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import DegeneratePair, EmptyInput, ParseError

# y-z projections shorter than this are treated as lying on the normal axis (m)
EPS_PROJ = 1e-8

E_X = np.array([1.0, 0.0, 0.0])


class OrientedPoint(NamedTuple):
    position: np.ndarray
    normal: np.ndarray


def oriented_point(position, normal) -> OrientedPoint:
    n = np.asarray(normal, dtype=float)
    return OrientedPoint(np.asarray(position, dtype=float), n / np.linalg.norm(n))


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        """Transform a point or an ``(N, 3)`` array of points."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def rotate(self, vectors) -> np.ndarray:
        return np.asarray(vectors, dtype=float) @ self.rotation.T

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def to_dict(self) -> dict:
        return {
            "rotation": [float(x) for x in self.rotation.reshape(-1)],
            "translation": [float(x) for x in self.translation],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RigidTransform":
        try:
            rot = [float(x) for x in d["rotation"]]
            trans = [float(x) for x in d["translation"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"invalid pose object: {exc}") from exc
        if len(rot) != 9 or len(trans) != 3:
            raise ParseError("pose needs 9 rotation and 3 translation numbers")
        if not all(math.isfinite(x) for x in rot + trans):
            raise ParseError("pose contains non-finite numbers")
        return cls(np.array(rot).reshape(3, 3), trans)

    def __repr__(self):
        return (
            f"RigidTransform(rotation={self.rotation.tolist()}, "
            f"translation={self.translation.tolist()})"
        )


def invert(T: RigidTransform) -> RigidTransform:
    return T.inverse()


def apply_point(T: RigidTransform, p) -> np.ndarray:
    return T.apply(p)


def apply_normal(T: RigidTransform, n) -> np.ndarray:
    return T.rotate(n)


def rot_x(alpha: float) -> np.ndarray:
    c, s = math.cos(alpha), math.sin(alpha)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _rot_x_batch(alpha: np.ndarray) -> np.ndarray:
    c, s = np.cos(alpha), np.sin(alpha)
    out = np.zeros(alpha.shape + (3, 3))
    out[..., 0, 0] = 1.0
    out[..., 1, 1] = c
    out[..., 1, 2] = -s
    out[..., 2, 1] = s
    out[..., 2, 2] = c
    return out


def _align_rotations(normals: np.ndarray) -> np.ndarray:
    """Minimal-angle rotations taking each unit normal onto +x.

    Rodrigues about ``n x e_x = (0, n_z, -n_y)``. The ``(1 - cos)/sin^2``
    factor is evaluated without cancellation on both hemispheres; an exactly
    antipodal normal gets a half-turn about +z.
    """
    n = normals / np.linalg.norm(normals, axis=-1, keepdims=True)
    nx, ny, nz = n[..., 0], n[..., 1], n[..., 2]
    s2 = ny * ny + nz * nz
    antipodal = (s2 == 0.0) & (nx < 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        k = np.where(nx >= 0.0, 1.0 / (1.0 + nx), (1.0 - nx) / s2)
    k = np.where(antipodal, 0.0, k)
    R = np.empty(n.shape[:-1] + (3, 3))
    R[..., 0, 0] = nx
    R[..., 0, 1] = ny
    R[..., 0, 2] = nz
    R[..., 1, 0] = -ny
    R[..., 1, 1] = nx + k * nz * nz
    R[..., 1, 2] = -k * ny * nz
    R[..., 2, 0] = -nz
    R[..., 2, 1] = -k * ny * nz
    R[..., 2, 2] = nx + k * ny * ny
    if np.any(antipodal):
        R[antipodal] = np.diag([-1.0, -1.0, 1.0])
    return R


def align_to_x(p: OrientedPoint) -> RigidTransform:
    """Transform sending ``p.position`` to the origin and ``p.normal`` to +x."""
    pos = np.asarray(p.position, dtype=float)
    R = _align_rotations(np.asarray(p.normal, dtype=float)[None])[0]
    return RigidTransform(R, -R @ pos)


def pair_poses(src_pos, src_nrm, src_other, dst_pos, dst_nrm, dst_other):
    """Vectorised pair-to-pose construction over ``K`` rows.

    Returns ``(rotations (K,3,3), translations (K,3), valid (K,))``. Rows whose
    second point projects to within ``EPS_PROJ`` of either anchor's normal
    axis are flagged invalid; their outputs are unspecified.
    """
    src_pos = np.asarray(src_pos, dtype=float)
    dst_pos = np.asarray(dst_pos, dtype=float)
    Rs = _align_rotations(np.asarray(src_nrm, dtype=float))
    Rd = _align_rotations(np.asarray(dst_nrm, dtype=float))
    u = np.einsum("kij,kj->ki", Rs, np.asarray(src_other, dtype=float) - src_pos)
    w = np.einsum("kij,kj->ki", Rd, np.asarray(dst_other, dtype=float) - dst_pos)
    valid = (np.hypot(u[:, 1], u[:, 2]) >= EPS_PROJ) & (np.hypot(w[:, 1], w[:, 2]) >= EPS_PROJ)
    alpha = np.arctan2(u[:, 1] * w[:, 2] - u[:, 2] * w[:, 1], u[:, 1] * w[:, 1] + u[:, 2] * w[:, 2])
    R = np.matmul(np.swapaxes(Rd, 1, 2), np.matmul(_rot_x_batch(alpha), Rs))
    t = dst_pos - np.einsum("kij,kj->ki", R, src_pos)
    return R, t, valid


def pair_pose(src_anchor: OrientedPoint, src_other, dst_anchor: OrientedPoint, dst_other) -> RigidTransform:
    """Pose mapping the source oriented pair onto the destination pair.

    The anchors are matched exactly (position and normal); the remaining
    degree of freedom, a rotation about the anchor normal, is fixed by the
    in-plane angle between the two second points.
    """
    R, t, valid = pair_poses(
        np.asarray(src_anchor.position, dtype=float)[None],
        np.asarray(src_anchor.normal, dtype=float)[None],
        np.asarray(src_other, dtype=float)[None],
        np.asarray(dst_anchor.position, dtype=float)[None],
        np.asarray(dst_anchor.normal, dtype=float)[None],
        np.asarray(dst_other, dtype=float)[None],
    )
    if not valid[0]:
        raise DegeneratePair("second point lies on the anchor normal axis")
    return RigidTransform(R[0], t[0])


def quat_from_matrix(R) -> np.ndarray:
    """Unit quaternion(s) ``(w, x, y, z)`` with ``w >= 0`` (Shepperd's method)."""
    R = np.asarray(R, dtype=float)
    single = R.ndim == 2
    R = R.reshape(-1, 3, 3)
    tr = np.trace(R, axis1=1, axis2=2)
    d = np.stack([tr, R[:, 0, 0], R[:, 1, 1], R[:, 2, 2]], axis=1)
    case = np.argmax(d, axis=1)
    q = np.empty((len(R), 4))
    for c in range(4):
        sel = case == c
        if not np.any(sel):
            continue
        m = R[sel]
        if c == 0:
            s = 2.0 * np.sqrt(1.0 + tr[sel])
            q[sel] = np.stack([0.25 * s, (m[:, 2, 1] - m[:, 1, 2]) / s,
                               (m[:, 0, 2] - m[:, 2, 0]) / s, (m[:, 1, 0] - m[:, 0, 1]) / s], axis=1)
        elif c == 1:
            s = 2.0 * np.sqrt(1.0 + m[:, 0, 0] - m[:, 1, 1] - m[:, 2, 2])
            q[sel] = np.stack([(m[:, 2, 1] - m[:, 1, 2]) / s, 0.25 * s,
                               (m[:, 0, 1] + m[:, 1, 0]) / s, (m[:, 0, 2] + m[:, 2, 0]) / s], axis=1)
        elif c == 2:
            s = 2.0 * np.sqrt(1.0 + m[:, 1, 1] - m[:, 0, 0] - m[:, 2, 2])
            q[sel] = np.stack([(m[:, 0, 2] - m[:, 2, 0]) / s, (m[:, 0, 1] + m[:, 1, 0]) / s,
                               0.25 * s, (m[:, 1, 2] + m[:, 2, 1]) / s], axis=1)
        else:
            s = 2.0 * np.sqrt(1.0 + m[:, 2, 2] - m[:, 0, 0] - m[:, 1, 1])
            q[sel] = np.stack([(m[:, 1, 0] - m[:, 0, 1]) / s, (m[:, 0, 2] + m[:, 2, 0]) / s,
                               (m[:, 1, 2] + m[:, 2, 1]) / s, 0.25 * s], axis=1)
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    q[q[:, 0] < 0] *= -1.0
    return q[0] if single else q


def matrix_from_quat(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    single = q.ndim == 1
    q = q.reshape(-1, 4)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q.T
    R = np.empty((len(q), 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R[0] if single else R


def axis_angle_matrix(axis, angle) -> np.ndarray:
    a = np.asarray(axis, dtype=float)
    a = a / np.linalg.norm(a)
    half = 0.5 * angle
    return matrix_from_quat(np.concatenate([[math.cos(half)], math.sin(half) * a]))


def rotation_mean(rotations: Sequence[np.ndarray] | np.ndarray) -> np.ndarray:
    """Chordal L2 mean of rotations.

    Returns the rotation whose unit quaternion maximises ``sum_i (q . q_i)^2``,
    i.e. the principal eigenvector of ``sum_i q_i q_i^T``. The accumulated
    matrix is unchanged by per-element sign flips, so no sign alignment pass
    is needed.
    """
    R = np.asarray(rotations, dtype=float)
    if R.size == 0:
        raise EmptyInput("rotation_mean needs at least one rotation")
    Q = quat_from_matrix(R.reshape(-1, 3, 3))
    _, vecs = np.linalg.eigh(Q.T @ Q)
    q = vecs[:, -1]
    if q[0] < 0:
        q = -q
    return matrix_from_quat(q)


def geodesic_angle(R1, R2) -> float:
    """Angle of the relative rotation ``R1^T R2`` in ``[0, pi]``.

    Evaluated as ``atan2(|skew|, (tr - 1)/2)``, which equals the arccos of
    the trace form but keeps full precision near 0 and pi.
    """
    M = np.asarray(R1, dtype=float).T @ np.asarray(R2, dtype=float)
    c = 0.5 * (np.trace(M) - 1.0)
    s = 0.5 * math.sqrt((M[2, 1] - M[1, 2]) ** 2 + (M[0, 2] - M[2, 0]) ** 2 + (M[1, 0] - M[0, 1]) ** 2)
    return min(max(math.atan2(s, c), 0.0), math.pi)


def geodesic_angles(R1, R2) -> np.ndarray:
    """Batched :func:`geodesic_angle` over broadcastable ``(..., 3, 3)`` stacks."""
    M = np.matmul(np.swapaxes(np.asarray(R1, dtype=float), -1, -2), np.asarray(R2, dtype=float))
    c = 0.5 * (np.trace(M, axis1=-2, axis2=-1) - 1.0)
    s = 0.5 * np.sqrt((M[..., 2, 1] - M[..., 1, 2]) ** 2 + (M[..., 0, 2] - M[..., 2, 0]) ** 2
                      + (M[..., 1, 0] - M[..., 0, 1]) ** 2)
    return np.clip(np.arctan2(s, c), 0.0, math.pi)


def pose_error(pred: RigidTransform, gt: RigidTransform) -> tuple[float, float]:
    """(rotation error in radians, translation error in meters)."""
    return geodesic_angle(pred.rotation, gt.rotation), float(np.linalg.norm(pred.translation - gt.translation))


# -- pose JSON -----------------------------------------------------------------


def dump_pose(T: RigidTransform, path) -> None:
    with open(path, "w") as f:
        json.dump(T.to_dict(), f, indent=2)
        f.write("\n")


def _read_json(path):
    try:
        with open(path) as f:
            return json.load(f)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, path=path, line=exc.lineno) from exc
    except OSError as exc:
        raise ParseError(str(exc.strerror or exc), path=path) from exc


def load_pose(path) -> RigidTransform:
    data = _read_json(path)
    if isinstance(data, dict) and "pose" in data:
        data = data["pose"]
    if not isinstance(data, dict):
        raise ParseError("expected a pose object", path=path)
    try:
        return RigidTransform.from_dict(data)
    except ParseError as exc:
        raise ParseError(str(exc), path=path) from exc


def load_poses(path) -> list[RigidTransform]:
    """Read a JSON array of pose objects (or ``{"poses": [...]}``)."""
    data = _read_json(path)
    if isinstance(data, dict):
        data = data.get("poses", [data])
    if not isinstance(data, list) or not data:
        raise ParseError("expected a non-empty list of pose objects", path=path)
    out = []
    for i, item in enumerate(data):
        if not isinstance(item, dict):
            raise ParseError(f"pose {i} is not an object", path=path)
        try:
            out.append(RigidTransform.from_dict(item))
        except ParseError as exc:
            raise ParseError(f"pose {i}: {exc}", path=path) from exc
    return out


def dump_poses(poses: Iterable[RigidTransform], path) -> None:
    with open(path, "w") as f:
        json.dump([T.to_dict() for T in poses], f, indent=2)
        f.write("\n")
