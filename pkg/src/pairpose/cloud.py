"""Point-cloud containers, mesh I/O and sampling, normals, FPS, neighbour queries."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.spatial import ConvexHull, QhullError, cKDTree
from scipy.spatial.distance import pdist

from .errors import (
    EmptyCloud,
    EmptyMesh,
    InputError,
    ParseError,
    TooFewPoints,
    ZOutOfRange,
)
from .geom3d import OrientedPoint

FRAMES = ("camera", "model")

DEFAULT_NORMAL_K = 10
# smallest/second-smallest eigenvalue ratio above which a PCA normal is ambiguous
DEGENERATE_EIG_RATIO = 0.99


def _frozen(a, dtype=float) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class OrientedCloud:
    positions: np.ndarray
    normals: np.ndarray
    frame: str = "camera"

    def __post_init__(self):
        p = _frozen(self.positions).reshape(-1, 3)
        n = _frozen(self.normals).reshape(-1, 3)
        if p.shape != n.shape:
            raise InputError(f"positions {p.shape} and normals {n.shape} differ in shape")
        if self.frame not in FRAMES:
            raise InputError(f"frame must be one of {FRAMES}, got {self.frame!r}")
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(n))):
            raise InputError("cloud contains non-finite values")
        if len(n) and np.max(np.abs(np.linalg.norm(n, axis=1) - 1.0)) > 1e-6:
            raise InputError("cloud normals must be unit length")
        object.__setattr__(self, "positions", p)
        object.__setattr__(self, "normals", n)

    def __len__(self):
        return len(self.positions)

    def __getitem__(self, i) -> OrientedPoint:
        return OrientedPoint(self.positions[i], self.normals[i])

    def take(self, indices) -> "OrientedCloud":
        idx = np.asarray(indices, dtype=np.intp)
        return OrientedCloud(self.positions[idx], self.normals[idx], self.frame)

    def transformed(self, T, frame: str | None = None) -> "OrientedCloud":
        return OrientedCloud(T.apply(self.positions), T.rotate(self.normals), frame or self.frame)


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        v = _frozen(self.vertices).reshape(-1, 3)
        f = _frozen(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            raise InputError("triangle index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", f)

    def face_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, j]] for j in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


PointsLike = Union[OrientedCloud, np.ndarray]


def as_positions(points: PointsLike) -> np.ndarray:
    if isinstance(points, OrientedCloud):
        return points.positions
    return np.asarray(points, dtype=float).reshape(-1, 3)


# -- mesh / cloud files --------------------------------------------------------


def _fan(poly):
    return [(poly[0], poly[j], poly[j + 1]) for j in range(1, len(poly) - 1)]


def _parse_obj(path):
    vertices, triangles = [], []
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tok = line.split()
            if tok[0] == "v":
                try:
                    xyz = [float(x) for x in tok[1:4]]
                except ValueError:
                    raise ParseError("bad vertex coordinate", path, lineno) from None
                if len(xyz) != 3 or not all(math.isfinite(x) for x in xyz):
                    raise ParseError("vertex needs 3 finite coordinates", path, lineno)
                vertices.append(xyz)
            elif tok[0] == "f":
                if len(tok) < 4:
                    raise ParseError("face needs at least 3 vertices", path, lineno)
                poly = []
                for t in tok[1:]:
                    try:
                        idx = int(t.split("/")[0])
                    except ValueError:
                        raise ParseError(f"bad face index {t!r}", path, lineno) from None
                    if idx == 0:
                        raise ParseError("face index 0 (OBJ indices are 1-based)", path, lineno)
                    idx = idx - 1 if idx > 0 else len(vertices) + idx
                    if not 0 <= idx < len(vertices):
                        raise ParseError(f"face index {t} out of range", path, lineno)
                    poly.append(idx)
                triangles.extend(_fan(poly))
    return vertices, triangles


_PLY_TYPES = {
    "char": int, "uchar": int, "short": int, "ushort": int, "int": int, "uint": int,
    "int8": int, "uint8": int, "int16": int, "uint16": int, "int32": int, "uint32": int,
    "float": float, "double": float, "float32": float, "float64": float,
}


def _read_ply(path):
    """Parse an ASCII PLY file into ``{element: (props, records)}``.

    Scalar properties come back as columns keyed by name; list properties as
    per-record Python lists.
    """
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing 'ply' magic", path, 1)
    elements = []
    lineno = 1
    while True:
        if lineno >= len(lines):
            raise ParseError("missing end_header", path, lineno)
        tok = lines[lineno].split()
        lineno += 1
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] != "ascii":
                raise ParseError("only ASCII PLY is supported", path, lineno)
        elif tok[0] == "element":
            try:
                elements.append((tok[1], int(tok[2]), []))
            except (IndexError, ValueError):
                raise ParseError("bad element line", path, lineno) from None
        elif tok[0] == "property":
            if not elements:
                raise ParseError("property before any element", path, lineno)
            if len(tok) == 5 and tok[1] == "list":
                if tok[3] not in _PLY_TYPES:
                    raise ParseError(f"unknown type {tok[3]}", path, lineno)
                elements[-1][2].append(("list", _PLY_TYPES[tok[3]], tok[4]))
            elif len(tok) == 3 and tok[1] in _PLY_TYPES:
                elements[-1][2].append(("scalar", _PLY_TYPES[tok[1]], tok[2]))
            else:
                raise ParseError("bad property line", path, lineno)
        elif tok[0] == "end_header":
            break
        else:
            raise ParseError(f"unexpected header keyword {tok[0]!r}", path, lineno)

    out = {}
    for name, count, props in elements:
        columns = {p[2]: [] for p in props}
        for _ in range(count):
            while lineno < len(lines) and not lines[lineno].strip():
                lineno += 1
            if lineno >= len(lines):
                raise ParseError(f"file ends inside element '{name}'", path, lineno)
            tok = lines[lineno].split()
            lineno += 1
            pos = 0
            try:
                for kind, typ, pname in props:
                    if kind == "scalar":
                        columns[pname].append(typ(tok[pos]))
                        pos += 1
                    else:
                        n = int(tok[pos])
                        columns[pname].append([typ(x) for x in tok[pos + 1:pos + 1 + n]])
                        if len(columns[pname][-1]) != n:
                            raise IndexError
                        pos += 1 + n
            except (IndexError, ValueError):
                raise ParseError(f"malformed '{name}' record", path, lineno) from None
            if pos != len(tok):
                raise ParseError(f"trailing values in '{name}' record", path, lineno)
        out[name] = columns
    return out


def _ply_vertices(data, path, names=("x", "y", "z")):
    vert = data.get("vertex")
    if vert is None or not all(k in vert for k in names):
        raise ParseError(f"vertex element needs properties {' '.join(names)}", path)
    arr = np.column_stack([np.asarray(vert[k], dtype=float) for k in names]) if vert[names[0]] else np.empty((0, len(names)))
    if not np.all(np.isfinite(arr)):
        raise ParseError("non-finite vertex value", path)
    return arr


def _ply_mesh(data, path) -> TriangleMesh:
    vertices = _ply_vertices(data, path)
    faces = data.get("face", {})
    lists = faces.get("vertex_indices", faces.get("vertex_index", []))
    triangles = []
    for k, poly in enumerate(lists):
        if len(poly) < 3:
            raise ParseError(f"face {k} has fewer than 3 vertices", path)
        if min(poly) < 0 or max(poly) >= len(vertices):
            raise ParseError(f"face {k} index out of range", path)
        triangles.extend(_fan(poly))
    if not len(vertices) or not triangles:
        raise EmptyMesh(f"{path}: mesh has no faces")
    return TriangleMesh(vertices, np.asarray(triangles))


def load_mesh(path) -> TriangleMesh:
    """Load an ASCII OBJ or ASCII PLY triangle mesh; polygons are fan-triangulated."""
    if _is_ply(path):
        return _ply_mesh(_read_ply(path), path)
    vertices, triangles = _parse_obj(path)
    if not vertices or not triangles:
        raise EmptyMesh(f"{path}: mesh has no faces")
    return TriangleMesh(np.asarray(vertices), np.asarray(triangles))


def _is_ply(path) -> bool:
    if str(path).lower().endswith(".ply"):
        return True
    if str(path).lower().endswith(".obj"):
        return False
    try:
        with open(path) as f:
            return f.readline().strip() == "ply"
    except OSError as exc:
        raise ParseError(str(exc.strerror or exc), path) from exc


def load_cloud(path, frame: str = "camera") -> OrientedCloud:
    """Read an oriented cloud from ASCII PLY with x y z nx ny nz properties."""
    data = _read_ply(path)
    arr = _ply_vertices(data, path, ("x", "y", "z", "nx", "ny", "nz"))
    if not len(arr):
        raise EmptyCloud(f"{path}: cloud has no points")
    n = arr[:, 3:]
    norms = np.linalg.norm(n, axis=1)
    if np.any(norms < 1e-12):
        raise ParseError("zero-length normal", path)
    return OrientedCloud(arr[:, :3], n / norms[:, None], frame)


def save_cloud(cloud: OrientedCloud, path) -> None:
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(cloud)}\n")
        for name in ("x", "y", "z", "nx", "ny", "nz"):
            f.write(f"property double {name}\n")
        f.write("end_header\n")
        for p, n in zip(cloud.positions, cloud.normals):
            f.write(" ".join(repr(float(v)) for v in (*p, *n)) + "\n")


def load_model(path, count: int = 1000, seed: int = 0) -> OrientedCloud:
    """Model points from a mesh (surface-sampled) or from an oriented-cloud PLY."""
    if _is_ply(path):
        data = _read_ply(path)
        if data.get("face") and any(data["face"].values()):
            return sample_surface(_ply_mesh(data, path), count, seed)
        arr = _ply_vertices(data, path, ("x", "y", "z", "nx", "ny", "nz"))
        if not len(arr):
            raise EmptyCloud(f"{path}: cloud has no points")
        n = arr[:, 3:] / np.linalg.norm(arr[:, 3:], axis=1, keepdims=True)
        return OrientedCloud(arr[:, :3], n, "model")
    return sample_surface(load_mesh(path), count, seed)


def save_obj(mesh: TriangleMesh, path) -> None:
    with open(path, "w") as f:
        for v in mesh.vertices:
            f.write("v {!r} {!r} {!r}\n".format(*map(float, v)))
        for t in mesh.triangles:
            f.write("f {} {} {}\n".format(*(int(i) + 1 for i in t)))


# -- sampling and normals ------------------------------------------------------


def sample_surface(mesh: TriangleMesh, count: int, seed) -> OrientedCloud:
    """Area-weighted uniform surface samples carrying their face normals.

    Face normals follow the winding order (counter-clockwise = outward).
    """
    if count < 1:
        raise InputError("sample count must be >= 1")
    areas = mesh.face_areas()
    total = areas.sum()
    if not len(areas) or not total > 0:
        raise EmptyMesh("mesh has no triangle with positive area")
    rng = np.random.default_rng(seed)
    faces = rng.choice(len(areas), size=count, p=areas / total)
    uv = rng.random((count, 2))
    flip = uv.sum(axis=1) > 1.0
    uv[flip] = 1.0 - uv[flip]
    tri = mesh.triangles[faces]
    a, b, c = (mesh.vertices[tri[:, j]] for j in range(3))
    pts = a + uv[:, :1] * (b - a) + uv[:, 1:] * (c - a)
    n = np.cross(b - a, c - a)
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    return OrientedCloud(pts, n, "model")


def estimate_normals(positions, k: int = DEFAULT_NORMAL_K, viewpoint=(0.0, 0.0, 0.0),
                     frame: str = "camera", return_mask: bool = False):
    """PCA normals from each point and its ``k`` nearest neighbours.

    Normals are oriented towards ``viewpoint``. With ``return_mask`` a boolean
    array flags neighbourhoods whose two smallest covariance eigenvalues are
    nearly equal (orientation of the plane is ill-defined there).
    """
    p = as_positions(positions)
    if k < 3:
        raise InputError("k must be >= 3")
    if len(p) < k + 1:
        raise TooFewPoints(f"need at least k+1={k + 1} points, got {len(p)}")
    _, idx = cKDTree(p).query(p, k=k + 1)
    nb = p[idx]
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / (k + 1)
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0]
    to_view = np.asarray(viewpoint, dtype=float) - p
    normals[np.einsum("ij,ij->i", normals, to_view) < 0] *= -1.0
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    cloud = OrientedCloud(p, normals, frame)
    if not return_mask:
        return cloud
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(evals[:, 1] > 0, evals[:, 0] / evals[:, 1], 1.0)
    return cloud, ratio > DEGENERATE_EIG_RATIO


# -- downsampling and queries --------------------------------------------------


def farthest_point_sampling(points: PointsLike, Z: int, seed) -> np.ndarray:
    """Greedy farthest-point subset of size ``Z``; ties go to the lowest index."""
    p = as_positions(points)
    n = len(p)
    if not 1 <= Z <= n:
        raise ZOutOfRange(f"Z={Z} outside [1, {n}]")
    rng = np.random.default_rng(seed)
    chosen = np.empty(Z, dtype=np.intp)
    chosen[0] = rng.integers(n)
    d2 = np.sum((p - p[chosen[0]]) ** 2, axis=1)
    d2[chosen[0]] = -1.0
    for j in range(1, Z):
        nxt = int(np.argmax(d2))
        chosen[j] = nxt
        np.minimum(d2, np.sum((p - p[nxt]) ** 2, axis=1), out=d2)
        d2[chosen[: j + 1]] = -1.0
    return chosen


def nearest_neighbor(points: PointsLike, query) -> tuple[int, float]:
    p = as_positions(points)
    if not len(p):
        raise EmptyCloud("nearest_neighbor on an empty cloud")
    d = np.linalg.norm(p - np.asarray(query, dtype=float), axis=1)
    i = int(np.argmin(d))
    return i, float(d[i])


class NeighborIndex:
    """k-d tree over a fixed point set for batched nearest-neighbour queries.

    Equidistant candidates among the few closest resolve to the lowest index,
    matching :func:`nearest_neighbor`.
    """

    def __init__(self, points: PointsLike):
        self.points = as_positions(points)
        if not len(self.points):
            raise EmptyCloud("cannot index an empty cloud")
        self._tree = cKDTree(self.points)

    def query(self, queries) -> tuple[np.ndarray, np.ndarray]:
        q = np.asarray(queries, dtype=float).reshape(-1, 3)
        k = min(4, len(self.points))
        dist, idx = self._tree.query(q, k=k)
        if k == 1:
            return idx.astype(np.intp), dist
        tied = dist == dist[:, :1]
        best = np.where(tied, idx, np.iinfo(np.intp).max).min(axis=1)
        # recompute exactly, so the distance agrees with the linear scan
        exact = np.linalg.norm(self.points[best] - q, axis=1)
        return best.astype(np.intp), exact


def diameter(points: PointsLike) -> float:
    """Exact maximum pairwise distance.

    The farthest pair always lies on the convex hull, so only hull vertices are
    compared; flat inputs fall back to all points.
    """
    p = as_positions(points)
    if len(p) < 2:
        raise TooFewPoints("diameter needs at least two points")
    if len(p) > 64:
        try:
            p = p[ConvexHull(p).vertices]
        except QhullError:
            pass
    return math.sqrt(float(pdist(p, "sqeuclidean").max()))


def bounding_box(points: PointsLike) -> tuple[np.ndarray, np.ndarray]:
    p = as_positions(points)
    return p.min(axis=0), p.max(axis=0)
