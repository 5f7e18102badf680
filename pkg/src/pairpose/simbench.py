"""Synthetic scenes, simulated correspondence branches and the sweep harness.

All randomness flows through numpy's PCG64 generator (``default_rng``) seeded
from ``SeedSequence([base_seed, scene_index, stream])``; both algorithms are
specified by numpy and reproduce bit-for-bit across platforms.
"""

from __future__ import annotations

import csv
import dataclasses
import functools
import io
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import cloud
from .cloud import OrientedCloud, TriangleMesh, estimate_normals, sample_surface
from .errors import ConfigError, PairPoseError
from .geom3d import RigidTransform, axis_angle_matrix, matrix_from_quat
from .metrics import (
    ADDS_2CM,
    MetricConfig,
    accuracy_at,
    auc,
    bcm_loss,
    pose_metrics,
)
from .solver import (
    BCM_M,
    BCM_S,
    PR,
    CorrespondenceSet,
    PoseSet,
    ensemble,
    filter_candidates,
    generate_candidates,
    kabsch,
    ransac,
)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

BUILTIN_SHAPES = ("cube", "cylinder", "blob")
METHODS = ("bico", "bico_unfiltered", "bcm_s_only", "bcm_m_only", "pr_only", "kabsch", "ransac")
SWEEP_VARIABLES = {
    "occlusion": "occlusion_fraction",
    "Z": "Z",
    "corr_noise": "corr_noise_sigma",
    "outlier_ratio": "outlier_ratio",
    "keep_fraction": "keep_fraction",
}

# per-scene random streams
_MODEL, _RESAMPLE, _POSE, _OCCLUDE, _DEPTH, _BCM_S, _BCM_M, _PR, _SOLVE = range(9)


# -- builtin shapes -------------------------------------------------------------


def cube_mesh(edge: float = 0.1) -> TriangleMesh:
    h = 0.5 * edge
    v = np.array([[x, y, z] for x in (-h, h) for y in (-h, h) for z in (-h, h)])
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    tris = [t for q in quads for t in ((q[0], q[1], q[2]), (q[0], q[2], q[3]))]
    return TriangleMesh(v, tris)


def cylinder_mesh(radius: float = 0.035, height: float = 0.12, segments: int = 32) -> TriangleMesh:
    ang = 2 * np.pi * np.arange(segments) / segments
    ring = np.column_stack([radius * np.cos(ang), radius * np.sin(ang)])
    bottom = np.column_stack([ring, np.full(segments, -0.5 * height)])
    top = np.column_stack([ring, np.full(segments, 0.5 * height)])
    v = np.vstack([bottom, top, [[0, 0, -0.5 * height], [0, 0, 0.5 * height]]])
    cb, ct = 2 * segments, 2 * segments + 1
    tris = []
    for j in range(segments):
        k = (j + 1) % segments
        tris += [(j, k, segments + k), (j, segments + k, segments + j)]
        tris += [(cb, k, j), (ct, segments + j, segments + k)]
    return TriangleMesh(v, tris)


def _icosphere(subdivisions: int):
    t = (1 + 5 ** 0.5) / 2
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
             (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(p, dtype=float) / np.linalg.norm(p) for p in verts]
    for _ in range(subdivisions):
        cache, new_faces = {}, []

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                p = verts[a] + verts[b]
                verts.append(p / np.linalg.norm(p))
                cache[key] = len(verts) - 1
            return cache[key]

        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return np.array(verts), np.array(faces)


def blob_mesh(radius: float = 0.05, subdivisions: int = 3, shape_seed: int = 7) -> TriangleMesh:
    """Sphere with low-order random radial bumps, so no rotation maps it onto itself."""
    d, faces = _icosphere(subdivisions)
    x, y, z = d.T
    basis = np.column_stack([x, y, z, x * y, y * z, z * x, x * x - y * y, 3 * z * z - 1, x * y * z])
    coef = np.random.default_rng(shape_seed).uniform(-0.12, 0.12, basis.shape[1])
    r = radius * (1.0 + basis @ coef)
    return TriangleMesh(d * r[:, None], faces)


@functools.lru_cache(maxsize=8)
def resolve_mesh(model: str) -> TriangleMesh:
    if model == "cube":
        return cube_mesh()
    if model == "cylinder":
        return cylinder_mesh()
    if model == "blob":
        return blob_mesh()
    return cloud.load_mesh(model)


# -- configuration --------------------------------------------------------------


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int = 0
    model: str = "blob"
    M: int = 1000
    N: int = 1000
    occlusion_fraction: float = 0.0
    depth_noise_sigma: float = 0.0
    corr_noise_sigma: float = 0.002
    # per-component noise on generated unit normals; None reuses corr_noise_sigma
    normal_noise_sigma: float | None = None
    outlier_ratio: float = 0.0
    Z: int = 100
    keep_fraction: float = 0.10
    translation_range: float = 0.1
    camera_distance: float = 0.7
    normal_k: int = 10
    use_pr: bool = False
    pr_count: int = 1000
    pr_sigma_rot_deg: float = 3.0
    pr_sigma_t: float = 0.003
    ransac_iterations: int = 500

    def __post_init__(self):
        def bad(key, why):
            raise ConfigError(f"invalid {key}: {why}")

        if self.model not in BUILTIN_SHAPES and not os.path.isfile(self.model):
            bad("model", f"{self.model!r} is neither a builtin shape {BUILTIN_SHAPES} nor a file")
        for key in ("M", "N", "pr_count", "ransac_iterations"):
            if int(getattr(self, key)) < 1:
                bad(key, "must be >= 1")
        if self.Z < 2:
            bad("Z", "must be >= 2")
        if self.normal_k < 3:
            bad("normal_k", "must be >= 3")
        for key in ("occlusion_fraction", "outlier_ratio"):
            if not 0.0 <= getattr(self, key) < 1.0:
                bad(key, "must lie in [0, 1)")
        if not 0.0 < self.keep_fraction <= 1.0:
            bad("keep_fraction", "must lie in (0, 1]")
        for key in ("depth_noise_sigma", "corr_noise_sigma", "pr_sigma_rot_deg", "pr_sigma_t"):
            if not getattr(self, key) >= 0:
                bad(key, "must be >= 0")
        if self.normal_noise_sigma is not None and not self.normal_noise_sigma >= 0:
            bad("normal_noise_sigma", "must be >= 0")
        if not self.translation_range > 0:
            bad("translation_range", "must be > 0")
        visible = self.N - math.ceil(self.occlusion_fraction * self.N - 1e-9)
        if visible < self.normal_k + 1:
            bad("occlusion_fraction", f"leaves {visible} points, fewer than normal_k+1")

    @property
    def normal_sigma(self) -> float:
        return self.corr_noise_sigma if self.normal_noise_sigma is None else self.normal_noise_sigma


@dataclass(frozen=True)
class SweepConfig:
    base: ScenarioConfig = field(default_factory=ScenarioConfig)
    variable: str = "occlusion"
    values: tuple = (0.0, 0.25, 0.5, 0.7)
    scenes_per_value: int = 200
    methods: tuple = ("bico", "bcm_s_only", "bcm_m_only", "kabsch", "ransac")
    metric: MetricConfig = field(default_factory=MetricConfig)

    def __post_init__(self):
        if self.variable not in SWEEP_VARIABLES:
            raise ConfigError(f"invalid sweep_variable: {self.variable!r} not in {sorted(SWEEP_VARIABLES)}")
        if not self.values:
            raise ConfigError("invalid sweep_values: must be non-empty")
        if self.scenes_per_value < 1:
            raise ConfigError("invalid scenes_per_value: must be >= 1")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown or not self.methods:
            raise ConfigError(f"invalid methods: {unknown or 'empty'} (choose from {METHODS})")
        for v in self.values:
            cell_config(self.base, self.variable, v)


_SWEEP_KEYS = {"sweep_variable", "sweep_values", "scenes_per_value", "methods",
               "auc_max_threshold", "auc_steps", "lambda", "accuracy_diameter_fraction"}


def sweep_config_from_dict(d: dict) -> SweepConfig:
    scenario_keys = {f.name for f in dataclasses.fields(ScenarioConfig)}
    for key in d:
        if key not in scenario_keys and key not in _SWEEP_KEYS:
            raise ConfigError(f"unknown config key: {key}")
    try:
        base = ScenarioConfig(**{k: v for k, v in d.items() if k in scenario_keys})
        metric = MetricConfig(
            auc_max_threshold=float(d.get("auc_max_threshold", MetricConfig.auc_max_threshold)),
            auc_steps=int(d.get("auc_steps", MetricConfig.auc_steps)),
            accuracy_threshold=float(d.get("accuracy_diameter_fraction", MetricConfig.accuracy_threshold)),
            lam=float(d.get("lambda", MetricConfig.lam)),
        )
        defaults = SweepConfig.__dataclass_fields__
        return SweepConfig(
            base=base,
            variable=d.get("sweep_variable", defaults["variable"].default),
            values=tuple(d.get("sweep_values", defaults["values"].default)),
            scenes_per_value=int(d.get("scenes_per_value", defaults["scenes_per_value"].default)),
            methods=tuple(d.get("methods", defaults["methods"].default)),
            metric=metric,
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc


def load_sweep_config(path) -> SweepConfig:
    """Read a sweep config from JSON (``.json``) or TOML ``key = value`` text."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    try:
        if str(path).lower().endswith(".json"):
            data = json.loads(raw.decode())
        else:
            data = tomllib.loads(raw.decode())
    except (ValueError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a key/value mapping")
    return sweep_config_from_dict(data)


def bundled_config_path(name: str = "default") -> str:
    from importlib import resources

    return str(resources.files("pairpose") / "configs" / f"{name}.toml")


def cell_config(base: ScenarioConfig, variable: str, value) -> ScenarioConfig:
    key = SWEEP_VARIABLES[variable]
    if key == "Z":
        if float(value) != int(value):
            raise ConfigError(f"invalid sweep_values: Z={value} is not an integer")
        value = int(value)
    else:
        value = float(value)
    return dataclasses.replace(base, **{key: value})


# -- scenes and oracles ----------------------------------------------------------


def _rng(seed, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), stream]))


def sample_unit_quaternions(rng: np.random.Generator, count: int) -> np.ndarray:
    q = rng.normal(size=(count, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def sample_pose(seed, translation_range: float) -> RigidTransform:
    """Uniform rotation and translation uniform in ``[-range, range]^3``."""
    if not translation_range > 0:
        raise ConfigError("invalid translation_range: must be > 0")
    rng = np.random.default_rng(seed)
    q = sample_unit_quaternions(rng, 1)[0]
    return RigidTransform(matrix_from_quat(q), rng.uniform(-translation_range, translation_range, 3))


@dataclass(frozen=True, eq=False)
class SceneInstance:
    gt_pose: RigidTransform
    scene: OrientedCloud
    model: OrientedCloud
    visible: np.ndarray
    source: OrientedCloud  # the full N-point model-frame resample behind the scene
    clean_positions: np.ndarray  # visible scene points before depth noise
    diameter: float


def make_scene(config: ScenarioConfig, seed=None) -> SceneInstance:
    """Model cloud plus an occluded, noisy camera-frame view of the same surface."""
    seed = config.seed if seed is None else seed
    mesh = resolve_mesh(config.model)
    model = sample_surface(mesh, config.M, _rng(seed, _MODEL))
    source = sample_surface(mesh, config.N, _rng(seed, _RESAMPLE))
    gt = sample_pose(_rng(seed, _POSE), config.translation_range)
    gt = RigidTransform(gt.rotation, gt.translation + np.array([0.0, 0.0, config.camera_distance]))

    cam = gt.apply(source.positions)
    n_hidden = math.ceil(config.occlusion_fraction * config.N - 1e-9)
    visible = np.ones(config.N, dtype=bool)
    if n_hidden:
        patch_seed = _rng(seed, _OCCLUDE).integers(config.N)
        dist = np.linalg.norm(cam - cam[patch_seed], axis=1)
        visible[np.argsort(dist, kind="stable")[:n_hidden]] = False
    clean = cam[visible]
    noisy = clean
    if config.depth_noise_sigma > 0:
        noisy = clean + _rng(seed, _DEPTH).normal(0.0, config.depth_noise_sigma, clean.shape)
    scene = estimate_normals(noisy, k=config.normal_k, viewpoint=np.zeros(3), frame="camera")
    return SceneInstance(gt, scene, model, visible, source, clean, cloud.diameter(model))


def _perturb_normals(normals, sigma, rng):
    n = normals + rng.normal(0.0, sigma, normals.shape) if sigma > 0 else normals.copy()
    return n / np.linalg.norm(n, axis=1, keepdims=True)


def _inject_outliers(pos, nrm, ratio, box, rng):
    count = math.ceil(ratio * len(pos) - 1e-9)
    if count:
        rows = rng.choice(len(pos), size=count, replace=False)
        lo, hi = box
        pos[rows] = rng.uniform(lo, hi, (count, 3))
        nrm[rows] = sample_unit_quaternions(rng, count)[:, 1:]
        nrm[rows] /= np.linalg.norm(nrm[rows], axis=1, keepdims=True)
    return pos, nrm


def oracle_bcm_s(scene: SceneInstance, corr_noise_sigma: float, outlier_ratio: float, seed,
                 normal_noise_sigma: float | None = None) -> CorrespondenceSet:
    """Stand-in for the scene-to-model branch: each scene point mapped into model space."""
    rng = np.random.default_rng(seed)
    sn = corr_noise_sigma if normal_noise_sigma is None else normal_noise_sigma
    inv = scene.gt_pose.inverse()
    pos = inv.apply(scene.scene.positions)
    if corr_noise_sigma > 0:
        pos = pos + rng.normal(0.0, corr_noise_sigma, pos.shape)
    nrm = _perturb_normals(inv.rotate(scene.scene.normals), sn, rng)
    pos, nrm = _inject_outliers(pos, nrm, outlier_ratio, cloud.bounding_box(scene.model), rng)
    return CorrespondenceSet(scene.scene, OrientedCloud(pos, nrm, "model"))


def oracle_bcm_m(scene: SceneInstance, corr_noise_sigma: float, outlier_ratio: float, seed,
                 normal_noise_sigma: float | None = None) -> CorrespondenceSet:
    """Stand-in for the model-to-scene branch: each model point mapped into camera space.

    Outliers are drawn from the model's bounding box, as for the other branch.
    """
    rng = np.random.default_rng(seed)
    sn = corr_noise_sigma if normal_noise_sigma is None else normal_noise_sigma
    gt = scene.gt_pose
    pos = gt.apply(scene.model.positions)
    if corr_noise_sigma > 0:
        pos = pos + rng.normal(0.0, corr_noise_sigma, pos.shape)
    nrm = _perturb_normals(gt.rotate(scene.model.normals), sn, rng)
    pos, nrm = _inject_outliers(pos, nrm, outlier_ratio, cloud.bounding_box(scene.model), rng)
    return CorrespondenceSet(OrientedCloud(pos, nrm, "camera"), scene.model)


def oracle_pr(gt_pose: RigidTransform, count: int, sigma_rot: float, sigma_t: float, seed) -> PoseSet:
    """``count`` noisy copies of the ground truth (rotation noise in degrees)."""
    if count < 1:
        raise ConfigError("invalid pr_count: must be >= 1")
    rng = np.random.default_rng(seed)
    axes = sample_unit_quaternions(rng, count)[:, 1:]
    angles = np.abs(rng.normal(0.0, math.radians(sigma_rot), count))
    offsets = rng.normal(0.0, sigma_t, (count, 3))
    rots = [axis_angle_matrix(a, ang) @ gt_pose.rotation for a, ang in zip(axes, angles)]
    return PoseSet(rots, gt_pose.translation + offsets, PR)


def exact_correspondences(scene: SceneInstance, direction: str) -> CorrespondenceSet:
    """Noise- and outlier-free targets for either branch."""
    if direction == BCM_S:
        inv = scene.gt_pose.inverse()
        return CorrespondenceSet(scene.scene, scene.scene.transformed(inv, "model"))
    return CorrespondenceSet(scene.model.transformed(scene.gt_pose, "camera"), scene.model)


# -- sweeps ------------------------------------------------------------------------


ROW_FIELDS = ["scene_id", "method", "add_m", "adds_m", "rot_deg", "trans_m",
              "variable", "value", "diameter_m", "status"]


def _branch_sets(corr, direction, Z, seed, keep):
    try:
        cands = generate_candidates(corr, Z, seed, direction)
    except PairPoseError as exc:
        return None, None, f"{direction}: {exc}"
    return filter_candidates(cands, keep), filter_candidates(cands, 1.0), None


def run_scene(cfg: ScenarioConfig, scene_seed: int, methods: Sequence[str], lam: float) -> dict:
    """Build one scene, run every method; never raises for per-method failures."""
    scene = make_scene(cfg, seed=scene_seed)
    bs = oracle_bcm_s(scene, cfg.corr_noise_sigma, cfg.outlier_ratio, _rng(scene_seed, _BCM_S), cfg.normal_noise_sigma)
    bm = oracle_bcm_m(scene, cfg.corr_noise_sigma, cfg.outlier_ratio, _rng(scene_seed, _BCM_M), cfg.normal_noise_sigma)
    pr = None
    if cfg.use_pr:
        pr = oracle_pr(scene.gt_pose, cfg.pr_count, cfg.pr_sigma_rot_deg, cfg.pr_sigma_t, _rng(scene_seed, _PR))
    losses = {
        "bcm_s_loss": bcm_loss(bs.model, exact_correspondences(scene, BCM_S).model, lam),
        "bcm_m_loss": bcm_loss(bm.camera, exact_correspondences(scene, BCM_M).camera, lam),
    }
    solve_seed = int(_rng(scene_seed, _SOLVE).integers(2**31))
    need_pairs = {"bico", "bico_unfiltered", "bcm_s_only", "bcm_m_only"} & set(methods)
    s_kept = s_all = m_kept = m_all = None
    notes = []
    if need_pairs:
        s_kept, s_all, note_s = _branch_sets(bs, BCM_S, cfg.Z, solve_seed, cfg.keep_fraction)
        m_kept, m_all, note_m = _branch_sets(bm, BCM_M, cfg.Z, solve_seed, cfg.keep_fraction)
        notes = [n for n in (note_s, note_m) if n]

    results = {}
    for method in methods:
        try:
            if method == "bico":
                pose = ensemble([s_kept, m_kept, pr])
            elif method == "bico_unfiltered":
                pose = ensemble([s_all, m_all, pr])
            elif method == "bcm_s_only":
                pose = ensemble([s_kept])
            elif method == "bcm_m_only":
                pose = ensemble([m_kept])
            elif method == "pr_only":
                pose = ensemble([pr])
            elif method == "kabsch":
                pose = kabsch(bs.concat(bm))
            else:
                pose = ransac(bs.concat(bm), 0.5 * 0.1 * scene.diameter, cfg.ransac_iterations, solve_seed)
            row = pose_metrics(pose, scene.gt_pose, scene.model.positions)
            row["status"] = "ok" if not notes or method in ("kabsch", "ransac", "pr_only") else "ok; " + "; ".join(notes)
        except PairPoseError as exc:
            row = {"add_m": math.inf, "adds_m": math.inf, "rot_deg": math.inf, "trans_m": math.inf,
                   "status": "failed: " + "; ".join(notes + [str(exc)])}
        results[method] = row
    return {"diameter": scene.diameter, "losses": losses, "methods": results}


def _scene_task(args):
    cfg, scene_seed, methods, lam = args
    return run_scene(cfg, scene_seed, methods, lam)


def scene_seed_for(base_seed: int, scene_index: int) -> int:
    """Scene seeds depend on the scene index only, so every sweep value sees the same draws."""
    return int(np.random.SeedSequence([int(base_seed), int(scene_index)]).generate_state(1)[0])


@dataclass
class Report:
    config: SweepConfig
    rows: list
    aggregates: dict

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=ROW_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in self.rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()

    def json_text(self) -> str:
        cfg = dataclasses.asdict(self.config)
        return json.dumps({"config": cfg, "aggregates": self.aggregates}, indent=2, sort_keys=True) + "\n"

    def write(self, out_dir, stem: str = "report") -> tuple[str, str]:
        os.makedirs(out_dir, exist_ok=True)
        csv_path = os.path.join(out_dir, f"{stem}.csv")
        json_path = os.path.join(out_dir, f"{stem}.json")
        with open(csv_path, "w", newline="") as f:
            f.write(self.csv_text())
        with open(json_path, "w") as f:
            f.write(self.json_text())
        return csv_path, json_path

    def accuracy(self, value, method: str, kind: str = "add_accuracy") -> float:
        return self.aggregates["cells"][_cell_key(value)][method][kind]

    def format_table(self) -> str:
        lines = [f"sweep over {self.config.variable} "
                 f"({self.config.scenes_per_value} scenes per value; errors in cm)",
                 f"{'value':>8} {'method':<16} {'ADD acc%':>9} {'ADD-S<2cm%':>11} {'AUC ADD-S':>10} "
                 f"{'med ADD':>9} {'med trans':>10} {'fail':>5}"]
        for vkey, cell in self.aggregates["cells"].items():
            for method, agg in cell.items():
                if method.startswith("_"):
                    continue
                lines.append(
                    f"{vkey:>8} {method:<16} {100 * agg['add_accuracy']:9.1f} {100 * agg['adds_2cm_accuracy']:11.1f} "
                    f"{agg['auc_adds']:10.2f} {_cm(agg['median_add_m']):>9} {_cm(agg['median_trans_m']):>10} "
                    f"{agg['failures']:5d}")
        return "\n".join(lines)


def _cm(x):
    return f"{100 * x:.3f}" if x is not None and math.isfinite(x) else "inf"


def _cell_key(value) -> str:
    return repr(float(value))


def _finite_or_none(x: float):
    return float(x) if math.isfinite(x) else None


def _aggregate(rows, diameters, metric: MetricConfig) -> dict:
    add_e = np.array([r["add_m"] for r in rows])
    adds_e = np.array([r["adds_m"] for r in rows])
    trans = np.array([r["trans_m"] for r in rows])
    rot = np.array([r["rot_deg"] for r in rows])
    thresholds = np.array([metric.threshold_for(d) for d in diameters])
    finite = np.isfinite(add_e)
    return {
        "scenes": len(rows),
        "failures": int(np.count_nonzero(~finite)),
        "add_accuracy": float(np.mean(add_e < thresholds)),
        "adds_accuracy": float(np.mean(adds_e < thresholds)),
        "adds_2cm_accuracy": accuracy_at(adds_e, ADDS_2CM),
        "auc_add": auc(add_e, metric),
        "auc_adds": auc(adds_e, metric),
        "mean_add_m": _finite_or_none(add_e[finite].mean()) if finite.any() else None,
        "median_add_m": _finite_or_none(np.median(add_e)),
        "median_adds_m": _finite_or_none(np.median(adds_e)),
        "median_trans_m": _finite_or_none(np.median(trans)),
        "median_rot_deg": _finite_or_none(np.median(rot)),
    }


def run_sweep(config: SweepConfig, threads: int = 1) -> Report:
    """Run every (value, scene) cell and every method; results do not depend on ``threads``."""
    tasks, index = [], []
    for vi, value in enumerate(config.values):
        cfg = cell_config(config.base, config.variable, value)
        for si in range(config.scenes_per_value):
            tasks.append((cfg, scene_seed_for(config.base.seed, si), tuple(config.methods), config.metric.lam))
            index.append((vi, value, si))
    if threads > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_scene_task, tasks, chunksize=max(1, len(tasks) // (4 * threads))))
    else:
        results = [_scene_task(t) for t in tasks]

    rows = []
    per_cell: dict = {}
    for (vi, value, si), res in zip(index, results):
        cell = per_cell.setdefault(_cell_key(value), {"diam": [], "losses": [], "rows": {m: [] for m in config.methods}})
        cell["diam"].append(res["diameter"])
        cell["losses"].append(res["losses"])
        for method in config.methods:
            r = res["methods"][method]
            cell["rows"][method].append(r)
            rows.append({"scene_id": f"v{vi}-s{si:04d}", "method": method,
                         "add_m": r["add_m"], "adds_m": r["adds_m"], "rot_deg": r["rot_deg"],
                         "trans_m": r["trans_m"], "variable": config.variable, "value": float(value),
                         "diameter_m": res["diameter"], "status": r["status"]})

    cells = {}
    for vkey, cell in per_cell.items():
        out = {m: _aggregate(cell["rows"][m], cell["diam"], config.metric) for m in config.methods}
        out["_oracle"] = {
            "mean_bcm_s_loss": float(np.mean([x["bcm_s_loss"] for x in cell["losses"]])),
            "mean_bcm_m_loss": float(np.mean([x["bcm_m_loss"] for x in cell["losses"]])),
            "mean_diameter_m": float(np.mean(cell["diam"])),
        }
        cells[vkey] = out
    return Report(config, rows, {"variable": config.variable, "cells": cells})
