"""Command-line entry point: ``pairpose {estimate,metrics,sweep,selftest}``.

Exit codes: 0 ok, 2 bad input (unparsable file, invalid config), 3 the
computation failed (for example every branch degenerate). Errors are reported
as one line on stderr: ``pairpose: error: <reason>``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from .cloud import diameter, load_cloud, load_model
from .errors import ComputationError, InputError, PairPoseError
from .geom3d import dump_pose, load_pose, load_poses, pose_error
from .metrics import DIAMETER_FRACTION, pose_metrics
from .simbench import bundled_config_path, load_sweep_config, run_sweep
from .solver import DEFAULT_KEEP, DEFAULT_Z, PR, PoseSet, load_correspondences, solve

EXIT_OK, EXIT_INPUT, EXIT_COMPUTE = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _fail(f"usage: {message}", EXIT_INPUT)


def _fail(message: str, code: int):
    sys.stderr.write(f"pairpose: error: {' '.join(str(message).split())}\n")
    raise SystemExit(code)


def _fraction(text):
    v = float(text)
    if not 0.0 < v <= 1.0:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1], got {text}")
    return v


def _z(text):
    v = int(text)
    if v < 2:
        raise argparse.ArgumentTypeError(f"must be >= 2, got {text}")
    return v


def _positive(text):
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {text}")
    return v


def _write_json(path, data):
    with open(path, "w") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")


def cmd_estimate(args) -> int:
    scene = load_cloud(args.scene, "camera") if args.scene else None
    model = load_model(args.model, args.model_points, args.seed) if args.model else None
    bcm_s = load_correspondences(args.bcm_s) if args.bcm_s else None
    bcm_m = load_correspondences(args.bcm_m) if args.bcm_m else None
    pr = PoseSet.from_poses(load_poses(args.pr), PR) if args.pr else None
    pose, diag = solve(scene, model, bcm_s, bcm_m, pr, Z=args.z, seed=args.seed, keep_fraction=args.keep)
    dump_pose(pose, args.out)
    diag_path = args.diagnostics or os.path.splitext(args.out)[0] + ".diagnostics.json"
    diag["pose"] = pose.to_dict()
    _write_json(diag_path, diag)
    for w in diag["warnings"]:
        sys.stderr.write(f"pairpose: warning: {w}\n")
    print(f"wrote {args.out} ({diag['pooled_poses']} pooled poses) and {diag_path}")
    return EXIT_OK


def cmd_metrics(args) -> int:
    pred, gt = load_pose(args.pred), load_pose(args.gt)
    model = load_model(args.model, args.model_points, args.seed)
    row = pose_metrics(pred, gt, model.positions)
    threshold = args.threshold if args.threshold is not None else args.diam_frac * diameter(model.positions)
    fields = ["add_m", "adds_m", "rot_deg", "trans_m", "threshold_m", "pass"]
    values = [row["add_m"], row["adds_m"], row["rot_deg"], row["trans_m"], threshold]
    # pass/fail uses ADD-S for symmetric objects and ADD otherwise
    err = row["adds_m"] if args.symmetric else row["add_m"]
    print(",".join(fields))
    print(",".join([repr(float(v)) for v in values] + ["pass" if err < threshold else "fail"]))
    return EXIT_OK


def cmd_sweep(args) -> int:
    path = args.config or bundled_config_path(args.preset)
    if not args.config and not os.path.isfile(path):
        raise InputError(f"no bundled config named {args.preset!r}")
    config = load_sweep_config(path)
    threads = args.threads if args.threads > 0 else (os.cpu_count() or 1)
    report = run_sweep(config, threads=threads)
    csv_path, json_path = report.write(args.out_dir, args.stem)
    print(report.format_table())
    print(f"wrote {csv_path} and {json_path}")
    return EXIT_OK


def _selftest_checks():
    from .geom3d import RigidTransform, matrix_from_quat, pair_poses
    from .metrics import add, adds, auc
    from .simbench import ScenarioConfig, SweepConfig
    from .solver import CorrespondenceSet, kabsch

    rng = np.random.default_rng(0)

    def pair_recovery():
        k = 2000
        R = matrix_from_quat(rng.normal(size=(k, 4)))
        t = rng.normal(size=(k, 3))
        p, q = rng.normal(size=(2, k, 3))
        n = rng.normal(size=(k, 3))
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        Rp, tp, ok = pair_poses(p, n, q, np.einsum("kij,kj->ki", R, p) + t, np.einsum("kij,kj->ki", R, n),
                                np.einsum("kij,kj->ki", R, q) + t)
        err = max(np.abs(Rp[ok] - R[ok]).max(), np.abs(tp[ok] - t[ok]).max())
        return err <= 1e-9, f"max error {err:.1e} over {ok.sum()} pairs"

    def clean_solve():
        T = RigidTransform(matrix_from_quat(rng.normal(size=4)), [0.02, -0.01, 0.7])
        m = rng.normal(size=(300, 3)) * 0.05
        n = rng.normal(size=(300, 3))
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        corr = CorrespondenceSet.from_arrays(T.apply(m), T.rotate(n), m, n)
        pose, _ = solve(None, None, corr, corr, Z=30, seed=1)
        r, d = pose_error(pose, T)
        rk, dk = pose_error(pose, kabsch(corr))
        worst = max(r, d, rk, dk)
        return worst <= 1e-6, f"max deviation from truth and least squares {worst:.1e}"

    def metric_identities():
        x = rng.normal(size=(200, 3)) * 0.05
        A = RigidTransform(matrix_from_quat(rng.normal(size=4)), rng.normal(size=3) * 0.01)
        B = RigidTransform(matrix_from_quat(rng.normal(size=4)), rng.normal(size=3) * 0.01)
        ok = adds(A, B, x) <= add(A, B, x) + 1e-12 and abs(add(A, B, x) - add(B, A, x)) <= 1e-12
        ok = ok and auc(np.zeros(10)) == 100.0 and auc([0.2]) == 0.0
        return ok, "adds <= add, add symmetric, AUC bounds"

    def deterministic_sweep():
        base = ScenarioConfig(M=150, N=150, Z=8, outlier_ratio=0.2)
        cfg = SweepConfig(base=base, variable="occlusion", values=(0.0, 0.5), scenes_per_value=2,
                          methods=("bico", "kabsch"))
        a, b = run_sweep(cfg, 1), run_sweep(cfg, 2)
        return a.csv_text() == b.csv_text() and a.json_text() == b.json_text(), "1 vs 2 workers byte-identical"

    return [("pair-pose recovery", pair_recovery), ("clean solve", clean_solve),
            ("metric identities", metric_identities), ("sweep determinism", deterministic_sweep)]


def cmd_selftest(args) -> int:
    failed = 0
    for name, check in _selftest_checks():
        ok, detail = check()
        failed += not ok
        print(f"{'ok  ' if ok else 'FAIL'} {name}: {detail}")
    if failed:
        raise ComputationError(f"{failed} selftest check(s) failed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pairpose", description="Rigid 6D pose from oriented point-pair correspondences.")
    p.add_argument("--version", action="version", version=f"pairpose {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    e = sub.add_parser("estimate", help="estimate the model-to-camera pose from correspondence files")
    e.add_argument("--scene", help="observed scene cloud (ASCII PLY with normals)")
    e.add_argument("--model", help="model mesh (OBJ/PLY) or oriented model cloud (PLY)")
    e.add_argument("--bcm-s", help="scene-to-model correspondence CSV")
    e.add_argument("--bcm-m", help="model-to-scene correspondence CSV")
    e.add_argument("--pr", help="JSON list of pose-regression hypotheses")
    e.add_argument("--z", type=_z, default=DEFAULT_Z, help="FPS points per branch (default %(default)s)")
    e.add_argument("--keep", type=_fraction, default=DEFAULT_KEEP,
                   help="fraction of lowest-error candidates kept (default %(default)s)")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--model-points", type=int, default=1000, help="samples drawn from a model mesh")
    e.add_argument("--out", required=True, help="output pose JSON")
    e.add_argument("--diagnostics", help="diagnostics JSON (default: <out>.diagnostics.json)")
    e.set_defaults(func=cmd_estimate)

    m = sub.add_parser("metrics", help="ADD / ADD-S / rotation / translation error of a pose")
    m.add_argument("--pred", required=True)
    m.add_argument("--gt", required=True)
    m.add_argument("--model", required=True)
    g = m.add_mutually_exclusive_group()
    g.add_argument("--threshold", type=_positive, help="absolute pass threshold in meters")
    g.add_argument("--diam-frac", type=_positive, default=DIAMETER_FRACTION,
                   help="pass threshold as a fraction of the model diameter (default %(default)s)")
    m.add_argument("--symmetric", action="store_true", help="judge pass/fail on ADD-S instead of ADD")
    m.add_argument("--model-points", type=int, default=1000)
    m.add_argument("--seed", type=int, default=0)
    m.set_defaults(func=cmd_metrics)

    s = sub.add_parser("sweep", help="run a simulated benchmark sweep")
    s.add_argument("--config", help="TOML or JSON sweep config")
    s.add_argument("--preset", default="default", help="bundled config name when --config is absent")
    s.add_argument("--out-dir", default="report")
    s.add_argument("--stem", default="report", help="output file stem")
    s.add_argument("--threads", type=int, default=1, help="worker processes (0 = all cores)")
    s.set_defaults(func=cmd_sweep)

    t = sub.add_parser("selftest", help="run quick built-in invariant checks")
    t.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        _fail(exc, EXIT_INPUT)
    except ComputationError as exc:
        _fail(exc, EXIT_COMPUTE)
    except PairPoseError as exc:
        _fail(exc, EXIT_COMPUTE)
    except OSError as exc:
        _fail(f"{exc.filename or ''}: {exc.strerror or exc}", EXIT_INPUT)


if __name__ == "__main__":
    sys.exit(main())
