import json
import subprocess
import sys
import time

import numpy as np
import pytest

from pairpose.cli import main
from pairpose.cloud import load_model, save_cloud
from pairpose.geom3d import RigidTransform, axis_angle_matrix, dump_pose, dump_poses, geodesic_angle, load_pose
from pairpose.metrics import pose_metrics
from pairpose.simbench import ScenarioConfig, make_scene, oracle_bcm_m, oracle_bcm_s
from pairpose.solver import CorrespondenceSet, save_correspondences


@pytest.fixture
def fixture_dir(tmp_path):
    scene = make_scene(ScenarioConfig(M=300, N=300), seed=21)
    save_cloud(scene.scene, tmp_path / "scene.ply")
    save_cloud(scene.model, tmp_path / "model.ply")
    save_correspondences(oracle_bcm_s(scene, 0.0, 0.0, 1), tmp_path / "bcm_s.csv")
    save_correspondences(oracle_bcm_m(scene, 0.0, 0.0, 2), tmp_path / "bcm_m.csv")
    dump_pose(scene.gt_pose, tmp_path / "gt.json")
    return tmp_path


def run(capsys, *argv):
    try:
        code = main([str(a) for a in argv])
    except SystemExit as exc:
        code = exc.code
    out, err = capsys.readouterr()
    return code, out, err


def test_estimate_recovers_fixture_pose(fixture_dir, capsys):
    d = fixture_dir
    code, out, err = run(capsys, "estimate", "--scene", d / "scene.ply", "--model", d / "model.ply",
                         "--bcm-s", d / "bcm_s.csv", "--bcm-m", d / "bcm_m.csv", "--z", 30, "--out", d / "pose.json")
    assert code == 0, err
    pose, gt = load_pose(d / "pose.json"), load_pose(d / "gt.json")
    assert geodesic_angle(pose.rotation, gt.rotation) <= 1e-6
    assert np.linalg.norm(pose.translation - gt.translation) <= 1e-6
    diag = json.loads((d / "pose.diagnostics.json").read_text())
    assert diag["warnings"] == [] and diag["scene_points"] == 300 and diag["model_points"] == 300
    assert set(diag["branches"]) == {"BCM-S", "BCM-M"}


def test_estimate_is_byte_identical_on_rerun(fixture_dir, capsys):
    d = fixture_dir
    outputs = []
    for k in range(2):
        args = ["estimate", "--bcm-s", d / "bcm_s.csv", "--bcm-m", d / "bcm_m.csv", "--z", 20,
                "--out", d / f"p{k}.json", "--diagnostics", d / f"d{k}.json"]
        assert run(capsys, *args)[0] == 0
        outputs.append(((d / f"p{k}.json").read_bytes(), (d / f"d{k}.json").read_bytes()))
    assert outputs[0] == outputs[1]


def test_estimate_missing_branch_warns(fixture_dir, capsys):
    d = fixture_dir
    code, _, err = run(capsys, "estimate", "--bcm-s", d / "bcm_s.csv", "--z", 20, "--out", d / "pose.json")
    assert code == 0
    diag = json.loads((d / "pose.diagnostics.json").read_text())
    assert any(w.startswith("BCM-M") for w in diag["warnings"])
    assert "warning: BCM-M" in err


def test_estimate_with_pose_hypotheses_only(tmp_path, capsys):
    T = RigidTransform(np.eye(3), [0.0, 0.1, 0.6])
    dump_poses([T, T], tmp_path / "pr.json")
    code, _, _ = run(capsys, "estimate", "--pr", tmp_path / "pr.json", "--out", tmp_path / "pose.json")
    assert code == 0
    assert np.allclose(load_pose(tmp_path / "pose.json").translation, T.translation)


def test_estimate_truncated_csv_exits_2(fixture_dir, capsys):
    d = fixture_dir
    text = (d / "bcm_s.csv").read_text()
    (d / "bad.csv").write_text(text[: len(text) // 2].rsplit(",", 3)[0] + "\n")
    code, _, err = run(capsys, "estimate", "--bcm-s", d / "bad.csv", "--out", d / "pose.json")
    assert code == 2
    assert "bad.csv:" in err and err.count("\n") == 1


def test_estimate_degenerate_exits_3(tmp_path, capsys):
    pts = np.outer(np.linspace(0, 0.1, 10), [1.0, 0, 0])
    nrm = np.tile([1.0, 0, 0], (10, 1))
    save_correspondences(CorrespondenceSet.from_arrays(pts, nrm, pts, nrm), tmp_path / "line.csv")
    code, _, err = run(capsys, "estimate", "--bcm-s", tmp_path / "line.csv", "--bcm-m", tmp_path / "line.csv",
                       "--z", 5, "--out", tmp_path / "pose.json")
    assert code == 3 and err.startswith("pairpose: error:") and err.count("\n") == 1


def test_estimate_bad_arguments_exit_2(fixture_dir, capsys):
    d = fixture_dir
    assert run(capsys, "estimate", "--bcm-s", d / "bcm_s.csv", "--z", 1, "--out", d / "p.json")[0] == 2
    assert run(capsys, "estimate", "--bcm-s", d / "bcm_s.csv", "--keep", 0, "--out", d / "p.json")[0] == 2
    assert run(capsys, "estimate", "--bcm-s", d / "missing.csv", "--out", d / "p.json")[0] == 2
    assert run(capsys)[0] == 2


def _metric_row(out):
    header, row = out.strip().splitlines()
    return dict(zip(header.split(","), row.split(",")))


def test_metrics_command(fixture_dir, capsys):
    d = fixture_dir
    code, out, _ = run(capsys, "metrics", "--pred", d / "gt.json", "--gt", d / "gt.json", "--model", d / "model.ply")
    assert code == 0
    row = _metric_row(out)
    assert [float(row[k]) for k in ("add_m", "adds_m", "rot_deg", "trans_m")] == [0.0] * 4
    assert row["pass"] == "pass"

    gt = load_pose(d / "gt.json")
    offset = RigidTransform(gt.rotation, gt.translation + [0.003, 0.004, 0.0])
    dump_pose(offset, d / "off.json")
    row = _metric_row(run(capsys, "metrics", "--pred", d / "off.json", "--gt", d / "gt.json",
                          "--model", d / "model.ply", "--threshold", 0.004)[1])
    assert float(row["add_m"]) == pytest.approx(0.005, abs=1e-12)
    assert row["pass"] == "fail" and float(row["threshold_m"]) == 0.004


def test_metrics_match_library(fixture_dir, capsys):
    d = fixture_dir
    rng = np.random.default_rng(3)
    gt = load_pose(d / "gt.json")
    pred = RigidTransform(axis_angle_matrix(rng.normal(size=3), 0.2) @ gt.rotation, gt.translation + 0.01)
    dump_pose(pred, d / "pred.json")
    row = _metric_row(run(capsys, "metrics", "--pred", d / "pred.json", "--gt", d / "gt.json",
                          "--model", d / "model.ply")[1])
    expected = pose_metrics(load_pose(d / "pred.json"), gt, load_model(d / "model.ply").positions)
    for k, v in expected.items():
        assert float(row[k]) == pytest.approx(v, abs=1e-9)


def test_metrics_parse_error(tmp_path, capsys):
    (tmp_path / "p.json").write_text('{"rotation": [1, 2\n')
    code, _, err = run(capsys, "metrics", "--pred", tmp_path / "p.json", "--gt", tmp_path / "p.json",
                       "--model", tmp_path / "p.json")
    assert code == 2 and "p.json:" in err


def test_sweep_smoke_preset(tmp_path, capsys):
    t0 = time.perf_counter()
    code, out, _ = run(capsys, "sweep", "--preset", "smoke", "--out-dir", tmp_path / "a")
    assert code == 0 and time.perf_counter() - t0 < 10
    assert "ADD acc%" in out
    run(capsys, "sweep", "--preset", "smoke", "--out-dir", tmp_path / "b", "--threads", 2)
    for name in ("report.csv", "report.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_sweep_unknown_key_exits_2(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text("N = 100\nwobble = 3\n")
    code, _, err = run(capsys, "sweep", "--config", cfg, "--out-dir", tmp_path)
    assert code == 2 and "unknown config key: wobble" in err
    assert run(capsys, "sweep", "--preset", "nonexistent", "--out-dir", tmp_path)[0] == 2


def test_selftest_and_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "pairpose", "selftest"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert proc.stdout.count("ok ") == 4
