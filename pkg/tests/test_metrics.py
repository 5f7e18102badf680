import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_pose
from pairpose.cloud import OrientedCloud, diameter, sample_surface
from pairpose.errors import EmptyInput, EmptyModel, InputError, LengthMismatch
from pairpose.geom3d import RigidTransform, axis_angle_matrix, matrix_from_quat
from pairpose.metrics import (
    MetricConfig,
    accuracy_at,
    add,
    adds,
    auc,
    bcm_loss,
    pose_metrics,
    rotation_error_deg,
    translation_error,
)
from pairpose.simbench import cylinder_mesh


def _loop_add(pred, gt, x):
    total = 0.0
    for p in x:
        a = gt.rotation @ p + gt.translation
        b = pred.rotation @ p + pred.translation
        total += math.dist(a, b)
    return total / len(x)


def _loop_adds(pred, gt, x):
    total = 0.0
    for p in x:
        a = gt.rotation @ p + gt.translation
        total += min(math.dist(a, pred.rotation @ q + pred.translation) for q in x)
    return total / len(x)


def test_add_examples_and_oracle():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(50, 3)) * 0.05
    T = random_pose(rng)
    assert add(T, T, x) == 0.0
    d = np.array([0.01, -0.02, 0.005])
    assert add(RigidTransform(T.rotation, T.translation + d), T, x) == pytest.approx(np.linalg.norm(d), abs=1e-15)
    for _ in range(10):
        P, G = random_pose(rng), random_pose(rng)
        assert add(P, G, x) == pytest.approx(_loop_add(P, G, x), abs=1e-12)
    with pytest.raises(EmptyModel):
        add(T, T, np.zeros((0, 3)))


def test_adds_examples_and_oracle():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(200, 3)) * 0.05
    T = random_pose(rng)
    assert adds(T, T, x) == 0.0
    for _ in range(5):
        P = RigidTransform(axis_angle_matrix(rng.normal(size=3), rng.uniform(0, 0.5)) @ T.rotation,
                           T.translation + rng.normal(size=3) * 0.01)
        assert adds(P, T, x) == pytest.approx(_loop_adds(P, T, x), abs=1e-12)
        assert adds(P, T, x) <= add(P, T, x) + 1e-12
    with pytest.raises(EmptyModel):
        adds(T, T, [])


def test_adds_forgives_rotation_about_symmetry_axis():
    mesh = cylinder_mesh()
    # dense enough that the nearest sample after a spin is closer than 2% of the diameter
    x = sample_surface(mesh, 4000, seed=0).positions
    d = diameter(x)
    gt = RigidTransform(np.eye(3), [0, 0, 0.7])
    for angle in (0.3, 1.0, 2.5):
        pred = RigidTransform(axis_angle_matrix([0, 0, 1], angle), gt.translation)
        assert adds(pred, gt, x) <= 0.02 * d
        assert add(pred, gt, x) >= 0.05 * d


def test_accuracy_at():
    assert accuracy_at([0.0, 0.0, 0.0], 0.001) == 1.0
    assert accuracy_at([0.01, 0.03], 0.02) == 0.5
    assert accuracy_at([0.02], 0.02) == 0.0
    rng = np.random.default_rng(2)
    assert accuracy_at(rng.uniform(0, 0.1, 1000), 0.02) == pytest.approx(0.2, abs=0.04)
    with pytest.raises(EmptyInput):
        accuracy_at([], 0.1)
    with pytest.raises(InputError):
        accuracy_at([0.1], 0.0)


def test_auc_examples():
    assert auc(np.zeros(17)) == 100.0
    assert auc([0.11, 0.5, 3.0]) == 0.0
    assert auc([0.05]) == pytest.approx(50.0, abs=0.1)
    with pytest.raises(EmptyInput):
        auc([])


def test_auc_matches_closed_form_for_uniform_errors():
    # accuracy(t) = t / 0.2 on [0, 0.1] for errors uniform on [0, 0.2] -> AUC 25
    e = (np.arange(20000) + 0.5) / 20000 * 0.2
    assert auc(e) == pytest.approx(25.0, abs=0.1)


def test_metric_config_validation():
    cfg = MetricConfig()
    assert (cfg.auc_max_threshold, cfg.auc_steps, cfg.lam) == (0.10, 1000, 0.05)
    assert cfg.threshold_for(0.2) == pytest.approx(0.02)
    assert MetricConfig(accuracy_threshold=0.02, accuracy_relative=False).threshold_for(5.0) == 0.02
    for bad in ({"auc_max_threshold": 0}, {"auc_steps": 1}, {"lam": 0}, {"accuracy_threshold": -1}):
        with pytest.raises(InputError):
            MetricConfig(**bad)


def _cloud(rng, n):
    nrm = rng.normal(size=(n, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    return OrientedCloud(rng.normal(size=(n, 3)), nrm)


def test_bcm_loss():
    rng = np.random.default_rng(3)
    c = _cloud(rng, 40)
    assert bcm_loss(c, c) == 0.0
    axes = np.eye(3)[rng.integers(0, 3, 40)]
    a = OrientedCloud(c.positions, axes)
    b = OrientedCloud(c.positions, -axes)
    assert bcm_loss(a, b, 0.05) == pytest.approx(0.1, abs=1e-15)
    for _ in range(5):
        g, t = _cloud(rng, 30), _cloud(rng, 30)
        loop = sum(math.dist(p, q) + 0.05 * math.dist(m, n)
                   for p, q, m, n in zip(g.positions, t.positions, g.normals, t.normals)) / 30
        assert bcm_loss(g, t, 0.05) == pytest.approx(loop, abs=1e-12)
    with pytest.raises(LengthMismatch):
        bcm_loss(_cloud(rng, 3), _cloud(rng, 4))


def test_pose_metrics_row():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(100, 3)) * 0.05
    P, G = random_pose(rng), random_pose(rng)
    row = pose_metrics(P, G, x)
    assert set(row) == {"add_m", "adds_m", "rot_deg", "trans_m"}
    assert row["rot_deg"] == rotation_error_deg(P, G)
    assert row["trans_m"] == translation_error(P, G)


quats = st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda q: sum(v * v for v in q) > 1e-3)
vecs = st.lists(st.floats(-0.1, 0.1), min_size=3, max_size=3)


@settings(max_examples=60, deadline=None)
@given(quats, vecs, quats, vecs, st.integers(0, 2**32 - 1))
def test_metric_invariants(q1, t1, q2, t2, seed):
    P = RigidTransform(matrix_from_quat(q1), t1)
    G = RigidTransform(matrix_from_quat(q2), t2)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(60, 3)) * 0.05
    assert adds(P, G, x) <= add(P, G, x) + 1e-12
    assert add(P, G, x) == pytest.approx(add(G, P, x), abs=1e-12)
    perm = rng.permutation(60)
    assert add(P, G, x[perm]) == pytest.approx(add(P, G, x), abs=1e-12)
    assert adds(P, G, x[perm]) == pytest.approx(adds(P, G, x), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 0.2), min_size=1, max_size=50), st.integers(0, 2**32 - 1))
def test_auc_and_accuracy_monotone(errors, seed):
    rng = np.random.default_rng(seed)
    e = np.array(errors)
    smaller = e * rng.uniform(0, 1, len(e))
    assert auc(smaller) >= auc(e)
    assert auc(rng.permutation(e)) == auc(e)
    ts = np.sort(rng.uniform(1e-4, 0.2, 5))
    accs = [accuracy_at(e, t) for t in ts]
    assert all(a <= b for a, b in zip(accs, accs[1:]))
    assert 0.0 <= auc(e) <= 100.0
