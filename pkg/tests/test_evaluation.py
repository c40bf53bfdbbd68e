import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from conftest import unit_rows
from pcloop import evaluation as ev
from pcloop.errors import InsufficientAssociations, MissingLabel
from pcloop.geometry import PointCloud, RigidTransform, apply, compose, invert
from pcloop.loopclosure import ACCEPTED, NOT_SELECTED, REJECTED_OVERLAP, ScoredPair
from pcloop.records import Trajectory
from pcloop.registration import RansacConfig
from pcloop.synthetic import SceneSpec, crop_half_space, gen_scene, random_transform

seeds = st.integers(0, 2**32 - 1)


# -------------------------------------------------------------------- gt overlap


def test_gt_overlap_identical():
    P = np.random.default_rng(0).uniform(size=(200, 3))
    assert ev.gt_overlap(P, P, RigidTransform.identity(), 0.05) == 1.0


def test_gt_overlap_far_apart():
    P = np.random.default_rng(0).uniform(size=(200, 3))
    assert ev.gt_overlap(P, P + [100.0, 0, 0], RigidTransform.identity(), 1.0) == 0.0


def test_gt_overlap_empty():
    assert ev.gt_overlap(np.zeros((0, 3)), np.zeros((3, 3)), RigidTransform.identity()) == 0.0


def test_gt_overlap_half_crop_is_asymmetric():
    cloud = gen_scene(SceneSpec(seed=2))
    keep = crop_half_space(cloud, 0.5)
    half = cloud.points[keep]
    I = RigidTransform.identity()
    assert ev.gt_overlap(half, cloud, I, 0.05) == 1.0
    assert ev.gt_overlap(cloud, half, I, 0.05) == pytest.approx(0.5, abs=0.05)


@given(seeds)
def test_gt_overlap_under_generating_transform(seed):
    rng = np.random.default_rng(seed)
    A = rng.uniform(-3, 3, size=(100, 3))
    T = random_transform(rng, np.pi, 10.0)
    assert ev.gt_overlap(A, apply(invert(T), A), T, 1e-6) == 1.0


def test_labels_round_trip():
    labels = [ev.GtLabel(5, 1, 0.25), ev.GtLabel(7, 2, 1 / 3)]
    assert ev.parse_labels(ev.format_labels(labels)) == labels
    assert [l.is_loop for l in labels] == [False, True]
    assert not ev.GtLabel(0, 0, 0.3).is_loop
    with pytest.raises(ValueError):
        ev.parse_labels("query_id,candidate_id,gt_overlap\n1,x,0.5\n")


# ---------------------------------------------------------------------- PR curve


def rows_and_labels(scores, truth):
    rows = [ScoredPair(k, 0, s, None, ACCEPTED) for k, s in enumerate(scores)]
    labels = [ev.GtLabel(k, 0, 0.9 if t else 0.0) for k, t in enumerate(truth)]
    return rows, labels


def test_pr_endpoints():
    rows, labels = rows_and_labels([0.1, 0.4, 0.35, 0.8], [False, True, False, True])
    curve = ev.pr_curve(rows, labels)
    th, p, r = zip(*curve.points)
    assert list(th) == sorted(th)
    assert r[0] == 1.0 and p[0] == 0.5
    assert r[-1] == 0.0 and p[-1] == 1.0
    assert 0.0 <= curve.auc <= 1.0


def test_pr_constant_scorer():
    rows, labels = rows_and_labels([0.5] * 4, [True, False, False, False])
    curve = ev.pr_curve(rows, labels)
    assert [(p, r) for _, p, r in curve.points] == [(0.25, 1.0), (1.0, 0.0)]
    assert curve.auc == pytest.approx((0.25 + 1.0) / 2)


@settings(max_examples=100, deadline=None)
@given(seeds, st.integers(2, 40))
def test_pr_recall_monotone(seed, n):
    rng = np.random.default_rng(seed)
    truth = rng.uniform(size=n) < 0.5
    truth[0] = True
    rows, labels = rows_and_labels(rng.uniform(size=n).round(2), truth)
    curve = ev.pr_curve(rows, labels)
    rec = [r for _, _, r in curve.points]
    assert all(a >= b for a, b in zip(rec, rec[1:]))
    assert all(0.0 <= p <= 1.0 for _, p, _ in curve.points)
    assert 0.0 <= curve.auc <= 1.0


def test_pr_errors():
    rows, labels = rows_and_labels([0.2, 0.3], [True, False])
    with pytest.raises(MissingLabel):
        ev.pr_curve(rows, labels[:1])
    with pytest.raises(ValueError):
        ev.pr_curve(rows, [ev.GtLabel(l.query_id, 0, 0.0) for l in labels])
    with pytest.raises(ValueError):
        ev.pr_curve([], labels)
    with pytest.raises(ValueError):
        ev.pr_curve(rows, labels, score="foo")


def test_pr_uses_the_verified_candidate():
    rows = [
        ScoredPair(9, 1, 0.2, None, NOT_SELECTED),
        ScoredPair(9, 2, 0.6, 0.7, ACCEPTED),
        ScoredPair(9, 3, 0.1, None, NOT_SELECTED),
        ScoredPair(8, 4, 0.05, None, REJECTED_OVERLAP),
    ]
    best = ev.select_best(rows)
    assert [(b.query_id, b.candidate_id) for b in best] == [(8, 4), (9, 2)]
    labels = [ev.GtLabel(9, 2, 0.8), ev.GtLabel(8, 4, 0.0)]
    assert ev.pr_curve(rows, labels).auc == 1.0
    assert ev.pr_curve(rows, labels, score="ron").auc == 1.0


def test_format_pr():
    rows, labels = rows_and_labels([0.1, 0.9], [False, True])
    text = ev.format_pr(ev.pr_curve(rows, labels))
    lines = text.splitlines()
    assert lines[0] == "threshold,precision,recall"
    assert lines[-1] == "auc=1.0"
    assert len(lines) == 5


# ------------------------------------------------------------ registration recall


def test_registration_recall_self_pairs():
    rng = np.random.default_rng(1)
    pairs = []
    for _ in range(3):
        P = PointCloud(rng.uniform(-1, 1, size=(60, 3)))
        D = unit_rows(rng, 60, 16)
        pairs.append(ev.RegistrationPair(P, D, P, D, RigidTransform.identity()))
    assert ev.registration_recall(pairs) == 1.0


def test_registration_recall_moved_copy():
    rng = np.random.default_rng(2)
    P = rng.uniform(-1, 1, size=(80, 3))
    T = random_transform(rng, np.pi, 2.0)
    D = unit_rows(rng, 80, 16)
    pr = ev.RegistrationPair(PointCloud(P), D, PointCloud(apply(invert(T), P)), D, T)
    assert ev.registration_recall([pr]) == 1.0


def test_registration_recall_random_descriptors():
    rng = np.random.default_rng(3)
    pairs = []
    for _ in range(10):
        P = rng.uniform(-1, 1, size=(60, 3))
        T = random_transform(rng, np.pi, 2.0)
        pairs.append(ev.RegistrationPair(PointCloud(P), unit_rows(rng, 60, 16), PointCloud(apply(invert(T), P)), unit_rows(rng, 60, 16), T))
    assert ev.registration_recall(pairs, rcfg=RansacConfig(max_iterations=20000)) <= 0.1


def test_registration_recall_errors():
    with pytest.raises(ValueError):
        ev.registration_recall([])


def test_ground_truth_pairs():
    P = np.random.default_rng(4).uniform(size=(30, 3))
    T = random_transform(np.random.default_rng(4))
    gt = ev.ground_truth_pairs(P, apply(invert(T), P), T, 1e-6)
    assert np.array_equal(gt, np.column_stack([np.arange(30), np.arange(30)]))


# --------------------------------------------------------------------------- ATE


def rand_traj(rng, n, dt=0.1):
    poses = [RigidTransform(Rotation.random(random_state=rng).as_matrix(), rng.normal(scale=5, size=3)) for _ in range(n)]
    return Trajectory(np.arange(n) * dt, poses)


def test_ate_of_ground_truth_is_zero():
    gt = rand_traj(np.random.default_rng(0), 20)
    rmse, S = ev.ate_rmse(gt, gt)
    assert rmse < 1e-12
    assert np.abs(S.as_matrix() - np.eye(4)).max() < 1e-9


@given(seeds)
def test_ate_invariant_to_rigid_offset(seed):
    rng = np.random.default_rng(seed)
    gt = rand_traj(rng, 10)
    W = random_transform(rng, np.pi, 50.0)
    est = Trajectory(gt.timestamps, [compose(W, p) for p in gt.poses])
    rmse, S = ev.ate_rmse(est, gt)
    assert rmse < 1e-8
    assert np.abs(compose(S, W).as_matrix() - np.eye(4)).max() < 1e-8


def test_ate_translation_offset():
    rng = np.random.default_rng(5)
    gt = rand_traj(rng, 12)
    est = Trajectory(gt.timestamps, [compose(p, RigidTransform.from_translation([0.1, 0, 0])) for p in gt.poses])
    rmse, _ = ev.ate_rmse(est, gt)
    assert rmse <= 0.1 + 1e-9


def test_ate_insufficient_associations():
    gt = rand_traj(np.random.default_rng(6), 5)
    est = Trajectory(gt.timestamps[:2], gt.poses[:2])
    with pytest.raises(InsufficientAssociations):
        ev.ate_rmse(est, gt)
    shifted = Trajectory(gt.timestamps + 1.0, gt.poses)
    with pytest.raises(InsufficientAssociations):
        ev.ate_rmse(Trajectory(gt.timestamps + 100.0, gt.poses), gt)
    assert ev.ate_rmse(shifted, gt, max_dt=1.0)[0] >= 0.0


def test_associate():
    est = np.array([0.0, 0.1, 0.203, 0.5])
    gt = np.array([0.01, 0.11, 0.2, 0.21, 0.9])
    assert ev.associate(est, gt, 0.02) == [(0, 0), (1, 1), (2, 2)]
    assert ev.associate(est, gt, 1e-6) == []


def test_format_ate():
    text = ev.format_ate(0.25, RigidTransform.identity())
    first, second = text.splitlines()
    assert first == "rmse_m=0.25"
    assert len(second.split()) == 16
