import math

import numpy as np
import pytest

from app.core.exceptions import EmptyInputError, ShapeError
from app.schema.planner_schema import EpisodeResult
from app.schema.world_schema import Pose
from app.services.planner_service import sr_spl
from app.utils.metrics import ate, rpe, spl_term
from app.utils.se2 import compose, fold, inverse, relative, wrap_angle


def _random_path(rng, n):
    return np.column_stack([rng.normal(size=(n, 2)) * 3, rng.uniform(-np.pi, np.pi, size=n)])


def _matrix(pose):
    x, y, th = pose
    return np.array([[math.cos(th), -math.sin(th), x], [math.sin(th), math.cos(th), y], [0.0, 0.0, 1.0]])


def _from_matrix(mat):
    return np.array([mat[0, 2], mat[1, 2], math.atan2(mat[1, 0], mat[0, 0])])


def test_wrap_angle_range_and_idempotence(rng):
    theta = rng.uniform(-50, 50, size=1000)
    wrapped = wrap_angle(theta)
    assert np.all(wrapped > -np.pi) and np.all(wrapped <= np.pi)
    np.testing.assert_array_equal(wrap_angle(wrapped), wrapped)
    assert wrap_angle(-np.pi) == pytest.approx(np.pi)


def test_compose_matches_homogeneous_matrices(rng):
    for _ in range(100):
        a, b = _random_path(rng, 2)
        expected = _from_matrix(_matrix(a) @ _matrix(b))
        np.testing.assert_allclose(compose(a, b), expected, atol=1e-12)


def test_inverse_and_relative_round_trip(rng):
    poses = _random_path(rng, 50)
    identity = compose(poses, inverse(poses))
    np.testing.assert_allclose(identity, np.zeros_like(poses), atol=1e-12)
    rel = relative(poses[:-1], poses[1:])
    np.testing.assert_allclose(compose(poses[:-1], rel), poses[1:], atol=1e-12)


def test_fold_chains_deltas():
    path = fold([0.0, 0.0, 0.0], [[1.0, 0.0, np.pi / 2], [1.0, 0.0, 0.0]])
    np.testing.assert_allclose(path[-1], [1.0, 1.0, np.pi / 2], atol=1e-12)
    assert path.shape == (3, 3)


def test_ate_identical_and_constant_offset(rng):
    gt = _random_path(rng, 20)
    assert ate(gt, gt) == 0.0
    shifted = gt + np.array([1.0, 0.0, 0.0])
    assert ate(shifted, gt) == pytest.approx(1.0, abs=1e-12)


def test_ate_accepts_pose_models():
    est = [Pose(x=0.0, y=0.0), Pose(x=1.0, y=1.0)]
    gt = [Pose(x=0.0, y=1.0), Pose(x=1.0, y=0.0)]
    assert ate(est, gt) == pytest.approx(1.0)


def test_ate_matches_scalar_loop(rng):
    for _ in range(100):
        n = int(rng.integers(1, 30))
        est, gt = _random_path(rng, n), _random_path(rng, n)
        total = 0.0
        for e, g in zip(est, gt):
            total += (e[0] - g[0]) ** 2 + (e[1] - g[1]) ** 2
        assert abs(ate(est, gt) - math.sqrt(total / n)) <= 1e-10


def test_rpe_matches_matrix_oracle(rng):
    for _ in range(100):
        n = int(rng.integers(2, 30))
        est, gt = _random_path(rng, n), _random_path(rng, n)
        total = 0.0
        for i in range(n - 1):
            gt_step = np.linalg.inv(_matrix(gt[i])) @ _matrix(gt[i + 1])
            est_step = np.linalg.inv(_matrix(est[i])) @ _matrix(est[i + 1])
            err = np.linalg.inv(gt_step) @ est_step
            total += err[0, 2] ** 2 + err[1, 2] ** 2
        assert abs(rpe(est, gt) - math.sqrt(total / (n - 1))) <= 1e-10


def test_rpe_invariant_to_rigid_translation(rng):
    gt = _random_path(rng, 15)
    moved = gt + np.array([4.0, -2.0, 0.0])
    assert rpe(moved, gt) == pytest.approx(0.0, abs=1e-12)


def test_metric_errors():
    with pytest.raises(ShapeError):
        ate(np.zeros((3, 3)), np.zeros((4, 3)))
    with pytest.raises(EmptyInputError):
        ate(np.zeros((0, 3)), np.zeros((0, 3)))
    with pytest.raises(EmptyInputError):
        rpe(np.zeros((1, 3)), np.zeros((1, 3)))


def test_spl_term():
    assert spl_term(True, 5.0, 10.0) == 0.5
    assert spl_term(True, 5.0, 5.0) == 1.0
    assert spl_term(False, 5.0, 5.0) == 0.0
    assert spl_term(True, 0.0, 0.0) == 1.0


def _result(success, shortest, path):
    return EpisodeResult(
        success=success,
        path_length=path,
        shortest_length=shortest,
        final_distance=0.5 if success else 3.0,
        steps=1,
        stop_reason="reached" if success else "max_steps",
    )


def test_sr_spl_examples():
    report = sr_spl([_result(True, 4.0, 4.0), _result(True, 4.0, 4.0)])
    assert report.sr == report.spl == 1.0
    report = sr_spl([_result(True, 3.0, 6.0)])
    assert report.spl == 0.5
    report = sr_spl([_result(False, 3.0, 1.0), _result(False, 2.0, 9.0)])
    assert report.sr == report.spl == 0.0
    with pytest.raises(EmptyInputError):
        sr_spl([])


def test_spl_never_exceeds_sr(rng):
    for _ in range(100):
        n = int(rng.integers(1, 12))
        results = [
            _result(bool(rng.random() < 0.6), float(rng.uniform(0, 10)), float(rng.uniform(0, 20)))
            for _ in range(n)
        ]
        report = sr_spl(results)
        assert 0.0 <= report.spl <= report.sr <= 1.0
