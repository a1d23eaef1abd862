import math

import numpy as np
import pytest
from scipy.optimize import minimize
from scipy.spatial.transform import Rotation

from liegroup import (
    MetricWeights,
    Twist,
    anchor_point_mean,
    frechet_mean,
    geodesic_distance,
    left_jacobian,
    left_jacobian_inverse,
    mad_outlier_mask,
    manifold_variance,
    se3_exp,
    se3_left_jacobian,
    se3_log,
    so3_exp,
    so3_log,
)
from pipeline_utils import PipelineError
from se3core import RigidTransform, compose, from_quaternion, invert, rotation_from_euler, to_quaternion


def _rz(angle, translation=(0.0, 0.0, 0.0)):
    return RigidTransform(rotation_from_euler(0.0, 0.0, angle), translation)


def test_se3_log_examples():
    np.testing.assert_allclose(se3_log(RigidTransform.identity()).as_vector(), np.zeros(6))

    shift = se3_log(RigidTransform.from_translation([3.0, 0.0, 0.0]))
    np.testing.assert_allclose(shift.omega, np.zeros(3))
    np.testing.assert_allclose(shift.nu, [3.0, 0.0, 0.0])

    turn = se3_log(_rz(math.pi / 2))
    np.testing.assert_allclose(turn.omega, [0.0, 0.0, math.pi / 2], atol=1e-12)
    np.testing.assert_allclose(turn.nu, np.zeros(3), atol=1e-12)


def test_se3_exp_examples():
    identity = se3_exp(Twist.zero())
    np.testing.assert_allclose(identity.as_matrix(), np.eye(4))

    half_turn = se3_exp(Twist([0.0, 0.0, math.pi], np.zeros(3)))
    np.testing.assert_allclose(half_turn.rotation, np.diag([-1.0, -1.0, 1.0]), atol=1e-12)

    shift = se3_exp(Twist(np.zeros(3), [1.0, 2.0, 3.0]))
    np.testing.assert_allclose(shift.rotation, np.eye(3))
    np.testing.assert_allclose(shift.translation, [1.0, 2.0, 3.0])


def test_exp_and_quaternion_accept_read_only_arrays():
    twist = Twist([0.1, -0.2, 0.3], [1.0, 2.0, 3.0])
    assert not twist.omega.flags.writeable
    t = se3_exp(twist)
    assert not t.rotation.flags.writeable
    np.testing.assert_allclose(so3_exp(twist.omega), t.rotation)
    back = from_quaternion(to_quaternion(t))
    np.testing.assert_allclose(back.as_matrix(), t.as_matrix(), atol=1e-12)


def test_exp_log_inverse_on_random_twists():
    rng = np.random.default_rng(7)
    for _ in range(200):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        twist = Twist(axis * rng.uniform(0.0, math.pi - 1e-2), rng.uniform(-30.0, 30.0, size=3))
        recovered = se3_log(se3_exp(twist))
        np.testing.assert_allclose(recovered.as_vector(), twist.as_vector(), atol=1e-8)


@pytest.mark.parametrize("theta", [0.0, 1e-9, 1e-5, 0.3, math.pi - 1e-4, math.pi])
def test_so3_log_branches(theta):
    axis = np.array([1.0, -2.0, 0.5]) / np.linalg.norm([1.0, -2.0, 0.5])
    rotation = so3_exp(axis * theta)
    omega = so3_log(rotation)
    np.testing.assert_allclose(so3_exp(omega), rotation, atol=1e-9)
    assert np.linalg.norm(omega) == pytest.approx(theta, abs=1e-9)


def test_left_jacobian_inverse_matches_inverse():
    for omega in ([0.0, 0.0, 0.0], [1e-6, 0.0, 2e-6], [0.3, -0.2, 0.9], [2.0, 1.0, -0.5]):
        np.testing.assert_allclose(left_jacobian(omega) @ left_jacobian_inverse(omega), np.eye(3), atol=1e-10)


def test_full_left_jacobian_linearizes_composition():
    x = Twist([0.2, -0.1, 0.4], [3.0, -1.0, 2.0])
    delta = 1e-7 * np.array([1.0, -2.0, 1.5, 3.0, 1.0, -2.0])
    moved = se3_log(compose(se3_exp(Twist.from_vector(delta)), se3_exp(x))).as_vector()
    predicted = x.as_vector() + np.linalg.solve(se3_left_jacobian(x), delta)
    np.testing.assert_allclose(moved, predicted, atol=1e-11)


def test_geodesic_distance_examples():
    t = _rz(0.7, (1.0, 2.0, 3.0))
    assert geodesic_distance(t, t) == 0.0
    assert geodesic_distance(RigidTransform.identity(), _rz(math.pi / 2), 1.0, 1.0) == pytest.approx(math.pi / 2, abs=1e-9)
    shift = RigidTransform.from_translation([3.0, 4.0, 0.0])
    assert geodesic_distance(RigidTransform.identity(), shift, 1.0, 1.0) == pytest.approx(5.0, abs=1e-9)


def test_geodesic_distance_is_left_invariant_and_symmetric(random_transforms):
    poses = random_transforms(30, seed=4, max_translation=10.0)
    for g, x, y in zip(poses[:10], poses[10:20], poses[20:]):
        d = geodesic_distance(x, y)
        assert geodesic_distance(compose(g, x), compose(g, y)) == pytest.approx(d, abs=1e-9)
        assert geodesic_distance(y, x) == pytest.approx(d, abs=1e-9)


def test_geodesic_distance_weights_from_environment(monkeypatch):
    shift = RigidTransform.from_translation([3.0, 4.0, 0.0])
    monkeypatch.setenv("SVR_POSE_W_TRANS", "4.0")
    assert MetricWeights.from_env().w_trans == 4.0
    assert geodesic_distance(RigidTransform.identity(), shift) == pytest.approx(10.0)
    assert geodesic_distance(RigidTransform.identity(), shift, w_trans=1.0) == pytest.approx(5.0)


def test_non_positive_weights_are_rejected():
    with pytest.raises(PipelineError) as err:
        geodesic_distance(RigidTransform.identity(), RigidTransform.identity(), w_rot=0.0, w_trans=1.0)
    assert err.value.code == "invalid_config"


def test_frechet_mean_of_single_and_repeated_samples():
    t = _rz(0.4, (5.0, -1.0, 2.0))
    single = frechet_mean([t])
    assert single.converged
    assert single.variance == 0.0
    np.testing.assert_array_equal(single.mean.as_matrix(), t.as_matrix())

    repeated = frechet_mean([t, t, t])
    np.testing.assert_array_equal(repeated.mean.as_matrix(), t.as_matrix())
    assert repeated.iterations == 1


def test_frechet_mean_of_symmetric_rotations():
    theta = math.radians(30.0)
    stats = frechet_mean([_rz(theta), _rz(-theta)], w_rot=1.0, w_trans=1.0)
    assert stats.converged
    assert geodesic_distance(stats.mean, RigidTransform.identity(), 1.0, 1.0) < 1e-9
    assert stats.variance == pytest.approx(theta * theta, abs=1e-12)


def test_frechet_mean_of_symmetric_perturbations_recovers_the_pose():
    base = RigidTransform(rotation_from_euler(0.3, -0.6, 1.2), [10.0, -4.0, 7.0])
    # rotation and translation parts are parallel, so each pair cancels exactly
    deltas = [
        Twist([0.05, 0.0, 0.0], [0.0, 0.0, 0.0]),
        Twist([0.0, 0.0, 0.0], [0.1, 0.2, -0.3]),
        Twist([0.0, 0.03, 0.04], [0.0, 0.3, 0.4]),
    ]
    samples = []
    for delta in deltas:
        samples.append(compose(base, se3_exp(delta)))
        samples.append(compose(base, se3_exp(Twist(-delta.omega, -delta.nu))))
    stats = frechet_mean(samples)
    assert geodesic_distance(stats.mean, base) < 1e-6


def _sum_squared(mean, samples):
    return sum(geodesic_distance(mean, x) ** 2 for x in samples)


def _small_twist_samples(rng, base, count, radius):
    samples = []
    for _ in range(count):
        vector = rng.normal(size=6)
        vector *= rng.uniform(0.0, radius) / np.linalg.norm(vector)
        samples.append(compose(base, se3_exp(Twist.from_vector(vector))))
    return samples


def _mean_residual(mean, samples):
    mean_inv = invert(mean)
    return np.mean([se3_log(compose(mean_inv, x)).as_vector() for x in samples], axis=0)


@pytest.mark.parametrize("seed", [0, 1])
def test_gauss_newton_mean_matches_direct_minimizer(seed):
    rng = np.random.default_rng(seed)
    base = RigidTransform(Rotation.from_quat(rng.normal(size=4)).as_matrix(), rng.uniform(-20, 20, size=3))
    samples = _small_twist_samples(rng, base, 20, 0.1)

    stats = frechet_mean(samples, method="gauss_newton")
    assert stats.converged

    def objective(params):
        return _sum_squared(compose(stats.mean, se3_exp(Twist.from_vector(params))), samples)

    result = minimize(
        objective, np.full(6, 0.02), method="Nelder-Mead",
        options={"xatol": 1e-10, "fatol": 1e-16, "maxiter": 8000, "maxfev": 8000},
    )
    direct = compose(stats.mean, se3_exp(Twist.from_vector(result.x)))
    assert geodesic_distance(stats.mean, direct) < 1e-4
    assert _sum_squared(stats.mean, samples) <= result.fun + 1e-12

    # stationarity: central differences of the objective vanish at the mean
    h = 1e-5
    for k in range(6):
        step = np.zeros(6)
        step[k] = h
        slope = (objective(step) - objective(-step)) / (2.0 * h)
        assert abs(slope) < 1e-6


@pytest.mark.parametrize("seed", [2, 3])
def test_fixed_point_mean_zeroes_the_average_residual(seed):
    rng = np.random.default_rng(seed)
    base = RigidTransform(Rotation.from_quat(rng.normal(size=4)).as_matrix(), rng.uniform(-20, 20, size=3))
    samples = _small_twist_samples(rng, base, 50, 0.05)

    stats = frechet_mean(samples, tol=1e-10)
    assert stats.converged
    assert np.linalg.norm(_mean_residual(stats.mean, samples)) < 1e-10

    exact = frechet_mean(samples, method="gauss_newton").mean
    assert geodesic_distance(stats.mean, exact) < 1e-4

    def objective(params):
        return _sum_squared(compose(stats.mean, se3_exp(Twist.from_vector(params))), samples)

    result = minimize(
        objective, np.full(6, 0.02), method="Nelder-Mead",
        options={"xatol": 1e-10, "fatol": 1e-16, "maxiter": 8000, "maxfev": 8000},
    )
    direct = compose(stats.mean, se3_exp(Twist.from_vector(result.x)))
    assert geodesic_distance(stats.mean, direct) < 1e-4


def test_unknown_mean_method_is_rejected():
    with pytest.raises(PipelineError) as err:
        frechet_mean([_rz(0.1)], method="karcher")
    assert err.value.code == "invalid_config"


def test_frechet_mean_on_pure_rotations_matches_rotation_vector_search():
    rng = np.random.default_rng(9)
    base = Rotation.from_euler("xyz", [0.4, 0.1, -0.8])
    samples = [
        RigidTransform((base * Rotation.from_rotvec(rng.normal(scale=0.08, size=3))).as_matrix(), np.zeros(3))
        for _ in range(12)
    ]
    stats = frechet_mean(samples)

    def rotation_at(params):
        return RigidTransform(stats.mean.rotation @ so3_exp(params), np.zeros(3))

    result = minimize(
        lambda params: _sum_squared(rotation_at(params), samples), np.full(3, 0.02), method="Nelder-Mead",
        options={"xatol": 1e-12, "fatol": 1e-16, "maxiter": 6000, "maxfev": 6000},
    )
    assert geodesic_distance(stats.mean, rotation_at(result.x)) < 1e-5
    assert _sum_squared(stats.mean, samples) <= result.fun + 1e-12


def test_frechet_mean_reports_injectivity_failure():
    stats = frechet_mean([_rz(0.0), _rz(math.pi)])
    assert not stats.converged
    assert stats.status == "injectivity"
    assert math.isnan(stats.variance)


def test_frechet_mean_reports_iteration_limit():
    samples = [_rz(0.0, (0, 0, 0)), _rz(1.0, (5, 0, 0)), _rz(-0.5, (0, 3, 0))]
    stats = frechet_mean(samples, tol=0.0, max_iter=2)
    assert not stats.converged
    assert stats.status == "max_iter"
    assert stats.iterations == 2


def test_frechet_mean_of_empty_sample_fails():
    with pytest.raises(PipelineError) as err:
        frechet_mean([])
    assert err.value.code == "empty_input"


def test_manifold_variance_and_anchor_mean():
    theta = math.radians(10.0)
    samples = [_rz(theta), _rz(-theta)]
    assert manifold_variance(RigidTransform.identity(), samples, 1.0, 1.0) == pytest.approx(theta * theta)
    mean = anchor_point_mean(samples, 32.0)
    assert geodesic_distance(mean, RigidTransform.identity()) < 1e-9


def test_left_invariant_mean_commutes_with_group_action():
    rng = np.random.default_rng(12)
    g = RigidTransform(rotation_from_euler(1.0, 0.2, -0.3), [4.0, 5.0, -6.0])
    samples = [se3_exp(Twist.from_vector(rng.normal(scale=0.1, size=6))) for _ in range(8)]
    moved = frechet_mean([compose(g, x) for x in samples]).mean
    expected = compose(g, frechet_mean(samples).mean)
    assert geodesic_distance(moved, expected) < 1e-8
    assert geodesic_distance(compose(invert(g), moved), frechet_mean(samples).mean) < 1e-8


@pytest.mark.parametrize(
    "values, flagged",
    [
        ([1, 1, 1, 1, 100], [4]),
        ([5, 5, 5, 5, 5], []),
        ([10, 12, 11, 9, 10, 11, 50], [6]),
    ],
)
def test_mad_outlier_mask_examples(values, flagged):
    mask = mad_outlier_mask(values, k=1.4826, cutoff=3.0)
    assert list(np.flatnonzero(mask)) == flagged


def test_mad_outlier_mask_of_empty_input_fails():
    with pytest.raises(PipelineError):
        mad_outlier_mask([])
