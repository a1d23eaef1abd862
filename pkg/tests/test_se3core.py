import math

import numpy as np
import pytest

from pipeline_utils import PipelineError
from se3core import (
    AnchorPoints,
    EulerCartesian,
    QuaternionCartesian,
    RigidTransform,
    anchor_points_from_transform,
    canonical_quaternion,
    compose,
    from_euler,
    from_quaternion,
    invert,
    normalize_angle,
    rotation_between_vectors,
    rotation_from_euler,
    to_euler,
    to_quaternion,
    transform_from_anchor_points,
)

RZ90 = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


def _rx(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _ry(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def _rz(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def test_rotation_from_euler_examples():
    np.testing.assert_allclose(rotation_from_euler(0.0, 0.0, 0.0), np.eye(3), atol=1e-15)
    np.testing.assert_allclose(rotation_from_euler(0.0, 0.0, math.pi / 2), RZ90, atol=1e-12)
    angles = (math.pi / 6, -math.pi / 4, math.pi / 3)
    expected = _rz(angles[2]) @ _ry(angles[1]) @ _rx(angles[0])
    np.testing.assert_allclose(rotation_from_euler(*angles), expected, atol=1e-12)


def test_rotation_between_vectors_examples():
    np.testing.assert_allclose(rotation_between_vectors([0, 0, 1], [0, 0, 1]), np.eye(3), atol=1e-12)
    quarter = rotation_between_vectors([0, 0, 1], [1, 0, 0])
    np.testing.assert_allclose(quarter, np.column_stack([[0, 0, -1], [0, 1, 0], [1, 0, 0]]), atol=1e-12)


def test_rotation_between_antiparallel_vectors_is_proper():
    flip = rotation_between_vectors([0, 0, 1], [0, 0, -1])
    np.testing.assert_allclose(flip @ np.array([0.0, 0.0, 1.0]), [0.0, 0.0, -1.0], atol=1e-12)
    np.testing.assert_allclose(flip.T @ flip, np.eye(3), atol=1e-12)
    assert np.linalg.det(flip) == pytest.approx(1.0)


def test_rotation_between_random_vectors_maps_direction():
    rng = np.random.default_rng(3)
    for _ in range(50):
        a, b = rng.normal(size=3), rng.normal(size=3)
        rotation = rotation_between_vectors(a, b)
        np.testing.assert_allclose(rotation @ (a / np.linalg.norm(a)), b / np.linalg.norm(b), atol=1e-12)


def test_rotation_between_zero_vector_fails():
    with pytest.raises(PipelineError) as err:
        rotation_between_vectors([0, 0, 0], [1, 0, 0])
    assert err.value.code == "degenerate_input"


def test_anchor_points_examples():
    anchors = anchor_points_from_transform(RigidTransform.identity(), 120.0)
    np.testing.assert_allclose(anchors.as_array(), [[-120, -120, 0], [0, 0, 0], [120, -120, 0]])

    shifted = anchor_points_from_transform(RigidTransform.from_translation([0, 0, 40]), 120.0)
    np.testing.assert_allclose(shifted.as_array(), [[-120, -120, 40], [0, 0, 40], [120, -120, 40]])

    turned = anchor_points_from_transform(RigidTransform(RZ90, np.zeros(3)), 1.0)
    np.testing.assert_allclose(turned.as_array(), [[1, -1, 0], [0, 0, 0], [1, 1, 0]], atol=1e-12)


def test_transform_from_anchor_points_examples():
    identity = transform_from_anchor_points(AnchorPoints([-1, -1, 0], [0, 0, 0], [1, -1, 0]))
    np.testing.assert_allclose(identity.rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(identity.translation, np.zeros(3))

    turned = transform_from_anchor_points(AnchorPoints([1, -1, 0], [0, 0, 0], [1, 1, 0]))
    np.testing.assert_allclose(turned.rotation, RZ90, atol=1e-12)


@pytest.mark.parametrize(
    "points",
    [
        ([0, 0, 0], [0, 0, 0], [1, 0, 0]),
        ([0, 0, 0], [1, 0, 0], [2, 0, 0]),
    ],
    ids=["coincident", "collinear"],
)
def test_transform_from_degenerate_anchor_points_fails(points):
    with pytest.raises(PipelineError) as err:
        transform_from_anchor_points(AnchorPoints(*points))
    assert err.value.code == "degenerate_anchor_points"


def test_anchor_point_round_trip_on_random_transforms(random_transforms):
    for t in random_transforms(1000, seed=11):
        recovered = transform_from_anchor_points(anchor_points_from_transform(t, 120.0), 120.0)
        assert np.linalg.norm(recovered.rotation - t.rotation) < 1e-9
        assert np.linalg.norm(recovered.translation - t.translation) < 1e-9


def test_noisy_anchor_points_still_give_a_rotation():
    rng = np.random.default_rng(5)
    t = RigidTransform(rotation_from_euler(0.3, -0.2, 1.1), [4.0, -2.0, 7.0])
    points = anchor_points_from_transform(t, 60.0).as_array() + rng.normal(scale=0.05, size=(3, 3))
    recovered = transform_from_anchor_points(AnchorPoints.from_array(points))
    np.testing.assert_allclose(recovered.rotation.T @ recovered.rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(recovered.rotation, t.rotation, atol=5e-3)


def test_euler_and_quaternion_round_trips(random_transforms):
    for t in random_transforms(200, seed=2):
        via_euler = from_euler(to_euler(t))
        via_quaternion = from_quaternion(to_quaternion(t))
        np.testing.assert_allclose(via_euler.rotation, t.rotation, atol=1e-9)
        np.testing.assert_allclose(via_quaternion.rotation, t.rotation, atol=1e-9)
        np.testing.assert_allclose(via_euler.translation, t.translation)
        np.testing.assert_allclose(via_quaternion.translation, t.translation)


def test_euler_extraction_at_gimbal_lock():
    rotation = rotation_from_euler(0.4, math.pi / 2, 1.0)
    euler = to_euler(RigidTransform(rotation, np.zeros(3)))
    assert euler.rx == 0.0
    assert euler.ry == pytest.approx(math.pi / 2)
    np.testing.assert_allclose(from_euler(euler).rotation, rotation, atol=1e-9)


@pytest.mark.parametrize("offset", [1e-10, -1e-10, 1e-9])
def test_euler_extraction_near_gimbal_lock(offset):
    rotation = rotation_from_euler(0.4, math.pi / 2 - offset, 1.0)
    euler = to_euler(RigidTransform(rotation, np.zeros(3)))
    assert euler.rx == 0.0
    np.testing.assert_allclose(from_euler(euler).rotation, rotation, atol=1e-8)


def test_euler_extraction_just_outside_gimbal_lock():
    rotation = rotation_from_euler(0.4, math.pi / 2 - 1e-6, 1.0)
    euler = to_euler(RigidTransform(rotation, np.zeros(3)))
    assert euler.rx == pytest.approx(0.4, abs=1e-6)
    np.testing.assert_allclose(from_euler(euler).rotation, rotation, atol=1e-8)


def test_euler_angles_are_wrapped():
    euler = to_euler(RigidTransform(rotation_from_euler(0.1, 0.2, 3.0), np.zeros(3)))
    for angle in (euler.rx, euler.ry, euler.rz):
        assert -math.pi < angle <= math.pi
    assert abs(normalize_angle(3.0 * math.pi)) == pytest.approx(math.pi)
    assert normalize_angle(-math.pi) == pytest.approx(math.pi)


def test_quaternion_example_and_canonical_sign():
    q = QuaternionCartesian(0.7071, 0.0, 0.0, 0.7071, 0.0, 0.0, 0.0)
    np.testing.assert_allclose(from_quaternion(q).rotation, RZ90, atol=1e-12)

    exported = to_quaternion(RigidTransform(RZ90, np.zeros(3)))
    assert exported.qw > 0
    np.testing.assert_allclose(exported.quaternion, [math.sqrt(0.5), 0, 0, math.sqrt(0.5)], atol=1e-12)

    np.testing.assert_allclose(canonical_quaternion([-1.0, 0.0, 0.0, 0.0]), [1.0, 0.0, 0.0, 0.0])
    np.testing.assert_allclose(canonical_quaternion([0.0, -1.0, 0.0, 0.0]), [0.0, 1.0, 0.0, 0.0])
    np.testing.assert_allclose(canonical_quaternion([0.0, 0.0, -0.6, 0.8]), [0.0, 0.0, 0.6, -0.8])


def test_compose_and_invert():
    t = RigidTransform(rotation_from_euler(0.2, 0.5, -0.7), [1.0, 2.0, 3.0])
    same = compose(RigidTransform.identity(), t)
    np.testing.assert_array_equal(same.rotation, t.rotation)
    np.testing.assert_array_equal(same.translation, t.translation)

    inverse = invert(RigidTransform.from_translation([1.0, 2.0, 3.0]))
    np.testing.assert_allclose(inverse.translation, [-1.0, -2.0, -3.0])

    round_trip = compose(t, invert(t))
    np.testing.assert_allclose(round_trip.as_matrix(), np.eye(4), atol=1e-12)


def test_label_dicts_round_trip():
    t = RigidTransform(rotation_from_euler(0.2, 0.5, -0.7), [1.0, 2.0, 3.0])
    euler = to_euler(t)
    assert EulerCartesian.from_dict(euler.to_dict()) == euler
    quaternion = to_quaternion(t)
    assert QuaternionCartesian.from_dict(quaternion.to_dict()) == quaternion
    anchors = anchor_points_from_transform(t, 10.0)
    np.testing.assert_array_equal(AnchorPoints.from_dict(anchors.to_dict()).as_array(), anchors.as_array())


def test_invalid_rotation_is_rejected():
    with pytest.raises(PipelineError) as err:
        RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    assert err.value.code == "invalid_transform"
    with pytest.raises(PipelineError):
        RigidTransform(np.eye(3) * 2.0, np.zeros(3))


def test_transform_arrays_are_read_only():
    t = RigidTransform.identity()
    with pytest.raises(ValueError):
        t.translation[0] = 1.0
