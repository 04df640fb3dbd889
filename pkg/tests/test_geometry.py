import math

import numpy as np
import pytest

from procamsim.errors import (
    DegenerateConfiguration,
    PointAtInfinity,
    PointBehindCamera,
)
from procamsim.geometry import (
    Homography,
    Intrinsics,
    Pose,
    apply_homography,
    axis_angle_from_rotation,
    distort_normalized,
    homography_dlt,
    project,
    rotation_from_axis_angle,
    undistort,
)


def test_project_on_axis_maps_to_principal_point():
    intr = Intrinsics(600.0, 600.0, 256.0, 256.0, k1=0.0, k2=0.0)
    px = project(intr, Pose.identity(), (0.0, 0.0, 200.0))
    assert np.allclose(px, [256.0, 256.0])


def test_project_on_axis_ignores_distortion():
    intr = Intrinsics(600.0, 600.0, 256.0, 256.0, k1=-0.2, k2=0.1)
    px = project(intr, Pose.identity(), (0.0, 0.0, 50.0))
    assert np.allclose(px, [256.0, 256.0])


def test_project_hand_evaluated_distortion():
    # x_n = 0.05, r^2 = 0.0025, factor = 1 - 0.05*0.0025 + 0.01*0.0025^2
    intr = Intrinsics(600.0, 600.0, 256.0, 256.0, k1=-0.05, k2=0.01)
    px = project(intr, Pose.identity(), (10.0, 0.0, 200.0))
    assert abs(px[0] - 285.996251875) < 1e-9
    assert abs(px[1] - 256.0) < 1e-12


def test_project_behind_camera_raises():
    intr = Intrinsics(600.0, 600.0, 256.0, 256.0)
    with pytest.raises(PointBehindCamera):
        project(intr, Pose.identity(), (0.0, 0.0, -50.0))


def test_undistort_zero_distortion_is_identity():
    intr = Intrinsics(600.0, 600.0, 256.0, 256.0)
    assert np.allclose(undistort(intr, (0.3, -0.2)), [0.3, -0.2])


def test_undistort_round_trip():
    intr = Intrinsics(600.0, 600.0, 256.0, 256.0, k1=-0.05)
    q = np.array([0.1, 0.1])
    p = distort_normalized(intr, q)
    assert np.max(np.abs(undistort(intr, p) - q)) < 1e-9


def test_undistort_origin_fixed_point():
    intr = Intrinsics(600.0, 600.0, 256.0, 256.0, k1=-0.1, k2=0.05)
    assert np.allclose(undistort(intr, (0.0, 0.0)), [0.0, 0.0])


def test_undistort_rejects_far_points():
    intr = Intrinsics(600.0, 600.0, 256.0, 256.0)
    with pytest.raises(ValueError):
        undistort(intr, (1.2, 0.0))


@pytest.mark.parametrize("k1", [-0.2, -0.05, 0.0, 0.1, 0.2])
@pytest.mark.parametrize("k2", [-0.05, 0.0, 0.05])
def test_distort_undistort_identity_property(k1, k2):
    intr = Intrinsics(600.0, 600.0, 256.0, 256.0, k1=k1, k2=k2)
    for p in [(0.5, 0.0), (0.3, -0.4), (-0.2, 0.2), (0.05, 0.05)]:
        p = np.asarray(p)
        back = distort_normalized(intr, undistort(intr, p))
        assert np.max(np.abs(back - p)) < 1e-9
        fwd = undistort(intr, distort_normalized(intr, p))
        assert np.max(np.abs(distort_normalized(intr, fwd) - distort_normalized(intr, p))) < 1e-9


def test_homography_identity_on_unit_square():
    pts = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]
    h = homography_dlt(pts, pts)
    m = h.matrix / h.matrix[2, 2]
    assert np.max(np.abs(m - np.eye(3))) < 1e-9


def test_homography_recovers_known_map():
    rng = np.random.default_rng(42)
    truth = np.array([[1.2, -0.1, 3.0], [0.05, 0.9, -2.0], [1e-4, -2e-4, 1.0]])
    src = rng.uniform(-50, 50, (8, 2))
    dst = np.array([apply_homography(Homography(truth), p) for p in src])
    h = homography_dlt(src, dst)
    ours = h.matrix / np.linalg.norm(h.matrix)
    theirs = truth / np.linalg.norm(truth)
    if np.sign(ours[2, 2]) != np.sign(theirs[2, 2]):
        theirs = -theirs
    assert np.max(np.abs(ours - theirs)) < 1e-9


def test_homography_transfer_error_is_tiny_on_exact_inputs():
    rng = np.random.default_rng(3)
    truth = Homography(np.array([[0.9, 0.1, -5.0], [0.0, 1.1, 2.0], [2e-4, 0.0, 1.0]]))
    src = rng.uniform(-30, 30, (12, 2))
    dst = np.array([apply_homography(truth, p) for p in src])
    h = homography_dlt(src, dst)
    err = [np.linalg.norm(apply_homography(h, p) - q) for p, q in zip(src, dst)]
    assert max(err) < 1e-9


def test_homography_invariant_to_similarity_pre_transform():
    # Applying a similarity S to the source points must change the estimate
    # by exactly the induced factor: H' = H @ S^-1.
    rng = np.random.default_rng(8)
    truth = Homography(np.array([[1.1, 0.0, 2.0], [0.1, 0.9, -1.0], [1e-4, 0.0, 1.0]]))
    src = rng.uniform(-40, 40, (10, 2))
    dst = np.array([apply_homography(truth, p) for p in src])
    s = 2.5
    sim = np.array([[s * math.cos(0.3), -s * math.sin(0.3), 4.0],
                    [s * math.sin(0.3), s * math.cos(0.3), -7.0],
                    [0.0, 0.0, 1.0]])
    src_t = src @ sim[:2, :2].T + sim[:2, 2]
    h_direct = homography_dlt(src, dst)
    h_transformed = homography_dlt(src_t, dst)
    expected = Homography(h_direct.matrix @ np.linalg.inv(sim))
    diff = h_transformed.matrix - expected.matrix
    if np.max(np.abs(h_transformed.matrix + expected.matrix)) < np.max(np.abs(diff)):
        diff = h_transformed.matrix + expected.matrix
    assert np.max(np.abs(diff)) < 1e-9


def test_homography_collinear_points_degenerate():
    src = [(0.0, 0.0), (1.0, 1.0), (2.0, 2.0), (3.0, 3.0)]
    dst = [(0.0, 0.0), (1.0, 1.0), (2.0, 2.0), (3.0, 3.0)]
    with pytest.raises(DegenerateConfiguration):
        homography_dlt(src, dst)


def test_homography_too_few_pairs():
    with pytest.raises(DegenerateConfiguration):
        homography_dlt([(0, 0), (1, 0), (0, 1)], [(0, 0), (1, 0), (0, 1)])


def test_apply_homography_cases():
    identity = Homography(np.eye(3))
    assert np.allclose(apply_homography(identity, (5.0, 7.0)), [5.0, 7.0])
    translation = Homography(np.array([[1, 0, 3], [0, 1, -2], [0, 0, 1]], dtype=float))
    assert np.allclose(apply_homography(translation, (0.0, 0.0)), [3.0, -2.0])
    scale = Homography(np.diag([2.0, 2.0, 1.0]))
    assert np.allclose(apply_homography(scale, (1.0, 1.0)), [2.0, 2.0])


def test_apply_homography_point_at_infinity():
    h = Homography(np.array([[1, 0, 0], [0, 1, 0], [1, 0, 0]], dtype=float))
    with pytest.raises(PointAtInfinity):
        apply_homography(h, (0.0, 5.0))


def test_homography_normalization_invariants():
    h = Homography(np.array([[-2, 0, 0], [0, -2, 0], [0, 0, -1]], dtype=float))
    assert abs(np.linalg.norm(h.matrix) - 1.0) < 1e-12
    assert h.matrix[2, 2] >= 0


def test_rotation_zero_vector_is_identity():
    assert np.allclose(rotation_from_axis_angle((0.0, 0.0, 0.0)), np.eye(3))


def test_rotation_quarter_turn_about_z():
    r = rotation_from_axis_angle((0.0, 0.0, math.pi / 2))
    assert np.allclose(r @ np.array([1.0, 0.0, 0.0]), [0.0, 1.0, 0.0], atol=1e-12)


def test_rotation_round_trip_random():
    rng = np.random.default_rng(11)
    for _ in range(50):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = rng.uniform(1e-6, math.pi - 1e-6)
        w = axis * angle
        back = axis_angle_from_rotation(rotation_from_axis_angle(w))
        assert np.max(np.abs(back - w)) < 1e-10


def test_pose_inverse_law():
    rng = np.random.default_rng(5)
    w = rng.normal(size=3)
    pose = Pose(rotation_from_axis_angle(w), rng.normal(size=3) * 100)
    composed = pose.compose(pose.inverse())
    assert np.max(np.abs(composed.rotation - np.eye(3))) < 1e-9
    assert np.max(np.abs(composed.translation)) < 1e-9


def test_pose_composition_associative():
    rng = np.random.default_rng(9)
    poses = [
        Pose(rotation_from_axis_angle(rng.normal(size=3)), rng.normal(size=3) * 50)
        for _ in range(3)
    ]
    a, b, c = poses
    left = a.compose(b).compose(c)
    right = a.compose(b.compose(c))
    assert np.max(np.abs(left.rotation - right.rotation)) < 1e-12
    assert np.max(np.abs(left.translation - right.translation)) < 1e-9


def test_pose_validation_rejects_non_rotation():
    with pytest.raises(ValueError):
        Pose(np.eye(3) * 2.0, np.zeros(3))
