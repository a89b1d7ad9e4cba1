import numpy as np
import pytest

from epibox.cuboid import Box3D, box_corners, transform_box
from epibox.ensemble import VirtualViewSet, fuse_views, virtual_poses
from epibox.eval3d import Detection, nms3d
from epibox.geometry import RigidTransform, rotation_x, rotation_y, rotation_z

from helpers import random_box


def test_default_pose_set_has_seven_members():
    views = virtual_poses()
    assert len(views) == 7
    assert views.includes_identity
    first = views.poses[0]
    assert np.array_equal(first.R, np.eye(3))
    assert np.array_equal(first.t, np.zeros(3))


def test_single_axis_without_identity():
    views = virtual_poses(15.0, {"x"}, include_identity=False)
    assert len(views) == 2
    rad = np.deg2rad(15.0)
    np.testing.assert_allclose(views.poses[0].R, rotation_x(rad), atol=1e-15)
    np.testing.assert_allclose(views.poses[1].R, rotation_x(-rad), atol=1e-15)


def test_pose_ordering_is_identity_then_xyz_pairs():
    views = virtual_poses(20.0, {"z", "x", "y"}, include_identity=True)
    rad = np.deg2rad(20.0)
    expected = [
        np.eye(3),
        rotation_x(rad), rotation_x(-rad),
        rotation_y(rad), rotation_y(-rad),
        rotation_z(rad), rotation_z(-rad),
    ]
    for pose, want in zip(views.poses, expected):
        np.testing.assert_allclose(pose.R, want, atol=1e-15)


def test_pose_count_scales_with_axes():
    assert len(virtual_poses(10.0, {"x", "y"}, include_identity=False)) == 4
    assert len(virtual_poses(10.0, {"y"}, include_identity=True)) == 3
    assert len(virtual_poses(10.0, set(), include_identity=True)) == 1


def test_every_pose_is_a_pure_rotation_and_invertible():
    for pose in virtual_poses(25.0, {"x", "y", "z"}, include_identity=True):
        assert np.linalg.norm(pose.t) == 0.0
        round_trip = pose.compose(pose.invert())
        assert np.allclose(round_trip.R, np.eye(3), atol=1e-9)
        assert np.allclose(round_trip.t, 0.0, atol=1e-9)


def test_angle_must_be_strictly_inside_unit_quadrant():
    for bad in (0.0, 90.0, -5.0, 180.0):
        with pytest.raises(ValueError):
            virtual_poses(bad, {"x"}, include_identity=False)


def test_unknown_axis_rejected():
    with pytest.raises(ValueError):
        virtual_poses(15.0, {"x", "w"}, include_identity=False)


def test_view_set_rejects_translating_pose():
    moved = RigidTransform(R=np.eye(3), t=np.array([0.0, 0.0, 0.1]))
    with pytest.raises(ValueError):
        VirtualViewSet(poses=(moved,), includes_identity=True)


def _det(box, category="car", score=0.9):
    return Detection(box=box, category=category, score=score)


def test_single_identity_view_matches_plain_nms():
    rng = np.random.default_rng(7)
    dets = [_det(random_box(rng), score=float(s)) for s in rng.uniform(0.1, 1.0, 6)]
    fused = fuse_views([(RigidTransform.identity(), dets)], tau=0.25)
    direct = nms3d(dets, tau=0.25)
    assert len(fused) == len(direct)
    for f, d in zip(fused, direct):
        assert f.score == d.score and f.category == d.category
        assert np.array_equal(box_corners(f.box), box_corners(d.box))


def test_same_box_in_all_seven_views_collapses_to_one():
    base = Box3D(
        center=np.array([0.4, -0.2, 5.0]),
        dims=np.array([1.6, 1.5, 3.9]),
        R=rotation_y(0.3),
    )
    views = virtual_poses()
    per_view = []
    for i, pose in enumerate(views):
        score = 0.95 if i == 0 else 0.6 + 0.01 * i
        per_view.append((pose, [_det(transform_box(base, pose), score=score)]))
    fused = fuse_views(per_view, tau=0.25)
    assert len(fused) == 1
    assert fused[0].score == 0.95
    err = np.abs(box_corners(fused[0].box) - box_corners(base)).max()
    assert err <= 1e-9


def test_disjoint_objects_from_different_views_both_survive():
    near = Box3D(center=np.array([0.0, 0.0, 4.0]), dims=np.ones(3), R=np.eye(3))
    far = Box3D(center=np.array([6.0, 0.0, 9.0]), dims=np.ones(3), R=np.eye(3))
    pose = virtual_poses(15.0, {"y"}, include_identity=False).poses[0]
    fused = fuse_views(
        [
            (RigidTransform.identity(), [_det(near, score=0.8)]),
            (pose, [_det(transform_box(far, pose), score=0.7)]),
        ],
        tau=0.25,
    )
    assert len(fused) == 2
    centers = sorted(round(float(d.box.center[0]), 6) for d in fused)
    assert centers == [0.0, 6.0]


def test_round_trip_recovers_base_frame_boxes():
    rng = np.random.default_rng(11)
    for _ in range(20):
        base = random_box(rng)
        views = virtual_poses(float(rng.uniform(5.0, 40.0)))
        per_view = [(p, [_det(transform_box(base, p), score=0.5)]) for p in views]
        fused = fuse_views(per_view, tau=0.25)
        assert len(fused) == 1
        err = np.abs(box_corners(fused[0].box) - box_corners(base)).max()
        assert err <= 1e-9


def test_output_never_exceeds_input():
    rng = np.random.default_rng(3)
    views = virtual_poses()
    per_view = [
        (p, [_det(random_box(rng), score=float(rng.uniform(0.2, 1.0)))
             for _ in range(3)])
        for p in views
    ]
    fused = fuse_views(per_view, tau=0.25)
    assert len(fused) <= sum(len(d) for _, d in per_view)
