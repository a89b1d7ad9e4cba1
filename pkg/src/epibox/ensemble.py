"""Virtual-view pose generation and multi-view detection fusion.

Detections predicted under rotated virtual cameras are mapped back into
the base camera frame and deduplicated with 3D NMS.  Scores pass through
untouched; the highest-scoring duplicate wins.
"""

from dataclasses import dataclass
from typing import Iterable, Sequence, Tuple

import numpy as np

from .cuboid import Box3D, transform_box
from .eval3d import DEFAULT_NMS_TAU, Detection, nms3d
from .geometry import RigidTransform, rotation_x, rotation_y, rotation_z

_AXIS_ROTATIONS = (("x", rotation_x), ("y", rotation_y), ("z", rotation_z))


@dataclass(frozen=True, eq=False)
class VirtualViewSet:
    """A bundle of pure-rotation camera poses, identity optionally first."""

    poses: Tuple[RigidTransform, ...]
    includes_identity: bool

    def __post_init__(self):
        object.__setattr__(self, "poses", tuple(self.poses))
        for pose in self.poses:
            if np.linalg.norm(pose.t) != 0.0:
                raise ValueError("virtual views must be pure rotations")

    def __len__(self) -> int:
        return len(self.poses)

    def __iter__(self):
        return iter(self.poses)


def virtual_poses(
    angle_deg: float = 15.0,
    axes: Iterable[str] = ("x", "y", "z"),
    include_identity: bool = True,
) -> VirtualViewSet:
    """Build pseudo camera rotations of +/-angle_deg about the chosen axes.

    Pose order: identity (when requested), then +angle, -angle per axis
    in fixed x, y, z order.  The default settings give 7 poses, 6 virtual.
    """
    if not 0.0 < angle_deg < 90.0:
        raise ValueError(f"angle_deg must lie in (0, 90), got {angle_deg!r}")
    chosen = set(axes)
    known = {name for name, _ in _AXIS_ROTATIONS}
    if not chosen <= known:
        raise ValueError(f"unknown axes: {sorted(chosen - known)!r}")
    rad = np.deg2rad(angle_deg)
    zero = np.zeros(3)
    poses = []
    if include_identity:
        poses.append(RigidTransform.identity())
    for name, rot in _AXIS_ROTATIONS:
        if name in chosen:
            poses.append(RigidTransform(R=rot(rad), t=zero))
            poses.append(RigidTransform(R=rot(-rad), t=zero))
    return VirtualViewSet(poses=tuple(poses), includes_identity=include_identity)


def fuse_views(
    per_view: Sequence[Tuple[RigidTransform, Sequence[Detection]]],
    tau: float = DEFAULT_NMS_TAU,
) -> Tuple[Detection, ...]:
    """Fuse per-view detections into the base frame: y = NMS({y(xi_i)}).

    Each view's detections live in that view's camera frame; the inverse
    view pose carries them back before a single joint NMS pass.
    """
    pooled = []
    for pose, dets in per_view:
        back = pose.invert()
        for det in dets:
            pooled.append(
                Detection(
                    box=transform_box(det.box, back),
                    category=det.category,
                    score=det.score,
                )
            )
    return tuple(nms3d(pooled, tau))
