"""Shared fixture builders and independent oracles for the test suite."""

import numpy as np

from epibox.cuboid import Box3D, CuboidParams, Roi2D
from epibox.eval3d import iou3d_exact
from epibox.featgrid import FeatureGrid
from epibox.geometry import (
    CameraIntrinsics,
    RigidTransform,
    backproject,
    project,
    random_rotation,
    rotation_from_quaternion,
    rotation_x,
    rotation_y,
)


def make_planar_warp_case(size=64, channels=8):
    """Planar-scene warp fixture with an analytically known answer.

    A fronto-parallel plane sits at fixed depth in the target camera.  The
    source camera is offset laterally (translation with zero z component),
    which puts the epipole at infinity: every epipolar line in the source
    image shares one direction.  The source feature grid is a linear ramp
    per channel that is constant along that direction, so every sample on a
    target texel's epipolar line carries exactly the value at the texel's
    true plane-induced correspondence.

    Returns (src_grid, intr_src, intr_tgt, rel, expected, valid) where
    `expected` is the analytic warped grid and `valid` marks texels whose
    true correspondence lands inside the source grid.
    """
    g = size
    intr = CameraIntrinsics(
        fx=1.2 * g, fy=1.2 * g, px=(g - 1) / 2.0, py=(g - 1) / 2.0, width=g, height=g
    )
    # Target-to-source transform: lateral shift only, plus a small rotation.
    r_ts = rotation_y(np.deg2rad(3.0)) @ rotation_x(np.deg2rad(-2.0))
    t = np.array([0.35, 0.22, 0.0])
    rel = RigidTransform(r_ts, t)

    # Common direction of all source-image epipolar lines, and its normal.
    direction = np.array([intr.fx * t[0], intr.fy * t[1]])
    direction /= np.linalg.norm(direction)
    normal = np.array([-direction[1], direction[0]])

    bases = 0.3 + 0.1 * np.arange(channels)
    slopes = 0.004 * (1.0 + np.arange(channels))

    cols, rows = np.meshgrid(np.arange(g, dtype=float), np.arange(g, dtype=float))
    ramp_coord = normal[0] * cols + normal[1] * rows
    src = FeatureGrid(bases + slopes * ramp_coord[:, :, None])

    depth = 4.0
    expected = np.zeros((g, g, channels))
    valid = np.zeros((g, g), dtype=bool)
    for i in range(g):
        for j in range(g):
            x_src = rel.apply(backproject(intr, (float(j), float(i)), depth))
            if x_src[2] <= 0.0:
                continue
            u = project(intr, x_src)
            if 0.0 <= u[0] <= g - 1.0 and 0.0 <= u[1] <= g - 1.0:
                valid[i, j] = True
                expected[i, j] = bases + slopes * (normal @ u)
    return src, intr, intr, rel, expected, valid


def small_rotation(rng, max_deg):
    """Rotation by a random angle up to max_deg about a random axis."""
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    angle = np.deg2rad(rng.uniform(-max_deg, max_deg))
    q = np.concatenate([[np.cos(angle / 2.0)], np.sin(angle / 2.0) * axis])
    return rotation_from_quaternion(q)


def random_box(rng, center_scale=1.0):
    return Box3D(
        center=rng.uniform(-center_scale, center_scale, 3),
        dims=rng.uniform(0.3, 2.0, 3),
        R=random_rotation(rng),
    )


def random_overlapping_pair(rng):
    """Two oriented boxes that usually overlap substantially."""
    a = random_box(rng)
    b = Box3D(
        center=a.center + rng.normal(0.0, 0.25, 3),
        dims=a.dims * rng.uniform(0.7, 1.4, 3),
        R=a.R @ small_rotation(rng, 40.0),
    )
    return a, b


def brute_force_ap(dets, gts, threshold):
    """Reference AP: same matching protocol, independent PR integration.

    Integrates the all-point interpolated curve by scanning, at every
    recall step, the best precision among PR points at or beyond that
    recall, instead of the running-envelope formulation.
    """
    categories = sorted({category for category, _ in gts})
    aps = []
    for category in categories:
        gt_boxes = [box for c, box in gts if c == category]
        cat_dets = sorted(
            [d for d in dets if d.category == category], key=lambda d: -d.score
        )
        used = set()
        flags = []
        for det in cat_dets:
            candidates = []
            for j, gt_box in enumerate(gt_boxes):
                if j in used:
                    continue
                iou = iou3d_exact(det.box, gt_box)
                if iou >= threshold:
                    candidates.append((iou, -j))
            if candidates:
                _, neg_j = max(candidates)
                used.add(-neg_j)
                flags.append(True)
            else:
                flags.append(False)
        points = []
        tps = 0
        for rank, flag in enumerate(flags, start=1):
            tps += flag
            points.append((tps / len(gt_boxes), tps / rank))
        ap = 0.0
        prev_recall = 0.0
        for recall, _ in points:
            if recall > prev_recall:
                best = max(p for r, p in points if r >= recall)
                ap += (recall - prev_recall) * best
                prev_recall = recall
        aps.append(ap)
    return sum(aps) / len(aps) if aps else 0.0


def toy_camera():
    """Small pinhole camera shared by the cuboid-loss fixtures."""
    return CameraIntrinsics(fx=500.0, fy=480.0, px=320.0, py=240.0, width=640, height=480)


def toy_roi():
    return Roi2D(rx=200.0, ry=150.0, rw=120.0, rh=100.0)


def random_cuboid_params(rng):
    """Cuboid parameters in the comfortably decodable regime."""
    return CuboidParams(
        u=float(rng.uniform(0.2, 0.8)),
        v=float(rng.uniform(0.2, 0.8)),
        z_v=float(rng.uniform(3.0, 8.0)),
        wbar=float(rng.uniform(-0.5, 0.7)),
        hbar=float(rng.uniform(-0.5, 0.7)),
        lbar=float(rng.uniform(-0.5, 0.7)),
        p=rng.normal(0.0, 1.0, 6),
        mu=float(rng.uniform(-0.5, 0.5)),
    )


def fd_loss_gradient(params, gt_box, roi, intr, h=1e-5):
    """Central finite differences of the total loss, the gradient oracle."""
    from epibox.toynet import detection_loss

    vec = params.as_vector()
    grad = np.zeros(13)
    for i in range(13):
        hi, lo = vec.copy(), vec.copy()
        hi[i] += h
        lo[i] -= h
        up = detection_loss(CuboidParams.from_vector(hi), gt_box, roi, intr).total
        down = detection_loss(CuboidParams.from_vector(lo), gt_box, roi, intr).total
        grad[i] = (up - down) / (2.0 * h)
    return grad
