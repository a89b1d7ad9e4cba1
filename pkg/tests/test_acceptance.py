"""Release gates.

One test per criterion, each printing its own pass line, so `pytest -v
tests/test_acceptance.py` reads as a checklist.  Tolerances here are the
contract; do not loosen them to make a run green.
"""

import json
import math
import time

import numpy as np
import pytest

from epibox.cli import EXIT_OK, main
from epibox.cuboid import Box3D, CuboidParams, box_corners, decode_cuboid
from epibox.datasets import (
    SceneObject,
    SceneRecord,
    gen_scene,
    perturb_predictions,
    planar_warp_case,
    write_scene,
)
from epibox.ensemble import fuse_views
from epibox.eval3d import (
    DEFAULT_THRESHOLDS,
    Detection,
    ap3d,
    iou3d_exact,
    iou3d_mc,
    match_and_ap,
)
from epibox.featgrid import FeatureGrid, WarpConfig, epipolar_warp
from epibox.geometry import (
    CameraIntrinsics,
    RigidTransform,
    backproject,
    epipolar_line,
    project,
    random_rotation,
    rotation_z,
)
from epibox.toynet import (
    SQRT2,
    base_forward,
    controlnet_block_forward,
    detection_loss,
    geometric_block_forward,
    init_block_weights,
    loss_gradient,
)

from helpers import (
    brute_force_ap,
    random_box,
    random_overlapping_pair,
    small_rotation,
    toy_camera,
    toy_roi,
)


def test_criterion_1_exact_iou_tracks_monte_carlo():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    hits = 0
    for k in range(200):
        a, b = random_overlapping_pair(rng)
        if abs(iou3d_exact(a, b) - iou3d_mc(a, b, 2_000_000, seed=k)) <= 0.01:
            hits += 1
    elapsed = time.perf_counter() - t0
    assert hits >= 198, f"only {hits}/200 pairs within 0.01"
    assert elapsed <= 60.0, f"took {elapsed:.1f}s"
    print(f"criterion 1 (exact vs MC IoU, {hits}/200 in {elapsed:.1f}s): PASS")


def test_criterion_2_analytic_iou_values():
    cube = Box3D(center=[0.0, 0.0, 0.0], dims=[1.0, 1.0, 1.0], R=np.eye(3))
    assert iou3d_exact(cube, cube) == 1.0
    shifted = Box3D(center=[0.5, 0.0, 0.0], dims=[1.0, 1.0, 1.0], R=np.eye(3))
    assert abs(iou3d_exact(cube, shifted) - 1.0 / 3.0) <= 1e-9
    spun = Box3D(
        center=[0.0, 0.0, 0.0], dims=[1.0, 1.0, 1.0], R=rotation_z(math.pi / 4.0)
    )
    assert abs(iou3d_exact(cube, spun) - SQRT2 / 2.0) <= 1e-9
    print("criterion 2 (analytic IoU values): PASS")


def _spaced_single_category(n):
    dims = np.array([0.1, 0.1, 0.1])
    boxes = [
        Box3D(center=[0.5 * (i % 8), 0.5 * (i // 8), 3.0], dims=dims, R=np.eye(3))
        for i in range(n)
    ]
    return [("box", b) for b in boxes]


def test_criterion_3_ap_sweep_and_brute_force():
    assert len(DEFAULT_THRESHOLDS) == 10

    gts = _spaced_single_category(12)
    perfect = [
        Detection(box=b, category=c, score=1.0 - 0.01 * i)
        for i, (c, b) in enumerate(gts)
    ]
    assert ap3d(perfect, gts).ap3d_mean == 1.0

    gts40 = _spaced_single_category(40)
    rng = np.random.default_rng(7)
    keep = sorted(rng.choice(40, size=20, replace=False))
    half = [
        Detection(box=gts40[i][1], category="box", score=1.0 - 0.001 * i)
        for i in keep
    ]
    assert abs(ap3d(half, gts40).ap3d_mean - 0.5) <= 1e-9

    categories = ["chair", "table"]
    rng = np.random.default_rng(31)
    for _ in range(100):
        n_gt = int(rng.integers(1, 6))
        n_det = int(rng.integers(0, 6))
        case_gts = [
            (categories[int(rng.integers(0, 2))], random_box(rng))
            for _ in range(n_gt)
        ]
        dets = []
        for _ in range(n_det):
            base = case_gts[int(rng.integers(0, n_gt))][1]
            dets.append(
                Detection(
                    box=Box3D(
                        center=base.center + rng.normal(0.0, 0.3, 3),
                        dims=base.dims * rng.uniform(0.8, 1.25, 3),
                        R=base.R,
                    ),
                    category=categories[int(rng.integers(0, 2))],
                    score=float(rng.uniform(0.1, 1.0)),
                )
            )
        threshold = float(rng.choice(DEFAULT_THRESHOLDS))
        got = match_and_ap(dets, case_gts, threshold)
        assert got == pytest.approx(brute_force_ap(dets, case_gts, threshold), abs=1e-12)
    print("criterion 3 (AP sweep, exact fixtures, brute-force equality): PASS")


def test_criterion_4_epipolar_residual_and_degeneracy():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(1000):
        intr_src = CameraIntrinsics(
            fx=rng.uniform(300, 800), fy=rng.uniform(300, 800),
            px=rng.uniform(280, 360), py=rng.uniform(200, 280),
            width=640, height=480,
        )
        intr_tgt = CameraIntrinsics(
            fx=rng.uniform(300, 800), fy=rng.uniform(300, 800),
            px=rng.uniform(280, 360), py=rng.uniform(200, 280),
            width=640, height=480,
        )
        rel = RigidTransform(
            small_rotation(rng, 25.0), rng.uniform(-0.5, 0.5, 3)
        )
        uv_tgt = np.array([rng.uniform(0, 640), rng.uniform(0, 480)])
        x_src = None
        for _ in range(50):
            depth = rng.uniform(0.5, 10.0)
            cand = rel.apply(backproject(intr_tgt, uv_tgt, depth))
            if cand[2] > 0.1:
                x_src = cand
                break
        assert x_src is not None
        uv_src = project(intr_src, x_src)
        line = epipolar_line(intr_src, intr_tgt, rel, uv_tgt)
        assert not line.degenerate
        worst = max(worst, abs(line.l @ np.array([uv_src[0], uv_src[1], 1.0])))
    assert worst <= 1e-9, f"worst residual {worst:.3e} px"

    unit = np.array([2.0, -3.0, 6.0]) / 7.0
    eye = CameraIntrinsics(fx=500.0, fy=500.0, px=320.0, py=240.0, width=640, height=480)
    uv = np.array([100.0, 100.0])
    below = epipolar_line(eye, eye, RigidTransform(np.eye(3), 0.999e-9 * unit), uv)
    above = epipolar_line(eye, eye, RigidTransform(np.eye(3), 1.001e-9 * unit), uv)
    assert below.degenerate and not above.degenerate
    assert epipolar_line(eye, eye, RigidTransform.identity(), uv).degenerate
    print(f"criterion 4 (epipolar residual {worst:.2e} px, degeneracy edge): PASS")


def test_criterion_5_planar_warp_accuracy_and_identity():
    case = planar_warp_case(size=64, channels=8)
    t0 = time.perf_counter()
    warped = epipolar_warp(
        case.source, case.intr_src, case.intr_tgt, case.rel, WarpConfig()
    )
    elapsed = time.perf_counter() - t0
    err = np.linalg.norm(warped.data - case.expected.data, axis=2)
    mean_err = float(err[case.valid].mean())
    assert mean_err <= 1e-3, f"mean error {mean_err:.3e}"
    assert elapsed <= 5.0, f"warp took {elapsed:.2f}s"

    rng = np.random.default_rng(9)
    grid = FeatureGrid(rng.standard_normal((64, 64, 8)))
    same = epipolar_warp(
        grid, case.intr_src, case.intr_src, RigidTransform.identity(), WarpConfig()
    )
    assert np.array_equal(same.data, grid.data)
    print(
        f"criterion 5 (planar warp {mean_err:.2e} in {elapsed:.2f}s, "
        "identity exact): PASS"
    )


def test_criterion_6_fresh_blocks_are_no_ops():
    rng = np.random.default_rng(6)
    w_plain = init_block_weights(rng)
    w_geo = init_block_weights(rng, warp_enabled=True)
    intr = CameraIntrinsics(fx=9.6, fy=9.6, px=3.5, py=3.5, width=8, height=8)
    worst = 0.0
    for _ in range(100):
        x = FeatureGrid(rng.standard_normal((8, 8, 8)))
        c = FeatureGrid(rng.standard_normal((8, 8, 8)))
        rel = RigidTransform(small_rotation(rng, 20.0), rng.uniform(-0.5, 0.5, 3))
        plain = controlnet_block_forward(x, c, w_plain)
        geo = geometric_block_forward(x, c, rel, intr, w_geo)
        worst = max(
            worst,
            float(np.abs(plain.data - base_forward(x, w_plain).data).max()),
            float(np.abs(geo.data - base_forward(x, w_geo).data).max()),
        )
    assert worst <= 1e-12, f"max deviation {worst:.3e}"
    print(f"criterion 6 (zero-init blocks match base, dev {worst:.1e}): PASS")


def test_criterion_7_gradient_check_and_mu_stationary_point():
    rng = np.random.default_rng(77)
    roi, intr = toy_roi(), toy_camera()
    from helpers import fd_loss_gradient, random_cuboid_params

    produced = 0
    worst = 0.0
    while produced < 100:
        gt = decode_cuboid(random_cuboid_params(rng), roi, intr)
        pred = random_cuboid_params(rng)
        diff = box_corners(decode_cuboid(pred, roi, intr)) - box_corners(gt)
        if np.abs(diff).min() < 1e-3:
            continue
        ana = loss_gradient(pred, gt, roi, intr)
        fd = fd_loss_gradient(pred, gt, roi, intr, h=1e-5)
        rel = np.max(np.abs(ana - fd) / np.maximum(1.0, np.abs(ana)))
        worst = max(worst, float(rel))
        produced += 1
    assert worst <= 1e-4, f"worst relative gradient error {worst:.3e}"

    # Descend on mu alone; the other 12 coordinates stay put, so the
    # stationary point is log(sqrt(2) * corner L1) in closed form.
    gt = decode_cuboid(random_cuboid_params(rng), roi, intr)
    pred = random_cuboid_params(rng)
    vec = pred.as_vector()
    for _ in range(1500):
        grad = loss_gradient(CuboidParams.from_vector(vec), gt, roi, intr)
        vec[12] -= 0.3 * grad[12]
    l_3d = detection_loss(CuboidParams.from_vector(vec), gt, roi, intr).l_3d
    mu_star = math.log(SQRT2 * l_3d)
    assert abs(vec[12] - mu_star) <= 1e-6
    print(
        f"criterion 7 (gradcheck {worst:.1e}, mu off by "
        f"{abs(vec[12] - mu_star):.1e}): PASS"
    )


def test_criterion_8_multi_view_fusion():
    rng = np.random.default_rng(88)
    boxes = [
        Box3D(
            center=[4.0 * i - 6.0, 0.5 * i, 6.0 + i],
            dims=rng.uniform(0.5, 1.5, 3),
            R=random_rotation(rng),
        )
        for i in range(4)
    ]
    per_view = []
    for v in range(7):
        pose = RigidTransform(small_rotation(rng, 15.0), rng.uniform(-0.2, 0.2, 3))
        dets = tuple(
            Detection(
                box=Box3D(
                    center=pose.apply(b.center), dims=b.dims, R=pose.R @ b.R
                ),
                category="chair",
                score=1.0 - 0.1 * v - 0.01 * i,
            )
            for i, b in enumerate(boxes)
        )
        per_view.append((pose, dets))
    fused = fuse_views(per_view, tau=0.25)
    assert len(fused) == len(boxes)
    worst_corner = 0.0
    for b in boxes:
        nearest = min(fused, key=lambda d: np.linalg.norm(d.box.center - b.center))
        worst_corner = max(
            worst_corner,
            float(np.abs(box_corners(nearest.box) - box_corners(b)).max()),
        )
    assert worst_corner <= 1e-9, f"corner error {worst_corner:.3e}"

    singles, fused_aps = [], []
    for seed in range(20):
        scene = gen_scene(seed, 6)
        gts = [(obj.category, obj.box) for obj in scene.objects]
        views = []
        for v in range(5):
            dets = perturb_predictions(
                scene, sigma_center=0.15, sigma_dims=0.1, sigma_rot_deg=10.0,
                drop_rate=0.0, seed=1000 * seed + v,
            )
            pose = RigidTransform(
                small_rotation(rng, 10.0), rng.uniform(-0.1, 0.1, 3)
            )
            in_view = tuple(
                Detection(
                    box=Box3D(
                        center=pose.apply(d.box.center),
                        dims=d.box.dims,
                        R=pose.R @ d.box.R,
                    ),
                    category=d.category,
                    score=d.score,
                )
                for d in dets
            )
            views.append((pose, in_view))
            if v == 0:
                singles.append(ap3d(dets, gts).ap3d_mean)
        fused_aps.append(ap3d(fuse_views(views, tau=0.25), gts).ap3d_mean)
    mean_single = float(np.mean(singles))
    mean_fused = float(np.mean(fused_aps))
    assert mean_fused >= mean_single, (
        f"ensembled {mean_fused:.4f} < single {mean_single:.4f}"
    )
    print(
        f"criterion 8 (dedup exact, AP {mean_fused:.3f} >= {mean_single:.3f}): PASS"
    )


def test_criterion_9_reruns_are_byte_identical(tmp_path):
    scene_path = tmp_path / "scene.json"
    assert main(["synth", "--seed", "3", "--n-objects", "8",
                 "--out", str(scene_path)]) == EXIT_OK
    scene = gen_scene(3, 8)
    pred_path = tmp_path / "pred.json"
    dets = perturb_predictions(
        scene, sigma_center=0.1, sigma_dims=0.05, sigma_rot_deg=5.0,
        drop_rate=0.0, seed=2,
    )
    write_scene(
        SceneRecord(
            scene.scene_id, scene.camera, scene.pose, scene.objects, dets
        ),
        pred_path,
    )
    poses_path = tmp_path / "poses.json"
    identity_pose = {"R": [1, 0, 0, 0, 1, 0, 0, 0, 1], "t": [0, 0, 0]}
    poses_path.write_text(json.dumps({
        "format_version": 1,
        "poses": [identity_pose, identity_pose],
    }))
    grid_path = tmp_path / "grid.bin"
    from epibox.featgrid import save_feature_grid

    save_feature_grid(
        str(grid_path),
        FeatureGrid(np.random.default_rng(0).random((32, 32, 4))),
    )

    def run_all(tag):
        base = tmp_path / tag
        out = {
            "synth": base / "scene.json",
            "warp": base / "warped.bin",
            "fused": base / "fused.json",
        }
        assert main(["synth", "--seed", "3", "--n-objects", "8",
                     "--out", str(out["synth"])]) == EXIT_OK
        assert main(["eval", "--predictions", str(pred_path),
                     "--ground-truth", str(scene_path),
                     "--out-dir", str(base / "eval")]) == EXIT_OK
        assert main(["warp", "--grid", str(grid_path), "--out", str(out["warp"]),
                     "--rot-deg", "0,10,0", "--samples", "32"]) == EXIT_OK
        assert main(["ensemble", "--predictions", str(pred_path), str(pred_path),
                     "--poses", str(poses_path),
                     "--out", str(out["fused"])]) == EXIT_OK
        files = [out["synth"], out["warp"], out["fused"]]
        files += sorted((base / "eval").iterdir())
        return {p.name: p.read_bytes() for p in files}

    first = run_all("a")
    second = run_all("b")
    assert first.keys() == second.keys()
    for name in first:
        assert first[name] == second[name], f"{name} differs between runs"
    print(f"criterion 9 ({len(first)} output files byte-identical): PASS")
