"""Command-line front end: scene synthesis, evaluation, warp and
ensemble runs, gradient checking, and the toy fitting loop.

Exit codes: 0 success, 2 parse error, 3 schema mismatch, 4 usage error,
5 check failure.  Every subcommand is deterministic given its flags:
output files are written atomically and re-runs reproduce them byte for
byte.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import dataclass

import numpy as np

from .cuboid import CuboidParams, Roi2D, box_corners, decode_cuboid
from .datasets import (
    DEFAULT_VOCAB,
    FORMAT_VERSION,
    SceneRecord,
    gen_scene,
    planar_warp_case,
    read_scene,
    write_scene,
)
from .ensemble import fuse_views
from .errors import (
    NonDifferentiablePoint,
    ParseError,
    PlacementFailure,
    SchemaError,
    VersionMismatch,
)
from .eval3d import DEFAULT_NMS_TAU, DEFAULT_THRESHOLDS, ap3d
from .featgrid import (
    AggregatorMode,
    OutOfViewPolicy,
    WarpConfig,
    epipolar_warp,
    load_feature_grid,
    save_feature_grid,
)
from .geometry import CameraIntrinsics, RigidTransform, rotation_x, rotation_y, rotation_z
from .report import ap_curve_figure, ap_table, loss_curve_figure, save_csv, save_figure
from .toynet import SQRT2, detection_loss, fit_cuboid, loss_gradient
from .util import write_text_atomic

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_SCHEMA = 3
EXIT_USAGE = 4
EXIT_CHECK = 5

GRADCHECK_TOL = 1e-4

# Shared RoI and camera for the parameter-space commands.
_TOY_ROI = Roi2D(rx=200.0, ry=150.0, rw=120.0, rh=100.0)
_TOY_INTR = CameraIntrinsics(
    fx=500.0, fy=480.0, px=320.0, py=240.0, width=640, height=480
)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; route through the
    # documented usage code instead.
    def error(self, message):
        raise _UsageError(message)


@dataclass(frozen=True)
class RunConfig:
    """One validated invocation: subcommand, file paths, numeric options.

    Input paths must exist before any work begins; parent directories of
    outputs are created here so command bodies can write directly.
    """

    subcommand: str
    inputs: tuple = ()
    outputs: tuple = ()
    options: dict = None

    def __post_init__(self):
        for path in self.inputs:
            if not os.path.exists(path):
                raise ParseError(f"input path does not exist: {path}")
        for path in self.outputs:
            parent = os.path.dirname(os.path.abspath(path))
            os.makedirs(parent, exist_ok=True)


def _json_text(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _parse_floats(text: str, n: int, flag: str) -> np.ndarray:
    parts = [p.strip() for p in text.split(",")]
    try:
        vals = np.array([float(p) for p in parts])
    except ValueError:
        raise _UsageError(f"{flag} expects {n} comma-separated numbers")
    if len(vals) != n:
        raise _UsageError(f"{flag} expects {n} comma-separated numbers")
    return vals


# --- synth ------------------------------------------------------------


def cmd_synth(args) -> int:
    vocab = tuple(v for v in args.vocab.split(",") if v)
    RunConfig("synth", outputs=(args.out,), options={"seed": args.seed})
    scene = gen_scene(args.seed, args.n_objects, vocab)
    write_scene(scene, args.out)
    print(f"wrote {args.out}: {len(scene.objects)} objects, seed {args.seed}")
    return EXIT_OK


# --- eval -------------------------------------------------------------


def cmd_eval(args) -> int:
    if args.thresholds is None:
        thresholds = DEFAULT_THRESHOLDS
    else:
        thresholds = tuple(
            float(p) for p in args.thresholds.split(",") if p.strip()
        )
    out = args.out_dir
    RunConfig(
        "eval",
        inputs=(args.predictions, args.ground_truth),
        outputs=(os.path.join(out, "eval_result.json"),),
        options={"thresholds": thresholds},
    )
    preds = read_scene(args.predictions).detections
    gt_scene = read_scene(args.ground_truth)
    gts = [(obj.category, obj.box) for obj in gt_scene.objects]
    result = ap3d(preds, gts, thresholds)

    doc = {
        "format_version": FORMAT_VERSION,
        "ap3d_mean": result.ap3d_mean,
        "ap3d_mean_percent": 100.0 * result.ap3d_mean,
        "ap_per_threshold": {repr(t): ap for t, ap in result.ap_per_threshold.items()},
        "per_category": dict(result.per_category),
        "n_predictions": len(preds),
        "n_ground_truth": len(gts),
    }
    write_text_atomic(os.path.join(out, "eval_result.json"), _json_text(doc))

    table = ap_table(result)
    write_text_atomic(os.path.join(out, "eval_table.txt"), table)

    rows = [("iou_threshold", "ap")]
    rows += [(t, ap) for t, ap in sorted(result.ap_per_threshold.items())]
    save_csv(rows, os.path.join(out, "eval_thresholds.csv"))
    save_figure(ap_curve_figure(result), os.path.join(out, "eval_ap_curve.png"))

    print(table, end="")
    return EXIT_OK


# --- warp -------------------------------------------------------------


def _warp_config(args) -> WarpConfig:
    return WarpConfig(
        n_samples=args.samples,
        mode=AggregatorMode(args.mode),
        out_of_view=OutOfViewPolicy(args.oov),
    )


def cmd_warp(args) -> int:
    if args.reference:
        case = planar_warp_case()
        out = epipolar_warp(
            case.source, case.intr_src, case.intr_tgt, case.rel, _warp_config(args)
        )
        err = np.linalg.norm(out.data - case.expected.data, axis=2)
        mean_err = float(err[case.valid].mean())
        print(
            f"mean warp error: {mean_err:.6e} over {int(case.valid.sum())} texels"
        )
        return EXIT_OK

    if args.grid is None or args.out is None:
        raise _UsageError("warp needs --grid and --out (or --reference)")
    RunConfig("warp", inputs=(args.grid,), outputs=(args.out,))
    grid = load_feature_grid(args.grid)
    h, w, _ = grid.data.shape
    fx = args.fx if args.fx is not None else 1.2 * max(h, w)
    fy = args.fy if args.fy is not None else fx
    px = args.px if args.px is not None else (w - 1) / 2.0
    py = args.py if args.py is not None else (h - 1) / 2.0
    intr = CameraIntrinsics(fx=fx, fy=fy, px=px, py=py, width=w, height=h)

    deg = _parse_floats(args.rot_deg, 3, "--rot-deg")
    rx, ry, rz = (math.radians(d) for d in deg)
    rel = RigidTransform(
        rotation_z(rz) @ rotation_y(ry) @ rotation_x(rx),
        _parse_floats(args.t, 3, "--t"),
    )
    warped = epipolar_warp(grid, intr, intr, rel, _warp_config(args))
    save_feature_grid(args.out, warped)
    print(f"wrote {args.out}: {h}x{w}x{grid.data.shape[2]} warped grid")
    return EXIT_OK


# --- ensemble ---------------------------------------------------------


def _read_poses(path) -> tuple:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ParseError(f"cannot read pose file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(
            f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}"
        ) from exc
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: pose document must be a JSON object")
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionMismatch(
            f"{path}: format_version {version!r} is not supported"
        )
    entries = doc.get("poses")
    if not isinstance(entries, list):
        raise ParseError(f"{path}: missing 'poses' list")
    poses = []
    for k, entry in enumerate(entries):
        where = f"{path}: poses[{k}]"
        if not isinstance(entry, dict) or "R" not in entry or "t" not in entry:
            raise ParseError(f"{where} needs 'R' and 't'")
        R, t = entry["R"], entry["t"]
        if not (isinstance(R, list) and len(R) == 9):
            raise ParseError(f"{where}: 'R' must be a list of 9 numbers")
        if not (isinstance(t, list) and len(t) == 3):
            raise ParseError(f"{where}: 't' must be a list of 3 numbers")
        try:
            poses.append(
                RigidTransform(
                    np.array(R, dtype=float).reshape(3, 3),
                    np.array(t, dtype=float),
                )
            )
        except ValueError as exc:
            raise ParseError(f"{where}: {exc}") from exc
    return tuple(poses)


def cmd_ensemble(args) -> int:
    RunConfig(
        "ensemble",
        inputs=tuple(args.predictions) + (args.poses,),
        outputs=(args.out,),
        options={"tau": args.tau},
    )
    poses = _read_poses(args.poses)
    if len(poses) != len(args.predictions):
        print(
            f"usage error: {len(args.predictions)} prediction files "
            f"but {len(poses)} poses",
            file=sys.stderr,
        )
        return EXIT_USAGE
    scenes = [read_scene(p) for p in args.predictions]
    per_view = [(pose, scene.detections) for pose, scene in zip(poses, scenes)]
    n_in = sum(len(scene.detections) for scene in scenes)
    fused = fuse_views(per_view, args.tau)
    record = SceneRecord(
        scene_id="fused",
        camera=scenes[0].camera,
        pose=RigidTransform.identity(),
        objects=(),
        detections=fused,
    )
    write_scene(record, args.out)
    print(
        f"fused {n_in} detections from {len(scenes)} views into "
        f"{len(fused)} (tau {args.tau})"
    )
    return EXIT_OK


# --- gradcheck --------------------------------------------------------


def _random_params(rng) -> CuboidParams:
    return CuboidParams(
        u=rng.uniform(0.2, 0.8),
        v=rng.uniform(0.2, 0.8),
        z_v=rng.uniform(3.0, 8.0),
        wbar=rng.uniform(-0.5, 0.7),
        hbar=rng.uniform(-0.5, 0.7),
        lbar=rng.uniform(-0.5, 0.7),
        p=rng.standard_normal(6),
        mu=rng.uniform(-0.5, 0.5),
    )


def _fd_gradient(params, gt, roi, intr, h=1e-5) -> np.ndarray:
    vec = params.as_vector()
    out = np.zeros(vec.size)
    for i in range(vec.size):
        hi, lo = vec.copy(), vec.copy()
        hi[i] += h
        lo[i] -= h
        f_hi = detection_loss(CuboidParams.from_vector(hi), gt, roi, intr).total
        f_lo = detection_loss(CuboidParams.from_vector(lo), gt, roi, intr).total
        out[i] = (f_hi - f_lo) / (2.0 * h)
    return out


def cmd_gradcheck(args) -> int:
    if args.n_cases < 1:
        raise _UsageError("--n-cases must be at least 1")
    rng = np.random.default_rng(args.seed)
    roi, intr = _TOY_ROI, _TOY_INTR
    worst = 0.0
    produced = 0
    attempts = 0
    while produced < args.n_cases:
        attempts += 1
        if attempts > 50 * args.n_cases:
            raise _UsageError("could not sample enough kink-free cases")
        gt = decode_cuboid(_random_params(rng), roi, intr)
        pred = _random_params(rng)
        # Stay clear of the L1 kinks so central differences see a smooth
        # function within the stencil.
        diff = box_corners(decode_cuboid(pred, roi, intr)) - box_corners(gt)
        if np.abs(diff).min() < 1e-3:
            continue
        try:
            ana = loss_gradient(pred, gt, roi, intr)
        except NonDifferentiablePoint:
            continue
        if args.corrupt:
            ana = ana.copy()
            ana[0] += 1e-2
        fd = _fd_gradient(pred, gt, roi, intr)
        rel = np.max(np.abs(ana - fd) / np.maximum(1.0, np.abs(ana)))
        worst = max(worst, float(rel))
        produced += 1
    print(f"max relative gradient error: {worst:.3e} ({produced} cases)")
    if worst > GRADCHECK_TOL:
        print(
            f"gradient check failed: {worst:.3e} > {GRADCHECK_TOL:.0e}",
            file=sys.stderr,
        )
        return EXIT_CHECK
    return EXIT_OK


# --- toytrain ---------------------------------------------------------


def cmd_toytrain(args) -> int:
    if args.steps < 1:
        raise _UsageError("--steps must be at least 1")
    out = args.out_dir
    RunConfig(
        "toytrain",
        outputs=(os.path.join(out, "fit_result.json"),),
        options={"steps": args.steps, "lr": args.lr},
    )
    rng = np.random.default_rng(args.seed)
    roi, intr = _TOY_ROI, _TOY_INTR
    gt_params = _random_params(rng)
    gt = decode_cuboid(gt_params, roi, intr)
    init = CuboidParams.from_vector(
        gt_params.as_vector() * (1.0 + rng.uniform(-0.05, 0.05, 13))
    )

    stride = max(1, args.steps // 200)
    history = []

    def record(k, params):
        if k % stride == 0 or k == args.steps - 1:
            at = detection_loss(params, gt, roi, intr)
            history.append((k, at.l_3d, at.mu, at.total))

    fitted = fit_cuboid(
        gt, roi, intr, init, steps=args.steps, lr=args.lr, on_step=record
    )
    final = detection_loss(fitted, gt, roi, intr)
    mu_star = math.log(SQRT2 * final.l_3d) if final.l_3d > 0.0 else None

    doc = {
        "format_version": FORMAT_VERSION,
        "seed": args.seed,
        "steps": args.steps,
        "lr": args.lr,
        "final_corner_l1": final.l_3d,
        "final_mu": final.mu,
        "mu_star": mu_star,
        "mu_gap": abs(final.mu - mu_star) if mu_star is not None else None,
        "params": fitted.as_vector().tolist(),
    }
    write_text_atomic(os.path.join(out, "fit_result.json"), _json_text(doc))
    rows = [("step", "corner_l1", "mu", "total")]
    rows += [(k, l3, m, tot) for k, l3, m, tot in history]
    save_csv(rows, os.path.join(out, "fit_losses.csv"))
    save_figure(
        loss_curve_figure(
            [r[0] for r in history], [r[1] for r in history], [r[2] for r in history]
        ),
        os.path.join(out, "fit_loss_curve.png"),
    )
    print(
        f"fit: corner L1 {final.l_3d:.3e}, mu {final.mu:.4f}"
        + (f" (stationary {mu_star:.4f})" if mu_star is not None else "")
    )
    return EXIT_OK


# --- parser -----------------------------------------------------------


def _build_parser() -> _Parser:
    parser = _Parser(prog="epibox", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-objects", type=int, default=10)
    p.add_argument("--vocab", default=",".join(DEFAULT_VOCAB))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="AP3D of predictions against ground truth")
    p.add_argument("--predictions", required=True)
    p.add_argument("--ground-truth", required=True)
    p.add_argument("--thresholds", default=None,
                   help="comma-separated IoU sweep (default 0.05..0.50)")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("warp", help="epipolar-warp a feature grid")
    p.add_argument("--grid", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--rot-deg", default="0,0,0",
                   help="target-to-source rotation, degrees about x,y,z (x first)")
    p.add_argument("--t", default="0,0,0", help="target-to-source translation")
    p.add_argument("--fx", type=float, default=None)
    p.add_argument("--fy", type=float, default=None)
    p.add_argument("--px", type=float, default=None)
    p.add_argument("--py", type=float, default=None)
    p.add_argument("--samples", type=int, default=64)
    p.add_argument("--mode", choices=[m.value for m in AggregatorMode],
                   default=AggregatorMode.MEAN.value)
    p.add_argument("--oov", choices=[m.value for m in OutOfViewPolicy],
                   default=OutOfViewPolicy.ZERO.value)
    p.add_argument("--reference", action="store_true",
                   help="run the planar-scene check and print its mean error")
    p.set_defaults(func=cmd_warp)

    p = sub.add_parser("ensemble", help="fuse per-view detections with 3D NMS")
    p.add_argument("--predictions", nargs="+", required=True)
    p.add_argument("--poses", required=True,
                   help="JSON file: {format_version, poses: [{R, t}, ...]}")
    p.add_argument("--tau", type=float, default=DEFAULT_NMS_TAU)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("gradcheck", help="analytic gradient vs central differences")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-cases", type=int, default=100)
    p.add_argument("--corrupt", action="store_true",
                   help="perturb one analytic component (negative control)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("toytrain", help="fit one cuboid by gradient descent")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_toytrain)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except SchemaError as exc:  # VersionMismatch included
        print(f"schema error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except PlacementFailure as exc:
        print(f"placement failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
