"""Synthetic posed scenes, prediction degradation, and the scene file format.

Scenes are small indoor-style layouts: oriented boxes scattered through
the frustum of a fixed 640x480 camera, stored in world coordinates with
a world-to-camera pose per view.  They exist to drive the evaluator and
the warp/ensemble pipelines with inputs whose ground truth is known
exactly, so consumer tests can pin their expectations.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .cuboid import Box3D, rot6d_to_matrix
from .errors import NonPositiveDepth, ParseError, PlacementFailure, VersionMismatch
from .eval3d import Detection
from .featgrid import FeatureGrid
from .geometry import (
    CameraIntrinsics,
    RigidTransform,
    backproject,
    project,
    rotation_from_quaternion,
    rotation_x,
    rotation_y,
)
from .util import write_text_atomic

FORMAT_VERSION = 1

DEFAULT_VOCAB = ("chair", "table", "sofa", "bed", "cabinet")

# Placement envelope: the depth band, the minimum distance between any
# two object centers, and the sampling budget after which gen_scene
# gives up on the requested layout.
DEPTH_RANGE = (1.0, 8.0)
MIN_CENTER_SEPARATION = 0.2
MAX_PLACEMENT_ATTEMPTS = 10_000

_DEFAULT_CAMERA = CameraIntrinsics(
    fx=500.0, fy=500.0, px=320.0, py=240.0, width=640, height=480
)


@dataclass(frozen=True, eq=False)
class SceneObject:
    category: str
    box: Box3D

    def __post_init__(self):
        if not isinstance(self.category, str) or not self.category:
            raise ValueError("category must be a non-empty string")


@dataclass(frozen=True, eq=False)
class SceneRecord:
    """One posed view of a world-frame object layout.

    `pose` maps world coordinates to camera coordinates.  Object boxes
    live in the world frame and must sit strictly in front of this
    view's camera.  `grids` is an in-memory attachment only: the scene
    file format does not carry feature grids (store those separately
    with featgrid.save_feature_grid).
    """

    scene_id: str
    camera: CameraIntrinsics
    pose: RigidTransform
    objects: tuple
    detections: tuple = ()
    grids: dict = field(default_factory=dict)

    def __post_init__(self):
        if not isinstance(self.scene_id, str) or not self.scene_id:
            raise ValueError("scene_id must be a non-empty string")
        object.__setattr__(self, "objects", tuple(self.objects))
        object.__setattr__(self, "detections", tuple(self.detections))
        for obj in self.objects:
            if not isinstance(obj, SceneObject):
                raise ValueError("objects must be SceneObject instances")
            depth = self.pose.apply(obj.box.center)[2]
            if depth <= 0.0:
                raise NonPositiveDepth(
                    f"object center {obj.box.center.tolist()} has camera-frame "
                    f"depth {depth!r}"
                )
        for det in self.detections:
            if not isinstance(det, Detection):
                raise ValueError("detections must be Detection instances")
        for name, grid in self.grids.items():
            if not isinstance(name, str) or not isinstance(grid, FeatureGrid):
                raise ValueError("grids must map names to FeatureGrid values")


def center_visible(record: SceneRecord, center_world: np.ndarray) -> bool:
    """True when the world point is in front of the camera and projects
    inside the image rectangle [0, W) x [0, H)."""
    cam = record.pose.apply(np.asarray(center_world, dtype=float))
    if cam[2] <= 0.0:
        return False
    uv = project(record.camera, cam)
    return bool(
        0.0 <= uv[0] < record.camera.width and 0.0 <= uv[1] < record.camera.height
    )


def gen_scene(seed: int, n_objects: int, vocab=DEFAULT_VOCAB) -> SceneRecord:
    """Deterministic scene synthesis by rejection sampling.

    Each candidate draws a category, a pixel, a depth in DEPTH_RANGE, a
    dimension triple, and a 6D rotation; the center is the pixel
    back-projected at that depth, so every accepted center projects
    inside the image by construction.  Candidates closer than
    MIN_CENTER_SEPARATION to an accepted center are rejected, and the
    whole scene fails once MAX_PLACEMENT_ATTEMPTS candidates have been
    spent.  The view pose is the identity: the world frame is this
    camera's frame.
    """
    if n_objects < 0:
        raise ValueError("n_objects must be non-negative")
    vocab = tuple(vocab)
    if n_objects > 0 and not vocab:
        raise ValueError("vocab must be non-empty when objects are requested")
    rng = np.random.default_rng(seed)
    camera = _DEFAULT_CAMERA
    centers = np.empty((min(n_objects, MAX_PLACEMENT_ATTEMPTS), 3))
    placed = []
    attempts = 0
    while len(placed) < n_objects:
        if attempts >= MAX_PLACEMENT_ATTEMPTS:
            raise PlacementFailure(
                f"placed {len(placed)} of {n_objects} objects in "
                f"{attempts} attempts"
            )
        attempts += 1
        category = vocab[rng.integers(len(vocab))]
        u = rng.uniform(0.0, camera.width)
        v = rng.uniform(0.0, camera.height)
        depth = rng.uniform(*DEPTH_RANGE)
        dims = rng.uniform(0.3, 1.5, size=3)
        p = rng.standard_normal(6)
        center = backproject(camera, np.array([u, v]), depth)
        if placed:
            gaps = np.linalg.norm(centers[: len(placed)] - center, axis=1)
            if gaps.min() < MIN_CENTER_SEPARATION:
                continue
        centers[len(placed)] = center
        placed.append(
            SceneObject(category, Box3D(center=center, dims=dims, R=rot6d_to_matrix(p)))
        )
    return SceneRecord(
        scene_id=f"scene-{seed:08d}",
        camera=camera,
        pose=RigidTransform.identity(),
        objects=tuple(placed),
    )


def _axis_angle_rotation(axis: np.ndarray, angle: float) -> np.ndarray:
    half = 0.5 * angle
    return rotation_from_quaternion(
        np.array([math.cos(half), *(math.sin(half) * axis)])
    )


def perturb_predictions(
    scene: SceneRecord,
    sigma_center: float,
    sigma_dims: float,
    sigma_rot_deg: float,
    drop_rate: float,
    seed: int,
):
    """Gaussian-degraded copies of the scene's ground truth.

    Each box receives a center offset, a log-space dimension rescale,
    and a random-axis rotation kick.  The score is
    exp(-(|dc| + |dlog| + |dtheta|)) with the three magnitudes in
    meters, log-units, and radians: an unperturbed copy scores exactly
    1, and scores stay correlated with the actual damage.  A
    round(drop_rate * n) subset is then removed; survivors keep the
    ground-truth ordering.
    """
    for name, val in (
        ("sigma_center", sigma_center),
        ("sigma_dims", sigma_dims),
        ("sigma_rot_deg", sigma_rot_deg),
    ):
        if not val >= 0.0:
            raise ValueError(f"{name} must be non-negative")
    if not 0.0 <= drop_rate < 1.0:
        raise ValueError("drop_rate must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    dets = []
    for obj in scene.objects:
        d_center = sigma_center * rng.standard_normal(3)
        d_log = sigma_dims * rng.standard_normal(3)
        axis = rng.standard_normal(3)
        axis = axis / np.linalg.norm(axis)
        angle = math.radians(sigma_rot_deg) * rng.standard_normal()
        box = obj.box
        noisy = Box3D(
            center=box.center + d_center,
            dims=box.dims * np.exp(d_log),
            R=_axis_angle_rotation(axis, angle) @ box.R,
        )
        damage = float(np.linalg.norm(d_center) + np.linalg.norm(d_log) + abs(angle))
        dets.append(Detection(box=noisy, category=obj.category, score=math.exp(-damage)))
    n_drop = int(round(drop_rate * len(dets)))
    if n_drop:
        dropped = set(rng.choice(len(dets), size=n_drop, replace=False).tolist())
        dets = [d for i, d in enumerate(dets) if i not in dropped]
    return tuple(dets)


class PairCriterion(enum.Enum):
    LESS_THAN = "LessThan"
    AT_LEAST = "AtLeast"


@dataclass(frozen=True)
class PairSelection:
    overlap_fraction: float = 0.3
    criterion: PairCriterion = PairCriterion.AT_LEAST

    def __post_init__(self):
        if not 0.0 <= self.overlap_fraction <= 1.0:
            raise ValueError("overlap_fraction must lie in [0, 1]")
        if not isinstance(self.criterion, PairCriterion):
            raise ValueError("criterion must be a PairCriterion")


def _directed_overlap(a: SceneRecord, b: SceneRecord) -> float:
    visible = [
        obj.box.center for obj in a.objects if center_visible(a, obj.box.center)
    ]
    if not visible:
        return 0.0
    shared = sum(1 for c in visible if center_visible(b, c))
    return shared / len(visible)


def view_overlap(a: SceneRecord, b: SceneRecord) -> float:
    """Symmetric center-visibility overlap between two views of one world.

    The directed overlap A->B is the fraction of A's visible object
    centers that are also visible in B; the symmetric value is the min
    of the two directions, since a pair is only as useful as its weaker
    side.  A view with no visible centers has overlap 0 with everything.
    """
    return min(_directed_overlap(a, b), _directed_overlap(b, a))


def select_pairs(views, rule: PairSelection = PairSelection()):
    """Unordered view pairs whose symmetric overlap passes the rule.

    Views must share a world frame.  Each unordered pair is considered
    once; the result lists (scene_id_i, scene_id_j) in input order.
    """
    views = tuple(views)
    kept = []
    for i in range(len(views)):
        for j in range(i + 1, len(views)):
            overlap = view_overlap(views[i], views[j])
            if rule.criterion is PairCriterion.AT_LEAST:
                keep = overlap >= rule.overlap_fraction
            else:
                keep = overlap < rule.overlap_fraction
            if keep:
                kept.append((views[i].scene_id, views[j].scene_id))
    return tuple(kept)


@dataclass(frozen=True, eq=False)
class PlanarWarpCase:
    """Planar-scene warp reference: source features plus the analytically
    expected warp output.  `valid` marks target texels whose plane-induced
    correspondence lands inside the source grid."""

    source: FeatureGrid
    expected: FeatureGrid
    valid: np.ndarray
    intr_src: CameraIntrinsics
    intr_tgt: CameraIntrinsics
    rel: RigidTransform


def planar_warp_case(size: int = 64, channels: int = 8) -> PlanarWarpCase:
    """Textured fronto-parallel plane viewed under a lateral camera shift.

    The plane sits at depth 4 in the target camera; the target-to-source
    motion is a lateral translation (zero z component) plus a small
    rotation.  Zero forward translation puts the source epipole at
    infinity, so every source epipolar line shares one direction; the
    texture is a per-channel linear ramp constant along that direction,
    which makes the value at every sample of a texel's epipolar line
    equal the value at its true correspondence.  The mean deviation of a
    warp from `expected` therefore measures the operator end to end.
    """
    if size < 2 or channels < 1:
        raise ValueError("need size >= 2 and channels >= 1")
    g = size
    intr = CameraIntrinsics(
        fx=1.2 * g, fy=1.2 * g, px=(g - 1) / 2.0, py=(g - 1) / 2.0, width=g, height=g
    )
    rel = RigidTransform(
        rotation_y(math.radians(3.0)) @ rotation_x(math.radians(-2.0)),
        np.array([0.35, 0.22, 0.0]),
    )
    direction = np.array([intr.fx * rel.t[0], intr.fy * rel.t[1]])
    direction = direction / np.linalg.norm(direction)
    normal = np.array([-direction[1], direction[0]])

    bases = 0.3 + 0.1 * np.arange(channels)
    slopes = 0.004 * (1.0 + np.arange(channels))
    cols, rows = np.meshgrid(np.arange(g, dtype=float), np.arange(g, dtype=float))
    ramp = normal[0] * cols + normal[1] * rows
    source = FeatureGrid(bases + slopes * ramp[:, :, None])

    depth = 4.0
    rays = np.stack(
        [(cols - intr.px) / intr.fx, (rows - intr.py) / intr.fy, np.ones_like(cols)],
        axis=-1,
    )
    x_src = (depth * rays) @ rel.R.T + rel.t
    z = x_src[..., 2]
    u = intr.fx * x_src[..., 0] / z + intr.px
    v = intr.fy * x_src[..., 1] / z + intr.py
    valid = (z > 0.0) & (u >= 0.0) & (u <= g - 1.0) & (v >= 0.0) & (v <= g - 1.0)
    expected = bases + slopes * (normal[0] * u + normal[1] * v)[:, :, None]
    expected = np.where(valid[:, :, None], expected, 0.0)
    return PlanarWarpCase(
        source=source,
        expected=FeatureGrid(expected),
        valid=valid,
        intr_src=intr,
        intr_tgt=intr,
        rel=rel,
    )


# --- scene file format ------------------------------------------------
#
# One UTF-8 JSON document per scene:
#   { format_version, scene_id,
#     camera{fx,fy,px,py,width,height},
#     pose{R[9],t[3]},                     # world -> camera, R row-major
#     objects[{category,center[3],dims[3],R[9]}],
#     detections?[{category,center[3],dims[3],R[9],score}] }
# Reals carry 17 significant digits, which reproduces any float64
# exactly, so write-then-read is the identity on every field.


def _fmt_real(x: float) -> str:
    return format(float(x), ".17g")


def _fmt_reals(values) -> str:
    flat = np.asarray(values, dtype=float).ravel()
    return "[" + ", ".join(_fmt_real(v) for v in flat) + "]"


def _box_entry(category: str, box: Box3D, score=None) -> str:
    fields = [
        f'"category": {json.dumps(category)}',
        f'"center": {_fmt_reals(box.center)}',
        f'"dims": {_fmt_reals(box.dims)}',
        f'"R": {_fmt_reals(box.R)}',
    ]
    if score is not None:
        fields.append(f'"score": {_fmt_real(score)}')
    return "{" + ", ".join(fields) + "}"


def scene_to_json(record: SceneRecord) -> str:
    cam, pose = record.camera, record.pose
    out = ["{"]
    out.append(f'  "format_version": {FORMAT_VERSION},')
    out.append(f'  "scene_id": {json.dumps(record.scene_id)},')
    out.append(
        '  "camera": {'
        f'"fx": {_fmt_real(cam.fx)}, "fy": {_fmt_real(cam.fy)}, '
        f'"px": {_fmt_real(cam.px)}, "py": {_fmt_real(cam.py)}, '
        f'"width": {cam.width}, "height": {cam.height}}},'
    )
    out.append(f'  "pose": {{"R": {_fmt_reals(pose.R)}, "t": {_fmt_reals(pose.t)}}},')
    out.append('  "objects": [')
    for k, obj in enumerate(record.objects):
        comma = "," if k + 1 < len(record.objects) else ""
        out.append("    " + _box_entry(obj.category, obj.box) + comma)
    out.append('  ],' if record.detections else "  ]")
    if record.detections:
        out.append('  "detections": [')
        for k, det in enumerate(record.detections):
            comma = "," if k + 1 < len(record.detections) else ""
            out.append("    " + _box_entry(det.category, det.box, det.score) + comma)
        out.append("  ]")
    out.append("}")
    return "\n".join(out) + "\n"


def _require(obj, key: str, where: str):
    if not isinstance(obj, dict):
        raise ParseError(f"{where} must be a JSON object")
    if key not in obj:
        raise ParseError(f"{where}: missing field '{key}'")
    return obj[key]


def _real(obj, key: str, where: str) -> float:
    v = _require(obj, key, where)
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ParseError(f"{where}.{key} must be a number")
    return float(v)


def _int(obj, key: str, where: str) -> int:
    v = _require(obj, key, where)
    if isinstance(v, bool) or not isinstance(v, int):
        raise ParseError(f"{where}.{key} must be an integer")
    return v

def _reals(obj, key: str, where: str, n: int) -> np.ndarray:
    v = _require(obj, key, where)
    ok = isinstance(v, list) and len(v) == n and all(
        not isinstance(x, bool) and isinstance(x, (int, float)) for x in v
    )
    if not ok:
        raise ParseError(f"{where}.{key} must be a list of {n} numbers")
    return np.array([float(x) for x in v])


def _parse_box(doc, where: str):
    category = _require(doc, "category", where)
    if not isinstance(category, str):
        raise ParseError(f"{where}.category must be a string")
    try:
        box = Box3D(
            center=_reals(doc, "center", where, 3),
            dims=_reals(doc, "dims", where, 3),
            R=_reals(doc, "R", where, 9).reshape(3, 3),
        )
    except ValueError as exc:
        raise ParseError(f"{where}: {exc}") from exc
    return category, box


def scene_from_json(text: str) -> SceneRecord:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(
            f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from exc
    if not isinstance(doc, dict):
        raise ParseError("scene document must be a JSON object")
    version = _require(doc, "format_version", "scene")
    if version != FORMAT_VERSION:
        raise VersionMismatch(
            f"format_version {version!r} is not supported (expected {FORMAT_VERSION})"
        )
    scene_id = _require(doc, "scene_id", "scene")
    if not isinstance(scene_id, str) or not scene_id:
        raise ParseError("scene.scene_id must be a non-empty string")

    cam_doc = _require(doc, "camera", "scene")
    try:
        camera = CameraIntrinsics(
            fx=_real(cam_doc, "fx", "camera"),
            fy=_real(cam_doc, "fy", "camera"),
            px=_real(cam_doc, "px", "camera"),
            py=_real(cam_doc, "py", "camera"),
            width=_int(cam_doc, "width", "camera"),
            height=_int(cam_doc, "height", "camera"),
        )
    except ValueError as exc:
        raise ParseError(f"camera: {exc}") from exc

    pose_doc = _require(doc, "pose", "scene")
    try:
        pose = RigidTransform(
            R=_reals(pose_doc, "R", "pose", 9).reshape(3, 3),
            t=_reals(pose_doc, "t", "pose", 3),
        )
    except ValueError as exc:
        raise ParseError(f"pose: {exc}") from exc

    objects_doc = _require(doc, "objects", "scene")
    if not isinstance(objects_doc, list):
        raise ParseError("scene.objects must be a list")
    objects = []
    for k, entry in enumerate(objects_doc):
        category, box = _parse_box(entry, f"objects[{k}]")
        objects.append(SceneObject(category, box))

    detections = []
    if "detections" in doc:
        det_doc = doc["detections"]
        if not isinstance(det_doc, list):
            raise ParseError("scene.detections must be a list")
        for k, entry in enumerate(det_doc):
            where = f"detections[{k}]"
            category, box = _parse_box(entry, where)
            score = _real(entry, "score", where)
            try:
                detections.append(Detection(box=box, category=category, score=score))
            except ValueError as exc:
                raise ParseError(f"{where}: {exc}") from exc

    try:
        return SceneRecord(
            scene_id=scene_id,
            camera=camera,
            pose=pose,
            objects=tuple(objects),
            detections=tuple(detections),
        )
    except (ValueError, NonPositiveDepth) as exc:
        raise ParseError(f"scene: {exc}") from exc


def write_scene(record: SceneRecord, path) -> None:
    write_text_atomic(str(path), scene_to_json(record))


def read_scene(path) -> SceneRecord:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ParseError(f"cannot read scene file {path}: {exc}") from exc
    return scene_from_json(text)
