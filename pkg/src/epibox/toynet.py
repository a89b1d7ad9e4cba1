"""Toy realization of the diffusion-feature detection pipeline.

A deliberately tiny stack, just enough structure to make the contracts
testable: a linear-beta noise schedule, control blocks built from two 3x3
conv + tanh stages with zero-initialized 1x1 side convolutions, a variant
that runs the epipolar warp between the copied stack and the output zero
conv, elementwise three-branch fusion, and the uncertainty-weighted corner
loss with a hand-derived analytic gradient.

Everything is numpy, single-threaded, and deterministic given its inputs.
"""

import json
import math
import os
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .cuboid import (
    CORNER_SIGNS,
    Box3D,
    CuboidParams,
    Roi2D,
    VirtualDepthConfig,
    box_corners,
    decode_cuboid,
    rot6d_to_matrix,
    viewing_ray_rotation,
    virtual_to_metric_depth,
)
from .errors import (
    NonDifferentiablePoint,
    NonPositiveDepth,
    ParseError,
    SchemaError,
    VersionMismatch,
)
from .featgrid import (
    FeatureGrid,
    WarpConfig,
    epipolar_warp,
    load_feature_grid,
    save_feature_grid,
)
from .geometry import CameraIntrinsics, RigidTransform, skew
from .util import write_text_atomic

SQRT2 = math.sqrt(2.0)

# Corner residuals closer to zero than this sit on an L1 kink.
KINK_EPS = 1e-12

TOY_CHANNELS = 8
TOY_STAGES = 2

_SCHEDULE_TOL = 1e-12
_WEIGHTS_FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# Noise schedule


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Per-step alphas and their running products; index k holds step k+1."""

    T: int
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=float).reshape(-1)
        bar = np.asarray(self.alpha_bar, dtype=float).reshape(-1)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "alpha_bar", bar)
        if self.T < 1:
            raise ValueError("T must be at least 1")
        if alpha.shape != (self.T,) or bar.shape != (self.T,):
            raise ValueError("alpha and alpha_bar must both hold T entries")
        if not np.all((alpha > 0.0) & (alpha < 1.0)):
            raise ValueError("every alpha must lie strictly inside (0, 1)")
        if not np.all(np.diff(bar) < 0.0):
            raise ValueError("alpha_bar must be strictly decreasing")
        prev = np.concatenate([[1.0], bar[:-1]])
        drift = np.abs(bar - prev * alpha).max()
        if drift > _SCHEDULE_TOL:
            raise ValueError(f"alpha_bar inconsistent with alpha (drift {drift:.3e})")


def make_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear beta schedule: beta spaced over T steps, alpha_k = 1 - beta_k."""
    if T < 1:
        raise ValueError("T must be at least 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    beta = np.linspace(beta_start, beta_end, T)
    alpha = 1.0 - beta
    return NoiseSchedule(T=T, alpha=alpha, alpha_bar=np.cumprod(alpha))


def noise_mix(x: np.ndarray, alpha_bar_t: float, eps: np.ndarray) -> np.ndarray:
    """sqrt(ab) * x + sqrt(1 - ab) * eps, the forward-diffusion interpolant."""
    if not 0.0 <= alpha_bar_t <= 1.0:
        raise ValueError(f"alpha_bar_t must lie in [0, 1], got {alpha_bar_t!r}")
    x = np.asarray(x, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if x.shape != eps.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {eps.shape}")
    return math.sqrt(alpha_bar_t) * x + math.sqrt(1.0 - alpha_bar_t) * eps


def add_noise(x: FeatureGrid, t: int, eps: FeatureGrid, sched: NoiseSchedule) -> FeatureGrid:
    if not 1 <= t <= sched.T:
        raise ValueError(f"t must lie in [1, {sched.T}], got {t}")
    if x.data.shape != eps.data.shape:
        raise ValueError(f"shape mismatch: {x.data.shape} vs {eps.data.shape}")
    return FeatureGrid(noise_mix(x.data, float(sched.alpha_bar[t - 1]), eps.data))


def default_feature_step(sched: NoiseSchedule) -> int:
    """Timestep used for single-pass feature extraction: T // 5, at least 1."""
    return max(1, sched.T // 5)


# ---------------------------------------------------------------------------
# Blocks


@dataclass(frozen=True, eq=False)
class Conv:
    """Same-padded 2D convolution; kernel (kh, kw, cin, cout) with odd taps."""

    kernel: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        kernel = np.asarray(self.kernel, dtype=float)
        bias = np.asarray(self.bias, dtype=float)
        if kernel.ndim != 4 or kernel.shape[0] % 2 == 0 or kernel.shape[1] % 2 == 0:
            raise ValueError(f"kernel must be (odd, odd, cin, cout), got {kernel.shape}")
        if bias.shape != (kernel.shape[3],):
            raise ValueError("bias length must match output channels")
        if not (np.isfinite(kernel).all() and np.isfinite(bias).all()):
            raise ValueError("conv weights must be finite")
        object.__setattr__(self, "kernel", kernel)
        object.__setattr__(self, "bias", bias)

    def apply(self, x: np.ndarray) -> np.ndarray:
        kh, kw, cin, cout = self.kernel.shape
        if x.ndim != 3 or x.shape[2] != cin:
            raise ValueError(f"expected (H, W, {cin}) input, got {x.shape}")
        h, w = x.shape[:2]
        padded = np.pad(x, ((kh // 2, kh // 2), (kw // 2, kw // 2), (0, 0)))
        out = np.broadcast_to(self.bias, (h, w, cout)).copy()
        for i in range(kh):
            for j in range(kw):
                out += padded[i:i + h, j:j + w, :] @ self.kernel[i, j]
        return out


@dataclass(frozen=True, eq=False)
class BlockWeights:
    """Frozen base stack, its trainable copy, and the two 1x1 side convs.

    `zin` feeds the condition into the copy; `zout` gates the copy's output
    back into the sum.  Both start at exactly zero so a fresh block is a
    no-op around the base stack.  `warp_enabled` marks blocks that run the
    epipolar warp (the "final two stages" of the geometric branch).
    """

    base: Tuple[Conv, ...]
    copy: Tuple[Conv, ...]
    zin: Conv
    zout: Conv
    warp_enabled: bool = False

    def __post_init__(self):
        object.__setattr__(self, "base", tuple(self.base))
        object.__setattr__(self, "copy", tuple(self.copy))
        if not self.base or len(self.base) != len(self.copy):
            raise ValueError("base and copy must hold the same positive stage count")
        for name, conv in (("zin", self.zin), ("zout", self.zout)):
            if conv.kernel.shape[:2] != (1, 1):
                raise ValueError(f"{name} must be a 1x1 convolution")


def init_block_weights(
    rng: np.random.Generator,
    channels: int = TOY_CHANNELS,
    stages: int = TOY_STAGES,
    warp_enabled: bool = False,
) -> BlockWeights:
    """Random base stack, copy initialized equal to it, zero side convs.

    Weights are rounded through float32 so the serialized form round-trips
    exactly.
    """
    scale = 1.0 / math.sqrt(9.0 * channels)
    base = []
    for _ in range(stages):
        kernel = rng.normal(0.0, scale, size=(3, 3, channels, channels))
        kernel = kernel.astype(np.float32).astype(np.float64)
        base.append(Conv(kernel=kernel, bias=np.zeros(channels)))
    copy = tuple(Conv(kernel=c.kernel.copy(), bias=c.bias.copy()) for c in base)

    def zero_conv():
        return Conv(kernel=np.zeros((1, 1, channels, channels)), bias=np.zeros(channels))

    return BlockWeights(
        base=tuple(base), copy=copy, zin=zero_conv(), zout=zero_conv(),
        warp_enabled=warp_enabled,
    )


def _stack_forward(x: np.ndarray, convs: Tuple[Conv, ...]) -> np.ndarray:
    h = x
    for conv in convs:
        h = np.tanh(conv.apply(h))
    return h


def base_forward(x: FeatureGrid, w: BlockWeights) -> FeatureGrid:
    """The frozen branch alone."""
    return FeatureGrid(_stack_forward(x.data, w.base))


def _check_condition_shape(x: FeatureGrid, c: FeatureGrid) -> None:
    if x.data.shape[:2] != c.data.shape[:2]:
        raise ValueError(
            f"feature and condition grids disagree: {x.data.shape} vs {c.data.shape}"
        )


def controlnet_block_forward(x: FeatureGrid, c: FeatureGrid, w: BlockWeights) -> FeatureGrid:
    """base(x) + zout(copy(x + zin(c)))."""
    _check_condition_shape(x, c)
    h = _stack_forward(x.data + w.zin.apply(c.data), w.copy)
    return FeatureGrid(_stack_forward(x.data, w.base) + w.zout.apply(h))


def geometric_block_forward(
    x: FeatureGrid,
    c: FeatureGrid,
    rel: RigidTransform,
    intr: CameraIntrinsics,
    w: BlockWeights,
    cfg: WarpConfig = WarpConfig(),
) -> FeatureGrid:
    """Control block with the epipolar warp between the copy and zout.

    The warp runs only on blocks flagged `warp_enabled`; with the identity
    transform it is an exact pass-through, so the result collapses to
    `controlnet_block_forward`.
    """
    _check_condition_shape(x, c)
    h = _stack_forward(x.data + w.zin.apply(c.data), w.copy)
    if w.warp_enabled:
        h = epipolar_warp(FeatureGrid(h), intr, intr, rel, cfg).data
    return FeatureGrid(_stack_forward(x.data, w.base) + w.zout.apply(h))


def fuse_branches(f_base: FeatureGrid, f_geo: FeatureGrid, f_sem: FeatureGrid) -> FeatureGrid:
    """Elementwise sum in fixed order: base, then geometric, then semantic."""
    if not (f_base.data.shape == f_geo.data.shape == f_sem.data.shape):
        raise ValueError(
            "branch shapes disagree: "
            f"{f_base.data.shape}, {f_geo.data.shape}, {f_sem.data.shape}"
        )
    return FeatureGrid((f_base.data + f_geo.data) + f_sem.data)


# ---------------------------------------------------------------------------
# Detection loss


@dataclass(frozen=True)
class LossBreakdown:
    """total = l_rpn + l_2d + sqrt(2) * exp(-mu) * l_3d + mu."""

    l_rpn: float
    l_2d: float
    l_3d: float
    mu: float
    total: float

    def __post_init__(self):
        for name in ("l_rpn", "l_2d", "l_3d"):
            val = getattr(self, name)
            if not (np.isfinite(val) and val >= 0.0):
                raise ValueError(f"{name} must be a finite non-negative real")
        if not (np.isfinite(self.mu) and np.isfinite(self.total)):
            raise ValueError("mu and total must be finite")
        recon = self.l_rpn + self.l_2d + SQRT2 * math.exp(-self.mu) * self.l_3d + self.mu
        if abs(self.total - recon) > 1e-12:
            raise ValueError(f"total {self.total!r} breaks the decomposition ({recon!r})")

    @classmethod
    def build(cls, l_rpn: float, l_2d: float, l_3d: float, mu: float) -> "LossBreakdown":
        total = l_rpn + l_2d + SQRT2 * math.exp(-mu) * l_3d + mu
        return cls(l_rpn=l_rpn, l_2d=l_2d, l_3d=l_3d, mu=mu, total=total)


_LOSS_MODES = ("full", "uv", "z", "dims", "rot")


def _mode_corners(pred, gt_box, roi, intr, cfg, allocentric, mode):
    # Disentangled variants substitute ground truth for every decoded
    # quantity except the named group.
    if mode == "full":
        return box_corners(decode_cuboid(pred, roi, intr, cfg, allocentric))
    z_gt = float(gt_box.center[2])
    if z_gt <= 0.0:
        raise NonPositiveDepth("ground-truth center must lie in front of the camera")
    if mode == "uv":
        u_px = roi.rx + pred.u * roi.rw
        v_px = roi.ry + pred.v * roi.rh
        center = np.array(
            [(z_gt / intr.fx) * (u_px - intr.px), (z_gt / intr.fy) * (v_px - intr.py), z_gt]
        )
        box = Box3D(center=center, dims=gt_box.dims.copy(), R=gt_box.R.copy())
    elif mode == "z":
        z = virtual_to_metric_depth(pred.z_v, intr, cfg)
        box = Box3D(
            center=gt_box.center * (z / z_gt), dims=gt_box.dims.copy(), R=gt_box.R.copy()
        )
    elif mode == "dims":
        dims = np.exp([pred.wbar, pred.hbar, pred.lbar])
        box = Box3D(center=gt_box.center.copy(), dims=dims, R=gt_box.R.copy())
    else:  # rot
        r_allo = rot6d_to_matrix(pred.p)
        rot = viewing_ray_rotation(gt_box.center) @ r_allo if allocentric else r_allo
        box = Box3D(center=gt_box.center.copy(), dims=gt_box.dims.copy(), R=rot)
    return box_corners(box)


def detection_loss(
    pred: CuboidParams,
    gt_box: Box3D,
    roi: Roi2D,
    intr: CameraIntrinsics,
    l_rpn: float = 0.0,
    l_2d: float = 0.0,
    mode: str = "full",
    cfg: VirtualDepthConfig = VirtualDepthConfig(),
    allocentric: bool = True,
) -> LossBreakdown:
    """Corner L1 between the decoded prediction and the ground-truth box,
    wrapped in the uncertainty-weighted total.

    `mode` picks the fully-predicted objective ("full", the default) or a
    disentangled variant that substitutes ground truth for everything but
    one group ("uv", "z", "dims", "rot").
    """
    if mode not in _LOSS_MODES:
        raise ValueError(f"mode must be one of {_LOSS_MODES}, got {mode!r}")
    for name, val in (("l_rpn", l_rpn), ("l_2d", l_2d)):
        if not (np.isfinite(val) and val >= 0.0):
            raise ValueError(f"{name} must be a finite non-negative real")
    pred_corners = _mode_corners(pred, gt_box, roi, intr, cfg, allocentric, mode)
    l_3d = float(np.abs(pred_corners - box_corners(gt_box)).sum())
    return LossBreakdown.build(float(l_rpn), float(l_2d), l_3d, float(pred.mu))


# ---------------------------------------------------------------------------
# Analytic gradient

# Parameter layout throughout: [u, v, z_v, wbar, hbar, lbar, p0..p5, mu].


def _rot6d_with_jacobian(p: np.ndarray):
    """Rotation from the 6D parameterization plus d R / d p, shape (3,3,6)."""
    p = np.asarray(p, dtype=float).reshape(6)
    rot = rot6d_to_matrix(p)  # also rejects degenerate inputs
    a1, a2 = p[:3], p[3:]
    b1, b2 = rot[:, 0], rot[:, 1]
    n1 = np.linalg.norm(a1)
    db1_da1 = (np.eye(3) - np.outer(b1, b1)) / n1
    dot = float(b1 @ a2)
    u2 = a2 - dot * b1
    n2 = np.linalg.norm(u2)
    db2_du2 = (np.eye(3) - np.outer(b2, b2)) / n2
    du2_da1 = -(np.outer(b1, a2) + dot * np.eye(3)) @ db1_da1
    db2_da1 = db2_du2 @ du2_da1
    db2_da2 = db2_du2 @ (np.eye(3) - np.outer(b1, b1))
    d_rot = np.zeros((3, 3, 6))
    for j in range(3):
        db1 = db1_da1[:, j]
        db2 = db2_da1[:, j]
        d_rot[:, 0, j] = db1
        d_rot[:, 1, j] = db2
        d_rot[:, 2, j] = np.cross(db1, b2) + np.cross(b1, db2)
    for j in range(3):
        db2 = db2_da2[:, j]
        d_rot[:, 1, 3 + j] = db2
        d_rot[:, 2, 3 + j] = np.cross(b1, db2)
    return rot, d_rot


def _ray_rotation_with_jacobian(ray, dray_du, dray_dv):
    """viewing_ray_rotation value and its derivatives along two ray motions."""
    ray = np.asarray(ray, dtype=float).reshape(3)
    n = np.linalg.norm(ray)
    rhat = ray / n
    proj = (np.eye(3) - np.outer(rhat, rhat)) / n
    c = rhat[2]
    axis = np.array([-rhat[1], rhat[0], 0.0])
    s_mat = skew(axis)
    rot = np.eye(3) + s_mat + s_mat @ s_mat / (1.0 + c)

    def directional(dray):
        drhat = proj @ dray
        d_axis = np.array([-drhat[1], drhat[0], 0.0])
        ds = skew(d_axis)
        dc = drhat[2]
        return ds + (ds @ s_mat + s_mat @ ds) / (1.0 + c) - (s_mat @ s_mat) * (
            dc / (1.0 + c) ** 2
        )

    return rot, directional(dray_du), directional(dray_dv)


def _decode_with_jacobian(params, roi, intr, cfg, allocentric):
    """Corners (8, 3) and their Jacobian (8, 3, 12) w.r.t. the geometry params."""
    scale = intr.fy / cfg.f_virtual if cfg.enabled else 1.0
    z = params.z_v * scale
    u_px = roi.rx + params.u * roi.rw
    v_px = roi.ry + params.v * roi.rh
    ax = (u_px - intr.px) / intr.fx
    ay = (v_px - intr.py) / intr.fy
    center = np.array([z * ax, z * ay, z])
    d_center = np.zeros((3, 12))
    d_center[0, 0] = z * roi.rw / intr.fx
    d_center[1, 1] = z * roi.rh / intr.fy
    d_center[:, 2] = np.array([ax, ay, 1.0]) * scale

    dims = np.exp([params.wbar, params.hbar, params.lbar])
    r_allo, d_allo = _rot6d_with_jacobian(params.p)
    d_rot = np.zeros((3, 3, 12))
    if allocentric:
        ray = np.array([ax, ay, 1.0])
        r_view, dv_du, dv_dv = _ray_rotation_with_jacobian(
            ray,
            np.array([roi.rw / intr.fx, 0.0, 0.0]),
            np.array([0.0, roi.rh / intr.fy, 0.0]),
        )
        rot = r_view @ r_allo
        d_rot[:, :, 0] = dv_du @ r_allo
        d_rot[:, :, 1] = dv_dv @ r_allo
        for j in range(6):
            d_rot[:, :, 6 + j] = r_view @ d_allo[:, :, j]
    else:
        rot = r_allo
        for j in range(6):
            d_rot[:, :, 6 + j] = d_allo[:, :, j]

    half = (CORNER_SIGNS * 0.5) * dims[None, :]  # local corner offsets (8, 3)
    corners = half @ rot.T + center[None, :]
    jac = np.zeros((8, 3, 12))
    for k in range(8):
        for jpar in range(12):
            jac[k, :, jpar] = d_center[:, jpar] + d_rot[:, :, jpar] @ half[k]
        for j in range(3):
            # d dims_j / d logdim_j = dims_j, so d half[k, j] = half[k, j]
            jac[k, :, 3 + j] += rot[:, j] * half[k, j]
    return corners, jac


def loss_gradient(
    pred: CuboidParams,
    gt_box: Box3D,
    roi: Roi2D,
    intr: CameraIntrinsics,
    cfg: VirtualDepthConfig = VirtualDepthConfig(),
    allocentric: bool = True,
) -> np.ndarray:
    """Gradient of the total loss w.r.t. the 13 parameters.

    The externally supplied l_rpn and l_2d terms are constants here, so the
    gradient is sqrt(2) exp(-mu) d l_3d for the geometry block and
    1 - sqrt(2) exp(-mu) l_3d for mu.  Raises NonDifferentiablePoint when a
    corner coordinate ties its target within KINK_EPS.
    """
    corners, jac = _decode_with_jacobian(pred, roi, intr, cfg, allocentric)
    diff = corners - box_corners(gt_box)
    tied = np.abs(diff) <= KINK_EPS
    if tied.any():
        raise NonDifferentiablePoint(
            f"{int(tied.sum())} corner coordinates within {KINK_EPS:g} of a kink"
        )
    sign = np.sign(diff)
    d_l3d = np.einsum("kc,kcj->j", sign, jac)
    l_3d = float(np.abs(diff).sum())
    weight = SQRT2 * math.exp(-pred.mu)
    grad = np.empty(13)
    grad[:12] = weight * d_l3d
    grad[12] = 1.0 - weight * l_3d
    return grad


def fit_cuboid(
    gt_box: Box3D,
    roi: Roi2D,
    intr: CameraIntrinsics,
    init: CuboidParams,
    steps: int,
    lr: float,
    cfg: VirtualDepthConfig = VirtualDepthConfig(),
    allocentric: bool = True,
    on_step=None,
) -> CuboidParams:
    """Plain gradient descent on the detection loss; deterministic.

    `on_step(k, params)`, when given, is called after each update.

    The geometry parameters take step lr * max(1e-6^(k/steps), 1e-5):
    geometric annealing is the standard rule for a piecewise-linear
    objective with a sharp minimum (a constant step oscillates at a floor
    set by lr), and the late constant phase lets the iterate settle so mu
    can finish tracking.  mu itself takes a constant step min(30 lr, 0.5);
    its partial is self-normalized (curvature 1 at stationarity), so the
    larger rate is stable and keeps mu locked to ln(sqrt(2) l_3d) as the
    corner residual freezes.  On an L1 kink the iterate is nudged by 1e-9
    and retried; a vanished corner residual means the subgradient is zero
    and the fit stops there.
    """
    if steps < 0:
        raise ValueError("steps must be non-negative")
    vec = init.as_vector()
    step_mu = min(30.0 * lr, 0.5)
    for k in range(steps):
        grad = None
        for _ in range(8):
            try:
                grad = loss_gradient(
                    CuboidParams.from_vector(vec), gt_box, roi, intr, cfg, allocentric
                )
                break
            except NonDifferentiablePoint:
                at = detection_loss(
                    CuboidParams.from_vector(vec), gt_box, roi, intr,
                    cfg=cfg, allocentric=allocentric,
                )
                if at.l_3d <= 1e-9:
                    return CuboidParams.from_vector(vec)
                vec = vec + 1e-9
        if grad is None:
            break
        step_geo = lr * max(1e-6 ** (k / steps), 1e-5)
        vec = vec.copy()
        vec[:12] -= step_geo * grad[:12]
        vec[12] -= step_mu * grad[12]
        if vec[2] < 1e-6:  # keep the depth parameter decodable
            vec[2] = 1e-6
        if on_step is not None:
            on_step(k, CuboidParams.from_vector(vec))
    return CuboidParams.from_vector(vec)


# ---------------------------------------------------------------------------
# Weight serialization


def _named_convs(w: BlockWeights):
    for i, conv in enumerate(w.base):
        yield f"base.{i}", conv
    for i, conv in enumerate(w.copy):
        yield f"copy.{i}", conv
    yield "zin", w.zin
    yield "zout", w.zout


def save_block_weights(w: BlockWeights, dir_path: str) -> None:
    """One binary grid per tensor plus a JSON manifest; all writes atomic."""
    os.makedirs(dir_path, exist_ok=True)
    tensors = []
    for name, conv in _named_convs(w):
        stem = name.replace(".", "_")
        kernel_file = f"{stem}_kernel.bin"
        bias_file = f"{stem}_bias.bin"
        kh, kw, cin, cout = conv.kernel.shape
        save_feature_grid(
            os.path.join(dir_path, kernel_file),
            FeatureGrid(conv.kernel.reshape(kh, kw, cin * cout)),
        )
        save_feature_grid(
            os.path.join(dir_path, bias_file), FeatureGrid(conv.bias.reshape(1, 1, cout))
        )
        tensors.append(
            {
                "name": name,
                "kernel": kernel_file,
                "kernel_shape": [kh, kw, cin, cout],
                "bias": bias_file,
            }
        )
    manifest = {
        "format_version": _WEIGHTS_FORMAT_VERSION,
        "stages": len(w.base),
        "warp_enabled": bool(w.warp_enabled),
        "tensors": tensors,
    }
    write_text_atomic(
        os.path.join(dir_path, "manifest.json"),
        json.dumps(manifest, sort_keys=True, indent=2) + "\n",
    )


def load_block_weights(dir_path: str) -> BlockWeights:
    path = os.path.join(dir_path, "manifest.json")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    try:
        manifest = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(manifest, dict):
        raise SchemaError(f"{path}: manifest must be a JSON object")
    if "format_version" not in manifest:
        raise SchemaError(f"{path}: missing format_version")
    if manifest["format_version"] != _WEIGHTS_FORMAT_VERSION:
        raise VersionMismatch(
            f"{path}: format_version {manifest['format_version']!r}, "
            f"expected {_WEIGHTS_FORMAT_VERSION}"
        )
    for key in ("stages", "warp_enabled", "tensors"):
        if key not in manifest:
            raise SchemaError(f"{path}: missing key {key!r}")
    by_name = {}
    for entry in manifest["tensors"]:
        if not isinstance(entry, dict) or not {"name", "kernel", "kernel_shape", "bias"} <= set(entry):
            raise SchemaError(f"{path}: malformed tensor entry {entry!r}")
        kernel_grid = load_feature_grid(os.path.join(dir_path, entry["kernel"]))
        shape = tuple(int(s) for s in entry["kernel_shape"])
        if len(shape) != 4 or int(np.prod(shape)) != kernel_grid.data.size:
            raise SchemaError(
                f"{path}: kernel_shape {shape} does not match stored data"
            )
        bias_grid = load_feature_grid(os.path.join(dir_path, entry["bias"]))
        by_name[entry["name"]] = Conv(
            kernel=kernel_grid.data.reshape(shape), bias=bias_grid.data.reshape(-1)
        )
    stages = int(manifest["stages"])
    try:
        base = tuple(by_name[f"base.{i}"] for i in range(stages))
        copy = tuple(by_name[f"copy.{i}"] for i in range(stages))
        zin = by_name["zin"]
        zout = by_name["zout"]
    except KeyError as exc:
        raise SchemaError(f"{path}: manifest names no tensor {exc}") from exc
    return BlockWeights(
        base=base, copy=copy, zin=zin, zout=zout,
        warp_enabled=bool(manifest["warp_enabled"]),
    )
