"""13-parameter cuboid head decoding into oriented camera-frame boxes.

A prediction is (u, v) RoI-relative projected center, virtual depth z_v,
log dimensions, a continuous 6D rotation, and an uncertainty scalar mu.
Decoding back-projects the center through the pinhole model, exponentiates
dimensions, orthonormalizes the rotation, and optionally converts the
allocentric rotation to the camera frame via the viewing-ray rotation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateRotation
from .geometry import CameraIntrinsics, RigidTransform, skew

ROT6D_EPS = 1e-12

_ORTHO_TOL = 1e-9

# Corner sign pattern over (x, y, z), fixed for serialization and exact
# corner-set comparisons.
CORNER_SIGNS = np.array(
    [
        [-1, -1, -1],
        [+1, -1, -1],
        [+1, +1, -1],
        [-1, +1, -1],
        [-1, -1, +1],
        [+1, -1, +1],
        [+1, +1, +1],
        [-1, +1, +1],
    ],
    dtype=float,
)


@dataclass(frozen=True)
class Roi2D:
    """2D box in pixels: top-left corner plus width/height."""

    rx: float
    ry: float
    rw: float
    rh: float

    def __post_init__(self):
        if not all(np.isfinite(v) for v in (self.rx, self.ry, self.rw, self.rh)):
            raise ValueError("RoI fields must be finite")
        if self.rw <= 0.0 or self.rh <= 0.0:
            raise ValueError("RoI width and height must be positive")


@dataclass(frozen=True, eq=False)
class CuboidParams:
    """The 13 scalars of one cuboid prediction."""

    u: float
    v: float
    z_v: float
    wbar: float
    hbar: float
    lbar: float
    p: np.ndarray  # 6-vector, continuous rotation
    mu: float

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float).reshape(6)
        scalars = (self.u, self.v, self.z_v, self.wbar, self.hbar, self.lbar, self.mu)
        if not (all(np.isfinite(s) for s in scalars) and np.isfinite(p).all()):
            raise ValueError("params must be finite")
        if self.z_v <= 0.0:
            raise ValueError("z_v must be positive")
        object.__setattr__(self, "p", p)

    def as_vector(self) -> np.ndarray:
        """Flat order: u, v, z_v, wbar, hbar, lbar, p[0..5], mu."""
        return np.concatenate(
            [[self.u, self.v, self.z_v, self.wbar, self.hbar, self.lbar], self.p, [self.mu]]
        )

    @classmethod
    def from_vector(cls, vec: np.ndarray) -> "CuboidParams":
        vec = np.asarray(vec, dtype=float).reshape(13)
        return cls(
            u=float(vec[0]),
            v=float(vec[1]),
            z_v=float(vec[2]),
            wbar=float(vec[3]),
            hbar=float(vec[4]),
            lbar=float(vec[5]),
            p=vec[6:12].copy(),
            mu=float(vec[12]),
        )


@dataclass(frozen=True, eq=False)
class Box3D:
    """Oriented box: center (camera frame, meters), dims (w, h, l), rotation."""

    center: np.ndarray
    dims: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        center = np.asarray(self.center, dtype=float).reshape(3)
        dims = np.asarray(self.dims, dtype=float).reshape(3)
        R = np.asarray(self.R, dtype=float).reshape(3, 3)
        if not (np.isfinite(center).all() and np.isfinite(dims).all() and np.isfinite(R).all()):
            raise ValueError("box fields must be finite")
        if (dims <= 0.0).any():
            raise ValueError("dims must be positive")
        if np.abs(R.T @ R - np.eye(3)).max() > _ORTHO_TOL:
            raise ValueError("R is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise ValueError("R must have det +1")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "R", R)


@dataclass(frozen=True)
class VirtualDepthConfig:
    """Depth decoding: z = z_v * fy / f_virtual when enabled, else z = z_v."""

    f_virtual: float = 512.0
    enabled: bool = True

    def __post_init__(self):
        if not (np.isfinite(self.f_virtual) and self.f_virtual > 0.0):
            raise ValueError("f_virtual must be positive")


def rot6d_to_matrix(p: np.ndarray) -> np.ndarray:
    """Gram-Schmidt the two 3-vectors of p into a rotation matrix.

    b1 = normalize(p[:3]); b2 = normalize(p[3:] - (p[3:].b1) b1); b3 = b1 x b2;
    columns [b1 b2 b3].  Scale-invariant in each 3-vector.
    """
    p = np.asarray(p, dtype=float).reshape(6)
    a1, a2 = p[:3], p[3:]
    n1 = np.linalg.norm(a1)
    if n1 < ROT6D_EPS:
        raise DegenerateRotation(f"first column norm {n1:.3e}")
    b1 = a1 / n1
    r = a2 - (a2 @ b1) * b1
    n2 = np.linalg.norm(r)
    if n2 < ROT6D_EPS:
        raise DegenerateRotation(f"residual norm {n2:.3e}")
    b2 = r / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=1)


def virtual_to_metric_depth(z_v: float, intr: CameraIntrinsics, cfg: VirtualDepthConfig) -> float:
    """Metric depth for a virtual-depth prediction; pass-through when disabled."""
    if z_v <= 0.0:
        raise ValueError("z_v must be positive")
    if not cfg.enabled:
        return float(z_v)
    return float(z_v * intr.fy / cfg.f_virtual)


def viewing_ray_rotation(ray: np.ndarray) -> np.ndarray:
    """Minimal rotation taking the camera z-axis onto the unit ray.

    Rodrigues with axis z x ray: R = I + [v]_x + [v]_x^2 / (1 + c) where
    v = (-ray_y, ray_x, 0) and c = ray_z.  Requires c > -1 (always true for
    rays with positive z, the only ones produced by decoding).
    """
    ray = np.asarray(ray, dtype=float).reshape(3)
    ray = ray / np.linalg.norm(ray)
    c = ray[2]
    if c <= -1.0 + 1e-12:
        raise ValueError("viewing ray opposes the camera axis")
    v = np.array([-ray[1], ray[0], 0.0])
    vx = skew(v)
    return np.eye(3) + vx + vx @ vx / (1.0 + c)


def decode_center(params: CuboidParams, roi: Roi2D, intr: CameraIntrinsics,
                  cfg: VirtualDepthConfig) -> np.ndarray:
    """Back-project the RoI-relative projected center to the camera frame."""
    z = virtual_to_metric_depth(params.z_v, intr, cfg)
    u_px = roi.rx + params.u * roi.rw
    v_px = roi.ry + params.v * roi.rh
    return np.array(
        [(z / intr.fx) * (u_px - intr.px), (z / intr.fy) * (v_px - intr.py), z]
    )


def decode_cuboid(params: CuboidParams, roi: Roi2D, intr: CameraIntrinsics,
                  cfg: VirtualDepthConfig = VirtualDepthConfig(),
                  allocentric: bool = True) -> Box3D:
    """Decode the 13 parameters into an oriented camera-frame box.

    With `allocentric` (default), the 6D rotation is interpreted relative to
    the viewing ray of the box center and converted to the camera frame as
    R = R_view @ R_allo; otherwise the 6D rotation is camera-frame directly.
    """
    dims = np.exp([params.wbar, params.hbar, params.lbar])
    center = decode_center(params, roi, intr, cfg)
    r_allo = rot6d_to_matrix(params.p)
    if allocentric:
        u_px = roi.rx + params.u * roi.rw
        v_px = roi.ry + params.v * roi.rh
        # Ray direction depends only on the projected center, not depth.
        ray = np.array(
            [(u_px - intr.px) / intr.fx, (v_px - intr.py) / intr.fy, 1.0]
        )
        rot = viewing_ray_rotation(ray) @ r_allo
    else:
        rot = r_allo
    return Box3D(center=center, dims=dims, R=rot)


def box_corners(box: Box3D) -> np.ndarray:
    """The 8 corners, (8, 3), in the fixed CORNER_SIGNS order."""
    offsets = (CORNER_SIGNS * 0.5) * box.dims[None, :]
    return offsets @ box.R.T + box.center[None, :]


def transform_box(box: Box3D, t: RigidTransform) -> Box3D:
    """Rigidly move a box; corner sets commute with the pointwise transform."""
    return Box3D(center=t.apply(box.center), dims=box.dims.copy(), R=t.R @ box.R)
