"""Pinhole camera algebra, rigid transforms, and epipolar line construction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonPositiveDepth

# Below this translation norm the two cameras share a center and epipolar
# geometry degenerates to a rotation homography.
TRANSLATION_EPS = 1e-9

_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixel units; (px, py) is the principal point."""

    fx: float
    fy: float
    px: float
    py: float
    width: int
    height: int

    def __post_init__(self):
        vals = (self.fx, self.fy, self.px, self.py, self.width, self.height)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("intrinsics must be finite")
        if self.fx <= 0.0 or self.fy <= 0.0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")

    @property
    def K(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.px], [0.0, self.fy, self.py], [0.0, 0.0, 1.0]]
        )

    @property
    def K_inv(self) -> np.ndarray:
        # Closed form: exact for the upper-triangular pinhole K.
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.px / self.fx],
                [0.0, 1.0 / self.fy, -self.py / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rotation + translation, applied as x -> R @ x + t."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=float).reshape(3, 3)
        t = np.asarray(self.t, dtype=float).reshape(3)
        if not (np.isfinite(R).all() and np.isfinite(t).all()):
            raise ValueError("transform entries must be finite")
        if np.abs(R.T @ R - np.eye(3)).max() > _ORTHO_TOL:
            raise ValueError("R is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise ValueError("R must be a proper rotation (det +1)")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Transform one point (3,) or a batch (N, 3)."""
        x = np.asarray(x, dtype=float)
        return x @ self.R.T + self.t

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Transform equal to applying `other` first, then self."""
        return RigidTransform(self.R @ other.R, self.R @ other.t + self.t)

    def invert(self) -> "RigidTransform":
        return RigidTransform(self.R.T, -self.R.T @ self.t)


def rotation_x(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rotation_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotation_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_from_quaternion(q: np.ndarray) -> np.ndarray:
    """Rotation matrix for a quaternion (w, x, y, z); q need not be unit length."""
    q = np.asarray(q, dtype=float).reshape(4)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("zero quaternion")
    w, x, y, z = q / n
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Rotation drawn uniformly from SO(3) (Gaussian quaternion, normalized)."""
    return rotation_from_quaternion(rng.standard_normal(4))


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix: skew(v) @ w == cross(v, w)."""
    v = np.asarray(v, dtype=float).reshape(3)
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


@dataclass(frozen=True, eq=False)
class EpipolarLine:
    """Image line l with l @ (u, v, 1) == 0; unit-normalized normal unless degenerate."""

    l: np.ndarray
    degenerate: bool


def epipolar_line(
    intr_src: CameraIntrinsics,
    intr_tgt: CameraIntrinsics,
    rel: RigidTransform,
    uv_tgt: np.ndarray,
    eps_t: float = TRANSLATION_EPS,
) -> EpipolarLine:
    """Epipolar line in the source image induced by a target pixel.

    `rel` maps target-camera coordinates into the source camera frame
    (x_src = R @ x_tgt + t).  The line is

        l = K_src^-T [t]_x R K_tgt^-1 (u, v, 1)^T

    scaled so sqrt(l0^2 + l1^2) == 1.  Every source-image projection of the
    target ray through (u, v) satisfies l @ (u', v', 1) == 0.

    When ||t|| < eps_t the two centers coincide, the line is undefined, and
    the result carries degenerate=True with an unnormalized l; callers should
    fall back to `rotation_homography`.
    """
    uv = np.asarray(uv_tgt, dtype=float).reshape(2)
    ray = intr_tgt.K_inv @ np.array([uv[0], uv[1], 1.0])
    l = intr_src.K_inv.T @ (skew(rel.t) @ (rel.R @ ray))
    if np.linalg.norm(rel.t) < eps_t:
        return EpipolarLine(l, True)
    n = np.hypot(l[0], l[1])
    if n == 0.0:
        # Target pixel is the epipole's preimage: no finite line direction.
        return EpipolarLine(l, True)
    return EpipolarLine(l / n, False)


def rotation_homography(
    intr_src: CameraIntrinsics, intr_tgt: CameraIntrinsics, R: np.ndarray
) -> np.ndarray:
    """Pixel map H = K_src @ R^T @ K_tgt^-1 for a pure rotation R of the
    source camera into the target camera; target homogeneous pixels map to
    source pixels as x_src ~ H @ x_tgt."""
    R = np.asarray(R, dtype=float).reshape(3, 3)
    return intr_src.K @ R.T @ intr_tgt.K_inv


def project(intr: CameraIntrinsics, x_cam: np.ndarray) -> np.ndarray:
    """Project a camera-frame point to pixels; depth must be strictly positive."""
    x = np.asarray(x_cam, dtype=float).reshape(3)
    if x[2] <= 0.0:
        raise NonPositiveDepth(f"depth {x[2]!r} is not positive")
    return np.array(
        [intr.fx * x[0] / x[2] + intr.px, intr.fy * x[1] / x[2] + intr.py]
    )


def backproject(intr: CameraIntrinsics, uv: np.ndarray, depth: float) -> np.ndarray:
    """Camera-frame point at the given depth along the ray through pixel uv."""
    uv = np.asarray(uv, dtype=float).reshape(2)
    if depth <= 0.0:
        raise NonPositiveDepth(f"depth {depth!r} is not positive")
    return np.array(
        [
            (uv[0] - intr.px) * depth / intr.fx,
            (uv[1] - intr.py) * depth / intr.fy,
            depth,
        ]
    )
