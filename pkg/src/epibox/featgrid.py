"""Feature grids, bilinear sampling, and the epipolar warp operator.

The warp resamples a source-view feature grid into target-view texel
locations: each target texel's feature is an aggregate of bilinear samples
taken along its epipolar line in the source view, falling back to a
rotation homography when the two cameras share a center.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import numpy as np

from .errors import EmptySampleSet, ParseError, SchemaError, ZeroVector
from .geometry import (
    TRANSLATION_EPS,
    CameraIntrinsics,
    EpipolarLine,
    RigidTransform,
    epipolar_line,
    rotation_homography,
)
from .util import write_bytes_atomic


@dataclass(eq=False)
class FeatureGrid:
    """Dense (H, W, C) float feature map, row-major by (row, col, channel)."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim != 3:
            raise ValueError(f"expected (H, W, C) data, got shape {data.shape}")
        if min(data.shape) < 1:
            raise ValueError("H, W, C must all be positive")
        if not np.isfinite(data).all():
            raise ValueError("feature values must be finite")
        self.data = data

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


class AggregatorMode(enum.Enum):
    MEAN = "mean"
    MAX = "max"


class OutOfViewPolicy(enum.Enum):
    ZERO = "zero"
    NEAREST = "nearest"


@dataclass(frozen=True)
class WarpConfig:
    n_samples: int = 64
    mode: AggregatorMode = AggregatorMode.MEAN
    out_of_view: OutOfViewPolicy = OutOfViewPolicy.ZERO

    def __post_init__(self):
        if self.n_samples < 2:
            raise ValueError("n_samples must be at least 2")


def _bilinear_many(data: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Bilinear samples of (H, W, C) data at (N, 2) points in (x, y) order.

    Points are clamped into [0, W-1] x [0, H-1]; callers decide separately
    what out-of-range coordinates should mean.
    """
    h, w, _ = data.shape
    x = np.clip(pts[:, 0], 0.0, float(w - 1))
    y = np.clip(pts[:, 1], 0.0, float(h - 1))
    x0 = np.clip(np.floor(x).astype(np.int64), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(y).astype(np.int64), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    return (
        data[y0, x0] * (1.0 - fx) * (1.0 - fy)
        + data[y0, x1] * fx * (1.0 - fy)
        + data[y1, x0] * (1.0 - fx) * fy
        + data[y1, x1] * fx * fy
    )


def bilinear_sample(grid: FeatureGrid, p) -> np.ndarray:
    """Bilinearly interpolated C-vector at continuous pixel coords p = (x, y)."""
    pts = np.asarray(p, dtype=float).reshape(1, 2)
    return _bilinear_many(grid.data, pts)[0]


# Slack for lines grazing the rectangle boundary; keeps roundoff from
# dropping exactly-tangent segments while preserving the 1e-9 residual
# guarantee on clamped endpoints.
_CLIP_EPS = 5e-10


def clip_line_to_grid(line: EpipolarLine, width: int, height: int):
    """Intersect a line with the rectangle [0, W-1] x [0, H-1].

    Returns the segment endpoints as two (x, y) arrays ordered along the
    line direction (-l1, l0), or None when the line misses the rectangle.
    """
    if line.degenerate:
        raise ValueError("cannot clip a degenerate epipolar line")
    l = np.asarray(line.l, dtype=float)
    n = np.hypot(l[0], l[1])
    if n == 0.0:
        return None
    l = l / n
    # Foot of the perpendicular from the origin, then slab clipping along
    # the line direction.
    p0 = np.array([-l[2] * l[0], -l[2] * l[1]])
    d = np.array([-l[1], l[0]])
    limits = (float(width - 1), float(height - 1))
    lo, hi = -np.inf, np.inf
    for axis, limit in enumerate(limits):
        if abs(d[axis]) < 1e-15:
            if not -_CLIP_EPS <= p0[axis] <= limit + _CLIP_EPS:
                return None
            continue
        s0 = (-_CLIP_EPS - p0[axis]) / d[axis]
        s1 = (limit + _CLIP_EPS - p0[axis]) / d[axis]
        if s0 > s1:
            s0, s1 = s1, s0
        lo = max(lo, s0)
        hi = min(hi, s1)
    if lo > hi:
        return None
    a = np.clip(p0 + lo * d, 0.0, limits)
    b = np.clip(p0 + hi * d, 0.0, limits)
    return a, b


def aggregate(features, mode: AggregatorMode) -> np.ndarray:
    """Channelwise mean or max of a non-empty sequence of C-vectors."""
    arr = np.asarray(features, dtype=float)
    if arr.size == 0:
        raise EmptySampleSet("no feature samples to aggregate")
    if arr.ndim != 2:
        raise ValueError("expected a sequence of equal-length feature vectors")
    if mode is AggregatorMode.MEAN:
        return arr.mean(axis=0)
    return arr.max(axis=0)


def _scaled_intrinsics(intr: CameraIntrinsics, width: int, height: int) -> CameraIntrinsics:
    # Feature-grid coords are image pixels divided by the downsampling stride.
    sx = intr.width / width
    sy = intr.height / height
    return CameraIntrinsics(
        fx=intr.fx / sx,
        fy=intr.fy / sy,
        px=intr.px / sx,
        py=intr.py / sy,
        width=width,
        height=height,
    )


def _fallback_value(src_data, policy, mapped):
    if policy is OutOfViewPolicy.ZERO:
        return np.zeros(src_data.shape[2])
    h, w, _ = src_data.shape
    clamped = np.array(
        [np.clip(mapped[0], 0.0, w - 1.0), np.clip(mapped[1], 0.0, h - 1.0)]
    )
    return _bilinear_many(src_data, clamped[None, :])[0]


def epipolar_warp(
    src: FeatureGrid,
    intr_src: CameraIntrinsics,
    intr_tgt: CameraIntrinsics,
    rel: RigidTransform,
    cfg: WarpConfig = WarpConfig(),
) -> FeatureGrid:
    """Resample source-view features into target-view texels.

    `rel` maps target-camera coordinates into the source camera frame, the
    same convention as `epipolar_line`.  For each target texel the clipped
    epipolar line is sampled at cfg.n_samples equally spaced points and the
    bilinear feature samples are aggregated channelwise.  When `rel` is a
    pure rotation the epipolar line degenerates and texels map through the
    rotation homography instead; when it is the exact identity (and both
    cameras agree) the input grid is returned unchanged, bit for bit.

    Texels whose epipolar segment misses the source grid (or whose
    homography image falls outside it) take cfg.out_of_view: zeros, or the
    nearest in-grid sample.
    """
    h, w, c = src.data.shape
    k_src = _scaled_intrinsics(intr_src, w, h)
    k_tgt = _scaled_intrinsics(intr_tgt, w, h)

    pure_rotation = np.linalg.norm(rel.t) < TRANSLATION_EPS
    if (
        pure_rotation
        and np.array_equal(rel.R, np.eye(3))
        and np.array_equal(k_src.K, k_tgt.K)
    ):
        return FeatureGrid(src.data.copy())

    out = np.empty_like(src.data)

    if pure_rotation:
        # Shared camera center: every texel maps through one homography.
        hom = rotation_homography(k_src, k_tgt, rel.R.T)
        cols, rows = np.meshgrid(np.arange(w), np.arange(h))
        uv1 = np.stack(
            [cols.ravel(), rows.ravel(), np.ones(h * w)], axis=0
        ).astype(float)
        mapped = hom @ uv1
        for idx in range(h * w):
            mx, my, mz = mapped[:, idx]
            i, j = divmod(idx, w)
            if mz <= 0.0:
                out[i, j] = _fallback_value(src.data, cfg.out_of_view, (0.0, 0.0))
                continue
            p = np.array([mx / mz, my / mz])
            if 0.0 <= p[0] <= w - 1.0 and 0.0 <= p[1] <= h - 1.0:
                out[i, j] = _bilinear_many(src.data, p[None, :])[0]
            else:
                out[i, j] = _fallback_value(src.data, cfg.out_of_view, p)
        return FeatureGrid(out)

    ts = np.linspace(0.0, 1.0, cfg.n_samples)[:, None]
    for i in range(h):
        for j in range(w):
            line = epipolar_line(k_src, k_tgt, rel, (float(j), float(i)))
            seg = None if line.degenerate else clip_line_to_grid(line, w, h)
            if seg is None:
                out[i, j] = _fallback_value(
                    src.data, cfg.out_of_view, _nearest_on_line(line, w, h)
                )
                continue
            a, b = seg
            pts = a[None, :] + ts * (b - a)[None, :]
            out[i, j] = aggregate(_bilinear_many(src.data, pts), cfg.mode)
    return FeatureGrid(out)


def _nearest_on_line(line: EpipolarLine, width: int, height: int):
    # "Nearest" for a segment that misses the grid: project the grid center
    # onto the line, then let the caller clamp into the rectangle.
    l = np.asarray(line.l, dtype=float)
    n = np.hypot(l[0], l[1])
    if n == 0.0:
        return (0.0, 0.0)
    l = l / n
    center = np.array([(width - 1) / 2.0, (height - 1) / 2.0])
    return center - (l[0] * center[0] + l[1] * center[1] + l[2]) * l[:2]


def feature_correspondence(src: FeatureGrid, tgt: FeatureGrid, p_src):
    """Best-matching target texel for a source-grid query point.

    Returns ((x, y), similarity_map) where the map holds the cosine
    similarity between the source feature at p_src and every target texel.
    Zero-norm target texels score 0; ties resolve to the smallest
    (row, col).
    """
    if src.channels != tgt.channels:
        raise ValueError("channel counts differ")
    q = bilinear_sample(src, p_src)
    qn = np.linalg.norm(q)
    if qn == 0.0:
        raise ZeroVector("query feature has zero norm")
    flat = tgt.data.reshape(-1, tgt.channels)
    norms = np.linalg.norm(flat, axis=1)
    sims = flat @ (q / qn)
    sims = np.where(norms > 0.0, sims / np.where(norms > 0.0, norms, 1.0), 0.0)
    idx = int(np.argmax(sims))
    row, col = divmod(idx, tgt.width)
    return (col, row), sims.reshape(tgt.height, tgt.width)


# Binary layout: little-endian uint32 H, W, C, then H*W*C float32 row-major.
_HEADER = struct.Struct("<III")


def save_feature_grid(path: str, grid: FeatureGrid) -> None:
    h, w, c = grid.data.shape
    payload = _HEADER.pack(h, w, c) + np.ascontiguousarray(
        grid.data, dtype="<f4"
    ).tobytes()
    write_bytes_atomic(path, payload)


def load_feature_grid(path: str) -> FeatureGrid:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < _HEADER.size:
        raise ParseError(f"{path}: truncated header ({len(buf)} bytes)")
    h, w, c = _HEADER.unpack_from(buf)
    if h == 0 or w == 0 or c == 0:
        raise SchemaError(f"{path}: header dims must be positive, got {(h, w, c)}")
    expected = _HEADER.size + 4 * h * w * c
    if len(buf) != expected:
        raise ParseError(f"{path}: expected {expected} bytes, got {len(buf)}")
    data = np.frombuffer(buf, dtype="<f4", offset=_HEADER.size).reshape(h, w, c)
    try:
        return FeatureGrid(data.astype(float))
    except ValueError as exc:
        raise SchemaError(f"{path}: {exc}") from exc
