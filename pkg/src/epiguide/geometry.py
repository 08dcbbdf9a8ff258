"""Two-view epipolar geometry: cameras, fundamental matrices, plane angles.

Conventions, fixed once for the whole package:

* extrinsics are world-to-camera: a world point X lands at ``R @ X + t`` in
  camera coordinates, so the camera center is ``-R.T @ t``;
* projection is ``x = K (R X + t)`` with pixel coordinates ``(u/w, v/w)``;
* a fundamental matrix maps image-1 points to image-2 lines and satisfies
  ``x2h.T @ F @ x1h == 0`` for corresponding pixels;
* fundamental matrices are kept in canonical form: unit Frobenius norm with
  the sign fixed so the trailing entry of largest magnitude is positive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateBaseline, EpipolePixel, ZeroLine

_BASELINE_EPS = 1e-9
_LINE_EPS = 1e-12
_RANK_RATIO = 1e-7


def _frozen_array(value, shape, name: str) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if arr.shape != shape:
        raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class CameraView:
    """A pinhole camera: world-to-camera pose, intrinsics, image size."""

    rotation: np.ndarray
    translation: np.ndarray
    intrinsics: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        r = _frozen_array(self.rotation, (3, 3), "rotation")
        t = _frozen_array(self.translation, (3,), "translation")
        k = _frozen_array(self.intrinsics, (3, 3), "intrinsics")
        if np.linalg.norm(r.T @ r - np.eye(3)) > 1e-9:
            raise ValueError("rotation is not orthonormal")
        if np.linalg.det(r) < 0:
            raise ValueError("rotation must be proper (det +1)")
        if abs(k[2, 0]) > 0 or abs(k[2, 1]) > 0 or abs(k[2, 2] - 1.0) > 1e-12:
            raise ValueError("intrinsics last row must be (0, 0, 1)")
        if k[0, 0] <= 0 or k[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "intrinsics", k)

    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation


@dataclass(frozen=True)
class CropTransform:
    """Axis-aligned crop/rescale: ``x' = scale * (x - offset)`` per axis."""

    offset_x: float
    offset_y: float
    scale_x: float
    scale_y: float

    def __post_init__(self):
        if self.scale_x <= 0 or self.scale_y <= 0:
            raise ValueError("crop scales must be positive")

    def matrix(self) -> np.ndarray:
        return np.array(
            [
                [self.scale_x, 0.0, -self.scale_x * self.offset_x],
                [0.0, self.scale_y, -self.scale_y * self.offset_y],
                [0.0, 0.0, 1.0],
            ]
        )


def _canonicalize(m: np.ndarray) -> np.ndarray:
    """Unit Frobenius norm, deterministic sign; a bitwise fixed point."""
    m = np.array(m, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix contains non-finite entries")
    # iterate the scaling so canonicalizing twice is bitwise identical; a
    # norm within 2 ulp of 1 is accepted as-is, which one division always
    # reaches, so the loop ends at a genuine fixed point
    for _ in range(32):
        n = float(np.linalg.norm(m))
        if n == 0.0:
            raise ValueError("zero matrix cannot be canonicalized")
        if abs(n - 1.0) <= 4.0 * 2.0**-53:
            break
        scaled = m / n
        if np.array_equal(scaled, m):
            break
        m = scaled
    flat = m.ravel()
    # last entry of maximal magnitude decides the sign
    idx = flat.size - 1 - int(np.argmax(np.abs(flat[::-1])))
    if flat[idx] < 0:
        m = -m
    return m


@dataclass(frozen=True)
class FundamentalMatrix:
    """Rank-2 fundamental matrix stored in canonical form."""

    m: np.ndarray

    def __post_init__(self):
        m = _frozen_array(self.m, (3, 3), "fundamental matrix")
        s = np.linalg.svd(m, compute_uv=False)
        if s[2] > _RANK_RATIO * s[0]:
            raise ValueError("matrix is not rank 2")
        if abs(np.linalg.norm(m) - 1.0) > 1e-9:
            raise ValueError("matrix is not unit-norm; build via from_matrix")
        object.__setattr__(self, "m", m)

    @classmethod
    def from_matrix(cls, m) -> "FundamentalMatrix":
        """Canonicalize an arbitrary nonzero rank-2 matrix."""
        return cls(_canonicalize(m))

    def transpose(self) -> "FundamentalMatrix":
        """Fundamental matrix for the swapped image order."""
        return FundamentalMatrix.from_matrix(self.m.T)


@dataclass(frozen=True)
class EpipolarLine:
    """Image line ``a x + b y + c = 0`` with ``a**2 + b**2 == 1``."""

    a: float
    b: float
    c: float

    def __post_init__(self):
        if abs(self.a * self.a + self.b * self.b - 1.0) > 1e-12:
            raise ValueError("line normal must be unit length")

    def distance(self, point) -> float:
        """Unsigned pixel distance from a point to the line."""
        x, y = float(point[0]), float(point[1])
        return abs(self.a * x + self.b * y + self.c)


def _cross_matrix(t: np.ndarray) -> np.ndarray:
    return np.array(
        [
            [0.0, -t[2], t[1]],
            [t[2], 0.0, -t[0]],
            [-t[1], t[0], 0.0],
        ]
    )


def relative_pose(view1: CameraView, view2: CameraView) -> tuple[np.ndarray, np.ndarray]:
    """(R, t) mapping camera-1 coordinates into camera 2."""
    r_rel = view2.rotation @ view1.rotation.T
    t_rel = view2.translation - r_rel @ view1.translation
    return r_rel, t_rel


def relative_fundamental(view1: CameraView, view2: CameraView) -> FundamentalMatrix:
    """Fundamental matrix of an ordered view pair from their poses.

    Raises DegenerateBaseline when the camera centers coincide (pure
    rotation), where no fundamental matrix exists.
    """
    r_rel, t_rel = relative_pose(view1, view2)
    scale = max(1.0, float(np.linalg.norm(view1.translation)), float(np.linalg.norm(view2.translation)))
    if np.linalg.norm(t_rel) <= _BASELINE_EPS * scale:
        raise DegenerateBaseline("camera centers coincide; F undefined")
    k1_inv = np.linalg.inv(view1.intrinsics)
    k2_inv = np.linalg.inv(view2.intrinsics)
    f = k2_inv.T @ _cross_matrix(t_rel) @ r_rel @ k1_inv
    return FundamentalMatrix.from_matrix(f)


def epipolar_line(f: FundamentalMatrix, point) -> EpipolarLine:
    """Epipolar line in image 2 of a pixel in image 1.

    For the reverse direction pass ``f.transpose()``. Raises ZeroLine when
    the pixel is the epipole (the mapped line vanishes).
    """
    x, y = float(point[0]), float(point[1])
    if not (math.isfinite(x) and math.isfinite(y)):
        raise ValueError("point must be finite")
    l = f.m @ np.array([x, y, 1.0])
    n = math.hypot(l[0], l[1])
    if n < _LINE_EPS:
        raise ZeroLine(f"pixel ({x}, {y}) maps to the zero line (epipole)")
    return EpipolarLine(l[0] / n, l[1] / n, l[2] / n)


def adjust_fundamental_for_crop(
    f: FundamentalMatrix, crop1: CropTransform, crop2: CropTransform
) -> FundamentalMatrix:
    """Fundamental matrix valid in the cropped/rescaled pixel frames."""
    t1_inv = np.linalg.inv(crop1.matrix())
    t2_inv = np.linalg.inv(crop2.matrix())
    return FundamentalMatrix.from_matrix(t2_inv.T @ f.m @ t1_inv)


def backproject_ray(view: CameraView, pixel) -> np.ndarray:
    """World-frame direction of the viewing ray through a pixel."""
    x, y = float(pixel[0]), float(pixel[1])
    d_cam = np.linalg.inv(view.intrinsics) @ np.array([x, y, 1.0])
    return view.rotation.T @ d_cam


def _signed_angle(n_ref: np.ndarray, n: np.ndarray, axis: np.ndarray) -> float:
    axis_hat = axis / np.linalg.norm(axis)
    s = float(np.dot(np.cross(n_ref, n), axis_hat))
    c = float(np.dot(n_ref, n))
    angle = math.atan2(s, c)
    if angle <= -math.pi:
        angle = math.pi
    return angle


def _plane_normal(baseline: np.ndarray, ray: np.ndarray) -> np.ndarray:
    n = np.cross(baseline, ray)
    if np.linalg.norm(n) < _LINE_EPS * np.linalg.norm(baseline) * np.linalg.norm(ray):
        raise EpipolePixel("viewing ray is parallel to the baseline")
    return n


def epipolar_plane_angle(view1: CameraView, view2: CameraView, pixel, ref_pixel) -> float:
    """Signed angle in (-pi, pi] between two epipolar planes.

    Both pixels live in image 1; their planes contain the baseline and the
    respective backprojected rays. The angle is measured about the axis
    ``C2 - C1`` with the right-hand rule, from ref_pixel's plane to pixel's.
    """
    baseline = view2.center() - view1.center()
    scale = max(1.0, float(np.linalg.norm(view1.translation)), float(np.linalg.norm(view2.translation)))
    if np.linalg.norm(baseline) <= _BASELINE_EPS * scale:
        raise DegenerateBaseline("camera centers coincide; planes undefined")
    n_ref = _plane_normal(baseline, backproject_ray(view1, ref_pixel))
    n = _plane_normal(baseline, backproject_ray(view1, pixel))
    return _signed_angle(n_ref, n, baseline)


def pair_plane_angles(
    view1: CameraView,
    view2: CameraView,
    pixels1: np.ndarray,
    pixels2: np.ndarray,
    ref_pixel,
) -> tuple[np.ndarray, np.ndarray]:
    """Plane angles for arrays of pixels from both images, one shared reference.

    The reference pixel lives in image 1. Every angle is measured about the
    same oriented axis ``C2 - C1``, so pixels of the two images that see the
    same epipolar plane receive identical values.
    """
    baseline = view2.center() - view1.center()
    scale = max(1.0, float(np.linalg.norm(view1.translation)), float(np.linalg.norm(view2.translation)))
    if np.linalg.norm(baseline) <= _BASELINE_EPS * scale:
        raise DegenerateBaseline("camera centers coincide; planes undefined")
    n_ref = _plane_normal(baseline, backproject_ray(view1, ref_pixel))

    def angles_for(view: CameraView, pixels: np.ndarray) -> np.ndarray:
        pts = np.asarray(pixels, dtype=np.float64)
        hom = np.column_stack([pts, np.ones(len(pts))])
        rays = (view.rotation.T @ np.linalg.inv(view.intrinsics) @ hom.T).T
        normals = np.cross(np.broadcast_to(baseline, rays.shape), rays)
        norms = np.linalg.norm(normals, axis=1)
        limit = _LINE_EPS * np.linalg.norm(baseline) * np.linalg.norm(rays, axis=1)
        if np.any(norms < limit):
            raise EpipolePixel("a viewing ray is parallel to the baseline")
        axis_hat = baseline / np.linalg.norm(baseline)
        s = np.cross(np.broadcast_to(n_ref, normals.shape), normals) @ axis_hat
        c = normals @ n_ref
        out = np.arctan2(s, c)
        out[out <= -math.pi] = math.pi
        return out

    return angles_for(view1, pixels1), angles_for(view2, pixels2)


def random_rank2_matrix(seed: int) -> FundamentalMatrix:
    """Seeded random rank-2 canonical matrix (geometry-free stand-in F)."""
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((3, 3))
    u, s, vt = np.linalg.svd(a)
    s[2] = 0.0
    return FundamentalMatrix.from_matrix(u @ np.diag(s) @ vt)
