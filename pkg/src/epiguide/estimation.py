"""Robust two-view geometry from point correspondences.

Normalized eight-point estimation, Sampson residuals, seeded RANSAC with a
least-squares refit, and the integer reliability gate that decides whether a
pair may supervise training.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateConfiguration,
    InsufficientPoints,
    InvalidCounts,
    NoModelFound,
    ZeroDenominator,
)
from .geometry import FundamentalMatrix

_CONDITION_LIMIT = 1e12


@dataclass(frozen=True)
class Correspondences:
    """Pixel match list; rows are (x1, y1, x2, y2)."""

    pts: np.ndarray

    def __post_init__(self):
        pts = np.array(self.pts, dtype=np.float64).reshape(-1, 4)
        if not np.isfinite(pts).all():
            raise ValueError("correspondences must be finite")
        pts.flags.writeable = False
        object.__setattr__(self, "pts", pts)

    @property
    def n(self) -> int:
        return self.pts.shape[0]

    def subset(self, mask_or_index) -> "Correspondences":
        return Correspondences(self.pts[mask_or_index])


@dataclass(frozen=True)
class RobustEstimate:
    f: FundamentalMatrix
    inlier_mask: np.ndarray
    inlier_count: int
    reliable: bool

    def __post_init__(self):
        mask = np.array(self.inlier_mask, dtype=bool)
        mask.flags.writeable = False
        object.__setattr__(self, "inlier_mask", mask)
        if self.inlier_count != int(np.count_nonzero(mask)):
            raise ValueError("inlier_count must match the mask")
        if self.reliable != reliability_gate(mask.size, self.inlier_count):
            raise ValueError("reliable flag inconsistent with the gate rule")


def _hartley_transform(points: np.ndarray) -> np.ndarray:
    """Similarity taking the point set to zero mean and RMS radius sqrt(2)."""
    mean = points.mean(axis=0)
    rms = np.sqrt(np.mean(np.sum((points - mean) ** 2, axis=1)))
    scale = np.sqrt(2.0) / rms if rms > 0 else 1.0
    return np.array(
        [
            [scale, 0.0, -scale * mean[0]],
            [0.0, scale, -scale * mean[1]],
            [0.0, 0.0, 1.0],
        ]
    )


def _linear_estimate(pts: np.ndarray) -> np.ndarray:
    """Denormalized rank-2 estimate as a raw 3x3 matrix (not canonical)."""
    t1 = _hartley_transform(pts[:, 0:2])
    t2 = _hartley_transform(pts[:, 2:4])
    x1 = pts[:, 0:2] * t1[0, 0] + t1[:2, 2]
    x2 = pts[:, 2:4] * t2[0, 0] + t2[:2, 2]
    a = np.empty((pts.shape[0], 9))
    a[:, 0] = x2[:, 0] * x1[:, 0]
    a[:, 1] = x2[:, 0] * x1[:, 1]
    a[:, 2] = x2[:, 0]
    a[:, 3] = x2[:, 1] * x1[:, 0]
    a[:, 4] = x2[:, 1] * x1[:, 1]
    a[:, 5] = x2[:, 1]
    a[:, 6] = x1[:, 0]
    a[:, 7] = x1[:, 1]
    a[:, 8] = 1.0
    # full_matrices so the 9th right singular vector exists for minimal samples
    _, s, vt = np.linalg.svd(a, full_matrices=True)
    if s[7] == 0.0 or s[0] / s[7] > _CONDITION_LIMIT:
        raise DegenerateConfiguration(
            f"design matrix condition {s[0] / s[7] if s[7] else np.inf:.3g} exceeds {_CONDITION_LIMIT:g}"
        )
    fn = vt[-1].reshape(3, 3)
    u, sv, vt3 = np.linalg.svd(fn)
    fn = (u * np.array([sv[0], sv[1], 0.0])) @ vt3
    return t2.T @ fn @ t1


def normalized_eight_point(c: Correspondences) -> FundamentalMatrix:
    """Least-squares epipolar fit on Hartley-normalized coordinates."""
    if c.n < 8:
        raise InsufficientPoints(f"need at least 8 correspondences, got {c.n}")
    return FundamentalMatrix.from_matrix(_linear_estimate(c.pts))


def _sampson_many(m: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Vectorized Sampson errors; zero-denominator rows come back as +inf."""
    ones = np.ones((pts.shape[0], 1))
    x1 = np.hstack([pts[:, 0:2], ones])
    x2 = np.hstack([pts[:, 2:4], ones])
    fx1 = x1 @ m.T
    ftx2 = x2 @ m
    num = np.sum(x2 * fx1, axis=1) ** 2
    den = fx1[:, 0] ** 2 + fx1[:, 1] ** 2 + ftx2[:, 0] ** 2 + ftx2[:, 1] ** 2
    out = np.full(pts.shape[0], np.inf)
    ok = den > 0.0
    out[ok] = num[ok] / den[ok]
    return out


def sampson_error(f: FundamentalMatrix, pair) -> float:
    """First-order epipolar residual in squared pixels."""
    pts = np.asarray(pair, dtype=np.float64).reshape(1, 4)
    err = _sampson_many(f.m, pts)[0]
    if not np.isfinite(err):
        raise ZeroDenominator("both correspondence points sit at the epipoles")
    return float(err)


def ransac_fundamental(
    c: Correspondences, iterations: int, threshold_px2: float, seed: int
) -> RobustEstimate:
    """Fixed-threshold RANSAC over 8-point minimal samples, then a refit.

    Candidates are scored by inlier count with mean-inlier-error tie-break;
    the winner is refit on its inliers and the mask recomputed.
    """
    if c.n < 8:
        raise InsufficientPoints(f"need at least 8 correspondences, got {c.n}")
    if iterations < 1:
        raise ValueError("need at least one iteration")
    rng = np.random.default_rng(seed)
    best = None
    best_key = (-1, np.inf)
    for _ in range(iterations):
        sample = rng.choice(c.n, size=8, replace=False)
        try:
            m = _linear_estimate(c.pts[sample])
        except DegenerateConfiguration:
            continue
        err = _sampson_many(m, c.pts)
        mask = err < threshold_px2
        count = int(np.count_nonzero(mask))
        mean_err = float(err[mask].mean()) if count else np.inf
        key = (count, mean_err)
        if key[0] > best_key[0] or (key[0] == best_key[0] and key[1] < best_key[1]):
            best_key = key
            best = (m, mask)
    if best is None:
        raise NoModelFound("every sampled minimal set was degenerate")
    m, mask = best
    # refit on the inlier set until the mask stops changing (few rounds)
    for _ in range(10):
        if int(np.count_nonzero(mask)) < 8:
            break
        try:
            refit = _linear_estimate(c.pts[mask])
        except DegenerateConfiguration:
            break
        new_mask = _sampson_many(refit, c.pts) < threshold_px2
        m = refit
        if np.array_equal(new_mask, mask):
            break
        mask = new_mask
    f = FundamentalMatrix.from_matrix(m)
    count = int(np.count_nonzero(mask))
    return RobustEstimate(
        f=f,
        inlier_mask=mask,
        inlier_count=count,
        reliable=reliability_gate(c.n, count),
    )


def reliability_gate(n_matches: int, n_inliers: int) -> bool:
    """Integer-exact gate: reliable iff matches > 20 and inliers > matches/5."""
    if n_matches < 0 or n_inliers < 0 or n_inliers > n_matches:
        raise InvalidCounts(f"invalid counts ({n_matches}, {n_inliers})")
    return n_matches > 20 and 5 * n_inliers > n_matches


def save_correspondences(path, c: Correspondences) -> None:
    """JSON array of [x1, y1, x2, y2] rows."""
    Path(path).write_text(json.dumps([list(row) for row in c.pts.tolist()]))


def load_correspondences(path) -> Correspondences:
    raw = json.loads(Path(path).read_text())
    return Correspondences(np.asarray(raw, dtype=np.float64).reshape(-1, 4))
