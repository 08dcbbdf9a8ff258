"""Shared builders for synthetic camera rigs used across the test suite."""

from __future__ import annotations

import math

import numpy as np

from epiguide.geometry import CameraView


def orbit_view(
    radius: float,
    azimuth: float,
    elevation: float = 0.0,
    width: int = 224,
    height: int = 224,
    fill: float = 0.85,
) -> CameraView:
    """Camera on a circle of given radius, looking at the origin.

    ``fill`` sets how much of the unit ball fits laterally: the frustum spans
    lateral extent +-fill at the orbit distance.
    """
    c = radius * np.array(
        [
            math.cos(elevation) * math.cos(azimuth),
            math.cos(elevation) * math.sin(azimuth),
            math.sin(elevation),
        ]
    )
    z = -c / np.linalg.norm(c)
    up = np.array([0.0, 0.0, 1.0])
    x = np.cross(z, up)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    r = np.stack([x, y, z])
    t = -r @ c
    f = 0.5 * min(width, height) * radius / fill
    k = np.array([[f, 0.0, width / 2.0], [0.0, f, height / 2.0], [0.0, 0.0, 1.0]])
    return CameraView(rotation=r, translation=t, intrinsics=k, width=width, height=height)


def random_orbit_pair(rng: np.random.Generator, min_sep=0.4, max_sep=2.2):
    """Two orbit cameras with a random angular separation (radians)."""
    radius = rng.uniform(3.0, 6.0)
    az1 = rng.uniform(0.0, 2.0 * math.pi)
    sep = rng.uniform(min_sep, max_sep) * rng.choice([-1.0, 1.0])
    el1 = rng.uniform(-0.12, 0.12)
    el2 = rng.uniform(-0.12, 0.12)
    v1 = orbit_view(radius, az1, el1)
    v2 = orbit_view(radius, az1 + sep, el2)
    return v1, v2


def project(view: CameraView, points: np.ndarray):
    """Pixel projections plus an in-image visibility mask."""
    pts = np.asarray(points, dtype=np.float64)
    cam = (view.rotation @ pts.T).T + view.translation
    z = cam[:, 2]
    pix_h = (view.intrinsics @ cam.T).T
    pix = pix_h[:, :2] / pix_h[:, 2:3]
    visible = (
        (z > 1e-6)
        & (pix[:, 0] >= 0.0)
        & (pix[:, 0] < view.width)
        & (pix[:, 1] >= 0.0)
        & (pix[:, 1] < view.height)
    )
    return pix, visible


def ball_points(rng: np.random.Generator, n: int) -> np.ndarray:
    """Uniform samples from the unit ball."""
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * rng.random((n, 1)) ** (1.0 / 3.0)
