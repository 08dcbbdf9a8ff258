"""Deterministic synthetic multi-view benchmark generator.

Each instance is a cloud of landmarks in the unit ball carrying descriptors
with a shared category component; cameras orbit the cloud and deposit visible
landmark descriptors into grid cells. Everything is a pure function of the
seed and parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataio import ManifestIndex, ManifestRecord, PoseRecord, load_manifest, write_manifest, write_tensor
from .geometry import CameraView
from .guides import GridSpec

# Independent stream salts; category descriptors depend on the category id
# alone so instances of one category share a mean across scene seeds.
_CATEGORY_SALT = 101
_SCENE_SALT = 202
_VIEW_SALT = 303

DEFAULT_GRID = GridSpec(s=7, width=224, height=224)


def _seed_list(seed) -> list[int]:
    if isinstance(seed, (int, np.integer)):
        return [int(seed)]
    return [int(v) for v in seed]


def orbit_view(
    radius: float,
    azimuth: float,
    elevation: float = 0.0,
    width: int = 224,
    height: int = 224,
    fill: float = 0.85,
) -> CameraView:
    """Camera at the given orbit angle, looking at the origin (z toward it).

    ``fill`` sets how much of the unit ball the frustum spans laterally, so
    values below 1 leave part of the ball outside the image and make the
    visible landmark set vary with viewpoint.
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


def project_points(view: CameraView, points: np.ndarray):
    """Pixel projections of world points plus an in-image visibility mask."""
    pts = np.asarray(points, dtype=np.float64)
    cam = (view.rotation @ pts.T).T + view.translation
    z = cam[:, 2]
    pix_h = (view.intrinsics @ cam.T).T
    with np.errstate(divide="ignore", invalid="ignore"):
        pix = pix_h[:, :2] / pix_h[:, 2:3]
    visible = (
        (z > 1e-6)
        & (pix[:, 0] >= 0.0)
        & (pix[:, 0] < view.width)
        & (pix[:, 1] >= 0.0)
        & (pix[:, 1] < view.height)
    )
    return pix, visible


@dataclass(frozen=True)
class SyntheticScene:
    """Landmark cloud with descriptors; same-category scenes share a mean."""

    instance_id: str
    category_id: int
    positions: np.ndarray
    descriptors: np.ndarray

    def __post_init__(self):
        pos = np.array(self.positions, dtype=np.float64)
        desc = np.array(self.descriptors, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3 or pos.shape[0] < 1:
            raise ValueError("positions must be (n, 3) with n >= 1")
        if desc.shape[0] != pos.shape[0] or desc.ndim != 2:
            raise ValueError("one descriptor row per landmark")
        if not (np.isfinite(pos).all() and np.isfinite(desc).all()):
            raise ValueError("scene data must be finite")
        pos.flags.writeable = False
        desc.flags.writeable = False
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "descriptors", desc)

    @property
    def landmark_count(self) -> int:
        return self.positions.shape[0]


@dataclass(frozen=True)
class SyntheticView:
    """One rendered viewpoint: camera, feature grid, landmark visibility."""

    view: CameraView
    features: np.ndarray
    visible: np.ndarray
    cells: np.ndarray

    def __post_init__(self):
        if not np.isfinite(self.features).all():
            raise ValueError("feature grid must be finite")
        if self.visible.shape != self.cells.shape:
            raise ValueError("visibility mask and cell indices must align")
        n_cells = self.features.shape[0]
        marked = self.cells[self.visible]
        if marked.size and (marked.min() < 0 or marked.max() >= n_cells):
            raise ValueError("visible landmarks must land in a grid cell")


def category_mean(category_id: int, m: int, category_sigma: float = 1.0) -> np.ndarray:
    rng = np.random.default_rng([_CATEGORY_SALT, int(category_id)])
    return category_sigma * rng.standard_normal(m)


def generate_scene(
    seed,
    n_landmarks: int,
    m: int,
    category_id: int,
    *,
    instance_id: str | None = None,
    category_sigma: float = 1.0,
    instance_sigma: float = 0.35,
    landmark_sigma: float = 0.45,
) -> SyntheticScene:
    """Landmarks uniform in the unit ball; descriptor = category mean +
    instance offset + per-landmark component, all seeded normals."""
    if n_landmarks < 1:
        raise ValueError("need at least one landmark")
    rng = np.random.default_rng([_SCENE_SALT, *_seed_list(seed)])
    direction = rng.standard_normal((n_landmarks, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    positions = direction * rng.random((n_landmarks, 1)) ** (1.0 / 3.0)
    offset = instance_sigma * rng.standard_normal(m)
    local = landmark_sigma * rng.standard_normal((n_landmarks, m))
    descriptors = category_mean(category_id, m, category_sigma) + offset + local
    if instance_id is None:
        instance_id = "s" + "_".join(str(v) for v in _seed_list(seed))
    return SyntheticScene(
        instance_id=instance_id,
        category_id=int(category_id),
        positions=positions,
        descriptors=descriptors,
    )


def render_views(
    scene: SyntheticScene,
    n_views: int,
    radius: float,
    elevation_jitter: float,
    noise_sigma: float,
    gridspec: GridSpec,
    seed,
    *,
    azimuth_jitter: float = 0.03,
    fill: float = 0.85,
) -> list[SyntheticView]:
    """Render cameras at 360/n_views degree spacing with seeded jitter.

    Visible landmarks deposit their descriptor (plus Gaussian noise) into the
    cell containing their projection, later landmarks overwriting earlier ones
    on collision; cells no landmark reaches hold pure noise.
    """
    if n_views < 2:
        raise ValueError("need at least two views")
    if radius <= 1.0:
        raise ValueError("orbit radius must exceed the unit ball")
    rng = np.random.default_rng([_VIEW_SALT, *_seed_list(seed)])
    s = gridspec.s
    out = []
    for k in range(n_views):
        azimuth = 2.0 * math.pi * k / n_views + rng.uniform(-azimuth_jitter, azimuth_jitter)
        elevation = rng.uniform(-elevation_jitter, elevation_jitter)
        view = orbit_view(radius, azimuth, elevation, gridspec.width, gridspec.height, fill)
        pix, visible = project_points(view, scene.positions)
        col = np.minimum((pix[:, 0] * s / gridspec.width).astype(np.int64), s - 1)
        row = np.minimum((pix[:, 1] * s / gridspec.height).astype(np.int64), s - 1)
        cells = np.where(visible, row * s + col, -1)
        features = noise_sigma * rng.standard_normal((gridspec.n_cells, scene.descriptors.shape[1]))
        deposit_noise = noise_sigma * rng.standard_normal(scene.descriptors.shape)
        for i in np.flatnonzero(visible):
            features[cells[i]] = scene.descriptors[i] + deposit_noise[i]
        out.append(
            SyntheticView(
                view=view,
                features=features.astype(np.float32),
                visible=visible,
                cells=cells,
            )
        )
    return out


def view_overlap(a: SyntheticView, b: SyntheticView) -> float:
    """Co-visible landmark fraction, normalized by the union of visible sets."""
    union = int(np.count_nonzero(a.visible | b.visible))
    if union == 0:
        return 1.0 if a is b else 0.0
    inter = int(np.count_nonzero(a.visible & b.visible))
    return inter / union


def generate_benchmark(
    seed: int,
    n_instances: int,
    n_categories: int,
    views_per_instance: int = 5,
    split_fraction: float = 0.5,
    *,
    out_dir,
    n_landmarks: int = 24,
    m: int = 32,
    gridspec: GridSpec = DEFAULT_GRID,
    radius: float = 4.0,
    elevation_jitter: float = 0.08,
    azimuth_jitter: float = 0.03,
    noise_sigma: float = 0.4,
    category_sigma: float = 1.0,
    instance_sigma: float = 0.35,
    landmark_sigma: float = 0.45,
    fill: float = 0.85,
) -> ManifestIndex:
    """Write feature tensors plus a manifest and return the loaded index.

    Instances split into disjoint train/test sets (first round(n * fraction)
    train); categories repeat across both splits. Overlap scores cover all
    same-instance view pairs, self included.
    """
    if n_instances < 2:
        raise ValueError("need at least two instances")
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    n_train = int(round(n_instances * split_fraction))
    records = []
    for idx in range(n_instances):
        instance_id = f"i{idx:04d}"
        scene = generate_scene(
            [seed, idx],
            n_landmarks,
            m,
            category_id=idx % n_categories,
            instance_id=instance_id,
            category_sigma=category_sigma,
            instance_sigma=instance_sigma,
            landmark_sigma=landmark_sigma,
        )
        rendered = render_views(
            scene,
            views_per_instance,
            radius,
            elevation_jitter,
            noise_sigma,
            gridspec,
            [seed, idx],
            azimuth_jitter=azimuth_jitter,
            fill=fill,
        )
        image_ids = [f"{instance_id}_v{v}" for v in range(views_per_instance)]
        for v, shot in enumerate(rendered):
            feature_path = f"features/{image_ids[v]}.epgt"
            write_tensor(out_dir / feature_path, shot.features)
            pose = PoseRecord(
                r=tuple(float(x) for x in shot.view.rotation.ravel()),
                t=tuple(float(x) for x in shot.view.translation),
                k=tuple(float(x) for x in shot.view.intrinsics.ravel()),
                w=shot.view.width,
                h=shot.view.height,
            )
            overlaps = {
                image_ids[u]: view_overlap(shot, rendered[u]) for u in range(views_per_instance)
            }
            records.append(
                ManifestRecord(
                    image_id=image_ids[v],
                    instance_id=instance_id,
                    category_id=f"c{idx % n_categories:02d}",
                    split="train" if idx < n_train else "test",
                    feature_path=feature_path,
                    pose=pose,
                    overlaps=overlaps,
                )
            )
    manifest_path = out_dir / "manifest.jsonl"
    write_manifest(manifest_path, records)
    return load_manifest(manifest_path)


def pose_to_view(pose: PoseRecord) -> CameraView:
    """Rebuild the camera from its flattened manifest record."""
    return CameraView(
        rotation=np.asarray(pose.r, dtype=np.float64).reshape(3, 3),
        translation=np.asarray(pose.t, dtype=np.float64),
        intrinsics=np.asarray(pose.k, dtype=np.float64).reshape(3, 3),
        width=pose.w,
        height=pose.h,
    )
