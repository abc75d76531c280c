"""Camera pose algebra: look-at frames, relative poses and canonical view sets.

Conventions (shared with the synthetic renderer):
  - right-handed world coordinates with +z up, scene centred at the origin
  - camera-to-world matrices; the camera frame columns are
    [right, down, forward] so rays through pixel (u, v) are
    ``forward + u * right + v * down`` with u, v in tan-half-fov units
  - azimuth rotates about +z starting from +x; elevation lifts toward +z
  - relative pose = inverse(reference) @ pose, making the reference view the
    identity transform
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DISTANCE_RANGE = (1.4, 1.6)
FOV_RANGE_DEG = (40.0, 60.0)
ELEVATION_RANGE_DEG = (0.0, 30.0)
NUM_AZIMUTH_BINS = 32


@dataclass(frozen=True)
class CameraPose:
    """A rigid camera-to-world transform plus a symmetric pinhole fov."""

    c2w: np.ndarray
    fov_deg: float

    def __post_init__(self):
        c2w = np.asarray(self.c2w, dtype=np.float64)
        if c2w.shape != (4, 4):
            raise ValueError(f"c2w must be 4x4, got {c2w.shape}")
        rot = c2w[:3, :3]
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-6):
            raise ValueError("rotation block is not orthonormal")
        if np.linalg.det(rot) < 0:
            raise ValueError("rotation block must have determinant +1")
        if not np.allclose(c2w[3], [0, 0, 0, 1], atol=1e-9):
            raise ValueError("last row must be (0, 0, 0, 1)")
        object.__setattr__(self, "c2w", c2w)

    @property
    def position(self) -> np.ndarray:
        return self.c2w[:3, 3]

    @property
    def rotation(self) -> np.ndarray:
        return self.c2w[:3, :3]

    def inverse_c2w(self) -> np.ndarray:
        """Rigid inverse (world-to-camera) without a general matrix solve."""
        rot_t = self.c2w[:3, :3].T
        inv = np.eye(4)
        inv[:3, :3] = rot_t
        inv[:3, 3] = -rot_t @ self.c2w[:3, 3]
        return inv

    def to_flat(self) -> list[float]:
        """Row-major 16-number list for the dataset manifest."""
        return [float(v) for v in self.c2w.reshape(-1)]

    @staticmethod
    def from_flat(values, fov_deg: float) -> "CameraPose":
        arr = np.asarray(values, dtype=np.float64)
        if arr.size != 16:
            raise ValueError(f"expected 16 values, got {arr.size}")
        return CameraPose(c2w=arr.reshape(4, 4), fov_deg=float(fov_deg))

    @staticmethod
    def identity(fov_deg: float = 50.0) -> "CameraPose":
        return CameraPose(c2w=np.eye(4), fov_deg=fov_deg)


@dataclass(frozen=True)
class CanonicalViewSet:
    """Four views 90 degrees apart in azimuth, expressed relative to view 0."""

    poses: tuple[CameraPose, CameraPose, CameraPose, CameraPose]
    reference_index: int = 0

    def __post_init__(self):
        if len(self.poses) != 4:
            raise ValueError(f"canonical view set needs exactly 4 poses, got {len(self.poses)}")

    def is_reference_identity(self, atol: float = 1e-6) -> bool:
        return np.allclose(self.poses[self.reference_index].c2w, np.eye(4), atol=atol)


def look_at(position, target, up, fov_deg: float = 50.0) -> CameraPose:
    """Camera at ``position`` with forward axis toward ``target``."""
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    forward = target - position
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise ValueError("camera position coincides with the target")
    forward = forward / norm
    right = np.cross(forward, up)
    right_norm = np.linalg.norm(right)
    if right_norm < 1e-8:
        raise ValueError("up vector is parallel to the view direction")
    right = right / right_norm
    down = np.cross(forward, right)
    c2w = np.eye(4)
    c2w[:3, 0] = right
    c2w[:3, 1] = down
    c2w[:3, 2] = forward
    c2w[:3, 3] = position
    return CameraPose(c2w=c2w, fov_deg=fov_deg)


def relative_pose(pose: CameraPose, reference: CameraPose) -> CameraPose:
    """Express ``pose`` in the reference camera's frame; fov is preserved."""
    return CameraPose(c2w=reference.inverse_c2w() @ pose.c2w, fov_deg=pose.fov_deg)


def orbit_pose(distance: float, elevation_deg: float, azimuth_deg: float, fov_deg: float) -> CameraPose:
    """Look-at pose on a sphere around the origin (world +z up)."""
    el = np.deg2rad(elevation_deg)
    az = np.deg2rad(azimuth_deg)
    position = distance * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
    return look_at(position, np.zeros(3), np.array([0.0, 0.0, 1.0]), fov_deg=fov_deg)


def absolute_canonical_poses(
    distance: float, elevation_deg: float, azimuth0_deg: float, fov_deg: float
) -> list[CameraPose]:
    """World-frame poses of the four canonical views (azimuth0 + k * 90)."""
    return [orbit_pose(distance, elevation_deg, azimuth0_deg + 90.0 * k, fov_deg) for k in range(4)]


def canonical_views(
    distance: float, elevation_deg: float, azimuth0_deg: float, fov_deg: float
) -> CanonicalViewSet:
    """The four-view set expressed relative to view 0 (which becomes identity)."""
    absolute = absolute_canonical_poses(distance, elevation_deg, azimuth0_deg, fov_deg)
    reference = absolute[0]
    rel = tuple(relative_pose(p, reference) for p in absolute)
    return CanonicalViewSet(poses=rel, reference_index=0)


def sample_camera(rng: np.random.Generator) -> tuple[float, float, float, float]:
    """Draw (distance, fov, elevation, azimuth0) from the training ranges.

    Distance, fov and elevation are uniform; the starting azimuth is drawn
    from 32 uniformly spaced bins of 11.25 degrees.
    """
    distance = rng.uniform(*DISTANCE_RANGE)
    fov = rng.uniform(*FOV_RANGE_DEG)
    elevation = rng.uniform(*ELEVATION_RANGE_DEG)
    azimuth0 = (360.0 / NUM_AZIMUTH_BINS) * int(rng.integers(0, NUM_AZIMUTH_BINS))
    return distance, fov, elevation, azimuth0
