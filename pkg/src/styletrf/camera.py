"""Pinhole cameras and ray generation.

Convention matches the synthetic Blender datasets: camera space has -z
forward and +y up, camera_to_world is a 3x4 [R|t] with world-space columns.
Pixel (i, j) = (column, row), sampled at the pixel center (i + 0.5, j + 0.5).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation


@dataclass
class Camera:
    width: int
    height: int
    focal: float
    camera_to_world: np.ndarray  # (3, 4) float64
    cx: float = None
    cy: float = None

    def __post_init__(self):
        self.camera_to_world = np.asarray(self.camera_to_world, dtype=np.float64)
        if self.camera_to_world.shape == (4, 4):
            self.camera_to_world = self.camera_to_world[:3]
        if self.camera_to_world.shape != (3, 4):
            raise ContractViolation(
                f"camera_to_world must be (3, 4), got {self.camera_to_world.shape}"
            )
        R = self.camera_to_world[:, :3]
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-5:
            raise ContractViolation("camera rotation is not orthonormal")
        if self.cx is None:
            self.cx = self.width / 2.0
        if self.cy is None:
            self.cy = self.height / 2.0

    @property
    def origin(self) -> np.ndarray:
        return self.camera_to_world[:, 3]

    @property
    def rotation(self) -> np.ndarray:
        return self.camera_to_world[:, :3]

    @property
    def forward(self) -> np.ndarray:
        """World-space view direction (-z column)."""
        return -self.camera_to_world[:, 2]

    @classmethod
    def from_fov(cls, width, height, camera_angle_x, camera_to_world) -> "Camera":
        """Build from the horizontal field of view in radians."""
        focal = 0.5 * width / np.tan(0.5 * camera_angle_x)
        return cls(width=width, height=height, focal=focal, camera_to_world=camera_to_world)

    @property
    def camera_angle_x(self) -> float:
        return float(2.0 * np.arctan(0.5 * self.width / self.focal))

    def with_pose(self, camera_to_world) -> "Camera":
        return Camera(
            width=self.width,
            height=self.height,
            focal=self.focal,
            camera_to_world=np.asarray(camera_to_world, dtype=np.float64),
            cx=self.cx,
            cy=self.cy,
        )


def look_at(position, target, up_hint) -> np.ndarray:
    """Camera-to-world (3, 4) looking from position toward target.

    The -z axis points at the target; +y is the component of up_hint
    orthogonal to the view direction.
    """
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up_hint = np.asarray(up_hint, dtype=np.float64)
    fwd = target - position
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise ContractViolation("look_at target coincides with position")
    fwd = fwd / n
    z = -fwd
    x = np.cross(up_hint, z)
    nx = np.linalg.norm(x)
    if nx < 1e-9:
        raise ContractViolation("up_hint is parallel to the view direction")
    x = x / nx
    y = np.cross(z, x)
    return np.stack([x, y, z, position], axis=1)


def pixel_directions(cam: Camera, px: np.ndarray, py: np.ndarray, jitter=None):
    """World-space unit ray directions for pixel coordinates.

    px, py are column/row indices (int or float arrays).  jitter, when given,
    is a (..., 2) offset in [0, 1) replacing the default 0.5 center offset.
    """
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    if jitter is None:
        ox = oy = 0.5
    else:
        ox = jitter[..., 0]
        oy = jitter[..., 1]
    x = (px + ox - cam.cx) / cam.focal
    y = -(py + oy - cam.cy) / cam.focal
    z = -np.ones_like(x)
    d_cam = np.stack([x, y, z], axis=-1)
    d_world = d_cam @ cam.rotation.T
    return d_world / np.linalg.norm(d_world, axis=-1, keepdims=True)


def generate_rays(cam: Camera, pixels=None, jitter=None):
    """Rays for selected pixels (default: full image in row-major order).

    Returns (origins, directions), each (P, 3) float64 with unit directions.
    pixels: (P, 2) integer (column, row) pairs.
    """
    if pixels is None:
        py, px = np.mgrid[0 : cam.height, 0 : cam.width]
        px = px.reshape(-1)
        py = py.reshape(-1)
    else:
        pixels = np.asarray(pixels)
        px = pixels[:, 0]
        py = pixels[:, 1]
    dirs = pixel_directions(cam, px, py, jitter=jitter)
    origins = np.broadcast_to(cam.origin, dirs.shape).copy()
    return origins, dirs


def project(cam: Camera, pts: np.ndarray):
    """World points -> (pixel_xy (..., 2), camera-space depth (...,)).

    Depth is the distance along -z (positive in front of the camera); pixel
    coordinates are continuous, with integer values at pixel centers offset
    by 0.5 (i.e. the center of pixel (i, j) projects to (i + 0.5, j + 0.5)).
    """
    pts = np.asarray(pts, dtype=np.float64)
    rel = pts - cam.origin
    p_cam = rel @ cam.rotation  # world -> camera: R^T (x - o), as row vectors
    depth = -p_cam[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        x = cam.cx + cam.focal * p_cam[..., 0] / depth
        y = cam.cy - cam.focal * p_cam[..., 1] / depth
    return np.stack([x, y], axis=-1), depth
