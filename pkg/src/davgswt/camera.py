"""Camera poses on the viewing hemisphere and the pinhole / orthographic views
used by the capture oracle and the splat rasterizer.

Conventions: world z is up and the scene is centred on the origin.  Camera
space is x right, y down, z forward, so pixel ``(row, col)`` has its centre at
``(col + 0.5, row + 0.5)`` in continuous image coordinates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, PoseError

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class Pose:
    """Look-at-origin camera pose ``(elevation, azimuth, radius)``.

    Azimuth is stored canonically in ``[0, 2*pi)``.
    """

    elevation: float
    azimuth: float
    radius: float

    def __post_init__(self):
        el, az, r = float(self.elevation), float(self.azimuth), float(self.radius)
        if not (math.isfinite(el) and math.isfinite(az) and math.isfinite(r)):
            raise PoseError(f"non-finite pose ({el}, {az}, {r})")
        if r <= 0:
            raise PoseError(f"radius must be positive, got {r}")
        if el < -1e-12 or el > math.pi / 2 + 1e-12:
            raise PoseError(f"elevation {el} outside [0, pi/2]")
        az = math.fmod(az, TWO_PI)
        if az < 0:
            az += TWO_PI
        if az >= TWO_PI:
            az = 0.0
        object.__setattr__(self, "elevation", min(max(el, 0.0), math.pi / 2))
        object.__setattr__(self, "azimuth", az)
        object.__setattr__(self, "radius", r)

    @property
    def position(self) -> np.ndarray:
        ce = math.cos(self.elevation)
        return self.radius * np.array(
            [ce * math.cos(self.azimuth), ce * math.sin(self.azimuth), math.sin(self.elevation)]
        )

    def rotation(self) -> np.ndarray:
        """World-to-camera rotation; rows are the camera right, down and forward axes."""
        ce, se = math.cos(self.elevation), math.sin(self.elevation)
        ca, sa = math.cos(self.azimuth), math.sin(self.azimuth)
        forward = -np.array([ce * ca, ce * sa, se])
        # perpendicular to forward for every elevation, including nadir
        right = np.array([-sa, ca, 0.0])
        down = np.cross(forward, right)
        return np.stack([right, down, forward])

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.elevation, self.azimuth, self.radius)


@dataclass(frozen=True)
class Intrinsics:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float

    @classmethod
    def from_fov(cls, width: int, height: int, fov_deg: float = 40.0) -> "Intrinsics":
        if width < 1 or height < 1:
            raise ConfigurationError("resolution must be positive")
        f = 0.5 * width / math.tan(math.radians(fov_deg) / 2.0)
        return cls(int(width), int(height), f, f, width / 2.0, height / 2.0)

    def scaled(self, width: int, height: int) -> "Intrinsics":
        sx, sy = width / self.width, height / self.height
        return Intrinsics(int(width), int(height), self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy)


@dataclass(frozen=True)
class PerspectiveView:
    """A posed pinhole camera, the unit the rasterizer consumes."""

    rotation: np.ndarray
    position: np.ndarray
    intrinsics: Intrinsics

    @classmethod
    def from_pose(cls, pose: Pose, intrinsics: Intrinsics) -> "PerspectiveView":
        return cls(pose.rotation(), pose.position, intrinsics)

    @property
    def resolution(self) -> tuple[int, int]:
        return (self.intrinsics.height, self.intrinsics.width)

    def pixel_rays(self) -> np.ndarray:
        """Unit world-space ray directions through every pixel centre, (H, W, 3)."""
        k = self.intrinsics
        u = (np.arange(k.width) + 0.5 - k.cx) / k.fx
        v = (np.arange(k.height) + 0.5 - k.cy) / k.fy
        uu, vv = np.meshgrid(u, v)
        cam = np.stack([uu, vv, np.ones_like(uu)], axis=-1)
        cam /= np.linalg.norm(cam, axis=-1, keepdims=True)
        return cam @ self.rotation


@dataclass(frozen=True)
class OrthoView:
    """Top-down orthographic camera over the world rectangle starting at ``origin``.

    Column index grows with world x and row index with world y.
    """

    origin: tuple[float, float]
    pixel_size: float
    height: int
    width: int
    top: float = 10.0

    @property
    def resolution(self) -> tuple[int, int]:
        return (self.height, self.width)
