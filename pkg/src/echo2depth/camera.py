"""Pinhole raycasting for depth and grayscale targets.

The camera has a 90 degree horizontal and vertical field of view.  Depth is
the planar (camera-axis) distance to the first surface, as a stereo camera
reports it, then clipped and normalised like the audio-side depth.
Grayscale is Lambert shading under a directional headlight along the
optical axis plus an ambient term.
"""
import numpy as np

from . import kernels
from .preprocess import MAX_RANGE_M, normalize_depth
from .scene import RoomScene, SceneError

RESOLUTIONS = (16, 32, 64, 128)
HALF_FOV = np.pi / 4
AMBIENT = 0.25
WALL_ALBEDO = 0.75
FLOOR_ALBEDO = 0.35
CEILING_ALBEDO = 0.9


def camera_rays(scene: RoomScene, resolution: int) -> np.ndarray:
    """Unit ray directions, row-major, row 0 at the top of the image."""
    f, u, r = scene.forward, scene.up, scene.right
    scale = np.tan(HALF_FOV)
    coords = (2 * (np.arange(resolution) + 0.5) / resolution - 1) * scale
    x = coords[None, :]          # columns, left to right
    y = -coords[:, None]         # rows, top to bottom
    dirs = f[None, None, :] + x[..., None] * r[None, None, :] + y[..., None] * u[None, None, :]
    dirs = dirs.reshape(-1, 3)
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def _check(scene: RoomScene, resolution: int):
    if resolution not in RESOLUTIONS:
        raise ValueError(f"resolution must be one of {RESOLUTIONS}, got {resolution}")
    if scene.camera_inside_obstacle():
        raise SceneError("camera is inside an obstacle")


def cast(scene: RoomScene, resolution: int):
    """Raycast once: ``(planar depth m, hit mask, surface ids, normals, ray dirs)``."""
    _check(scene, resolution)
    dirs = camera_rays(scene, resolution)
    origin = np.asarray(scene.camera_position, float)
    if scene.obstacles:
        lo = np.array([b.lo for b in scene.obstacles])
        hi = np.array([b.hi for b in scene.obstacles])
    else:
        lo = np.zeros((0, 3))
        hi = np.zeros((0, 3))
    t, surface, normal = kernels.raycast(origin, dirs, np.asarray(scene.room_size, float), lo, hi)
    hit = np.isfinite(t) & (surface >= 0)
    planar = np.where(hit, t * (dirs @ scene.forward), 0.0)
    shape = (resolution, resolution)
    return planar.reshape(shape), hit.reshape(shape), surface.reshape(shape), normal, dirs


def _depth(planar, hit):
    return normalize_depth(planar, hit, max_range=MAX_RANGE_M)


def _albedo(scene: RoomScene, surface):
    table = np.full(kernels.N_ROOM_SURFACES + len(scene.obstacles), WALL_ALBEDO)
    table[kernels.FLOOR] = FLOOR_ALBEDO
    table[kernels.CEILING] = CEILING_ALBEDO
    for i, box in enumerate(scene.obstacles):
        table[kernels.N_ROOM_SURFACES + i] = 1.0 - box.absorption
    return np.where(surface >= 0, table[np.maximum(surface, 0)], 0.0)


def _gray(scene, hit, surface, normal):
    lambert = np.clip(-(normal @ scene.forward), 0.0, 1.0).reshape(hit.shape)
    gray = _albedo(scene, surface) * (AMBIENT + (1 - AMBIENT) * lambert)
    return np.where(hit, np.clip(gray, 0.0, 1.0), 0.0)


def render_depth_map(scene: RoomScene, resolution: int) -> np.ndarray:
    planar, hit, *_ = cast(scene, resolution)
    return _depth(planar, hit)


def render_grayscale(scene: RoomScene, resolution: int) -> np.ndarray:
    _, hit, surface, normal, _ = cast(scene, resolution)
    return _gray(scene, hit, surface, normal)


def render_views(scene: RoomScene, resolution: int):
    """``(depth, gray)`` from a single raycast."""
    planar, hit, surface, normal, _ = cast(scene, resolution)
    return _depth(planar, hit), _gray(scene, hit, surface, normal)
