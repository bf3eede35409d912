"""
Rasterizer
Draws the scene by mapping every pixel center back into the workspace through
the camera's inverse affine map and testing it against each primitive. No
anti-aliasing: the same (state, camera, size) always gives the same bytes.
"""
import math

import numpy as np

from .camera import CameraPose
from .world import GRIPPER_RADIUS, OBJECT_RADIUS, EnvState

BACKGROUND = (214, 204, 186)

OBJECT_RGB = {
    "red": (220, 40, 40),
    "green": (40, 170, 60),
    "blue": (40, 80, 220),
    "yellow": (230, 210, 40),
    "purple": (140, 60, 180),
    "orange": (240, 140, 30),
}
ZONE_RGB = {
    "gray": (150, 150, 150),
    "brown": (150, 105, 60),
}
SLOT_RGB = (70, 70, 70)
RIM_RGB = (255, 255, 255)
GRIPPER_OPEN_RGB = (250, 250, 250)
GRIPPER_CLOSED_RGB = (15, 15, 15)

SLOT_HALF_LENGTH = 0.07
SLOT_HALF_WIDTH = 0.012
RING_HALF_WIDTH = 0.008
TICK_HALF_WIDTH = 0.006
SQUARE_HALF = 0.85 * OBJECT_RADIUS


def pixel_grid(camera: CameraPose, size: int) -> np.ndarray:
    """(size, size, 2) workspace coordinates of pixel centers; rows follow v, columns u."""
    centers = (np.arange(size, dtype=np.float64) + 0.5) / size
    u, v = np.meshgrid(centers, centers)
    return camera.unproject(np.stack([u, v], axis=-1))


def _local(grid: np.ndarray, cx: float, cy: float, yaw: float):
    dx = grid[..., 0] - cx
    dy = grid[..., 1] - cy
    c, s = math.cos(yaw), math.sin(yaw)
    return dx * c + dy * s, -dx * s + dy * c


def _shade(rgb, factor: float):
    return tuple(int(round(ch * factor)) for ch in rgb)


def render(state: EnvState, camera: CameraPose, size: int = 64, show_gripper: bool = True) -> np.ndarray:
    grid = pixel_grid(camera, size)
    img = np.empty((size, size, 3), dtype=np.uint8)
    img[...] = BACKGROUND

    for zone in state.zones:
        half = zone.size / 2.0
        inside = (np.abs(grid[..., 0] - zone.cx) <= half) & (np.abs(grid[..., 1] - zone.cy) <= half)
        img[inside] = ZONE_RGB[zone.color_name]
        along, perp = _local(grid, zone.cx, zone.cy, zone.slot_yaw)
        img[(np.abs(along) <= SLOT_HALF_LENGTH) & (np.abs(perp) <= SLOT_HALF_WIDTH)] = SLOT_RGB

    held = state.gripper.held
    for obj in sorted(state.objects, key=lambda o: (o.id == held, o.layer, o.id)):
        along, perp = _local(grid, obj.x, obj.y, obj.yaw)
        dist = np.hypot(along, perp)
        if obj.shape == "disk":
            body = dist <= OBJECT_RADIUS
        else:
            body = (np.abs(along) <= SQUARE_HALF) & (np.abs(perp) <= SQUARE_HALF)
        rgb = OBJECT_RGB[obj.color_name]
        img[body] = rgb
        if obj.layer > 0:
            img[body & (dist >= 0.8 * OBJECT_RADIUS)] = RIM_RGB
        # Notch on the +x side of the object frame shows its yaw.
        notch = body & (along >= 0.45 * OBJECT_RADIUS) & (np.abs(perp) <= 0.3 * OBJECT_RADIUS)
        img[notch] = _shade(rgb, 0.4)

    if not show_gripper:
        return img

    g = state.gripper
    ring_radius = GRIPPER_RADIUS + 0.12 * g.z
    along, perp = _local(grid, g.x, g.y, g.yaw)
    dist = np.hypot(along, perp)
    color = GRIPPER_CLOSED_RGB if g.closed else GRIPPER_OPEN_RGB
    img[np.abs(dist - ring_radius) <= RING_HALF_WIDTH] = color
    tick = (along >= 0.0) & (along <= ring_radius + 0.01) & (np.abs(perp) <= TICK_HALF_WIDTH)
    img[tick] = color
    return img
