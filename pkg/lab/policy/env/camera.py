"""
Affine Camera Pool
Each camera is an invertible affine map from the workspace onto the image
plane (rotation, isotropic scale, shear, translation about the workspace
center). A seeded pool of cameras is split into disjoint train and test sets so
evaluation can run on views never seen in the demonstrations.
"""
import math
from dataclasses import dataclass
from functools import cached_property
from typing import List, Tuple

import numpy as np

from ..exceptions import InvalidRangeError

ROTATION_RANGE = math.pi / 3
SCALE_RANGE = (0.7, 1.3)
TRANSLATION_RANGE = 0.1
SHEAR_RANGE = 0.15

CAMERA_SPLITS = ("train", "test", "fixed")


@dataclass(frozen=True)
class CameraPose:
    rotation: float = 0.0
    scale: float = 1.0
    tx: float = 0.0
    ty: float = 0.0
    shear: float = 0.0

    def matrix(self) -> np.ndarray:
        """2x2 linear part: scale * R(rotation) @ [[1, shear], [0, 1]]."""
        # Rounded so quarter and half turns are exact.
        c = round(math.cos(self.rotation), 12)
        s = round(math.sin(self.rotation), 12)
        rot = np.array([[c, -s], [s, c]])
        shear = np.array([[1.0, self.shear], [0.0, 1.0]])
        return self.scale * rot @ shear

    def affine(self) -> List[float]:
        """[a, b, c, d, e, f] with u = a*x + b*y + c, v = d*x + e*y + f (normalized units)."""
        m = self.matrix()
        offset = np.array([0.5 + self.tx, 0.5 + self.ty]) - m @ np.array([0.5, 0.5])
        return [float(m[0, 0]), float(m[0, 1]), float(offset[0]),
                float(m[1, 0]), float(m[1, 1]), float(offset[1])]

    def project(self, xy) -> np.ndarray:
        a, b, c, d, e, f = self.affine()
        xy = np.asarray(xy, dtype=np.float64)
        return np.stack([a * xy[..., 0] + b * xy[..., 1] + c, d * xy[..., 0] + e * xy[..., 1] + f], axis=-1)

    def unproject(self, uv) -> np.ndarray:
        """Image-plane points back to workspace coordinates."""
        m_inv = np.linalg.inv(self.matrix())
        uv = np.asarray(uv, dtype=np.float64)
        centered = uv - np.array([0.5 + self.tx, 0.5 + self.ty])
        return centered @ m_inv.T + 0.5


FIXED_CAMERA = CameraPose()


def sample_camera(rng: np.random.Generator) -> CameraPose:
    return CameraPose(
        rotation=float(rng.uniform(-ROTATION_RANGE, ROTATION_RANGE)),
        scale=float(rng.uniform(*SCALE_RANGE)),
        tx=float(rng.uniform(-TRANSLATION_RANGE, TRANSLATION_RANGE)),
        ty=float(rng.uniform(-TRANSLATION_RANGE, TRANSLATION_RANGE)),
        shear=float(rng.uniform(-SHEAR_RANGE, SHEAR_RANGE)),
    )


class CameraPool:
    """Seeded pool; every `test_every`-th camera is held out for evaluation."""

    def __init__(self, size: int = 1024, seed: int = 20250301, test_every: int = 20):
        if size < test_every or test_every < 2:
            raise InvalidRangeError(f"pool of {size} cannot hold out every {test_every}-th camera")
        self.size = size
        self.seed = seed
        self.test_every = test_every

    @cached_property
    def cameras(self) -> Tuple[CameraPose, ...]:
        rng = np.random.default_rng(self.seed)
        return tuple(sample_camera(rng) for _ in range(self.size))

    def is_test(self, index: int) -> bool:
        return index % self.test_every == self.test_every - 1

    def split(self, name: str) -> List[CameraPose]:
        if name == "fixed":
            return [FIXED_CAMERA]
        if name not in CAMERA_SPLITS:
            raise InvalidRangeError(f"unknown camera split: {name!r}")
        want_test = name == "test"
        return [cam for i, cam in enumerate(self.cameras) if self.is_test(i) == want_test]

    def draw(self, name: str, rng: np.random.Generator, n: int = 1) -> List[CameraPose]:
        cams = self.split(name)
        return [cams[int(i)] for i in rng.integers(len(cams), size=n)]


def default_pool() -> CameraPool:
    from django.conf import settings

    return CameraPool(
        size=getattr(settings, "CAMERA_POOL_SIZE", 1024),
        seed=getattr(settings, "CAMERA_POOL_SEED", 20250301),
        test_every=getattr(settings, "CAMERA_TEST_EVERY", 20),
    )
