"""Per-view 2D feature providers.

Each provider turns one frame into an (H, W, C) feature map at the
resolution given by the level-rescaled intrinsics.  Three flavours:

* ``constant``     -- fixed value, for tests
* ``depth-oracle`` -- descriptors of the first-hit surface point, either
                      rendered from a ground-truth scene or unprojected from
                      a dataset depth map
* ``photometric``  -- grayscale patch statistics from the color image
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .fragments import FrameRecord, load_depth_png
from .geometry import CameraIntrinsics
from .synth import GroundTruthScene, point_descriptors, synth_features


class FeatureProvider:
    def maps(self, frame: FrameRecord, intrinsics: CameraIntrinsics,
             channels: int) -> np.ndarray:
        raise NotImplementedError


@dataclass
class ConstantFeatureProvider(FeatureProvider):
    value: float = 1.0

    def maps(self, frame, intrinsics, channels):
        return np.full((intrinsics.height, intrinsics.width, channels), self.value)


@dataclass
class OracleFeatureProvider(FeatureProvider):
    """Renders surface-point descriptors directly from the analytic scene."""

    scene: GroundTruthScene
    d_max: float = 3.0

    def maps(self, frame, intrinsics, channels):
        return synth_features(self.scene, intrinsics, frame.pose, channels,
                              d_max=self.d_max)


@dataclass
class DepthOracleFeatureProvider(FeatureProvider):
    """Surface-point descriptors from a dataset depth map.

    Produces the same descriptor family as OracleFeatureProvider, so both
    routes are interchangeable downstream; still needs a scene for normals.
    """

    scene: GroundTruthScene
    d_max: float = 3.0

    def maps(self, frame, intrinsics, channels):
        from .geometry import unproject_pixel

        if frame.depth_path is None:
            raise ConfigError(f"frame {frame.frame_id} has no depth map")
        depth = load_depth_png(frame.depth_path)
        full = frame.intrinsics
        h, w = intrinsics.height, intrinsics.width
        # nearest-pixel lookup in the full-resolution depth map
        uu = np.clip(np.round(np.arange(w) * full.fx / intrinsics.fx
                              + (full.cx - intrinsics.cx * full.fx / intrinsics.fx)
                              ).astype(int), 0, full.width - 1)
        vv = np.clip(np.round(np.arange(h) * full.fy / intrinsics.fy
                              + (full.cy - intrinsics.cy * full.fy / intrinsics.fy)
                              ).astype(int), 0, full.height - 1)
        d = depth[np.ix_(vv, uu)]
        valid = (d > 0) & (d <= self.d_max)
        gv, gu = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        pts = np.zeros((h * w, 3))
        vidx = valid.ravel()
        if vidx.any():
            sel = np.flatnonzero(vidx)
            pts[sel] = np.stack([
                unproject_pixel(intrinsics, frame.pose, (u, v), z)
                for u, v, z in zip(gu.ravel()[sel], gv.ravel()[sel], d.ravel()[sel])
            ])
        desc = point_descriptors(pts, vidx, self.scene, channels)
        return desc.reshape(h, w, channels)


@dataclass
class PhotometricFeatureProvider(FeatureProvider):
    """Grayscale intensity + gradient patch descriptors from color images."""

    def maps(self, frame, intrinsics, channels):
        import cv2

        if frame.image_path is None:
            raise ConfigError(f"frame {frame.frame_id} has no color image")
        img = cv2.imread(frame.image_path, cv2.IMREAD_GRAYSCALE)
        if img is None:
            raise FileNotFoundError(frame.image_path)
        img = cv2.resize(img, (intrinsics.width, intrinsics.height),
                         interpolation=cv2.INTER_AREA).astype(np.float64) / 255.0
        gx = cv2.Sobel(img, cv2.CV_64F, 1, 0, ksize=3)
        gy = cv2.Sobel(img, cv2.CV_64F, 0, 1, ksize=3)
        planes = [img, gx, gy]
        k = 1
        while len(planes) < channels:
            planes.append(cv2.GaussianBlur(img, (0, 0), sigmaX=k))
            k += 1
        return np.stack(planes[:channels], axis=-1)


def make_feature_provider(name: str, scene: GroundTruthScene | None = None,
                          d_max: float = 3.0) -> FeatureProvider:
    if name == "constant":
        return ConstantFeatureProvider()
    if name == "oracle":
        if scene is None:
            raise ConfigError("feature provider 'oracle' needs a scene")
        return OracleFeatureProvider(scene=scene, d_max=d_max)
    if name == "depth-oracle":
        if scene is None:
            raise ConfigError("feature provider 'depth-oracle' needs a scene")
        return DepthOracleFeatureProvider(scene=scene, d_max=d_max)
    if name == "photometric":
        return PhotometricFeatureProvider()
    raise ConfigError(f"unknown feature provider {name!r}")
