"""Camera models, projection, fragment bounding volumes and ray-grid traversal.

Conventions
-----------
* World frame is right-handed, z-up.  Poses map world -> camera
  (``x_cam = R @ x_world + t``); camera looks along +z.
* Pixel (u, v) = (fx*x/z + cx, fy*y/z + cy); a point is in view when
  z > 0 and (u, v) lies in [0, width) x [0, height).
* Voxel index ``v`` (integer triple) has its center at
  ``origin + (v + 0.5) * voxel_size``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidInputError, OutOfBoundsError

_ORTHO_TOL = 1e-6


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidInputError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidInputError("principal point must lie inside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def scaled(self, factor: float) -> "CameraIntrinsics":
        """Intrinsics for an image rescaled by ``factor`` (e.g. 0.5 halves it)."""
        return CameraIntrinsics(
            fx=self.fx * factor,
            fy=self.fy * factor,
            cx=self.cx * factor,
            cy=self.cy * factor,
            width=max(1, int(round(self.width * factor))),
            height=max(1, int(round(self.height * factor))),
        )


@dataclass(frozen=True)
class CameraPose:
    """World -> camera rigid transform."""

    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        if r.shape != (3, 3):
            raise InvalidInputError("rotation must be 3x3")
        if not np.allclose(r.T @ r, np.eye(3), atol=_ORTHO_TOL):
            raise InvalidInputError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > _ORTHO_TOL:
            raise InvalidInputError("rotation determinant must be +1")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def inverse_matrix(self) -> np.ndarray:
        """4x4 camera-to-world matrix."""
        m = np.eye(4)
        m[:3, :3] = self.rotation.T
        m[:3, 3] = self.center
        return m

    @classmethod
    def from_cam_to_world(cls, mat: np.ndarray) -> "CameraPose":
        """Build from a 4x4 camera-to-world matrix (dataset convention)."""
        mat = np.asarray(mat, dtype=float)
        if mat.shape != (4, 4):
            raise InvalidInputError("expected a 4x4 matrix")
        r_cw = mat[:3, :3]
        c = mat[:3, 3]
        return cls(rotation=r_cw.T, translation=-r_cw.T @ c)


Camera = tuple[CameraIntrinsics, CameraPose]


@dataclass(frozen=True)
class VoxelGridSpec:
    """Axis-aligned voxel grid: placement, resolution and level."""

    origin: np.ndarray  # (3,) world meters
    voxel_size: float
    dims: np.ndarray  # (3,) int voxel counts
    level: int = 1

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float).reshape(3))
        object.__setattr__(self, "dims", np.asarray(self.dims, dtype=np.int64).reshape(3))
        if self.voxel_size <= 0:
            raise InvalidInputError("voxel_size must be positive")
        if np.any(self.dims <= 0):
            raise InvalidInputError("dims must be positive")

    @property
    def num_voxels(self) -> int:
        return int(np.prod(self.dims))

    @property
    def max_corner(self) -> np.ndarray:
        return self.origin + self.dims * self.voxel_size

    def centers(self, coords: np.ndarray) -> np.ndarray:
        """World centers of integer voxel coordinates, shape (..., 3)."""
        return self.origin + (np.asarray(coords, dtype=float) + 0.5) * self.voxel_size

    def all_coords(self) -> np.ndarray:
        """All voxel coordinates of the full grid, shape (D, 3), x-major last."""
        g = np.stack(
            np.meshgrid(
                np.arange(self.dims[0]),
                np.arange(self.dims[1]),
                np.arange(self.dims[2]),
                indexing="ij",
            ),
            axis=-1,
        )
        return g.reshape(-1, 3).astype(np.int64)

    def linear_index(self, coords: np.ndarray) -> np.ndarray:
        c = np.asarray(coords, dtype=np.int64)
        return (c[..., 0] * self.dims[1] + c[..., 1]) * self.dims[2] + c[..., 2]

    def refined(self) -> "VoxelGridSpec":
        """The next finer level: same extent, half the voxel size."""
        return VoxelGridSpec(
            origin=self.origin,
            voxel_size=self.voxel_size / 2.0,
            dims=self.dims * 2,
            level=self.level + 1,
        )


@dataclass(frozen=True)
class SparseVoxelGrid:
    """A subset of a grid level: integer coordinates, deterministic order."""

    spec: VoxelGridSpec
    coords: np.ndarray  # (D, 3) int64

    def __post_init__(self):
        object.__setattr__(
            self, "coords", np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        )

    @property
    def num_voxels(self) -> int:
        return self.coords.shape[0]

    def centers(self) -> np.ndarray:
        return self.spec.centers(self.coords)

    @classmethod
    def full(cls, spec: VoxelGridSpec) -> "SparseVoxelGrid":
        return cls(spec=spec, coords=spec.all_coords())


@dataclass(frozen=True)
class Ray:
    """Parametric ray segment: points origin + t * direction, t in [t_min, t_max]."""

    origin: np.ndarray
    direction: np.ndarray
    t_min: float
    t_max: float

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=float).reshape(3)
        d = np.asarray(self.direction, dtype=float).reshape(3)
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise InvalidInputError("ray direction must be a unit vector")
        if not (0 <= self.t_min < self.t_max):
            raise InvalidInputError("require 0 <= t_min < t_max")


def project_point(
    intrinsics: CameraIntrinsics, pose: CameraPose, point: np.ndarray
) -> tuple[np.ndarray, float] | None:
    """Project a world point; returns (pixel, depth) or None when out of view.

    Out-of-view (behind the camera or outside the image) is a normal outcome.
    """
    point = np.asarray(point, dtype=float).reshape(3)
    if not np.all(np.isfinite(point)):
        raise InvalidInputError("point contains NaN/inf")
    cam = pose.rotation @ point + pose.translation
    z = cam[2]
    if z <= 0:
        return None
    u = intrinsics.fx * cam[0] / z + intrinsics.cx
    v = intrinsics.fy * cam[1] / z + intrinsics.cy
    if not (0 <= u < intrinsics.width and 0 <= v < intrinsics.height):
        return None
    return np.array([u, v]), float(z)


def project_points(
    intrinsics: CameraIntrinsics, pose: CameraPose, points: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized projection. Returns (pixels (M,2), depths (M,), valid (M,))."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    cam = pts @ pose.rotation.T + pose.translation
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intrinsics.fx * cam[:, 0] / z + intrinsics.cx
        v = intrinsics.fy * cam[:, 1] / z + intrinsics.cy
    valid = (
        (z > 0)
        & (u >= 0)
        & (u < intrinsics.width)
        & (v >= 0)
        & (v < intrinsics.height)
    )
    pixels = np.stack([u, v], axis=-1)
    pixels[~valid] = 0.0
    return pixels, z, valid


def unproject_pixel(
    intrinsics: CameraIntrinsics, pose: CameraPose, pixel: np.ndarray, depth: float
) -> np.ndarray:
    """Exact inverse of project_point for an in-view pixel/depth pair."""
    u, v = np.asarray(pixel, dtype=float).reshape(2)
    cam = np.array(
        [(u - intrinsics.cx) / intrinsics.fx * depth,
         (v - intrinsics.cy) / intrinsics.fy * depth,
         depth]
    )
    return pose.rotation.T @ (cam - pose.translation)


def pixel_ray_directions(
    intrinsics: CameraIntrinsics, pose: CameraPose, pixels: np.ndarray
) -> np.ndarray:
    """Unit world-frame viewing directions for pixel coordinates (M, 2)."""
    px = np.asarray(pixels, dtype=float).reshape(-1, 2)
    cam = np.stack(
        [
            (px[:, 0] - intrinsics.cx) / intrinsics.fx,
            (px[:, 1] - intrinsics.cy) / intrinsics.fy,
            np.ones(px.shape[0]),
        ],
        axis=-1,
    )
    world = cam @ pose.rotation
    return world / np.linalg.norm(world, axis=-1, keepdims=True)


def bilinear_sample(feature_map: np.ndarray, pixel: np.ndarray) -> np.ndarray:
    """Bilinearly interpolate an (H, W, C) map at a single pixel.

    Raises OutOfBoundsError outside [0, W-1] x [0, H-1]; callers are expected
    to mask the view rather than sample there.
    """
    h, w = feature_map.shape[:2]
    u, v = np.asarray(pixel, dtype=float).reshape(2)
    if not (0 <= u <= w - 1 and 0 <= v <= h - 1):
        raise OutOfBoundsError(f"pixel ({u}, {v}) outside [0,{w-1}]x[0,{h-1}]")
    return bilinear_sample_many(feature_map, np.array([[u, v]]))[0]


def bilinear_sample_many(feature_map: np.ndarray, pixels: np.ndarray) -> np.ndarray:
    """Vectorized bilinear sampling; pixels must already be inside bounds."""
    fm = np.asarray(feature_map)
    h, w = fm.shape[:2]
    px = np.asarray(pixels, dtype=float).reshape(-1, 2)
    u = np.clip(px[:, 0], 0.0, w - 1.0)
    v = np.clip(px[:, 1], 0.0, h - 1.0)
    u0 = np.clip(np.floor(u).astype(np.int64), 0, w - 2) if w > 1 else np.zeros(len(u), np.int64)
    v0 = np.clip(np.floor(v).astype(np.int64), 0, h - 2) if h > 1 else np.zeros(len(v), np.int64)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    fu = u - u0
    fv = v - v0
    f00 = fm[v0, u0]
    f01 = fm[v0, u1]
    f10 = fm[v1, u0]
    f11 = fm[v1, u1]
    wu = fu[:, None] if fm.ndim == 3 else fu
    wv = fv[:, None] if fm.ndim == 3 else fv
    top = f00 * (1 - wu) + f01 * wu
    bot = f10 * (1 - wu) + f11 * wu
    return top * (1 - wv) + bot * wv


def frustum_corners(
    intrinsics: CameraIntrinsics, pose: CameraPose, d_max: float
) -> np.ndarray:
    """Camera center plus the 4 far-plane corners at depth d_max, shape (5, 3)."""
    pix = np.array(
        [
            [0.0, 0.0],
            [intrinsics.width, 0.0],
            [0.0, intrinsics.height],
            [intrinsics.width, intrinsics.height],
        ]
    )
    far = np.stack([unproject_pixel(intrinsics, pose, p, d_max) for p in pix])
    return np.vstack([pose.center[None, :], far])


def compute_fbv(
    cameras: Sequence[Camera],
    d_max: float = 3.0,
    voxel_size: float = 0.16,
    pad_voxels: int = 1,
) -> VoxelGridSpec:
    """Fragment bounding volume enclosing every camera's view frustum.

    Origin and extent are snapped to multiples of the (coarsest) voxel size so
    finer levels obtained with ``refined()`` nest exactly, then padded by
    ``pad_voxels`` coarse voxels on all sides.
    """
    if len(cameras) == 0:
        raise InvalidInputError("camera list is empty")
    if d_max <= 0:
        raise InvalidInputError("d_max must be positive")
    corners = np.vstack([frustum_corners(i, p, d_max) for i, p in cameras])
    lo = np.floor(corners.min(axis=0) / voxel_size) - pad_voxels
    hi = np.ceil(corners.max(axis=0) / voxel_size) + pad_voxels
    dims = np.maximum((hi - lo).astype(np.int64), 1)
    return VoxelGridSpec(origin=lo * voxel_size, voxel_size=voxel_size, dims=dims, level=1)


def _clip_segment_to_grid(
    grid: VoxelGridSpec,
    origin: np.ndarray,
    direction: np.ndarray,
    t_min: np.ndarray,
    t_max: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Slab-clip segments to the grid AABB. Returns (t0, t1, hit) per ray."""
    lo = grid.origin
    hi = grid.max_corner
    with np.errstate(divide="ignore", invalid="ignore"):
        ta = (lo - origin) / direction
        tb = (hi - origin) / direction
    near = np.minimum(ta, tb)
    far = np.maximum(ta, tb)
    # direction == 0 on an axis: inside the slab -> (-inf, inf), else miss
    zero = direction == 0.0
    inside = (origin >= lo) & (origin <= hi)
    near = np.where(zero, np.where(inside, -np.inf, np.inf), near)
    far = np.where(zero, np.where(inside, np.inf, -np.inf), far)
    t0 = np.maximum(near.max(axis=-1), t_min)
    t1 = np.minimum(far.min(axis=-1), t_max)
    return t0, t1, t0 <= t1


def traverse_ray(grid: VoxelGridSpec, ray: Ray) -> np.ndarray:
    """Voxels whose boxes the ray segment crosses, ascending by entry distance.

    Incremental grid-stepping (DDA); amortized O(1) per visited voxel.  When
    the ray hits a voxel corner exactly, the axis with the smallest index is
    advanced first.  A miss returns an empty (0, 3) array.
    """
    ids, lin = traverse_rays_batch(
        grid,
        ray.origin[None, :],
        ray.direction[None, :],
        np.array([ray.t_min]),
        np.array([ray.t_max]),
    )
    d = grid.dims
    x = lin // (d[1] * d[2])
    y = (lin // d[2]) % d[1]
    z = lin % d[2]
    return np.stack([x, y, z], axis=-1).astype(np.int64)


def traverse_rays_batch(
    grid: VoxelGridSpec,
    origins: np.ndarray,
    directions: np.ndarray,
    t_min: np.ndarray,
    t_max: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Batched DDA traversal of many ray segments through one grid.

    Returns (ray_ids, linear_voxel_indices); entries for one ray appear in
    ascending entry-distance order.  Rays that miss contribute nothing.
    """
    o = np.asarray(origins, dtype=float).reshape(-1, 3)
    d = np.asarray(directions, dtype=float).reshape(-1, 3)
    t_min = np.asarray(t_min, dtype=float).reshape(-1)
    t_max = np.asarray(t_max, dtype=float).reshape(-1)
    n = o.shape[0]
    vs = grid.voxel_size
    dims = grid.dims

    t0, t1, hit = _clip_segment_to_grid(grid, o, d, t_min, t_max)
    active = hit.copy()
    if not active.any():
        return np.empty(0, np.int64), np.empty(0, np.int64)

    # Entry point, nudged off exact boundaries by clipping the cell index.
    p0 = o + t0[:, None] * d
    cell = np.floor((p0 - grid.origin) / vs).astype(np.int64)
    cell = np.clip(cell, 0, dims - 1)

    step = np.where(d > 0, 1, np.where(d < 0, -1, 0)).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
    # Parameter value at which the ray leaves the current cell along each axis.
    next_boundary = grid.origin + (cell + (step > 0)) * vs
    with np.errstate(invalid="ignore"):
        t_next = (next_boundary - o) * inv
    t_next = np.where(step == 0, np.inf, t_next)
    t_delta = np.where(step == 0, np.inf, np.abs(vs * inv))

    out_rays: list[np.ndarray] = []
    out_lin: list[np.ndarray] = []
    strides = np.array([dims[1] * dims[2], dims[2], 1], dtype=np.int64)
    max_steps = int(dims.sum()) + 3
    idx_all = np.arange(n)
    for _ in range(max_steps):
        act = idx_all[active]
        if act.size == 0:
            break
        out_rays.append(act.copy())
        out_lin.append((cell[act] * strides).sum(axis=1))
        # advance: smallest t_next; ties go to the smallest axis index
        tn = t_next[act]
        axis = np.argmin(tn, axis=1)
        t_hit = tn[np.arange(act.size), axis]
        done = t_hit > t1[act]
        cell[act, axis] += step[act, axis]
        t_next[act, axis] += t_delta[act, axis]
        oob = (cell[act, axis] < 0) | (cell[act, axis] >= dims[axis])
        active[act[done | oob]] = False

    ray_ids = np.concatenate(out_rays)
    lin = np.concatenate(out_lin)
    order = np.argsort(ray_ids, kind="stable")
    return ray_ids[order], lin[order]
