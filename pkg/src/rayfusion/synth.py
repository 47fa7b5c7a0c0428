"""Analytic ground-truth scenes: SDF primitives, trajectories, depth rendering.

Scenes are unions of exact signed-distance primitives.  The min-union SDF is
distance-exact outside primitive overlaps; the canonical scenes keep their
primitives disjoint so every queried value is exact.  Positive SDF = free
space, negative = inside material.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidInputError
from .geometry import (
    CameraIntrinsics,
    CameraPose,
    unproject_pixel,
)

TRACE_TOL = 1e-5


# ---------------------------------------------------------------------------
# primitives

@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float

    def sdf(self, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        return np.linalg.norm(p - self.center, axis=-1) - self.radius

    def area(self) -> float:
        return 4.0 * np.pi * self.radius**2

    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        d = rng.standard_normal((n, 3))
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        return np.asarray(self.center) + self.radius * d


@dataclass(frozen=True)
class Box:
    center: np.ndarray
    half: np.ndarray  # half extents

    def sdf(self, p: np.ndarray) -> np.ndarray:
        q = np.abs(np.asarray(p, dtype=float) - self.center) - self.half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside

    def area(self) -> float:
        a, b, c = np.asarray(self.half) * 2
        return 2 * (a * b + b * c + a * c)

    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        h = np.asarray(self.half, dtype=float)
        areas = np.array([h[1] * h[2], h[1] * h[2], h[0] * h[2], h[0] * h[2],
                          h[0] * h[1], h[0] * h[1]])
        face = rng.choice(6, size=n, p=areas / areas.sum())
        pts = rng.uniform(-1, 1, (n, 3)) * h
        axis = face // 2
        sign = np.where(face % 2 == 0, 1.0, -1.0)
        pts[np.arange(n), axis] = sign * h[axis]
        return np.asarray(self.center) + pts


@dataclass(frozen=True)
class BoxShell:
    """Hollow box wall of finite thickness around a mid-surface box.

    Used for rooms: the interior is free space, the wall material occupies a
    band of ``thickness`` centred on the mid-surface box.
    """

    center: np.ndarray
    half: np.ndarray  # mid-surface half extents
    thickness: float = 0.3

    def _mid(self) -> Box:
        return Box(center=self.center, half=self.half)

    def sdf(self, p: np.ndarray) -> np.ndarray:
        return np.abs(self._mid().sdf(p)) - self.thickness / 2.0

    def area(self) -> float:
        inner = Box(self.center, np.asarray(self.half) - self.thickness / 2)
        outer = Box(self.center, np.asarray(self.half) + self.thickness / 2)
        return inner.area() + outer.area()

    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        inner = Box(self.center, np.asarray(self.half) - self.thickness / 2)
        outer = Box(self.center, np.asarray(self.half) + self.thickness / 2)
        ai, ao = inner.area(), outer.area()
        ni = int(round(n * ai / (ai + ao)))
        return np.vstack([
            inner.sample_surface(ni, rng),
            outer.sample_surface(n - ni, rng),
        ])


@dataclass(frozen=True)
class Capsule:
    a: np.ndarray
    b: np.ndarray
    radius: float

    def sdf(self, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        a = np.asarray(self.a, dtype=float)
        ab = np.asarray(self.b, dtype=float) - a
        t = np.clip(((p - a) @ ab) / (ab @ ab), 0.0, 1.0)
        closest = a + t[..., None] * ab
        return np.linalg.norm(p - closest, axis=-1) - self.radius

    def area(self) -> float:
        length = np.linalg.norm(np.asarray(self.b) - np.asarray(self.a))
        return 2 * np.pi * self.radius * length + 4 * np.pi * self.radius**2

    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        a = np.asarray(self.a, dtype=float)
        b = np.asarray(self.b, dtype=float)
        length = np.linalg.norm(b - a)
        side = 2 * np.pi * self.radius * length
        caps = 4 * np.pi * self.radius**2
        on_side = rng.random(n) < side / (side + caps)
        axis = (b - a) / length
        # orthonormal frame around the axis
        ref = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        e1 = np.cross(axis, ref)
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(axis, e1)
        theta = rng.uniform(0, 2 * np.pi, n)
        radial = np.cos(theta)[:, None] * e1 + np.sin(theta)[:, None] * e2
        t = rng.uniform(0, 1, n)[:, None]
        pts_side = a + t * (b - a) + self.radius * radial
        d = rng.standard_normal((n, 3))
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        ends = np.where((d @ axis)[:, None] >= 0, b, a)
        pts_cap = ends + self.radius * d
        return np.where(on_side[:, None], pts_side, pts_cap)


@dataclass(frozen=True)
class Plane:
    """Half-space boundary: sdf = n . p - offset.  Unbounded; no sampling."""

    normal: np.ndarray
    offset: float

    def sdf(self, p: np.ndarray) -> np.ndarray:
        n = np.asarray(self.normal, dtype=float)
        n = n / np.linalg.norm(n)
        return np.asarray(p, dtype=float) @ n - self.offset

    def area(self) -> float:
        return np.inf

    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        raise InvalidInputError("cannot surface-sample an unbounded plane")


Primitive = Sphere | Box | BoxShell | Capsule | Plane


@dataclass(frozen=True)
class GroundTruthScene:
    """Min-union of disjoint SDF primitives."""

    primitives: tuple[Primitive, ...]

    def sdf(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        vals = np.stack([prim.sdf(points) for prim in self.primitives], axis=0)
        return vals.min(axis=0)

    def primitive_sdfs(self, points: np.ndarray) -> np.ndarray:
        """Per-primitive SDF values, shape (num_primitives, ...)."""
        points = np.asarray(points, dtype=float)
        return np.stack([prim.sdf(points) for prim in self.primitives], axis=0)

    def normal(self, points: np.ndarray, eps: float = 1e-5) -> np.ndarray:
        """Outward unit normals by central differences of the SDF."""
        p = np.asarray(points, dtype=float)
        g = np.stack(
            [
                self.sdf(p + eps * np.eye(3)[i]) - self.sdf(p - eps * np.eye(3)[i])
                for i in range(3)
            ],
            axis=-1,
        )
        norm = np.linalg.norm(g, axis=-1, keepdims=True)
        return g / np.maximum(norm, 1e-12)


# ---------------------------------------------------------------------------
# sphere tracing and rendering

def trace_rays(
    scene: GroundTruthScene,
    origins: np.ndarray,
    directions: np.ndarray,
    t_max: float | np.ndarray,
    tol: float = TRACE_TOL,
    max_steps: int = 512,
) -> tuple[np.ndarray, np.ndarray]:
    """Sphere-trace rays to the zero level set.

    ``t_max`` may be a scalar or a per-ray array; rays are abandoned (no hit)
    once they pass their limit.  Returns (t, hit): ray parameter of the first
    surface hit and a hit mask; t is meaningless where hit is False.
    """
    o = np.asarray(origins, dtype=float).reshape(-1, 3)
    d = np.asarray(directions, dtype=float).reshape(-1, 3)
    n = o.shape[0]
    limit = np.broadcast_to(np.asarray(t_max, dtype=float), (n,))
    t = np.zeros(n)
    hit = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    for _ in range(max_steps):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        p = o[idx] + t[idx, None] * d[idx]
        s = scene.sdf(p)
        newly_hit = s < tol
        hit[idx[newly_hit]] = True
        active[idx[newly_hit]] = False
        adv = idx[~newly_hit]
        t[adv] += s[~newly_hit]
        over = t[adv] > limit[adv]
        active[adv[over]] = False
    return t, hit


def render_depth(
    scene: GroundTruthScene,
    intrinsics: CameraIntrinsics,
    pose: CameraPose,
    d_max: float = 3.0,
) -> np.ndarray:
    """Z-depth map (meters) at integer pixel coordinates; 0 marks a miss."""
    t, hit, _, norms = _render_hits(scene, intrinsics, pose, d_max)
    z = np.where(hit, t / norms, 0.0)
    z = np.where(z <= d_max, z, 0.0)
    return z.reshape(intrinsics.height, intrinsics.width)


def _render_hits(scene, intrinsics, pose, d_max):
    """Trace one ray per integer pixel; returns (t, hit, world dirs, cam-dir norms)."""
    h, w = intrinsics.height, intrinsics.width
    vv, uu = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    cam = np.stack(
        [
            (uu.ravel() - intrinsics.cx) / intrinsics.fx,
            (vv.ravel() - intrinsics.cy) / intrinsics.fy,
            np.ones(h * w),
        ],
        axis=-1,
    )
    norms = np.linalg.norm(cam, axis=-1)
    dirs = (cam / norms[:, None]) @ pose.rotation
    center = pose.center
    origins = np.broadcast_to(center, dirs.shape)
    t, hit = trace_rays(scene, origins, dirs, t_max=d_max * norms.max())
    hit = hit & (t / norms <= d_max)
    return t, hit, dirs, norms


# ---------------------------------------------------------------------------
# ground-truth volumetric quantities

def gt_tsdf(
    scene: GroundTruthScene, centers: np.ndarray, truncation: float
) -> tuple[np.ndarray, np.ndarray]:
    """(tsdf in [-1, 1], occupancy bool) at the given world points."""
    if truncation <= 0:
        raise InvalidInputError("truncation must be positive")
    s = scene.sdf(centers)
    tsdf = np.clip(s / truncation, -1.0, 1.0)
    occ = np.abs(s) < truncation
    return tsdf, occ


# ---------------------------------------------------------------------------
# per-pixel surface descriptors

_DESC_RNG = np.random.default_rng(190872345)
_DESC_FREQS = _DESC_RNG.uniform(-9.0, 9.0, (64, 3))
_DESC_PHASES = _DESC_RNG.uniform(0, 2 * np.pi, 64)


def point_descriptors(points: np.ndarray, valid: np.ndarray, scene: GroundTruthScene,
                      channels: int) -> np.ndarray:
    """Deterministic descriptor of a surface point (normal + position encoding).

    The descriptor depends only on the 3D point, so co-visible surface points
    produce near-identical features across views.  Invalid entries get a
    background code living in a channel surface descriptors never use.
    """
    if channels < 3:
        raise InvalidInputError("descriptor needs at least 3 channels")
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    out = np.zeros((pts.shape[0], channels))
    vidx = np.flatnonzero(np.asarray(valid).reshape(-1))
    if vidx.size:
        p = pts[vidx]
        n = scene.normal(p)
        n_enc = min(3, channels - 1)
        out[vidx, :n_enc] = n[:, :n_enc]
        n_pos = channels - 1 - n_enc
        if n_pos > 0:
            enc = np.sin(p @ _DESC_FREQS[:n_pos].T + _DESC_PHASES[:n_pos])
            out[vidx, n_enc:n_enc + n_pos] = enc
    out[~np.asarray(valid).reshape(-1), channels - 1] = 1.0
    return out


def synth_features(
    scene: GroundTruthScene,
    intrinsics: CameraIntrinsics,
    pose: CameraPose,
    channels: int,
    d_max: float = 3.0,
) -> np.ndarray:
    """(H, W, C) feature map of first-hit surface descriptors for one view."""
    t, hit, dirs, _ = _render_hits(scene, intrinsics, pose, d_max)
    pts = pose.center + t[:, None] * dirs
    desc = point_descriptors(pts, hit, scene, channels)
    return desc.reshape(intrinsics.height, intrinsics.width, channels)


# ---------------------------------------------------------------------------
# surface sampling and visibility filtering

def sample_scene_surface(
    scene: GroundTruthScene, n_points: int, rng: np.random.Generator
) -> np.ndarray:
    """Area-weighted sample of the union surface (disjoint primitives)."""
    areas = np.array([p.area() for p in scene.primitives])
    if not np.all(np.isfinite(areas)):
        raise InvalidInputError("scene contains unbounded primitives")
    counts = rng.multinomial(n_points, areas / areas.sum())
    parts = [
        prim.sample_surface(int(c), rng)
        for prim, c in zip(scene.primitives, counts)
        if c > 0
    ]
    return np.vstack(parts) if parts else np.empty((0, 3))


def visible_surface_mask(
    scene: GroundTruthScene,
    points: np.ndarray,
    cameras: Sequence[tuple[CameraIntrinsics, CameraPose]],
    d_max: float = 3.0,
    tol: float = 1e-3,
) -> np.ndarray:
    """True for surface points seen unoccluded within d_max by >= 1 camera."""
    from .geometry import project_points

    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    seen = np.zeros(pts.shape[0], dtype=bool)
    for intr, pose in cameras:
        todo = np.flatnonzero(~seen)
        if todo.size == 0:
            break
        _, z, valid = project_points(intr, pose, pts[todo])
        valid &= z <= d_max
        cand = todo[valid]
        if cand.size == 0:
            continue
        center = pose.center
        delta = pts[cand] - center
        dist = np.linalg.norm(delta, axis=-1)
        dirs = delta / dist[:, None]
        # trace only up to just short of the target: a hit means occlusion and
        # stopping early skips the slow convergence at the target surface
        _, blocked = trace_rays(scene, np.broadcast_to(center, dirs.shape), dirs,
                                t_max=dist - tol)
        seen[cand[~blocked]] = True
    return seen


# ---------------------------------------------------------------------------
# trajectories

def pose_look_at(eye, target, up=(0.0, 0.0, 1.0)) -> CameraPose:
    """World->camera pose with the camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=float)
    target = np.asarray(target, dtype=float)
    up = np.asarray(up, dtype=float)
    fwd = target - eye
    norm = np.linalg.norm(fwd)
    if norm < 1e-12:
        raise InvalidInputError("eye and target coincide")
    fwd = fwd / norm
    if abs(fwd @ up) > 1.0 - 1e-6:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    r = np.stack([right, down, fwd])
    return CameraPose(rotation=r, translation=-r @ eye)


def orbit_trajectory(center, radius, height, frames, start_angle=0.0,
                     sweep=2 * np.pi) -> list[CameraPose]:
    """Cameras on a horizontal circle, all looking at ``center``."""
    center = np.asarray(center, dtype=float)
    poses = []
    for k in range(frames):
        a = start_angle + sweep * k / frames
        eye = center + np.array([radius * np.cos(a), radius * np.sin(a), 0.0])
        eye[2] = height
        poses.append(pose_look_at(eye, center))
    return poses


def line_trajectory(start, end, look_at, frames) -> list[CameraPose]:
    start = np.asarray(start, dtype=float)
    end = np.asarray(end, dtype=float)
    return [
        pose_look_at(start + (end - start) * (k / max(frames - 1, 1)), look_at)
        for k in range(frames)
    ]


def lemniscate_trajectory(center, scale, height, frames, look_at=None) -> list[CameraPose]:
    """Figure-eight path (lemniscate of Gerono) in the horizontal plane."""
    center = np.asarray(center, dtype=float)
    target = center if look_at is None else np.asarray(look_at, dtype=float)
    poses = []
    for k in range(frames):
        a = 2 * np.pi * k / frames
        eye = center + np.array(
            [scale * np.cos(a), scale * np.sin(a) * np.cos(a), 0.0]
        )
        eye[2] = height
        poses.append(pose_look_at(eye, target))
    return poses


# ---------------------------------------------------------------------------
# scene description files and canonical scenes

@dataclass(frozen=True)
class SceneBundle:
    """A scene plus the camera rig used to film it."""

    scene: GroundTruthScene
    poses: list[CameraPose]
    intrinsics: CameraIntrinsics
    d_max: float = 3.0


def _parse_kv(tokens: list[str]) -> dict[str, list[float]]:
    out = {}
    for tok in tokens:
        key, _, val = tok.partition("=")
        if not val:
            raise InvalidInputError(f"malformed key=value token {tok!r}")
        out[key] = [float(x) for x in val.split(",")]
    return out


def _build_primitive(kind: str, kv: dict[str, list[float]]) -> Primitive:
    if kind == "sphere":
        return Sphere(center=np.array(kv["center"]), radius=kv["radius"][0])
    if kind == "box":
        return Box(center=np.array(kv["center"]), half=np.array(kv["half"]))
    if kind == "box_shell":
        return BoxShell(center=np.array(kv["center"]), half=np.array(kv["half"]),
                        thickness=kv.get("thickness", [0.3])[0])
    if kind == "capsule":
        return Capsule(a=np.array(kv["a"]), b=np.array(kv["b"]), radius=kv["radius"][0])
    if kind == "plane":
        return Plane(normal=np.array(kv["normal"]), offset=kv["offset"][0])
    raise InvalidInputError(f"unknown primitive type {kind!r}")


def _build_trajectory(kind: str, kv: dict[str, list[float]]) -> list[CameraPose]:
    frames = int(kv["frames"][0])
    if kind == "orbit":
        return orbit_trajectory(kv["center"], kv["radius"][0], kv["height"][0], frames)
    if kind == "line":
        return line_trajectory(kv["start"], kv["end"], kv["look_at"], frames)
    if kind == "lemniscate":
        return lemniscate_trajectory(kv["center"], kv["scale"][0], kv["height"][0],
                                     frames, kv.get("look_at"))
    raise InvalidInputError(f"unknown trajectory type {kind!r}")


def parse_scene_text(text: str) -> SceneBundle:
    """Parse the key-value scene description format.

    Lines: ``primitive <type> k=v...``, ``trajectory <type> k=v...``,
    ``camera fx=.. fy=.. cx=.. cy=.. width=.. height=..``,
    optional ``d_max <meters>``; '#' starts a comment.
    """
    prims: list[Primitive] = []
    poses: list[CameraPose] | None = None
    intr: CameraIntrinsics | None = None
    d_max = 3.0
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        head = tokens[0]
        if head == "primitive":
            prims.append(_build_primitive(tokens[1], _parse_kv(tokens[2:])))
        elif head == "trajectory":
            poses = _build_trajectory(tokens[1], _parse_kv(tokens[2:]))
        elif head == "camera":
            kv = _parse_kv(tokens[1:])
            intr = CameraIntrinsics(
                fx=kv["fx"][0], fy=kv["fy"][0], cx=kv["cx"][0], cy=kv["cy"][0],
                width=int(kv["width"][0]), height=int(kv["height"][0]),
            )
        elif head == "d_max":
            d_max = float(tokens[1])
        else:
            raise InvalidInputError(f"unknown scene directive {head!r}")
    if not prims:
        raise InvalidInputError("scene file declares no primitives")
    if poses is None or intr is None:
        raise InvalidInputError("scene file needs a trajectory and a camera line")
    return SceneBundle(scene=GroundTruthScene(primitives=tuple(prims)),
                       poses=poses, intrinsics=intr, d_max=d_max)


def load_scene_file(path) -> SceneBundle:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_scene_text(fh.read())


_DEFAULT_INTR = CameraIntrinsics(fx=100.0, fy=100.0, cx=80.0, cy=60.0,
                                 width=160, height=120)


def builtin_scene(name: str) -> SceneBundle:
    """Canonical test scenes: 'room', 'sphere-orbit', 'two-planes'."""
    if name == "room":
        # interior 4 x 4 x 2.5 m; thick walls keep the (never visible) outer
        # shell surface out of every per-ray occupancy window
        # the pole floats mid-room and the sphere sits in a corner so that
        # rays through the pole run into free space, not other surfaces
        scene = GroundTruthScene(primitives=(
            BoxShell(center=np.array([0.0, 0.0, 1.25]),
                     half=np.array([2.5, 2.5, 1.75]), thickness=1.0),
            Sphere(center=np.array([1.25, 1.25, 0.7]), radius=0.5),
            Capsule(a=np.array([0.0, 0.0, 1.0]), b=np.array([0.0, 0.0, 1.55]),
                    radius=0.04),
        ))
        poses = orbit_trajectory(center=[0.0, 0.0, 1.1], radius=1.4, height=1.25,
                                 frames=40)
        return SceneBundle(scene=scene, poses=poses, intrinsics=_DEFAULT_INTR)
    if name == "sphere-orbit":
        scene = GroundTruthScene(primitives=(
            Sphere(center=np.array([0.0, 0.0, 1.0]), radius=0.5),
        ))
        poses = orbit_trajectory(center=[0.0, 0.0, 1.0], radius=2.0, height=1.0,
                                 frames=9)
        return SceneBundle(scene=scene, poses=poses, intrinsics=_DEFAULT_INTR)
    if name == "two-planes":
        scene = GroundTruthScene(primitives=(
            Box(center=np.array([0.0, 0.0, 0.0]), half=np.array([1.5, 1.5, 0.05])),
            Box(center=np.array([0.0, 1.8, 1.0]), half=np.array([1.5, 0.05, 1.0])),
        ))
        poses = line_trajectory(start=[-1.0, -1.2, 1.2], end=[1.0, -1.2, 1.2],
                                look_at=[0.0, 0.5, 0.5], frames=20)
        return SceneBundle(scene=scene, poses=poses, intrinsics=_DEFAULT_INTR)
    raise InvalidInputError(f"unknown builtin scene {name!r}")


def depth_consistency_error(scene, intrinsics, pose, depth: np.ndarray) -> float:
    """Max |SDF| at unprojected valid depth pixels (renderer self-check)."""
    h, w = depth.shape
    vv, uu = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    valid = depth > 0
    pts = np.stack([
        unproject_pixel(intrinsics, pose, (u, v), d)
        for u, v, d in zip(uu[valid], vv[valid], depth[valid])
    ])
    return float(np.abs(scene.sdf(pts)).max()) if len(pts) else 0.0
